"""Experiment configuration: a single JSON document with nested sections.

Unknown keys are hard errors reported with their full path, so typos in
experiment definitions cannot silently change what runs.  A parsed
configuration round-trips losslessly back to its dictionary form.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field


class ConfigError(ValueError):
    def __init__(self, message, path=""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


_SCHEMA = {
    "design": {
        "kind": str,          # deconvolution | compressive-sensing | identity | dense-gaussian | csv
        "height": int,
        "width": int,
        "kernel": str,        # gaussian | box
        "kernel_width": float,
        "kernel_size": int,
        "subsample_ratio": float,
        "n": int,
        "p": int,
        "path": str,
        "use_fft": bool,
    },
    "penalty": {
        "kind": str,
        "blocks": str,        # "uniform:<k>" | "pairs" | csv path
        "dstar": str,         # "grad2d" | csv path
        "p1": int,
        "p2": int,
    },
    "lambda_grid": {
        "kind": str,          # linear | log | explicit
        "min": float,
        "max": float,
        "count": int,
        "values": list,
    },
    "signal": {
        "kind": str,          # pgm | csv | sparse | group-sparse | piecewise-constant
        "path": str,
        "nonzeros": int,
        "amplitude": float,
        "regions": int,
    },
    "sigma": float,
    "replications": int,
    "seed": int,
    "solver": {
        "iterations": int,
        "kkt_tol": float,
        "gamma": float,
        "polish": bool,
        "krylov_tol": float,
        "krylov_maxit": int,
    },
    "divergence": {
        "method": str,        # closed | exact | mc | fd
        "probes": int,
        "seed": int,
        "eps": float,
    },
    "output": {
        "dir": str,
        "prefix": str,
    },
}

_DEFAULTS = {
    "sigma": 1.0,
    "replications": 1,
    "seed": 0,
    "lambda_grid": {"kind": "explicit", "values": [1.0]},
    "divergence": {"method": "closed"},
    "solver": {},
    "output": {"dir": "."},
    "signal": {},
    "penalty": {},
    "design": {},
}


def _check_section(data, schema, path):
    if not isinstance(data, dict):
        raise ConfigError("expected an object", path)
    for key, value in data.items():
        here = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError("unknown key", here)
        expected = schema[key]
        if isinstance(expected, dict):
            _check_section(value, expected, here)
        elif expected is float:
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError("expected a number", here)
        elif expected is int:
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError("expected an integer", here)
        elif expected is list:
            if not isinstance(value, list):
                raise ConfigError("expected a list", here)
        elif not isinstance(value, expected):
            raise ConfigError(f"expected {expected.__name__}", here)


@dataclass
class ExperimentConfig:
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data):
        _check_section(data, _SCHEMA, "")
        return cls(raw=json.loads(json.dumps(data)))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"invalid JSON: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self):
        return json.loads(json.dumps(self.raw))

    def dump(self, path):
        with open(path, "w") as fh:
            json.dump(self.raw, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def section(self, name):
        merged = dict(_DEFAULTS.get(name, {})) if isinstance(_DEFAULTS.get(name), dict) else {}
        got = self.raw.get(name)
        if isinstance(got, dict):
            merged.update(got)
            return merged
        if got is not None:
            return got
        return merged if merged else _DEFAULTS.get(name)

    def scalar(self, name):
        return self.raw.get(name, _DEFAULTS.get(name))

    def override(self, path, value):
        """Return a new config with ``section.key`` (or a top-level scalar)
        replaced; used by command-line flag overrides."""
        data = self.to_dict()
        parts = path.split(".")
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
        return ExperimentConfig.from_dict(data)


def lambda_grid(cfg):
    spec = cfg.section("lambda_grid")
    kind = spec.get("kind", "explicit")
    if kind == "explicit":
        values = spec.get("values")
        if not values:
            raise ConfigError("missing values", "lambda_grid.values")
        return [float(v) for v in values]
    if "min" not in spec or "max" not in spec or "count" not in spec:
        raise ConfigError("needs min, max and count", "lambda_grid")
    lo, hi, count = float(spec["min"]), float(spec["max"]), int(spec["count"])
    if kind == "linear":
        import numpy as np

        return list(np.linspace(lo, hi, count))
    if kind == "log":
        import numpy as np

        if lo <= 0:
            raise ConfigError("log grid needs min > 0", "lambda_grid.min")
        return list(np.geomspace(lo, hi, count))
    raise ConfigError(f"unknown grid kind {kind!r}", "lambda_grid.kind")
