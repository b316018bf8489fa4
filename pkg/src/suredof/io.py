"""File formats: CSV vectors/matrices, PGM images and block tables.

CSV is row-major, comma separated, '.' decimal, no header.  Floats are
written with 17 significant digits so reading a written file reproduces the
array bit for bit.
"""

from __future__ import annotations

import numpy as np

FLOAT_FMT = "%.17g"


def write_matrix_csv(path, matrix):
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    with open(path, "w") as fh:
        for row in matrix:
            fh.write(",".join(FLOAT_FMT % v for v in row))
            fh.write("\n")


def read_matrix_csv(path):
    data = np.loadtxt(path, delimiter=",", ndmin=2, dtype=float)
    return data


def write_vector_csv(path, vector):
    vector = np.asarray(vector, dtype=float).ravel()
    with open(path, "w") as fh:
        for v in vector:
            fh.write(FLOAT_FMT % v)
            fh.write("\n")


def read_vector_csv(path):
    data = np.loadtxt(path, delimiter=",", dtype=float)
    return np.atleast_1d(data).ravel()


def read_blocks_csv(path):
    """Block table given as ``index,block_id`` integer pairs (0-based).

    Returns a list of index arrays ordered by first appearance of each
    block id.
    """
    pairs = np.loadtxt(path, delimiter=",", dtype=int, ndmin=2)
    order = []
    groups = {}
    for idx, bid in pairs:
        if bid not in groups:
            groups[bid] = []
            order.append(bid)
        groups[bid].append(int(idx))
    return [np.array(groups[b], dtype=int) for b in order]


def read_pgm(path):
    """Grayscale PGM (P2 ascii or P5 binary), values 0..255.

    Returns a float array of shape (height, width).
    """
    with open(path, "rb") as fh:
        data = fh.read()

    tokens = []
    pos = 0
    while len(tokens) < 4:
        # skip whitespace and '#' comments
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    magic = tokens[0].decode()
    width, height, maxval = (int(t) for t in tokens[1:4])
    if maxval <= 0 or maxval > 255:
        raise ValueError(f"unsupported PGM maxval {maxval}")
    if magic == "P2":
        values = np.array(data[pos:].split(), dtype=float)
    elif magic == "P5":
        pos += 1  # single whitespace after maxval
        values = np.frombuffer(data[pos : pos + width * height], dtype=np.uint8).astype(float)
    else:
        raise ValueError(f"not a PGM file (magic {magic!r})")
    if values.size != width * height:
        raise ValueError("PGM pixel count does not match header")
    return values.reshape(height, width)


def write_pgm(path, image, maxval=255):
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("image must be 2-D")
    pixels = np.clip(np.rint(image), 0, maxval).astype(int)
    with open(path, "w") as fh:
        fh.write(f"P2\n{image.shape[1]} {image.shape[0]}\n{maxval}\n")
        for row in pixels:
            fh.write(" ".join(str(v) for v in row))
            fh.write("\n")
