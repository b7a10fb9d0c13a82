#!/usr/bin/env python3
"""Convert the 5000-image MNIST sample shipped with mlxtend into IDX files.

Usage: make_mnist_subset.py <mnist_5k.csv.gz> <out_dir>

Writes mnist5k-images.idx3 and mnist5k-labels.idx1 (uncompressed IDX, the
same container as the original MNIST distribution). The source is sorted by
label, so rows are shuffled with a fixed seed; a head-of-file limit then still
sees every class.
"""
import gzip
import struct
import sys
from pathlib import Path

import numpy as np


def main() -> int:
    if len(sys.argv) != 3:
        print(__doc__)
        return 1
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    with gzip.open(src, "rt") as fh:
        table = np.loadtxt(fh, delimiter=",")
    table = table[np.random.default_rng(20160101).permutation(table.shape[0])]
    pixels = table[:, :-1].astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    n = pixels.shape[0]
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "mnist5k-images.idx3", "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        fh.write(pixels.tobytes())
    with open(out / "mnist5k-labels.idx1", "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, n))
        fh.write(labels.tobytes())
    return 0


if __name__ == "__main__":
    sys.exit(main())
