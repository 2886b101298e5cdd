#!/usr/bin/env python3
"""Write the 5000-image MNIST subset shipped with mlxtend as IDX files.

Usage:
    export_mnist_5k.py <mlxtend wheel or site-packages dir> <out dir>

The subset holds 500 training images per digit. Pixel bytes are copied
unchanged; image order follows the source CSV.
"""
import gzip
import os
import struct
import sys
import zipfile

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_csv_gz(src):
    if os.path.isdir(src):
        with open(os.path.join(src, MEMBER), "rb") as f:
            raw = f.read()
    else:
        with zipfile.ZipFile(src) as z:
            raw = z.read(MEMBER)
    return gzip.decompress(raw).decode().splitlines()


def main():
    src, out = sys.argv[1], sys.argv[2]
    rows = [list(map(float, line.split(","))) for line in read_csv_gz(src)]
    n = len(rows)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "images-idx3-ubyte"), "wb") as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28))
        f.write(bytes(int(v) for r in rows for v in r[:-1]))
    with open(os.path.join(out, "labels-idx1-ubyte"), "wb") as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(bytes(int(r[-1]) for r in rows))


if __name__ == "__main__":
    main()
