#!/usr/bin/env python3
"""Assemble the digits-3-and-5 MNIST subset as standard IDX files.

The full MNIST train/t10k IDX files ship inside the ``mnist-data`` package on
npm (``package/data/*-ubyte``). The tarball is fetched with ``npm pack``, the
3s and 5s of each split are kept in their original order, and the result is
written as

    data/mnist35/train-images-idx3-ubyte
    data/mnist35/train-labels-idx1-ubyte
    data/mnist35/t10k-images-idx3-ubyte
    data/mnist35/t10k-labels-idx1-ubyte

with the original digit labels (3 or 5). Usage:

    python3 scripts/build_mnist35.py [--workdir /tmp/mnist-src]
"""

import argparse
import os
import struct
import subprocess
import tarfile

KEEP = (3, 5)
PKG = "mnist-data@1.2.6"
ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def fetch(workdir):
    os.makedirs(workdir, exist_ok=True)
    tgz = os.path.join(workdir, "mnist-data-1.2.6.tgz")
    if not os.path.exists(tgz):
        subprocess.run(["npm", "pack", PKG], check=True, cwd=workdir)
    return tgz


def read_split(t, split):
    images = t.extractfile(f"package/data/{split}-images-idx3-ubyte").read()
    labels = t.extractfile(f"package/data/{split}-labels-idx1-ubyte").read()
    magic, count, rows, cols = struct.unpack(">IIII", images[:16])
    assert magic == 2051 and rows == 28 and cols == 28
    lmagic, lcount = struct.unpack(">II", labels[:8])
    assert lmagic == 2049 and lcount == count
    size = rows * cols
    out = []
    for k in range(count):
        label = labels[8 + k]
        if label in KEEP:
            out.append((label, images[16 + k * size : 16 + (k + 1) * size]))
    return out


def write_idx(samples, outdir, split):
    with open(os.path.join(outdir, f"{split}-images-idx3-ubyte"), "wb") as f:
        f.write(struct.pack(">IIII", 2051, len(samples), 28, 28))
        for _, img in samples:
            f.write(img)
    with open(os.path.join(outdir, f"{split}-labels-idx1-ubyte"), "wb") as f:
        f.write(struct.pack(">II", 2049, len(samples)))
        f.write(bytes(label for label, _ in samples))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--workdir", default="/tmp/mnist-src")
    ap.add_argument("--out", default=os.path.join(ROOT, "data", "mnist35"))
    args = ap.parse_args()

    os.makedirs(args.out, exist_ok=True)
    with tarfile.open(fetch(args.workdir)) as t:
        for split in ("train", "t10k"):
            samples = read_split(t, split)
            write_idx(samples, args.out, split)
            counts = {d: sum(1 for l, _ in samples if l == d) for d in KEEP}
            print(f"{split}: {len(samples)} images {counts}")


if __name__ == "__main__":
    main()
