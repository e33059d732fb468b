#!/usr/bin/env python3
"""Build a 10,000-image MNIST subset in IDX format from the `mnist` npm package.

The npm package (https://github.com/cazala/mnist) ships 10,000 MNIST digits as
JSON float arrays grouped by class. This script quantizes them back to bytes,
interleaves the classes with a fixed seed, and writes gzip-compressed IDX files.

usage: mnist_from_npm.py <path/to/package/src/digits> <out_dir>
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def main():
    digits_dir, out_dir = Path(sys.argv[1]), Path(sys.argv[2])
    samples = []
    for label in range(10):
        raw = json.loads((digits_dir / f"{label}.json").read_text())["data"]
        assert len(raw) % 784 == 0
        for k in range(len(raw) // 784):
            px = bytes(max(0, min(255, round(v * 255))) for v in raw[k * 784:(k + 1) * 784])
            samples.append((px, label))
    random.Random(20190711).shuffle(samples)
    n = len(samples)
    out_dir.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(out_dir / "mnist10k-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28))
        for px, _ in samples:
            f.write(px)
    with gzip.GzipFile(out_dir / "mnist10k-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(bytes(lbl for _, lbl in samples))
    print(f"wrote {n} samples to {out_dir}")


if __name__ == "__main__":
    main()
