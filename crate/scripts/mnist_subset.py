#!/usr/bin/env python3
"""Write the leading images of the MNIST training set as gzipped IDX files.

Usage: mnist_subset.py <dir with train-images-idx3-ubyte and
train-labels-idx1-ubyte> <output dir> [count]

The source files are the unmodified originals, for example those shipped in
the `mnist-data` npm package (`npm pack mnist-data`). The default count of
28,572 makes a 70% training split hold about 20,000 images.
"""
import gzip
import struct
import sys
from pathlib import Path


def main() -> None:
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    count = int(sys.argv[3]) if len(sys.argv) > 3 else 28_572
    images = (src / "train-images-idx3-ubyte").read_bytes()
    labels = (src / "train-labels-idx1-ubyte").read_bytes()
    magic, n, rows, cols = struct.unpack(">IIII", images[:16])
    assert magic == 0x803 and (rows, cols) == (28, 28) and count <= n
    assert struct.unpack(">II", labels[:8]) == (0x801, n)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"mnist-train{count}"
    with gzip.GzipFile(out / f"{stem}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, count, rows, cols))
        f.write(images[16 : 16 + count * rows * cols])
    with gzip.GzipFile(out / f"{stem}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, count))
        f.write(labels[8 : 8 + count])
    print(f"wrote {count} images to {out}")


if __name__ == "__main__":
    main()
