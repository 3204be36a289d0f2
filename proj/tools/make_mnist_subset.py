#!/usr/bin/env python3
"""Write the 5000-image MNIST subset bundled with mlxtend as IDX files.

The subset (500 images per digit) is split 400/100 per class into train/test
files in the standard big-endian IDX layout.

    pip download --no-deps -d /tmp/wheels mlxtend
    python3 tools/make_mnist_subset.py /tmp/wheels/mlxtend-*.whl data/mnist5k
"""
import gzip
import os
import struct
import sys
import zipfile


def write_idx(path, magic, dims, payload):
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(bytes(payload))


def main():
    if len(sys.argv) != 3:
        sys.exit("usage: make_mnist_subset.py <mlxtend wheel> <out dir>")
    wheel, out = sys.argv[1], sys.argv[2]
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    rows = [list(map(int, map(float, line.split(","))))
            for line in raw.decode().strip().split("\n")]
    seen = [0] * 10
    split = {"train": ([], []), "test": ([], [])}
    for r in rows:
        label, pixels = r[-1], r[:-1]
        part = "train" if seen[label] < 400 else "test"
        seen[label] += 1
        split[part][0].extend(pixels)
        split[part][1].append(label)
    os.makedirs(out, exist_ok=True)
    for part, (pix, labels) in split.items():
        n = len(labels)
        write_idx(os.path.join(out, f"{part}-images-idx3-ubyte"), 0x803, (n, 28, 28), pix)
        write_idx(os.path.join(out, f"{part}-labels-idx1-ubyte"), 0x801, (n,), labels)
        print(f"{part}: {n} images")


if __name__ == "__main__":
    main()
