#!/usr/bin/env python3
"""Build a small MNIST subset in IDX format from two package-registry mirrors.

Training split: the 10 000 digits bundled with the `mnist` npm package
(JSON, pixels normalized to three decimals, recovered exactly as round(v*255)).
Test split: the 5 000 digits bundled with the `mlxtend` Python wheel
(CSV, raw bytes, label in the last column). The two sets share no images.

Usage:
    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    pip download --no-deps mlxtend==0.24.0
    python3 build_mnist_subset.py package/src/digits mlxtend-0.24.0-py3-none-any.whl OUT_DIR
"""
import gzip
import json
import os
import struct
import sys
import zipfile


def write_idx(out_dir, stem, images, labels):
    with gzip.GzipFile(os.path.join(out_dir, f"{stem}-images-idx3-ubyte.gz"), "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 2051, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))
    with gzip.GzipFile(os.path.join(out_dir, f"{stem}-labels-idx1-ubyte.gz"), "wb", mtime=0) as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(bytes(labels))


def main():
    digits_dir, wheel, out_dir = sys.argv[1:4]
    os.makedirs(out_dir, exist_ok=True)

    per_digit = []
    for d in range(10):
        data = json.load(open(os.path.join(digits_dir, f"{d}.json")))["data"]
        per_digit.append([[round(v * 255) for v in data[k * 784:(k + 1) * 784]]
                          for k in range(len(data) // 784)])
    # interleave digits so the file is not label-sorted
    train_x, train_y = [], []
    longest = max(len(p) for p in per_digit)
    for k in range(longest):
        for d in range(10):
            if k < len(per_digit[d]):
                train_x.append(per_digit[d][k])
                train_y.append(d)

    raw = gzip.decompress(zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")).decode()
    test_x, test_y = [], []
    for line in raw.strip().split("\n"):
        vals = [int(float(v)) for v in line.split(",")]
        test_x.append(vals[:-1])
        test_y.append(vals[-1])

    write_idx(out_dir, "train", train_x, train_y)
    write_idx(out_dir, "t10k", test_x, test_y)
    print(f"train={len(train_y)} test={len(test_y)}")


if __name__ == "__main__":
    main()
