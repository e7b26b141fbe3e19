#!/usr/bin/env python3
"""Build the FashionMNIST / MNIST IDX fixtures used by the OOD benchmark.

The images come from the `fashion-mnist` and `mnist` npm packages, which ship
the pixel data as JSON. They are fetched with `npm pack` and rewritten as
big-endian IDX files:

    data/fashion-train-images-idx3-ubyte   (10,000 images, 1,000 per class)
    data/fashion-train-labels-idx1-ubyte
    data/fashion-test-images-idx3-ubyte    (2,000 held-out images, 200 per class)
    data/fashion-test-labels-idx1-ubyte
    data/mnist-test-images-idx3-ubyte      (2,000 images, 200 per class)
    data/mnist-test-labels-idx1-ubyte

Usage: python3 scripts/fetch_ood_data.py [--out data] [--npm-dir /tmp/npm]
"""
import argparse
import json
import os
import struct
import subprocess
import tarfile


def npm_fetch(package, workdir):
    os.makedirs(workdir, exist_ok=True)
    out = subprocess.run(
        ["npm", "pack", package], cwd=workdir, check=True, capture_output=True, text=True
    )
    tgz = os.path.join(workdir, out.stdout.strip().splitlines()[-1])
    dest = os.path.join(workdir, package)
    if not os.path.isdir(dest):
        with tarfile.open(tgz) as tar:
            tar.extractall(dest)
    return os.path.join(dest, "package")


def load_class(path):
    with open(path) as f:
        data = json.load(f)["data"]
    if data and isinstance(data[0], list):
        # class 0 of fashion-mnist carries two empty records
        return [bytes(int(v) for v in img) for img in data if len(img) == 784]
    # flat array of floats in [0, 1]
    return [
        bytes(min(255, max(0, round(v * 255))) for v in data[i : i + 784])
        for i in range(0, len(data), 784)
    ]


def write_idx(prefix, images, labels):
    with open(prefix + "-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        for img in images:
            assert len(img) == 784
            f.write(img)
    with open(prefix + "-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))


def take(root, subdir, per_class, skip=0):
    images, labels = [], []
    for label in range(10):
        imgs = load_class(os.path.join(root, "src", subdir, f"{label}.json"))
        chosen = imgs[skip : skip + per_class]
        images.extend(chosen)
        labels.extend([label] * len(chosen))
    return images, labels


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data")
    ap.add_argument("--npm-dir", default="/tmp/morse-npm")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    fashion = npm_fetch("fashion-mnist", args.npm_dir)
    images, labels = take(fashion, "clothes", 1000)
    write_idx(os.path.join(args.out, "fashion-train"), images, labels)
    images, labels = take(fashion, "clothes", 200, skip=6000)
    write_idx(os.path.join(args.out, "fashion-test"), images, labels)

    digits = npm_fetch("mnist", args.npm_dir)
    images, labels = take(digits, "digits", 200)
    write_idx(os.path.join(args.out, "mnist-test"), images, labels)
    print(f"wrote IDX files to {args.out}")


if __name__ == "__main__":
    main()
