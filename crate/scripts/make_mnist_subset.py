"""Build the 1000/100 MNIST IDX fixture from mlxtend's bundled 5000-digit CSV.

usage: python3 make_mnist_subset.py <mnist_5k.csv.gz> <out_dir>

The CSV holds 500 real MNIST digits per class (784 pixel columns + label).
We draw a stratified, seeded split: 100 train and 10 test digits per class.
"""
import gzip
import struct
import sys

import numpy as np


def write_idx_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main():
    src, out = sys.argv[1], sys.argv[2]
    data = np.genfromtxt(gzip.open(src), delimiter=",").astype(np.int64)
    pixels, labels = data[:, :-1], data[:, -1]
    rng = np.random.default_rng(20200101)
    train_idx, test_idx = [], []
    for k in range(10):
        idx = rng.permutation(np.flatnonzero(labels == k))
        train_idx.extend(idx[:100])
        test_idx.extend(idx[100:110])
    train_idx = rng.permutation(train_idx)
    test_idx = rng.permutation(test_idx)
    write_idx_images(f"{out}/train-images-idx3-ubyte", pixels[train_idx])
    write_idx_labels(f"{out}/train-labels-idx1-ubyte", labels[train_idx])
    write_idx_images(f"{out}/t10k-images-idx3-ubyte", pixels[test_idx])
    write_idx_labels(f"{out}/t10k-labels-idx1-ubyte", labels[test_idx])


if __name__ == "__main__":
    main()
