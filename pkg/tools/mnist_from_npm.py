#!/usr/bin/env python3
"""Build IDX files from the `mnist` npm package (a 10,000-sample MNIST
subset stored as per-digit JSON, pixel values rounded to round(u/255, 3)).

The rounding is lossless to invert: round(v * 255) recovers the original
uint8 pixel exactly, since 0.0005 * 255 < 0.5. Samples are shuffled with
a fixed seed and split 9,000 train / 1,000 test, then written as the four
standard gzipped IDX files.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python tools/mnist_from_npm.py package/src/digits data/mnist
"""

import gzip
import json
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))
from splitfed.data import encode_idx_images, encode_idx_labels, load_idx  # noqa: E402

SPLIT_SEED = 20240505
TEST_COUNT = 1000
SIDE = 28


def main(digits_dir: str, out_dir: str) -> None:
    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(digits_dir, f"{digit}.json")) as fh:
            flat = np.asarray(json.load(fh)["data"], dtype=np.float64)
        count = flat.size // (SIDE * SIDE)
        pixels = np.rint(flat * 255.0).astype(np.uint8).reshape(count, SIDE, SIDE)
        images.append(pixels)
        labels.append(np.full(count, digit, dtype=np.uint8))
        print(f"digit {digit}: {count} samples")
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    print(f"total: {len(labels)}")

    order = np.random.Generator(np.random.PCG64(SPLIT_SEED)).permutation(len(labels))
    images, labels = images[order], labels[order]
    train_n = len(labels) - TEST_COUNT

    os.makedirs(out_dir, exist_ok=True)
    parts = {
        "train-images-idx3-ubyte.gz": encode_idx_images(images[:train_n]),
        "train-labels-idx1-ubyte.gz": encode_idx_labels(labels[:train_n]),
        "t10k-images-idx3-ubyte.gz": encode_idx_images(images[train_n:]),
        "t10k-labels-idx1-ubyte.gz": encode_idx_labels(labels[train_n:]),
    }
    for name, payload in parts.items():
        path = os.path.join(out_dir, name)
        # mtime=0 keeps the gzip output byte-reproducible
        with open(path, "wb") as fh:
            with gzip.GzipFile(fileobj=fh, mode="wb", mtime=0) as gz:
                gz.write(payload)
        print(f"wrote {path} ({os.path.getsize(path)} bytes)")

    train = load_idx(
        os.path.join(out_dir, "train-images-idx3-ubyte.gz"),
        os.path.join(out_dir, "train-labels-idx1-ubyte.gz"),
    )
    test = load_idx(
        os.path.join(out_dir, "t10k-images-idx3-ubyte.gz"),
        os.path.join(out_dir, "t10k-labels-idx1-ubyte.gz"),
    )
    print(f"reload check: train {train.images.shape}, test {test.images.shape}, "
          f"train label counts {np.bincount(train.labels)}")


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    main(sys.argv[1], sys.argv[2])
