"""Build a small MNIST train/test split in IDX format.

The sandbox this project was developed in had no route to the usual MNIST
mirrors, so the desk-scale experiments use the 5000-sample MNIST subset that
ships inside the ``mlxtend`` wheel (500 images per digit, original 0-255
pixels). The samples are shuffled with a fixed seed and split 4000/1000.

Usage::

    pip download --no-deps -d /tmp/wheels mlxtend
    python scripts/make_mnist_subset.py /tmp/wheels/mlxtend-*.whl data/mnist
"""

import argparse
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

from lowacc.idx import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("wheel", type=Path)
    parser.add_argument("out", type=Path)
    parser.add_argument("--n-test", type=int, default=1000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    with zipfile.ZipFile(args.wheel) as zf:
        raw = gzip.decompress(zf.read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    images = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, -1].astype(np.uint8)

    perm = np.random.default_rng(args.seed).permutation(len(labels))
    images, labels = images[perm], labels[perm]
    n_train = len(labels) - args.n_test

    args.out.mkdir(parents=True, exist_ok=True)
    splits = {"train": slice(0, n_train), "t10k": slice(n_train, None)}
    for prefix, sl in splits.items():
        write_idx(args.out / f"{prefix}-images-idx3-ubyte.gz", images[sl])
        write_idx(args.out / f"{prefix}-labels-idx1-ubyte.gz", labels[sl])
        print(f"{prefix}: {len(labels[sl])} samples")


if __name__ == "__main__":
    main()
