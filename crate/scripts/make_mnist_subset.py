"""Convert the 10k-digit JSON bundle shipped in the `mnist` npm package into
gzipped IDX files (8000 train / 2000 test, class-interleaved, fixed order).

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/make_mnist_subset.py package/src/digits data/mnist-subset
"""
import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload.tobytes())


def main(src, dst):
    images, labels = [], []
    for digit in range(10):
        flat = json.loads((Path(src) / f"{digit}.json").read_text())["data"]
        arr = np.rint(np.asarray(flat, dtype=np.float64).reshape(-1, 784) * 255.0)
        images.append(arr.clip(0, 255).astype(np.uint8))
        labels.append(np.full(len(arr), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.RandomState(0).permutation(len(labels))
    images, labels = images[order], labels[order]
    dst = Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    n_train = 8000
    for prefix, sl in (("train", slice(0, n_train)), ("t10k", slice(n_train, None))):
        im, lb = images[sl], labels[sl]
        write_idx(dst / f"{prefix}-images-idx3-ubyte.gz", 2051, (len(lb), 28, 28), im)
        write_idx(dst / f"{prefix}-labels-idx1-ubyte.gz", 2049, (len(lb),), lb)
        print(prefix, len(lb), np.bincount(lb, minlength=10).tolist())


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
