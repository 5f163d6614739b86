"""Build the bundled 5000-digit MNIST sample as IDX files.

The full MNIST archives are not always reachable; the mlxtend wheel on PyPI
ships 5000 genuine MNIST digits (500 per class) as CSV.  This script fetches
that wheel with pip, splits it 400/100 per class into train/test and writes
standard IDX files (gzip) that ``msnlab.data.load_mnist`` reads.

    python scripts/make_mnist_subset.py --out data/mnist5k
"""

import argparse
import glob
import gzip
import io
import os
import subprocess
import sys
import tempfile
import zipfile

import numpy as np

from msnlab.data import Dataset, write_idx

CSV_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def fetch_wheel(dest):
    subprocess.run([sys.executable, "-m", "pip", "download", "mlxtend==0.24.0", "--no-deps", "-q", "-d", dest],
                   check=True)
    return glob.glob(os.path.join(dest, "mlxtend-*.whl"))[0]


def read_csv(wheel):
    raw = gzip.decompress(zipfile.ZipFile(wheel).read(CSV_MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    return table[:, :-1].astype(np.uint8), table[:, -1]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/mnist5k")
    ap.add_argument("--wheel", help="use an already downloaded mlxtend wheel")
    ap.add_argument("--test-per-class", type=int, default=100)
    args = ap.parse_args(argv)

    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel or fetch_wheel(tmp)
        pixels, labels = read_csv(wheel)

    # first rows of each class go to test; file order is kept otherwise
    test_idx = np.concatenate([np.flatnonzero(labels == c)[:args.test_per_class] for c in range(10)])
    test_mask = np.zeros(len(labels), dtype=bool)
    test_mask[test_idx] = True
    os.makedirs(args.out, exist_ok=True)
    for split, mask, stem in (("train", ~test_mask, "train"), ("test", test_mask, "t10k")):
        ds = Dataset(pixels[mask].reshape(-1, 1, 28, 28).astype(np.float64) / 255.0, labels[mask])
        write_idx(ds, os.path.join(args.out, f"{stem}-images-idx3-ubyte.gz"),
                  os.path.join(args.out, f"{stem}-labels-idx1-ubyte.gz"))
        print(f"{split}: {len(ds)} samples -> {args.out}")


if __name__ == "__main__":
    main()
