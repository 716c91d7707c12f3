#!/usr/bin/env python3
"""Build the digit IDX files under data/ from the `mnist` npm package.

The npm package `mnist@1.1.0` bundles ~10.3k genuine 28x28 handwritten-digit
images (about 1k per class) as JSON, pixel values rounded to three decimals
of v/255, so `round(v * 255)` recovers the original bytes exactly.

Usage:
    python3 scripts/prepare_digits.py                  # fetch via `npm pack`
    python3 scripts/prepare_digits.py --digits-dir D   # use an unpacked copy

Writes train-images.idx / train-labels.idx / test-images.idx /
test-labels.idx with a deterministic stratified 5/6 : 1/6 split.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
import tarfile
import tempfile
from pathlib import Path

import numpy as np

from gpe.streams import save_idx

SPLIT_SEED = 20260814
SIDE = 28


def fetch_via_npm(workdir: Path) -> Path:
    subprocess.run(
        ["npm", "pack", "mnist@1.1.0"],
        cwd=workdir, check=True, capture_output=True,
    )
    (tarball,) = workdir.glob("mnist-*.tgz")
    with tarfile.open(tarball) as tar:
        tar.extractall(workdir, filter="data")
    return workdir / "package" / "src" / "digits"


def load_digit(digits_dir: Path, digit: int) -> np.ndarray:
    with open(digits_dir / f"{digit}.json", "r", encoding="utf-8") as fh:
        flat = np.asarray(json.load(fh)["data"], dtype=np.float64)
    if flat.size % (SIDE * SIDE):
        raise SystemExit(f"{digit}.json: {flat.size} values is not a multiple of 784")
    images = np.rint(flat * 255.0).reshape(-1, SIDE * SIDE)
    if images.min() < 0 or images.max() > 255:
        raise SystemExit(f"{digit}.json: pixel values outside byte range")
    return images.astype(np.uint8)


def build(digits_dir: Path, out_dir: Path) -> None:
    rng = np.random.default_rng(SPLIT_SEED)
    train_x, train_y, test_x, test_y = [], [], [], []
    for digit in range(10):
        images = load_digit(digits_dir, digit)
        order = rng.permutation(images.shape[0])
        n_test = images.shape[0] // 6
        test_x.append(images[order[:n_test]])
        test_y.append(np.full(n_test, digit, dtype=np.int64))
        train_x.append(images[order[n_test:]])
        train_y.append(np.full(images.shape[0] - n_test, digit, dtype=np.int64))

    def pack(xs, ys):
        x = np.concatenate(xs, axis=0)
        y = np.concatenate(ys, axis=0)
        order = rng.permutation(x.shape[0])
        return x[order], y[order]

    tr_x, tr_y = pack(train_x, train_y)
    te_x, te_y = pack(test_x, test_y)

    out_dir.mkdir(parents=True, exist_ok=True)
    save_idx(tr_x.reshape(-1, SIDE, SIDE) / 255.0, out_dir / "train-images.idx")
    save_idx(tr_y, out_dir / "train-labels.idx")
    save_idx(te_x.reshape(-1, SIDE, SIDE) / 255.0, out_dir / "test-images.idx")
    save_idx(te_y, out_dir / "test-labels.idx")
    print(f"train: {tr_x.shape[0]} images, test: {te_x.shape[0]} images -> {out_dir}")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--digits-dir", type=Path, help="unpacked mnist/src/digits directory")
    ap.add_argument("--out", type=Path, default=Path("data"), help="output directory")
    args = ap.parse_args()
    if args.digits_dir:
        build(args.digits_dir, args.out)
        return
    with tempfile.TemporaryDirectory() as tmp:
        digits = fetch_via_npm(Path(tmp))
        build(digits, args.out)


if __name__ == "__main__":
    sys.exit(main())
