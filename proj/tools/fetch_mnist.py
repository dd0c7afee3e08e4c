#!/usr/bin/env python3
"""Fetch MNIST training files in IDX format.

Tries the usual mirrors first. When none is reachable, falls back to the
5000-image subset bundled with mlxtend and writes it as IDX files.
"""

import argparse
import gzip
import importlib.util
import pathlib
import struct
import sys
import urllib.request

MIRRORS = [
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
    "http://yann.lecun.com/exdb/mnist/",
]
FILES = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte"]


def download(out: pathlib.Path, timeout: float) -> bool:
    for mirror in MIRRORS:
        try:
            blobs = {}
            for name in FILES:
                with urllib.request.urlopen(mirror + name + ".gz", timeout=timeout) as resp:
                    blobs[name] = gzip.decompress(resp.read())
        except OSError as err:
            print(f"{mirror}: {err}", file=sys.stderr)
            continue
        for name, data in blobs.items():
            (out / name).write_bytes(data)
        print(f"downloaded full MNIST from {mirror}")
        return True
    return False


def write_subset(out: pathlib.Path) -> None:
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or spec.origin is None:
        sys.exit("no mirror reachable and mlxtend is not installed")
    csv = pathlib.Path(spec.origin).parent / "data" / "data" / "mnist_5k.csv.gz"
    images = bytearray()
    labels = bytearray()
    with gzip.open(csv, "rt") as fh:
        for line in fh:
            fields = line.strip().split(",")
            if len(fields) != 785:
                continue
            images.extend(int(float(v)) for v in fields[:784])
            labels.append(int(float(fields[784])))
    n = len(labels)
    (out / FILES[0]).write_bytes(struct.pack(">IIII", 0x803, n, 28, 28) + bytes(images))
    (out / FILES[1]).write_bytes(struct.pack(">II", 0x801, n) + bytes(labels))
    print(f"wrote {n}-image subset from {csv}")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="data/mnist", help="output directory")
    parser.add_argument("--timeout", type=float, default=10.0)
    parser.add_argument("--subset", action="store_true", help="skip downloads and write the bundled subset")
    args = parser.parse_args()
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if all((out / name).exists() for name in FILES):
        print(f"{out} already has MNIST")
        return
    if args.subset or not download(out, args.timeout):
        write_subset(out)


if __name__ == "__main__":
    main()
