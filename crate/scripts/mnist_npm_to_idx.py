#!/usr/bin/env python3
"""Convert the digits bundled with the npm package `mnist@1.1.0` to gzipped IDX.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 scripts/mnist_npm_to_idx.py package/src/digits data/mnist10k

The package stores each class as a flat list of 784-pixel images scaled to
[0, 1]. Pixels are mapped back to bytes with round(v * 255). Classes are
interleaved round-robin so any prefix of the file is close to balanced.
"""

import argparse
import gzip
import json
import struct
from pathlib import Path

SIDE = 28


def load_digits(src):
    per_class = []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        n = len(flat) // (SIDE * SIDE)
        per_class.append([flat[i * SIDE * SIDE:(i + 1) * SIDE * SIDE] for i in range(n)])
    return per_class


def interleave(per_class):
    images, labels = [], []
    for i in range(max(len(c) for c in per_class)):
        for digit, imgs in enumerate(per_class):
            if i < len(imgs):
                images.append(imgs[i])
                labels.append(digit)
    return images, labels


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits", type=Path)
    ap.add_argument("out", type=Path)
    args = ap.parse_args()
    images, labels = interleave(load_digits(args.digits))
    pixels = bytes(min(255, max(0, round(v * 255))) for img in images for v in img)
    args.out.mkdir(parents=True, exist_ok=True)
    write_idx(args.out / "images-idx3-ubyte.gz", 0x803, [len(images), SIDE, SIDE], pixels)
    write_idx(args.out / "labels-idx1-ubyte.gz", 0x801, [len(labels)], bytes(labels))
    print(f"{len(images)} images written to {args.out}")


if __name__ == "__main__":
    main()
