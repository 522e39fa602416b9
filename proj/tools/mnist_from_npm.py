#!/usr/bin/env python3
"""Rebuild IDX files from the digit JSON shipped in the `mnist` npm package.

The package stores 10,000 MNIST digits as x/255 rounded to three decimals,
grouped by class. Rounding is injective over the 256 byte values, so
round(v * 255) recovers the original bytes exactly.

usage: npm pack mnist && tar xzf mnist-1.1.0.tgz
       python3 mnist_from_npm.py package/src/digits OUT_DIR
"""
import json
import pathlib
import struct
import sys


def main(digits_dir: str, out_dir: str) -> None:
    images = bytearray()
    labels = bytearray()
    for digit in range(10):
        data = json.loads(pathlib.Path(digits_dir, f"{digit}.json").read_text())["data"]
        if len(data) % 784:
            raise SystemExit(f"{digit}.json: length {len(data)} not a multiple of 784")
        for v in data:
            b = round(v * 255)
            if not 0 <= b <= 255 or abs(v * 255 - b) > 0.5:
                raise SystemExit(f"{digit}.json: value {v} does not map to a byte")
            images.append(b)
        labels.extend([digit] * (len(data) // 784))
    n = len(labels)
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "mnist-npm-images-idx3-ubyte").write_bytes(struct.pack(">IIII", 0x803, n, 28, 28) + images)
    (out / "mnist-npm-labels-idx1-ubyte").write_bytes(struct.pack(">II", 0x801, n) + labels)
    print(f"wrote {n} images to {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
