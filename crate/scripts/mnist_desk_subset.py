"""Build a desk-scale MNIST subset in IDX format.

Source: the per-digit JSON arrays shipped in the `mnist` npm package
(`npm pack mnist`, files package/src/digits/<d>.json, pixel values in [0, 1]).
Writes gzipped IDX image/label files with a fixed interleaved order.

usage: python3 mnist_desk_subset.py <digits_dir> <out_dir> [per_digit]
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def main():
    digits_dir = Path(sys.argv[1])
    out_dir = Path(sys.argv[2])
    per_digit = int(sys.argv[3]) if len(sys.argv) > 3 else 700
    samples = []
    for d in range(10):
        raw = json.loads((digits_dir / f"{d}.json").read_text())["data"]
        n = len(raw) // 784
        for j in range(min(n, per_digit)):
            px = raw[j * 784:(j + 1) * 784]
            samples.append((bytes(max(0, min(255, round(v * 255))) for v in px), d))
    random.Random(20200101).shuffle(samples)
    out_dir.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(out_dir / "desk-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(samples), 28, 28))
        for px, _ in samples:
            f.write(px)
    with gzip.GzipFile(out_dir / "desk-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(samples)))
        f.write(bytes(lbl for _, lbl in samples))
    print(f"wrote {len(samples)} samples to {out_dir}")


if __name__ == "__main__":
    main()
