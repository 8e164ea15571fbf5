"""Convert the 5,000-image MNIST sample bundled with mlxtend into gzipped IDX files.

Usage: pip download --no-deps mlxtend && python3 scripts/mnist5k_to_idx.py mlxtend-*.whl data/mnist5k

The source CSV is sorted by class, so rows are shuffled once with a fixed seed
to give a class-mixed file order.
"""
import gzip
import random
import struct
import sys
import zipfile
from pathlib import Path


def main(wheel: str, out_dir: str) -> None:
    raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    rows = [line.split(",") for line in gzip.decompress(raw).decode().splitlines() if line]
    random.Random(20161104).shuffle(rows)
    n = len(rows)
    images = bytearray(struct.pack(">IIII", 0x00000803, n, 28, 28))
    labels = bytearray(struct.pack(">II", 0x00000801, n))
    for row in rows:
        images.extend(int(float(v)) for v in row[:784])
        labels.append(int(float(row[784])))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    # mtime=0 keeps the archives byte-reproducible
    with gzip.GzipFile(out / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(images)
    with gzip.GzipFile(out / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(labels)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
