"""Convert the 5000-sample MNIST subset bundled with mlxtend into IDX files.

Usage:
    pip download mlxtend --no-deps -d /tmp/mlx
    python3 scripts/mnist_subset_to_idx.py /tmp/mlx/mlxtend-*.whl data/mnist5k

The wheel ships ``mlxtend/data/data/mnist_5k.csv.gz`` (784 pixel columns
followed by the label). Output files follow the standard MNIST layout:
``images-idx3-ubyte`` (magic 0x00000803) and ``labels-idx1-ubyte``
(magic 0x00000801), big-endian headers, unsigned-byte payloads.
"""
import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path


def main() -> None:
    wheel, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(wheel) as z:
        raw = z.read("mlxtend/data/data/mnist_5k.csv.gz")
    rows = gzip.open(io.BytesIO(raw), "rt").read().strip().splitlines()
    pixels = bytearray()
    labels = bytearray()
    for line in rows:
        vals = [int(float(v)) for v in line.split(",")]
        assert len(vals) == 785
        pixels.extend(vals[:784])
        labels.append(vals[784])
    n = len(rows)
    with open(out / "images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28))
        f.write(pixels)
    with open(out / "labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(labels)
    print(f"wrote {n} samples to {out}")


if __name__ == "__main__":
    main()
