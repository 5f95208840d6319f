"""Build the small IDX digit fixture used by the test suite.

Reads the per-digit JSON files shipped in the `mnist` npm package
(https://github.com/cazala/mnist, MIT licence; flat lists of 28x28
intensities in [0, 1]) and writes the first N images of each digit,
interleaved 0..9, as IDX image and label files.

    python3 scripts/make_mnist_fixture.py <package>/src/digits crates/core/tests/data 70
"""

import json
import struct
import sys
from pathlib import Path

SIDE = 28


def main() -> None:
    src, dst, per_digit = Path(sys.argv[1]), Path(sys.argv[2]), int(sys.argv[3])
    digits = []
    for d in range(10):
        flat = json.loads((src / f"{d}.json").read_text())["data"]
        n = len(flat) // (SIDE * SIDE)
        if n < per_digit:
            sys.exit(f"digit {d}: only {n} images")
        digits.append(flat)
    pixels = bytearray()
    labels = bytearray()
    for k in range(per_digit):
        for d in range(10):
            img = digits[d][k * SIDE * SIDE:(k + 1) * SIDE * SIDE]
            pixels.extend(min(255, max(0, round(v * 255))) for v in img)
            labels.append(d)
    count = len(labels)
    dst.mkdir(parents=True, exist_ok=True)
    (dst / "digits-images.idx").write_bytes(struct.pack(">IIII", 0x803, count, SIDE, SIDE) + bytes(pixels))
    (dst / "digits-labels.idx").write_bytes(struct.pack(">II", 0x801, count) + bytes(labels))


if __name__ == "__main__":
    main()
