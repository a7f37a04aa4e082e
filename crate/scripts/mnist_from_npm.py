"""Build IDX files from the digits bundled in the npm `mnist` package.

Usage: python3 scripts/mnist_from_npm.py <unpacked npm package dir> <out dir>

The npm package ships 10,000 MNIST digits as JSON (pixel intensities in [0, 1]
rounded to three decimals). They are shuffled with a fixed seed and written as
a 9,000 / 1,000 train/test pair of IDX image and label files.
"""
import json
import random
import struct
import sys
from pathlib import Path


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 2051, len(images), 28, 28))
        for img in images:
            f.write(bytes(min(255, max(0, round(v * 255))) for v in img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(bytes(labels))


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    samples = []
    for digit in range(10):
        data = json.loads((src / "src" / "digits" / f"{digit}.json").read_text())["data"]
        for k in range(len(data) // 784):
            samples.append((data[k * 784:(k + 1) * 784], digit))
    random.Random(0).shuffle(samples)
    train, test = samples[:9000], samples[9000:]
    out.mkdir(parents=True, exist_ok=True)
    write_images(out / "train-images-idx3-ubyte", [s[0] for s in train])
    write_labels(out / "train-labels-idx1-ubyte", [s[1] for s in train])
    write_images(out / "t10k-images-idx3-ubyte", [s[0] for s in test])
    write_labels(out / "t10k-labels-idx1-ubyte", [s[1] for s in test])


if __name__ == "__main__":
    main()
