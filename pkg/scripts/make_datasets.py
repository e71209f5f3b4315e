"""Rebuild the datasets under data/ from redistributable package sources.

MNIST: the official IDX files shipped verbatim in the npm ``mnist-data``
package, gzip-compressed under their usual names.

natural32: CIFAR-shaped 32x32 RGB crops of the colour photographs shipped
with scikit-image, written in CIFAR-10 binary record format. The label is
the index of the source photograph.

    npm pack mnist-data && tar xzf mnist-data-*.tgz
    python scripts/make_datasets.py --mnist-dir package/data
"""

import argparse
import gzip
from pathlib import Path

import numpy as np

from csvar.datasets import encode_cifar, load_idx

NATURAL_SOURCES = ["astronaut", "coffee", "chelsea", "rocket", "immunohistochemistry", "motorcycle_left", "horse_rgb"]


def _source_image(name: str) -> np.ndarray:
    import skimage.data

    if name == "motorcycle_left":
        return skimage.data.stereo_motorcycle()[0]
    if name == "horse_rgb":
        # the horse silhouette is binary; tint it so crops still have colour structure
        horse = skimage.data.horse().astype(np.float64)
        base = skimage.data.coffee()[:328, :400].astype(np.float64)
        return np.clip(base * horse[..., None] + (1 - horse[..., None]) * [40, 90, 160], 0, 255).astype(np.uint8)
    return getattr(skimage.data, name)()[..., :3]


def natural_crops(count: int, seed: int):
    from skimage.transform import resize

    rng = np.random.default_rng(seed)
    sources = [_source_image(n) for n in NATURAL_SOURCES]
    images, labels = [], []
    while len(images) < count:
        k = int(rng.integers(len(sources)))
        src = sources[k]
        h, w = src.shape[:2]
        side = int(rng.integers(48, min(h, w) // 2 + 1))
        y = int(rng.integers(0, h - side + 1))
        x = int(rng.integers(0, w - side + 1))
        crop = resize(src[y:y + side, x:x + side], (32, 32), anti_aliasing=True, preserve_range=True)
        crop = np.clip(np.rint(crop), 0, 255).astype(np.uint8)
        if crop.reshape(-1, 3).std(axis=0).min() < 4.0:
            continue  # skip flat patches; they carry no spatial or chromatic structure
        images.append(crop)
        labels.append(k)
    return np.stack(images), np.asarray(labels, np.uint8)


def _write_gz(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    # mtime=0 keeps the archives byte-reproducible
    path.write_bytes(gzip.compress(data, compresslevel=9, mtime=0))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--mnist-dir", type=Path, required=True, help="directory holding the raw MNIST IDX files")
    ap.add_argument("--out", type=Path, default=Path("data"))
    ap.add_argument("--natural-count", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=20240531)
    args = ap.parse_args()

    names = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]
    for name in names:
        _write_gz(args.out / "mnist" / f"{name}.gz", (args.mnist_dir / name).read_bytes())
    train = load_idx(args.out / "mnist" / f"{names[0]}.gz", args.out / "mnist" / f"{names[1]}.gz")
    test = load_idx(args.out / "mnist" / f"{names[2]}.gz", args.out / "mnist" / f"{names[3]}.gz")

    nat_x, nat_y = natural_crops(args.natural_count, args.seed)
    _write_gz(args.out / "natural32" / "natural_batch.bin.gz", encode_cifar(nat_x, nat_y))
    print(f"mnist train {len(train)}, test {len(test)}; natural32 {len(nat_y)}")


if __name__ == "__main__":
    main()
