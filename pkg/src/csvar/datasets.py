"""Dataset loaders, Netpbm images, epoch-variant storage and client splits."""

from __future__ import annotations

import gzip
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from csvar.errors import (
    BadMagic,
    ChecksumMismatch,
    CountMismatch,
    EmptyClient,
    InputError,
    LabelOutOfRange,
    MalformedHeader,
    MissingVariant,
    ShapeMismatch,
    TruncatedFile,
    UnsupportedMaxval,
)
from csvar.shuffler import ShuffleConfig, shuffle_batch
from csvar.tensor import VarianceMap, as_image, reflect_pad_to_multiple, region_size

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 32 * 32 * 3
MANIFEST_NAME = "manifest.json"


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, H, W, C) uint8
    labels: np.ndarray  # (N,) int64
    num_classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.dtype != np.uint8:
            raise ShapeMismatch(f"images must be uint8 (N, H, W, C), got {self.images.dtype} {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise CountMismatch(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LabelOutOfRange(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes)

    def padded(self) -> "LabeledDataset":
        """Reflect-pad every image so region tiling is exact (28x28 -> 32x32)."""
        h, w = self.images.shape[1:3]
        s = region_size(h, w)
        if h % s == 0 and w % s == 0:
            return self
        images = np.stack([reflect_pad_to_multiple(img, s) for img in self.images]) if len(self) else \
            np.zeros((0, -(-h // s) * s, -(-w // s) * s, self.images.shape[3]), np.uint8)
        return LabeledDataset(images, self.labels, self.num_classes)


def _read_bytes(path) -> bytes:
    data = Path(path).read_bytes()
    if data[:2] == b"\x1f\x8b":
        try:
            data = gzip.decompress(data)
        except (OSError, EOFError) as exc:
            raise TruncatedFile(f"{path}: corrupt gzip stream") from exc
    return data


def _check_magic(data: bytes, expected: int, kind: str) -> None:
    if len(data) < 4:
        raise TruncatedFile(f"IDX {kind} file is shorter than its magic number")
    magic = struct.unpack(">I", data[:4])[0]
    if magic != expected:
        raise BadMagic(f"expected {kind} magic 0x{expected:08x}, got 0x{magic:08x}")


def parse_idx_images(data: bytes, expected_shape=(28, 28)) -> np.ndarray:
    _check_magic(data, IDX_IMAGES_MAGIC, "image")
    if len(data) < 16:
        raise TruncatedFile("IDX image header needs 16 bytes")
    _, count, rows, cols = struct.unpack(">IIII", data[:16])
    if expected_shape is not None and (rows, cols) != tuple(expected_shape):
        raise MalformedHeader(f"expected {expected_shape[0]}x{expected_shape[1]} images, header says {rows}x{cols}")
    need = 16 + count * rows * cols
    if len(data) < need:
        raise TruncatedFile(f"payload holds {len(data) - 16} bytes, header promises {need - 16}")
    if len(data) > need:
        raise CountMismatch(f"{len(data) - need} trailing bytes after {count} images")
    return np.frombuffer(data, np.uint8, offset=16).reshape(count, rows, cols, 1).copy()


def parse_idx_labels(data: bytes, num_classes: int = 10) -> np.ndarray:
    _check_magic(data, IDX_LABELS_MAGIC, "label")
    if len(data) < 8:
        raise TruncatedFile("IDX label header needs 8 bytes")
    _, count = struct.unpack(">II", data[:8])
    if len(data) < 8 + count:
        raise TruncatedFile(f"label payload holds {len(data) - 8} bytes, header promises {count}")
    if len(data) > 8 + count:
        raise CountMismatch(f"{len(data) - 8 - count} trailing bytes after {count} labels")
    labels = np.frombuffer(data, np.uint8, offset=8).astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise LabelOutOfRange(f"label {labels.max()} outside [0, {num_classes})")
    return labels


def load_idx(images_path, labels_path, expected_shape=(28, 28)) -> LabeledDataset:
    """Load an IDX image/label pair (plain or gzip-compressed)."""
    images = parse_idx_images(_read_bytes(images_path), expected_shape)
    labels = parse_idx_labels(_read_bytes(labels_path))
    if len(images) != len(labels):
        raise CountMismatch(f"{len(images)} images vs {len(labels)} labels")
    return LabeledDataset(images, labels)


def encode_idx(images: np.ndarray, labels: np.ndarray) -> tuple[bytes, bytes]:
    images = np.asarray(images, dtype=np.uint8)
    n, h, w = images.shape[:3]
    img = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + images.reshape(n, h, w).tobytes()
    lab = struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + np.asarray(labels, np.uint8).tobytes()
    return img, lab


def parse_cifar_records(data: bytes, num_classes: int = 10) -> tuple[np.ndarray, np.ndarray]:
    if len(data) == 0 or len(data) % CIFAR_RECORD:
        raise TruncatedFile(f"{len(data)} bytes is not a whole number of {CIFAR_RECORD}-byte records")
    rec = np.frombuffer(data, np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() >= num_classes:
        raise LabelOutOfRange(f"label byte {labels.max()} outside [0, {num_classes})")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).copy()
    return images, labels


def load_cifar_bin(paths, num_classes: int = 10) -> LabeledDataset:
    """Load CIFAR-10 binary batches; pixels arrive planar and leave interleaved."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    parts = [parse_cifar_records(_read_bytes(p), num_classes) for p in paths]
    if not parts:
        raise InputError("no CIFAR batch files given")
    return LabeledDataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), num_classes)


def encode_cifar(images: np.ndarray, labels) -> bytes:
    images = np.asarray(images, dtype=np.uint8)
    planar = images.transpose(0, 3, 1, 2).reshape(len(images), -1)
    return np.concatenate([np.asarray(labels, np.uint8)[:, None], planar], axis=1).tobytes()


# -- Netpbm -----------------------------------------------------------------

def encode_pnm(image: np.ndarray) -> bytes:
    img = as_image(image)
    h, w, c = img.shape
    magic = b"P5" if c == 1 else b"P6"
    return magic + b"\n%d %d\n255\n" % (w, h) + img.tobytes()


def write_image(path, image: np.ndarray) -> None:
    """Write a binary PGM (one channel) or PPM (three channels)."""
    Path(path).write_bytes(encode_pnm(image))


def decode_pnm(data: bytes) -> np.ndarray:
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise MalformedHeader(f"unsupported Netpbm magic {magic!r}")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        if pos >= len(data):
            raise MalformedHeader("header ends early")
        ch = data[pos:pos + 1]
        if ch == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise MalformedHeader("unterminated comment")
            pos = end + 1
        elif ch.isspace():
            pos += 1
        elif ch.isdigit():
            end = pos
            while end < len(data) and data[end:end + 1].isdigit():
                end += 1
            fields.append(int(data[pos:end]))
            pos = end
        else:
            raise MalformedHeader(f"unexpected byte {ch!r} in header")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise MalformedHeader("missing whitespace after maxval")
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise UnsupportedMaxval(f"only maxval 255 is supported, got {maxval}")
    if width < 1 or height < 1:
        raise MalformedHeader("image dimensions must be positive")
    c = 1 if magic == b"P5" else 3
    need = width * height * c
    payload = data[pos:]
    if len(payload) < need:
        raise TruncatedFile(f"payload has {len(payload)} bytes, expected {need}")
    return np.frombuffer(payload[:need], np.uint8).reshape(height, width, c).copy()


def read_image(path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes())


def heatmap_pixels(vmap: VarianceMap) -> np.ndarray:
    """Min-max scale the map to 0..255 (lighter = higher); flat maps become 128."""
    v = np.asarray(vmap.values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.full(v.shape, 128, np.uint8)
    return np.rint((v - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_variance_heatmap(vmap: VarianceMap, path, scale: int = 1) -> None:
    pixels = heatmap_pixels(vmap)
    if scale > 1:
        pixels = np.kron(pixels, np.ones((scale, scale), np.uint8))
    write_image(path, pixels[:, :, None])


# -- epoch variants ---------------------------------------------------------

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class DatasetManifest:
    source: str
    shape: list[int]  # [N, H, W, C]
    num_classes: int
    epochs: int
    master_seed: int
    mode: str
    block_size_override: int | None = None
    labels: dict = field(default_factory=dict)
    files: list[dict] = field(default_factory=list)
    root: Path | None = field(default=None, repr=False, compare=False)

    def to_json(self) -> dict:
        return {
            "source": self.source,
            "shape": list(self.shape),
            "num_classes": self.num_classes,
            "epochs": self.epochs,
            "master_seed": self.master_seed,
            "mode": self.mode,
            "block_size_override": self.block_size_override,
            "labels": self.labels,
            "files": self.files,
        }

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            raw = json.loads(path.read_text())
            return cls(**raw, root=path.parent)
        except (json.JSONDecodeError, TypeError) as exc:
            raise MalformedHeader(f"{path}: not a variant manifest ({exc})") from exc

    def checksums(self) -> list[str]:
        return [f["sha256"] for f in self.files]

    def variant_path(self, epoch: int) -> Path:
        for entry in self.files:
            if entry["epoch"] == epoch:
                return Path(self.root or ".") / entry["path"]
        raise MissingVariant(f"no variant for epoch {epoch} (have {self.epochs})")

    def load_variant(self, epoch: int, verify: bool = True) -> np.ndarray:
        """Read the epoch's images back as ``(N, H, W, C)``."""
        path = self.variant_path(epoch)
        if verify:
            expected = next(f["sha256"] for f in self.files if f["epoch"] == epoch)
            if _sha256(path) != expected:
                raise ChecksumMismatch(f"{path} does not match its manifest checksum")
        n, h, w, c = self.shape
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size != n * h * w * c:
            raise TruncatedFile(f"{path} holds {raw.size} bytes, expected {n * h * w * c}")
        return raw.reshape(n, c, h, w).transpose(0, 2, 3, 1)

    def load_labels(self) -> np.ndarray:
        path = Path(self.root or ".") / self.labels["path"]
        if _sha256(path) != self.labels["sha256"]:
            raise ChecksumMismatch(f"{path} does not match its manifest checksum")
        return np.fromfile(path, dtype=np.uint8).astype(np.int64)

    def verify(self) -> None:
        for entry in self.files:
            path = Path(self.root or ".") / entry["path"]
            if not path.exists() or _sha256(path) != entry["sha256"]:
                raise ChecksumMismatch(f"{path} is missing or altered")


def generate_epoch_variants(dataset: LabeledDataset, config: ShuffleConfig, epochs: int, out_dir,
                            source: str = "", chunk: int = 4096) -> DatasetManifest:
    """Shuffle every image once per epoch and persist one planar blob per epoch.

    Image ``i`` of epoch ``e`` is shuffled with ``(config.master_seed, e, i)``.
    The manifest is published last, so a manifest on disk always describes a
    complete set of files.
    """
    if epochs < 1:
        raise InputError("epochs must be >= 1")
    if config.is_gaussian:
        raise InputError("epoch variants are shuffle-only; Gaussian noise is drawn on the fly")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(dataset)
    labels_path = out / "labels.bin"
    dataset.labels.astype(np.uint8).tofile(labels_path)
    files = []
    for e in range(epochs):
        cfg = config.at_epoch(e)
        path = out / f"epoch_{e:04d}.bin"
        with open(path, "wb") as fh:
            for start in range(0, n, chunk):
                ids = np.arange(start, min(n, start + chunk))
                shuffled = shuffle_batch(dataset.images[ids], cfg, ids)
                fh.write(np.ascontiguousarray(shuffled.transpose(0, 3, 1, 2)).tobytes())
        files.append({"epoch": e, "path": path.name, "sha256": _sha256(path)})
    manifest = DatasetManifest(
        source=source,
        shape=[n, *dataset.shape],
        num_classes=dataset.num_classes,
        epochs=epochs,
        master_seed=config.master_seed,
        mode=config.mode,
        block_size_override=config.block_size_override,
        labels={"path": labels_path.name, "sha256": _sha256(labels_path)},
        files=files,
        root=out,
    )
    tmp = out / (MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps(manifest.to_json(), indent=2) + "\n")
    os.replace(tmp, out / MANIFEST_NAME)
    return manifest


# -- client partitioning ----------------------------------------------------

@dataclass
class ClientPartition:
    assignments: list[np.ndarray]
    alpha: float | None  # None marks an IID split

    @property
    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignments]


def partition_clients(labels, num_clients: int, alpha: float | None, seed: int,
                      max_retries: int = 100) -> ClientPartition:
    """Split sample indices across clients.

    ``alpha=None`` gives a uniform random split. Otherwise each class is
    divided according to proportions drawn from ``Dirichlet(alpha)``, which
    yields label-skewed shards for small ``alpha``. Draws leaving a client empty
    are retried up to ``max_retries`` times.
    """
    labels = np.asarray(labels)
    if num_clients < 1:
        raise InputError("num_clients must be >= 1")
    if alpha is not None and alpha <= 0:
        raise InputError("alpha must be positive")
    rng = np.random.default_rng(seed)
    n = len(labels)
    if alpha is None:
        parts = np.array_split(rng.permutation(n), num_clients)
        if min(len(p) for p in parts) == 0:
            raise EmptyClient(f"{n} samples cannot fill {num_clients} clients")
        return ClientPartition([np.sort(p) for p in parts], None)
    for _ in range(max_retries):
        buckets: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        for cls in np.unique(labels):
            idx = rng.permutation(np.flatnonzero(labels == cls))
            props = rng.dirichlet(np.full(num_clients, alpha))
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
            for k, part in enumerate(np.split(idx, cuts)):
                buckets[k].append(part)
        parts = [np.sort(np.concatenate(b)) if b else np.zeros(0, np.int64) for b in buckets]
        if min(len(p) for p in parts) > 0:
            return ClientPartition(parts, alpha)
    raise EmptyClient(f"a client stayed empty after {max_retries} Dirichlet draws")
