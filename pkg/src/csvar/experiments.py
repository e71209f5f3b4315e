"""Declarative experiment configs and the reduced-scale experiments built on them."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from csvar.attacks import MiaReport, mia_threshold_attack
from csvar.datasets import (
    DatasetManifest,
    LabeledDataset,
    load_cifar_bin,
    load_idx,
    partition_clients,
)
from csvar.errors import InputError, MissingVariant
from csvar.fl import (
    ModelParams,
    OnTheFlyVariants,
    TrainConfig,
    normalize,
    per_sample_losses,
    run_federated,
)

# bundled datasets live at the repository root; override for other checkouts
DATA_DIR = Path(os.environ.get("CSVAR_DATA_DIR", Path(__file__).resolve().parents[2] / "data"))
MNIST_DIR = DATA_DIR / "mnist"
NATURAL_BATCH = DATA_DIR / "natural32" / "natural_batch.bin.gz"


@dataclass
class ExperimentConfig:
    """Flat, JSON-serialisable description of one run.

    Dataset: either the four IDX paths or ``cifar_train``/``cifar_test`` lists.
    ``train_limit`` draws a seeded subset of the training file; its indices
    are the image ids used for shuffling and membership bookkeeping.
    """

    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    cifar_train: list[str] = field(default_factory=list)
    cifar_test: list[str] = field(default_factory=list)
    train_limit: int | None = None
    test_limit: int | None = None
    subset_seed: int = 0
    variants_dir: str | None = None
    out_dir: str = "runs/latest"
    train: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        names = {f.name for f in fields(cls)}
        train_names = {f.name for f in fields(TrainConfig)}
        train = dict(raw.pop("train", {}))
        for key in list(raw):
            if key in train_names and key not in names:
                train[key] = raw.pop(key)
        unknown = set(raw) - names
        if unknown:
            raise InputError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls(**raw, train=train)
        cfg.train_config()  # validate eagerly
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise InputError(f"{path}: config must be a JSON object")
        return cls.from_json(raw)

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig.from_json(self.train)
        except TypeError as exc:
            raise InputError(str(exc)) from exc

    def to_json(self) -> dict:
        """Resolved config: flat, with every training field spelled out."""
        out = asdict(self)
        out.pop("train")
        out.update(self.train_config().to_json())
        return out

    def with_defaults(self) -> "ExperimentConfig":
        if self.train_images or self.cifar_train:
            return self
        return ExperimentConfig(**{**asdict(self),
                                   "train_images": str(MNIST_DIR / "train-images-idx3-ubyte.gz"),
                                   "train_labels": str(MNIST_DIR / "train-labels-idx1-ubyte.gz"),
                                   "test_images": str(MNIST_DIR / "t10k-images-idx3-ubyte.gz"),
                                   "test_labels": str(MNIST_DIR / "t10k-labels-idx1-ubyte.gz")})


def load_mnist(split: str = "train") -> LabeledDataset:
    prefix = "train" if split == "train" else "t10k"
    return load_idx(MNIST_DIR / f"{prefix}-images-idx3-ubyte.gz", MNIST_DIR / f"{prefix}-labels-idx1-ubyte.gz")


def load_natural32() -> LabeledDataset:
    return load_cifar_bin(NATURAL_BATCH)


def _load_split(cfg: ExperimentConfig, split: str) -> LabeledDataset | None:
    images = getattr(cfg, f"{split}_images")
    labels = getattr(cfg, f"{split}_labels")
    cifar = getattr(cfg, f"cifar_{split}")
    if images and cifar:
        raise InputError("give either IDX paths or CIFAR files, not both")
    if images:
        if not labels:
            raise InputError(f"{split}_images needs {split}_labels")
        return load_idx(images, labels)
    if cifar:
        return load_cifar_bin(cifar)
    return None


def seeded_subset(n: int, limit: int | None, seed: int) -> np.ndarray:
    if limit is None or limit >= n:
        return np.arange(n)
    if limit < 1:
        raise InputError("subset limit must be >= 1")
    return np.sort(np.random.default_rng(seed).choice(n, limit, replace=False))


def fingerprint(images: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(images).tobytes()).hexdigest()


@dataclass
class ExperimentData:
    train: LabeledDataset  # padded training subset
    test: LabeledDataset | None
    train_indices: np.ndarray  # positions of the subset in the training file
    test_indices: np.ndarray


def load_experiment_data(cfg: ExperimentConfig) -> ExperimentData:
    cfg = cfg.with_defaults()
    full = _load_split(cfg, "train")
    if full is None:
        raise InputError("no training data configured")
    idx = seeded_subset(len(full), cfg.train_limit, cfg.subset_seed)
    train = full.subset(idx).padded()
    test_full = _load_split(cfg, "test")
    test = None
    test_idx = np.zeros(0, np.int64)
    if test_full is not None:
        test_idx = seeded_subset(len(test_full), cfg.test_limit, cfg.subset_seed + 1)
        test = test_full.subset(test_idx).padded()
    return ExperimentData(train, test, idx, test_idx)


def load_variants(cfg: ExperimentConfig, data: ExperimentData) -> DatasetManifest | None:
    if not cfg.variants_dir:
        return None
    manifest = DatasetManifest.load(cfg.variants_dir)
    if manifest.source != fingerprint(data.train.images):
        raise MissingVariant(f"variants in {cfg.variants_dir} were generated from a different training subset")
    return manifest


def simulate(cfg: ExperimentConfig, data: ExperimentData | None = None, variants=None, checkpoint_rounds=()):
    """Partition the training subset, then run federated training."""
    data = data or load_experiment_data(cfg)
    tc = cfg.train_config()
    if variants is None:
        variants = load_variants(cfg, data)
    part = partition_clients(data.train.labels, tc.clients, tc.alpha, tc.master_seed)
    reports, params, checkpoints = run_federated(data.train, data.test, part, tc, variants, checkpoint_rounds)
    return reports, params, checkpoints, part


def mia_cohorts(members: LabeledDataset, nonmember_pool: LabeledDataset, size: int | None, seed: int):
    """Equal-sized, seeded member and non-member cohorts."""
    size = min(len(members), len(nonmember_pool)) if size is None else size
    if size < 1 or size > len(members) or size > len(nonmember_pool):
        raise InputError(f"cohort size {size} does not fit {len(members)} members / {len(nonmember_pool)} non-members")
    rng = np.random.default_rng(seed)
    m = np.sort(rng.choice(len(members), size, replace=False))
    n = np.sort(rng.choice(len(nonmember_pool), size, replace=False))
    return members.subset(m), nonmember_pool.subset(n)


def attack(params: ModelParams, members: LabeledDataset, nonmembers: LabeledDataset) -> MiaReport:
    return mia_threshold_attack(per_sample_losses(params, normalize(members.images), members.labels),
                                per_sample_losses(params, normalize(nonmembers.images), nonmembers.labels))


# -- reduced-scale reproductions --------------------------------------------

# Overfitting setup: a small member set trained hard so losses separate.
MIA_DEFAULTS = dict(members=500, rounds=100, clients=4, local_epochs=5, batch_size=32,
                    learning_rate=0.2, hidden=128, early_round=5)
# Utility setup: larger IID subset, moderate training.
UTILITY_DEFAULTS = dict(train_size=10000, rounds=30, clients=4, local_epochs=1, batch_size=32,
                        learning_rate=0.1, hidden=128)


@dataclass
class MiaOutcome:
    protection: str
    seed: int
    early_auc: float
    final_auc: float
    final_accuracy: float


def mia_experiment(seed: int, protection: str, train_pool: LabeledDataset, test_pool: LabeledDataset,
                   dp_sigma: float = 50.0, **overrides) -> MiaOutcome:
    """Train on a small member set, attack the early and final global models.

    Members are drawn from ``train_pool`` and non-members from ``test_pool``
    (equal counts, both seeded); both are evaluated on raw images.
    """
    opts = {**MIA_DEFAULTS, **overrides}
    rng = np.random.default_rng(seed)
    members = train_pool.subset(np.sort(rng.choice(len(train_pool), opts["members"], replace=False))).padded()
    nonmembers = test_pool.subset(rng.choice(len(test_pool), opts["members"], replace=False)).padded()
    tc = TrainConfig(rounds=opts["rounds"], clients=opts["clients"], local_epochs=opts["local_epochs"],
                     batch_size=opts["batch_size"], learning_rate=opts["learning_rate"], hidden=opts["hidden"],
                     protection=protection, dp_sigma=dp_sigma, master_seed=seed)
    variants = OnTheFlyVariants(members.images, tc.shuffle_config(), tc.n_variants) if protection == "csvar" else None
    part = partition_clients(members.labels, tc.clients, tc.alpha, seed)
    reports, params, ck = run_federated(members, nonmembers, part, tc, variants,
                                        checkpoint_rounds=(opts["early_round"], tc.rounds))
    early = attack(ck[opts["early_round"]], members, nonmembers).auc
    final = attack(ck[tc.rounds], members, nonmembers).auc
    return MiaOutcome(protection, seed, early, final, reports[-1].accuracy if reports else float("nan"))


def utility_experiment(seed: int, protection: str, train_pool: LabeledDataset, test: LabeledDataset,
                       dp_sigma: float = 50.0, **overrides) -> float:
    """Final global test accuracy (raw test images) for one protection."""
    opts = {**UTILITY_DEFAULTS, **overrides}
    idx = seeded_subset(len(train_pool), opts["train_size"], seed)
    train = train_pool.subset(idx).padded()
    test = test.padded()
    tc = TrainConfig(rounds=opts["rounds"], clients=opts["clients"], local_epochs=opts["local_epochs"],
                     batch_size=opts["batch_size"], learning_rate=opts["learning_rate"], hidden=opts["hidden"],
                     protection=protection, dp_sigma=dp_sigma, master_seed=seed)
    variants = OnTheFlyVariants(train.images, tc.shuffle_config(), tc.n_variants) if protection == "csvar" else None
    part = partition_clients(train.labels, tc.clients, tc.alpha, seed)
    reports, _, _ = run_federated(train, test, part, tc, variants)
    return reports[-1].accuracy
