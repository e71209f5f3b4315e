"""Desk-scale federated learning with a one-hidden-layer MLP.

Clients run mini-batch SGD on their shard of the round's training images and
the server takes the sample-weighted parameter mean. Protection decides what
the clients train on: raw images, freshly noised images, or the shuffled
variant for ``round mod epochs``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from csvar.datasets import ClientPartition, LabeledDataset
from csvar.errors import EmptyClientList, InputError, MissingVariant, ShapeMismatch
from csvar.shuffler import CHANNEL, MODES, ShuffleConfig, derive_region_seed, obfuscate, shuffle_batch

PROTECTIONS = ("none", "dp", "csvar")
_PARAM_NAMES = ("W1", "b1", "W2", "b2")


@dataclass
class ModelParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.W1.shape[0], self.W1.shape[1], self.W2.shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams(*(a.copy() for a in self.arrays()))

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_flat(cls, vec: np.ndarray, input_dim: int, hidden: int, num_classes: int) -> "ModelParams":
        shapes = [(input_dim, hidden), (hidden,), (hidden, num_classes), (num_classes,)]
        sizes = [int(np.prod(s)) for s in shapes]
        if vec.size != sum(sizes):
            raise ShapeMismatch(f"flat vector has {vec.size} entries, model needs {sum(sizes)}")
        parts = np.split(np.asarray(vec, dtype=np.float64), np.cumsum(sizes)[:-1])
        return cls(*(p.reshape(s) for p, s in zip(parts, shapes)))

    def to_bytes(self) -> bytes:
        """u32 header length, JSON shape header, then little-endian float64 values."""
        header = json.dumps({"format": "csvar-mlp", "dtype": "<f8", "shapes": {
            n: list(a.shape) for n, a in zip(_PARAM_NAMES, self.arrays())}}).encode()
        return struct.pack("<I", len(header)) + header + self.flat().astype("<f8").tobytes()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelParams":
        data = Path(path).read_bytes()
        try:
            (hlen,) = struct.unpack("<I", data[:4])
            header = json.loads(data[4:4 + hlen])
            shapes = header["shapes"]
            d, h = shapes["W1"]
            c = shapes["W2"][1]
        except (struct.error, ValueError, KeyError) as exc:
            raise InputError(f"{path}: not a model file") from exc
        vec = np.frombuffer(data[4 + hlen:], dtype="<f8")
        return cls.from_flat(vec, d, h, c)


def init_model(input_dim: int, hidden: int, num_classes: int, seed: int) -> ModelParams:
    """Glorot-uniform weights (bound ``sqrt(6 / (fan_in + fan_out))``), zero biases."""
    if min(input_dim, hidden, num_classes) < 1:
        raise InputError("model dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    b1 = np.sqrt(6.0 / (input_dim + hidden))
    b2 = np.sqrt(6.0 / (hidden + num_classes))
    return ModelParams(
        rng.uniform(-b1, b1, (input_dim, hidden)),
        np.zeros(hidden),
        rng.uniform(-b2, b2, (hidden, num_classes)),
        np.zeros(num_classes),
    )


def _check_input(params: ModelParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.W1.shape[0]:
        raise ShapeMismatch(f"expected (batch, {params.W1.shape[0]}) input, got {x.shape}")
    return x


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _logits(params: ModelParams, x: np.ndarray):
    pre = x @ params.W1 + params.b1
    hid = np.maximum(pre, 0.0)
    return pre, hid, hid @ params.W2 + params.b2


def forward(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Class probabilities for a batch of flattened inputs scaled to [0, 1]."""
    return softmax(_logits(params, _check_input(params, x))[2])


def _check_labels(params: ModelParams, x: np.ndarray, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (x.shape[0],):
        raise ShapeMismatch(f"{x.shape[0]} inputs but labels of shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= params.W2.shape[1]):
        raise ShapeMismatch("label outside the model's class range")
    return labels


def loss_and_grad(params: ModelParams, x: np.ndarray, labels) -> tuple[float, ModelParams]:
    """Mean cross-entropy and its exact gradient."""
    x = _check_input(params, x)
    labels = _check_labels(params, x, labels)
    n = x.shape[0]
    pre, hid, logits = _logits(params, x)
    logp = _log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    d_logits = np.exp(logp)
    d_logits[np.arange(n), labels] -= 1.0
    d_logits /= n
    d_hid = d_logits @ params.W2.T
    d_hid[pre <= 0] = 0.0
    grad = ModelParams(x.T @ d_hid, d_hid.sum(axis=0), hid.T @ d_logits, d_logits.sum(axis=0))
    return float(loss), grad


def per_sample_losses(params: ModelParams, x: np.ndarray, labels) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return np.zeros(0)
    x = _check_input(params, x)
    labels = _check_labels(params, x, labels)
    logp = _log_softmax(_logits(params, x)[2])
    return -logp[np.arange(len(labels)), labels]


def accuracy(params: ModelParams, x: np.ndarray, labels) -> float:
    if len(labels) == 0:
        return 0.0
    preds = _logits(params, _check_input(params, x))[2].argmax(axis=1)
    return float((preds == np.asarray(labels)).mean())


def normalize(images: np.ndarray) -> np.ndarray:
    """Flatten uint8 images to rows of floats in [0, 1]."""
    images = np.asarray(images)
    return images.reshape(len(images), -1).astype(np.float64) / 255.0


@dataclass(frozen=True)
class TrainConfig:
    rounds: int = 20
    clients: int = 4
    local_epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 0.1
    protection: str = "none"
    dp_sigma: float = 50.0
    shuffle_mode: str = CHANNEL
    variant_epochs: int | None = None  # distinct shuffled variants; defaults to rounds
    master_seed: int = 0
    hidden: int = 128
    alpha: float | None = None  # Dirichlet concentration, None = IID

    def __post_init__(self):
        if self.learning_rate < 0:
            raise InputError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.clients < 1 or self.rounds < 0 or self.local_epochs < 0:
            raise InputError("batch_size and clients must be >= 1; rounds and local_epochs >= 0")
        if self.protection not in PROTECTIONS:
            raise InputError(f"protection must be one of {PROTECTIONS}")
        if self.shuffle_mode not in MODES:
            raise InputError(f"shuffle_mode must be one of {MODES}")
        if self.dp_sigma < 0:
            raise InputError("dp_sigma must be non-negative")

    @property
    def n_variants(self) -> int:
        return self.variant_epochs if self.variant_epochs is not None else max(self.rounds, 1)

    def shuffle_config(self) -> ShuffleConfig:
        return ShuffleConfig(self.master_seed, 0, mode=self.shuffle_mode)

    def to_json(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_json(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise InputError(f"unknown training fields: {sorted(unknown)}")
        return cls(**raw)

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


@dataclass
class RoundReport:
    round: int
    accuracy: float
    mean_loss: float
    client_samples: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"round": self.round, "accuracy": self.accuracy, "mean_loss": self.mean_loss,
                "client_samples": list(self.client_samples)}


def sgd_step(params: ModelParams, grad: ModelParams, lr: float) -> None:
    for p, g in zip(params.arrays(), grad.arrays()):
        p -= lr * g


def local_train(params: ModelParams, x: np.ndarray, labels, config: TrainConfig, seed: int
                ) -> tuple[ModelParams, float]:
    """Run ``config.local_epochs`` passes of mini-batch SGD on a copy of ``params``.

    ``x`` holds normalised rows. Returns the new parameters and the mean
    mini-batch loss seen during training (NaN when no step was taken).
    """
    params = params.copy()
    x = _check_input(params, x)
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    losses = []
    n = len(labels)
    for _ in range(config.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grad = loss_and_grad(params, x[idx], labels[idx])
            sgd_step(params, grad, config.learning_rate)
            losses.append(loss)
    return params, float(np.mean(losses)) if losses else float("nan")


def fedavg(client_params: list[ModelParams], sample_counts) -> ModelParams:
    """Sample-weighted mean of client parameters."""
    if not client_params:
        raise EmptyClientList("no client models to aggregate")
    counts = np.asarray(sample_counts, dtype=np.float64)
    if counts.shape != (len(client_params),) or (counts < 1).any():
        raise InputError("one count >= 1 per client is required")
    ref = [a.shape for a in client_params[0].arrays()]
    for p in client_params[1:]:
        if [a.shape for a in p.arrays()] != ref:
            raise ShapeMismatch("client models disagree on parameter shapes")
    weights = counts / counts.sum()
    out = []
    for parts in zip(*(p.arrays() for p in client_params)):
        out.append(sum(w * a for w, a in zip(weights, parts)))
    return ModelParams(*out)


class OnTheFlyVariants:
    """Shuffled epoch variants computed in memory instead of read from disk.

    Produces the same images as :func:`csvar.datasets.generate_epoch_variants`
    with the same shuffle config, keeping only the most recent epoch cached.
    """

    def __init__(self, images: np.ndarray, config: ShuffleConfig, epochs: int):
        self.images = images
        self.config = config
        self.epochs = epochs
        self._cache: tuple[int, np.ndarray] | None = None

    def load_variant(self, epoch: int) -> np.ndarray:
        if not 0 <= epoch < self.epochs:
            raise MissingVariant(f"no variant for epoch {epoch}")
        if self._cache is None or self._cache[0] != epoch:
            self._cache = (epoch, shuffle_batch(self.images, self.config.at_epoch(epoch)))
        return self._cache[1]


def client_seed(master_seed: int, client: int, rnd: int) -> int:
    return derive_region_seed(master_seed, client, rnd, 0, 0, 7)


def _round_images(train: LabeledDataset, used: np.ndarray, config: TrainConfig, rnd: int, variants) -> np.ndarray:
    """uint8 images for the samples in ``used`` as seen in round ``rnd``."""
    if config.protection == "csvar":
        return np.asarray(variants.load_variant(rnd % config.n_variants))[used]
    if config.protection == "dp":
        cfg = ShuffleConfig.gaussian(config.master_seed, config.dp_sigma, epoch=rnd)
        return obfuscate(train.images[used], cfg, used)
    return train.images[used]


def run_federated(train: LabeledDataset, test: LabeledDataset | None, partition: ClientPartition,
                  config: TrainConfig, variants=None, checkpoint_rounds=(), init: ModelParams | None = None):
    """Run ``config.rounds`` rounds of FedAvg.

    ``variants`` must expose ``epochs`` and ``load_variant(epoch)`` returning
    the shuffled training set for that epoch (a :class:`DatasetManifest` or
    :class:`OnTheFlyVariants`); it is required when protection is csvar.

    Returns ``(reports, final_params, checkpoints)`` where ``checkpoints``
    maps each requested round count to the global model after that many rounds.
    """
    if config.protection == "csvar" and config.rounds > 0:
        if variants is None:
            raise MissingVariant("csvar protection needs pre-generated epoch variants")
        if variants.epochs < config.n_variants:
            raise MissingVariant(f"{config.n_variants} variants needed, {variants.epochs} available")
    if not partition.assignments:
        raise EmptyClientList("partition has no clients")
    input_dim = int(np.prod(train.shape))
    params = init if init is not None else init_model(input_dim, config.hidden, train.num_classes, config.master_seed)
    used = np.concatenate(partition.assignments)
    position = np.empty(len(train), dtype=np.int64)
    position[used] = np.arange(len(used))
    counts = [len(a) for a in partition.assignments]
    x_test = normalize(test.images) if test is not None and len(test) else None

    reports: list[RoundReport] = []
    checkpoints = {}
    wanted = set(checkpoint_rounds)
    if 0 in wanted:
        checkpoints[0] = params.copy()
    for rnd in range(config.rounds):
        x_round = normalize(_round_images(train, used, config, rnd, variants))
        updates, losses = [], []
        for k, idx in enumerate(partition.assignments):
            rows = position[idx]
            new, loss = local_train(params, x_round[rows], train.labels[idx], config,
                                    client_seed(config.master_seed, k, rnd))
            updates.append(new)
            losses.append(loss)
        params = fedavg(updates, counts)
        if not params.is_finite():
            raise FloatingPointError(f"non-finite parameters after round {rnd + 1}")
        acc = accuracy(params, x_test, test.labels) if x_test is not None else float("nan")
        mean_loss = float(np.average(losses, weights=counts)) if config.local_epochs else float("nan")
        reports.append(RoundReport(rnd + 1, acc, mean_loss, counts))
        if rnd + 1 in wanted:
            checkpoints[rnd + 1] = params.copy()
    return reports, params, checkpoints
