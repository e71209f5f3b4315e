"""Loss-threshold membership inference and image obfuscation metrics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from csvar.errors import EmptyCohort, NotColorImage, ShapeMismatch
from csvar.tensor import as_image


@dataclass
class MiaReport:
    roc_points: np.ndarray  # (k, 2) rows of (fpr, tpr)
    auc: float
    member_count: int
    nonmember_count: int
    rank_auc: float | None = None

    def roc_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["fpr", "tpr"])
        for fpr, tpr in self.roc_points:
            writer.writerow([repr(float(fpr)), repr(float(tpr))])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {"auc": self.auc, "rank_auc": self.rank_auc, "member_count": self.member_count,
                "nonmember_count": self.nonmember_count, "roc_points": len(self.roc_points)}


def roc_curve(scores, is_member) -> np.ndarray:
    """ROC points from sweeping every distinct score as a threshold.

    A sample is called a member when its score is >= the threshold. Tied
    scores switch together, giving one diagonal step per distinct value.
    """
    scores = np.asarray(scores, dtype=np.float64)
    is_member = np.asarray(is_member, dtype=bool)
    pos = int(is_member.sum())
    neg = len(is_member) - pos
    if pos == 0 or neg == 0:
        raise EmptyCohort("need at least one member and one non-member")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    m = is_member[order]
    tp = np.cumsum(m)
    fp = np.cumsum(~m)
    last_of_run = np.r_[s[1:] != s[:-1], True]
    tpr = np.r_[0.0, tp[last_of_run] / pos]
    fpr = np.r_[0.0, fp[last_of_run] / neg]
    return np.column_stack([fpr, tpr])


def trapezoid_auc(points: np.ndarray) -> float:
    fpr, tpr = points[:, 0], points[:, 1]
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def rank_auc(scores, is_member) -> float:
    """P(member score > non-member score) with ties counted half (Mann-Whitney)."""
    scores = np.asarray(scores, dtype=np.float64)
    is_member = np.asarray(is_member, dtype=bool)
    pos = int(is_member.sum())
    neg = len(is_member) - pos
    if pos == 0 or neg == 0:
        raise EmptyCohort("need at least one member and one non-member")
    ranks = rankdata(scores)  # average ranks resolve ties as one half
    u = ranks[is_member].sum() - pos * (pos + 1) / 2.0
    return float(u / (pos * neg))


def roc_auc(scores, is_member) -> float:
    return trapezoid_auc(roc_curve(scores, is_member))


def mia_threshold_attack(member_losses, nonmember_losses) -> MiaReport:
    """Score each sample by its negated loss and sweep all thresholds."""
    member_losses = np.asarray(member_losses, dtype=np.float64).ravel()
    nonmember_losses = np.asarray(nonmember_losses, dtype=np.float64).ravel()
    if member_losses.size == 0 or nonmember_losses.size == 0:
        raise EmptyCohort("both cohorts must be non-empty")
    scores = -np.concatenate([member_losses, nonmember_losses])
    labels = np.r_[np.ones(member_losses.size, bool), np.zeros(nonmember_losses.size, bool)]
    points = roc_curve(scores, labels)
    auc = trapezoid_auc(points)
    by_rank = rank_auc(scores, labels)
    if abs(auc - by_rank) > 1e-9:
        raise ArithmeticError(f"trapezoid AUC {auc} disagrees with rank AUC {by_rank}")
    return MiaReport(points, auc, member_losses.size, nonmember_losses.size, by_rank)


# -- obfuscation metrics ----------------------------------------------------

def _same_shape(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    return a, b


def ncc(original, other) -> float:
    """Zero-mean normalised cross-correlation averaged over channels.

    Channels that are constant in either image contribute 0.
    """
    a, b = _same_shape(original, other)
    total = 0.0
    for c in range(a.shape[2]):
        x = a[..., c].astype(np.float64).ravel()
        y = b[..., c].astype(np.float64).ravel()
        x -= x.mean()
        y -= y.mean()
        denom = np.sqrt((x @ x) * (y @ y))
        if denom > 0:
            total += float(x @ y / denom)
    return total / a.shape[2]


def _pearson_exact(x: np.ndarray, y: np.ndarray) -> float:
    # integer moments: a permutation of the pixel pairs gives a bit-identical result
    x = x.astype(np.int64).ravel()
    y = y.astype(np.int64).ravel()
    n = x.size
    sx, sy = int(x.sum()), int(y.sum())
    cov = n * int(x @ y) - sx * sy
    vx = n * int(x @ x) - sx * sx
    vy = n * int(y @ y) - sy * sy
    if vx == 0 or vy == 0:
        return 0.0
    return cov / np.sqrt(float(vx) * float(vy))


def inter_channel_correlation(image) -> float:
    """Mean |Pearson r| over the (R,G), (R,B), (G,B) channel pairs."""
    img = as_image(image)
    if img.shape[2] != 3:
        raise NotColorImage("inter-channel correlation needs three channels")
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    return (abs(_pearson_exact(r, g)) + abs(_pearson_exact(r, b)) + abs(_pearson_exact(g, b))) / 3.0


def per_channel_histogram_l1(a, b) -> float:
    """Summed per-channel 256-bin histogram L1 distance over the number of values.

    Zero exactly when every channel's value multiset matches; 2.0 when the
    histograms are disjoint.
    """
    a, b = _same_shape(a, b)
    total = 0
    for c in range(a.shape[2]):
        ha = np.bincount(a[..., c].ravel(), minlength=256)
        hb = np.bincount(b[..., c].ravel(), minlength=256)
        total += int(np.abs(ha - hb).sum())
    return total / a.size


@dataclass
class ObfuscationReport:
    mean_ncc: float
    inter_channel_corr_delta: float | None
    per_channel_histogram_l1: float

    def to_json(self) -> dict:
        return {"mean_ncc": self.mean_ncc, "inter_channel_corr_delta": self.inter_channel_corr_delta,
                "per_channel_histogram_l1": self.per_channel_histogram_l1}


def obfuscation_report(original, transformed) -> ObfuscationReport:
    """Compare a protected image against its original.

    ``inter_channel_corr_delta`` is transformed minus original (negative means
    channels were decorrelated) and is ``None`` for grayscale images.
    """
    a, b = _same_shape(original, transformed)
    delta = None
    if a.shape[2] == 3:
        delta = inter_channel_correlation(b) - inter_channel_correlation(a)
    return ObfuscationReport(ncc(a, b), delta, per_channel_histogram_l1(a, b))


def report_json(report) -> str:
    return json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n"
