"""Hinge triplet loss, staged losses with incremental margins and their weighted sum.

All losses are sums over triplets (no averaging). Gradients are with respect to
the embeddings; the model's ``backward`` carries them to the parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DimensionError
from .numeric import as_matrix


class Triplet(NamedTuple):
    a: int
    p: int
    n: int


@dataclass(frozen=True)
class MarginSchedule:
    m0: float
    deltas: Tuple[float, ...] = ()

    def __post_init__(self):
        deltas = tuple(float(d) for d in self.deltas)
        object.__setattr__(self, "deltas", deltas)
        if not self.m0 > 0:
            raise ConfigError(f"base margin must be positive, got {self.m0}")
        if any(not d > 0 for d in deltas):
            raise ConfigError(f"margin increments must be positive, got {list(deltas)}")

    @property
    def stages(self) -> int:
        return len(self.deltas)

    @classmethod
    def from_margins(cls, margins: Sequence[float]) -> "MarginSchedule":
        """Build from absolute margins, e.g. ``[4, 7, 10]``."""
        if not margins:
            raise ConfigError("need at least the base margin")
        return cls(margins[0], tuple(b - a for a, b in zip(margins, margins[1:])))


def margins(sched: MarginSchedule) -> List[float]:
    out = [float(sched.m0)]
    for d in sched.deltas:
        out.append(out[-1] + d)
    return out


def as_triplet_array(triplets) -> np.ndarray:
    arr = np.asarray(list(triplets) if not isinstance(triplets, np.ndarray) else triplets,
                     dtype=np.int64)
    if arr.size == 0:
        return arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DimensionError(f"triplets must be (T, 3) index rows, got shape {arr.shape}")
    return arr


def triplet_terms(embs: np.ndarray, trip: np.ndarray):
    """Per-triplet anchor-positive and anchor-negative squared distances."""
    da = embs[trip[:, 0]] - embs[trip[:, 1]]
    dn = embs[trip[:, 0]] - embs[trip[:, 2]]
    return np.sum(da * da, axis=1), np.sum(dn * dn, axis=1)


def triplet_loss(embs, triplets, m: float) -> Tuple[float, np.ndarray]:
    """Sum over triplets of ``[d_ap - d_an + m]_+``.

    Returns the loss and its gradient with respect to every embedding row. A
    triplet sitting exactly on the hinge kink contributes zero gradient.
    """
    X = as_matrix(embs, "embs")
    trip = as_triplet_array(triplets)
    grads = np.zeros_like(X)
    if len(trip) == 0:
        return 0.0, grads
    if trip.min() < 0 or trip.max() >= len(X):
        raise IndexError("triplet index out of range")
    d_ap, d_an = triplet_terms(X, trip)
    hinge = d_ap - d_an + m
    active = hinge > 0
    loss = float(np.sum(np.where(active, hinge, 0.0)))

    t = trip[active]
    a, p, n = X[t[:, 0]], X[t[:, 1]], X[t[:, 2]]
    np.add.at(grads, t[:, 0], 2.0 * (n - p))
    np.add.at(grads, t[:, 1], 2.0 * (p - a))
    np.add.at(grads, t[:, 2], 2.0 * (a - n))
    return loss, grads


@dataclass
class LossReport:
    stage_losses: List[float]
    total: float
    mean_d_ap: List[float]
    mean_d_an: List[float]
    active_fraction: List[float] = field(default_factory=list)

    @property
    def mean_gap(self) -> List[float]:
        return [an - ap for ap, an in zip(self.mean_d_ap, self.mean_d_an)]

    def as_dict(self) -> dict:
        return {
            "losses": self.stage_losses,
            "total": self.total,
            "d_ap": self.mean_d_ap,
            "d_an": self.mean_d_an,
            "gap": self.mean_gap,
            "active": self.active_fraction,
        }


def _stage_array(stage_embs) -> np.ndarray:
    if hasattr(stage_embs, "f"):  # BatchEmbeddings
        return np.asarray(stage_embs.f, dtype=np.float64)
    if isinstance(stage_embs, np.ndarray):
        return np.asarray(stage_embs, dtype=np.float64)
    return np.stack([np.asarray(s.f, dtype=np.float64) for s in stage_embs])


def joint_loss(stage_embs, triplets, sched: MarginSchedule,
               lambdas: Sequence[float]) -> Tuple[LossReport, np.ndarray]:
    """Weighted sum of stage losses, stage ``j`` using ``f_j`` and margin ``m_j``.

    Args:
        stage_embs: (B, M+1, d) array, a BatchEmbeddings, or a list of
            per-sample StageEmbeddings.
        triplets: index triplets into the batch, shared by every stage.
        sched: margin schedule with exactly M increments.
        lambdas: M+1 stage weights.

    Returns:
        The LossReport and the (B, M+1, d) gradient of the total with respect
        to every stage embedding.
    """
    F = _stage_array(stage_embs)
    if F.ndim != 3:
        raise DimensionError(f"stage embeddings must be (B, M+1, d), got {F.shape}")
    n_stages = F.shape[1]
    ms = margins(sched)
    if len(ms) != n_stages or len(lambdas) != n_stages:
        raise DimensionError(
            f"{n_stages} stages but {len(ms)} margins and {len(lambdas)} weights"
        )
    trip = as_triplet_array(triplets)
    grads = np.zeros_like(F)
    losses, d_aps, d_ans, active = [], [], [], []
    total = 0.0
    for j in range(n_stages):
        loss_j, g_j = triplet_loss(F[:, j, :], trip, ms[j])
        lam = float(lambdas[j])
        total += lam * loss_j
        grads[:, j, :] = lam * g_j
        losses.append(loss_j)
        if len(trip):
            d_ap, d_an = triplet_terms(F[:, j, :], trip)
            d_aps.append(float(np.mean(d_ap)))
            d_ans.append(float(np.mean(d_an)))
            active.append(float(np.mean(d_ap - d_an + ms[j] > 0)))
        else:
            d_aps.append(0.0)
            d_ans.append(0.0)
            active.append(0.0)
    return LossReport(losses, total, d_aps, d_ans, active), grads
