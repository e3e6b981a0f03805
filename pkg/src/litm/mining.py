"""Batch construction and triplet mining.

Two identity samplers build P x K batches: uniform random PK sampling and
global hard identity searching (GHIS), which groups each seed identity with
identities that sit close to it in the current embedding space. Within a
batch, batch-hard mining picks the farthest positive and nearest negative of
every anchor.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ConfigError, SamplingError
from .model import ModelConfig, Params, embed
from .numeric import RandomSource, as_matrix, pairwise_distances

MAX_GROUP_REDRAWS = 100
MAX_BATCH_RESTARTS = 10


class SamplerMode(str, enum.Enum):
    RANDOM = "RANDOM"
    GHIS = "GHIS"


@dataclass(frozen=True)
class BatchSpec:
    P: int = 20
    K: int = 4

    def __post_init__(self):
        if self.P < 2 or self.K < 2:
            raise ConfigError(f"P and K must both be >= 2 (got P={self.P}, K={self.K})")

    @property
    def size(self) -> int:
        return self.P * self.K


@dataclass(frozen=True)
class GhisConfig:
    g: int = 5
    q: int = 3

    def __post_init__(self):
        if self.q < 1 or self.g < self.q:
            raise ConfigError(f"need 1 <= q <= g (got g={self.g}, q={self.q})")

    @property
    def group_size(self) -> int:
        return self.q + 1

    def validate(self, n_ids: int, spec: BatchSpec) -> None:
        """Training-time constraints: q < g < n and (q + 1) divides P."""
        if not self.q < self.g:
            raise ConfigError(f"q must be smaller than g (got g={self.g}, q={self.q})")
        if not self.g < n_ids:
            raise ConfigError(f"g={self.g} needs more than {n_ids} identities")
        if spec.P % self.group_size:
            raise ConfigError(f"q+1={self.group_size} must divide P={spec.P}")


@dataclass
class MeanDistanceMatrix:
    matrix: np.ndarray      # (n, n), diagonal +inf
    identities: np.ndarray  # row/column -> identity label
    k_probe: int

    @property
    def n(self) -> int:
        return len(self.identities)


@dataclass(frozen=True)
class IdentityGroup:
    seed: int
    hard: Tuple[int, ...]

    @property
    def members(self) -> Tuple[int, ...]:
        return (self.seed,) + self.hard


def _draw_k(idx: np.ndarray, K: int, rng: RandomSource) -> np.ndarray:
    return rng.choice(idx, size=K, replace=len(idx) < K)


def probe_indices(dataset, k_probe: int, rng: RandomSource) -> Tuple[np.ndarray, np.ndarray]:
    """``k_probe`` sample indices per identity, drawn with replacement only when short."""
    if k_probe < 1:
        raise ConfigError("K_probe must be >= 1")
    groups = dataset.by_identity()
    if not groups:
        raise SamplingError("dataset has no identities")
    ids = np.asarray(sorted(groups), dtype=np.int64)
    rows = []
    for u in ids:
        if len(groups[int(u)]) == 0:
            raise SamplingError(f"identity {u} has no samples")
        rows.append(_draw_k(groups[int(u)], k_probe, rng))
    return ids, np.stack(rows)


def mean_distance_from_embeddings(emb: np.ndarray) -> np.ndarray:
    """(n, K, d) probe embeddings -> (n, n) mean squared distance, diagonal set to +inf.

    Entry (u, v) averages the K*K squared distances between the probes of u
    and the probes of v.
    """
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim != 3 or emb.shape[1] < 1:
        raise SamplingError(f"expected (n, K, d) probe embeddings, got {emb.shape}")
    n, K, _ = emb.shape
    dist = pairwise_distances(emb.reshape(n * K, -1)).reshape(n, K, n, K)
    total = dist.sum(axis=(1, 3))
    # the block sums for (u, v) and (v, u) round differently; averaging them
    # makes the matrix exactly symmetric
    mean = 0.5 * (total + total.T) / (K * K)
    np.fill_diagonal(mean, np.inf)
    return mean


def mean_distance_matrix(dataset, params: Params, cfg: ModelConfig, k_probe: int,
                         rng: RandomSource) -> MeanDistanceMatrix:
    """Identity dissimilarities measured on the final shifted embedding ``f_M``."""
    ids, idx = probe_indices(dataset, k_probe, rng)
    f_m = embed(params, cfg, dataset.descriptors[idx.ravel()])
    matrix = mean_distance_from_embeddings(f_m.reshape(len(ids), k_probe, -1))
    return MeanDistanceMatrix(matrix, ids, k_probe)


def ghis_groups(dbar: MeanDistanceMatrix, cfg: GhisConfig, rng: RandomSource) -> List[IdentityGroup]:
    """One group per identity: the ``g`` nearest identities by mean distance form the
    candidates (ties to the lower index) and ``q`` of them are sampled uniformly."""
    n = dbar.n
    if n <= cfg.g:
        raise ConfigError(f"need more than g={cfg.g} identities, have {n}")
    groups = []
    for u in range(n):
        cand = np.argsort(dbar.matrix[u], kind="stable")[:cfg.g]
        pick = np.sort(rng.choice(cfg.g, size=cfg.q, replace=False))
        groups.append(IdentityGroup(int(dbar.identities[u]),
                                    tuple(int(dbar.identities[c]) for c in cand[pick])))
    return groups


def candidate_sets(dbar: MeanDistanceMatrix, g: int) -> List[Tuple[int, ...]]:
    return [tuple(int(dbar.identities[c]) for c in np.argsort(row, kind="stable")[:g])
            for row in dbar.matrix]


def _fill_batch(dataset, identities: Sequence[int], K: int, rng: RandomSource) -> np.ndarray:
    groups = dataset.by_identity()
    return np.concatenate([_draw_k(groups[int(u)], K, rng) for u in identities])


def ghis_batch(groups: Sequence[IdentityGroup], spec: BatchSpec, cfg: GhisConfig, dataset,
               rng: RandomSource, fill_random: bool = False) -> np.ndarray:
    """Dataset indices of a P*K batch made of P/(q+1) disjoint identity groups.

    Seeds are drawn uniformly without replacement; a group sharing any identity
    with those already chosen is rejected and another seed drawn, at most
    MAX_GROUP_REDRAWS times per group. If a group cannot be placed the batch
    is assembled afresh, up to MAX_BATCH_RESTARTS times. After that a
    SamplingError is raised. With ``fill_random`` set, the largest partial
    assembly is instead topped up with uniformly drawn unused identities.
    """
    if spec.P % cfg.group_size:
        raise ConfigError(f"q+1={cfg.group_size} must divide P={spec.P}")
    if not groups:
        raise SamplingError("no identity groups")
    n_groups = spec.P // cfg.group_size
    best: List[int] = []
    for _ in range(MAX_BATCH_RESTARTS):
        chosen = _assemble_groups(groups, n_groups, rng)
        if len(chosen) == spec.P:
            return _fill_batch(dataset, chosen, spec.K, rng)
        if len(chosen) > len(best):
            best = chosen
    if not fill_random:
        raise SamplingError(f"could not assemble {spec.P} distinct identities from hard-identity "
                            f"groups ({MAX_BATCH_RESTARTS} attempts)")
    rest = np.setdiff1d(np.asarray(sorted(dataset.by_identity())), best)
    if len(best) + len(rest) < spec.P:
        raise SamplingError(f"need {spec.P} identities, dataset has {len(best) + len(rest)}")
    extra = rng.choice(rest, size=spec.P - len(best), replace=False)
    return _fill_batch(dataset, best + [int(u) for u in extra], spec.K, rng)


def _assemble_groups(groups, n_groups, rng) -> List[int]:
    """Greedy placement of up to ``n_groups`` disjoint groups; stops at the first
    group that cannot be placed."""
    chosen: List[int] = []
    used = set()
    for _ in range(n_groups):
        for gi in rng.permutation(len(groups))[:MAX_GROUP_REDRAWS + 1]:
            members = groups[gi].members
            if len(set(members)) == len(members) and used.isdisjoint(members):
                break
        else:
            return chosen
        used.update(members)
        chosen.extend(members)
    return chosen


def random_pk_batch(dataset, spec: BatchSpec, rng: RandomSource) -> np.ndarray:
    """Dataset indices of P uniformly chosen identities x K samples each."""
    ids = np.asarray(sorted(dataset.by_identity()), dtype=np.int64)
    if len(ids) < spec.P:
        raise SamplingError(f"need {spec.P} identities, dataset has {len(ids)}")
    chosen = rng.choice(ids, size=spec.P, replace=False)
    return _fill_batch(dataset, chosen, spec.K, rng)


def batch_hard_triplets(embs, labels) -> np.ndarray:
    """(n, 3) rows ``(anchor, hardest positive, hardest negative)``, one per anchor.

    The hardest positive is the farthest other sample with the anchor's label,
    the hardest negative the nearest sample with any other label; ties go to the
    lower index.
    """
    X = as_matrix(embs, "embs")
    labels = np.asarray(labels)
    if len(labels) != len(X):
        raise ValueError("one label per embedding required")
    uniq, counts = np.unique(labels, return_counts=True)
    if len(uniq) < 2:
        raise SamplingError("batch-hard mining needs at least two identities")
    if counts.min() < 2:
        raise SamplingError(f"identity {uniq[counts.argmin()]} has a single sample in the batch")
    dist = pairwise_distances(X)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(len(X), dtype=bool)
    pos = np.argmax(np.where(pos_mask, dist, -np.inf), axis=1)
    neg = np.argmin(np.where(same, np.inf, dist), axis=1)
    return np.stack([np.arange(len(X)), pos, neg], axis=1)


def epoch_sampler_schedule(epoch: int) -> SamplerMode:
    """Two random-sampling epochs, then one GHIS epoch, repeating."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return SamplerMode.GHIS if epoch % 3 == 2 else SamplerMode.RANDOM


def format_hard_sets(groups: Sequence[IdentityGroup]) -> str:
    width = max(len(str(g.seed)) for g in groups) if groups else 1
    lines = [f"{'id':>{width}}  hard identities"]
    for g in groups:
        lines.append(f"{g.seed:>{width}}  " + " ".join(str(h) for h in g.hard))
    return "\n".join(lines) + "\n"
