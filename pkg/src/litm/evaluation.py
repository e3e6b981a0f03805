"""Retrieval evaluation (CMC, mAP) and mean pair-distance statistics per stage.

Single-query protocol: every query is ranked against the whole gallery by
ascending squared Euclidean distance, ties going to the lower gallery index.
There is no camera filtering.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionError, SamplingError
from .model import ModelConfig, Params, forward_batch
from .numeric import as_matrix, cross_distances, pairwise_distances


@dataclass
class RetrievalSplit:
    query_emb: np.ndarray
    query_ids: np.ndarray
    gallery_emb: np.ndarray
    gallery_ids: np.ndarray

    def __post_init__(self):
        self.query_emb = as_matrix(self.query_emb, "query_emb")
        self.gallery_emb = as_matrix(self.gallery_emb, "gallery_emb")
        self.query_ids = np.asarray(self.query_ids)
        self.gallery_ids = np.asarray(self.gallery_ids)
        if len(self.query_emb) == 0 or len(self.gallery_emb) == 0:
            raise SamplingError("queries and gallery must be non-empty")
        if len(self.query_ids) != len(self.query_emb) or len(self.gallery_ids) != len(self.gallery_emb):
            raise DimensionError("one identity per embedding required")
        if self.query_emb.shape[1] != self.gallery_emb.shape[1]:
            raise DimensionError("query and gallery embeddings differ in dimension")
        missing = np.setdiff1d(self.query_ids, self.gallery_ids)
        if len(missing):
            raise SamplingError(f"query identities {missing.tolist()} have no gallery match")


@dataclass
class EvalReport:
    cmc: np.ndarray  # cmc[k-1] = CMC@k
    map: float
    n_queries: int = 0
    n_gallery: int = 0
    stage: Optional[str] = None
    pair_stats: Optional[Tuple[float, float, float]] = None
    extra: dict = field(default_factory=dict)

    def rank(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def to_dict(self) -> dict:
        d = {"stage": self.stage, "n_queries": self.n_queries, "n_gallery": self.n_gallery,
             "mAP": self.map, "cmc": [float(c) for c in self.cmc]}
        if self.pair_stats is not None:
            d["d_ap"], d["d_an"], d["gap"] = self.pair_stats
        d.update(self.extra)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def cmc_csv(self) -> str:
        buf = io.StringIO()
        buf.write("k,cmc\n")
        for k, c in enumerate(self.cmc, start=1):
            buf.write(f"{k},{c:.6f}\n")
        return buf.getvalue()


def format_table(reports: Sequence[EvalReport], ranks: Sequence[int] = (1, 5, 10)) -> str:
    """Aligned plain-text table, one row per report."""
    head = ["stage", *(f"R-{k}" for k in ranks), "mAP", "d_ap", "d_an", "gap"]
    rows = []
    for r in reports:
        row = [r.stage or "-", *(f"{100 * r.rank(k):.1f}" for k in ranks), f"{100 * r.map:.1f}"]
        row += [f"{v:.3f}" for v in r.pair_stats] if r.pair_stats else ["-"] * 3
        rows.append(row)
    widths = [max(len(x) for x in col) for col in zip(head, *rows)]
    fmt = lambda cells: "  ".join(c.rjust(w) for c, w in zip(cells, widths))
    return "\n".join([fmt(head), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows]) + "\n"


def rank_gallery(q, gallery) -> np.ndarray:
    gallery = as_matrix(gallery, "gallery")
    if len(gallery) == 0:
        raise SamplingError("empty gallery")
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] != gallery.shape[1]:
        raise DimensionError("query and gallery dimensions differ")
    return np.argsort(cross_distances(q[None, :], gallery)[0], kind="stable")


def cmc_map(split: RetrievalSplit, k_max: int = 10) -> EvalReport:
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    dist = cross_distances(split.query_emb, split.gallery_emb)
    order = np.argsort(dist, axis=1, kind="stable")
    hits = split.gallery_ids[order] == split.query_ids[:, None]
    first = hits.argmax(axis=1)  # every row has a hit
    n_q = len(split.query_ids)
    cmc = np.array([np.count_nonzero(first < k) / n_q for k in range(1, k_max + 1)])
    aps = []
    for row in hits:
        pos = np.flatnonzero(row) + 1
        aps.append(math.fsum(np.arange(1, len(pos) + 1) / pos) / len(pos))
    return EvalReport(cmc=cmc, map=math.fsum(aps) / n_q, n_queries=n_q,
                      n_gallery=len(split.gallery_ids))


def pair_distance_stats(embs, labels) -> List[Tuple[float, float, float]]:
    """Per stage: mean squared distance over all same-identity pairs, over all
    cross-identity pairs, and their difference.

    ``embs`` is (N, d) for a single stage or (N, S, d) for S stages.
    """
    E = np.asarray(embs, dtype=np.float64)
    if E.ndim == 2:
        E = E[:, None, :]
    labels = np.asarray(labels)
    if E.ndim != 3 or len(labels) != len(E):
        raise DimensionError("need (N, S, d) embeddings and N labels")
    uniq, counts = np.unique(labels, return_counts=True)
    if len(uniq) < 2 or counts.min() < 2:
        raise SamplingError("need >= 2 identities with >= 2 samples each")
    same = labels[:, None] == labels[None, :]
    upper = np.triu(np.ones_like(same), k=1)
    pos_mask, neg_mask = same & upper, ~same & upper
    n_pos, n_neg = np.count_nonzero(pos_mask), np.count_nonzero(neg_mask)
    out = []
    for s in range(E.shape[1]):
        dist = pairwise_distances(E[:, s, :])
        d_ap = float(np.sum(dist[pos_mask]) / n_pos)
        d_an = float(np.sum(dist[neg_mask]) / n_neg)
        out.append((d_ap, d_an, d_an - d_ap))
    return out


def stage_names(M: int) -> List[str]:
    return [f"f{j}" for j in range(M + 1)]


def evaluate_model(params: Params, cfg: ModelConfig, dataset, query_idx, gallery_idx,
                   stages: Optional[Sequence[int]] = None, k_max: int = 10) -> List[EvalReport]:
    """Retrieval report plus all-pairs distance stats for each requested stage."""
    F = forward_batch(params, cfg, dataset.descriptors).f
    stats = pair_distance_stats(F, dataset.labels)
    names = stage_names(cfg.M)
    reports = []
    for j in (range(cfg.M + 1) if stages is None else stages):
        split = RetrievalSplit(F[query_idx, j], dataset.labels[query_idx],
                               F[gallery_idx, j], dataset.labels[gallery_idx])
        rep = cmc_map(split, k_max)
        rep.stage = names[j]
        rep.pair_stats = stats[j]
        reports.append(rep)
    return reports
