"""Synthetic identity datasets and their on-disk format.

File layout (all numbers little-endian)::

    LITMDATA v=1 n_ids=<int> samples_per_id=<int> d_in=<int> R=<int> records=<int>\\n
    records x ( int64 identity, R*d_in float64 descriptor values, row-major )

``records`` must equal ``n_ids * samples_per_id``; every identity appears
exactly ``samples_per_id`` times.
"""
from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional

import numpy as np

from ._io import atomic_write_bytes
from .errors import (ConfigError, DatasetFormatError, InconsistentDataError,
                     TruncatedFileError, VersionMismatchError)
from .model import Sample
from .numeric import RandomSource, pairwise_distances

MAGIC = "LITMDATA"
FORMAT_VERSION = 1
# non-twin centres are kept at least this many twin distances apart
SEPARATION_FACTOR = 2.0
MAX_PLACEMENT_TRIES = 10_000


@dataclass
class Dataset:
    labels: np.ndarray       # (N,) int64
    descriptors: np.ndarray  # (N, R, d_in) float64

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        if self.descriptors.ndim != 3 or len(self.labels) != len(self.descriptors):
            raise InconsistentDataError("labels and (N, R, d_in) descriptors disagree")
        if len(self.labels) and self.labels.min() < 0:
            raise InconsistentDataError("identity labels must be non-negative")
        self._index = None

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        return (isinstance(other, Dataset)
                and np.array_equal(self.labels, other.labels)
                and self.descriptors.shape == other.descriptors.shape
                and np.array_equal(self.descriptors, other.descriptors))

    @property
    def identities(self) -> np.ndarray:
        return np.unique(self.labels)

    @property
    def n_ids(self) -> int:
        return len(self.identities)

    @property
    def R(self) -> int:
        return self.descriptors.shape[1]

    @property
    def d_in(self) -> int:
        return self.descriptors.shape[2]

    @property
    def samples_per_id(self) -> int:
        counts = np.unique(self.labels, return_counts=True)[1]
        if len(counts) == 0 or counts.min() != counts.max():
            raise InconsistentDataError("identities have differing sample counts")
        return int(counts[0])

    def by_identity(self) -> Dict[int, np.ndarray]:
        """Identity -> sorted sample indices."""
        if self._index is None:
            order = np.argsort(self.labels, kind="stable")
            ids, starts = np.unique(self.labels[order], return_index=True)
            bounds = list(starts[1:]) + [len(order)]
            self._index = {int(u): order[s:e] for u, s, e in zip(ids, starts, bounds)}
        return self._index

    def sample(self, i: int) -> Sample:
        return Sample(int(self.labels[i]), self.descriptors[i])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.labels[idx], self.descriptors[idx])


@dataclass(frozen=True)
class SynthConfig:
    n_ids: int = 50
    samples_per_id: int = 8
    d_in: int = 16
    R: int = 4
    cluster_spread: float = 0.1
    hard_pair_fraction: float = 0.25
    twin_distance: float = 0.25
    seed: int = 0
    # descriptors per sample that carry the identity; the rest are background
    # (zero-mean noise of the same spread). None: all R.
    foreground: Optional[int] = None

    def __post_init__(self):
        if self.n_ids < 4:
            raise ConfigError("n_ids must be >= 4")
        if self.samples_per_id < 2:
            raise ConfigError("samples_per_id must be >= 2")
        if self.d_in < 1 or self.R < 1:
            raise ConfigError("d_in and R must be positive")
        if not 0.0 <= self.hard_pair_fraction <= 1.0:
            raise ConfigError("hard_pair_fraction must lie in [0, 1]")
        if self.cluster_spread < 0:
            raise ConfigError("cluster_spread must be non-negative")
        if self.foreground is not None and not 1 <= self.foreground <= self.R:
            raise ConfigError("foreground must lie in 1..R")
        # mean distance between two uniform points of the unit cube ~ sqrt(d/6)
        if not 0 < self.twin_distance < math.sqrt(self.d_in / 6.0):
            raise ConfigError("twin_distance must be positive and below the typical centre distance")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


class Layout(NamedTuple):
    centers: np.ndarray  # (n_ids, d_in), indexed by identity label
    twin_of: np.ndarray  # (n_ids,) partner label or -1


def _place_centers(cfg: SynthConfig, rng: RandomSource) -> Layout:
    n_pairs = int(math.floor(cfg.hard_pair_fraction * cfg.n_ids / 2.0))
    min_sep = SEPARATION_FACTOR * cfg.twin_distance
    slots = []  # (center, partner slot or -1)

    def far_enough(c, skip=-1):
        return all(np.linalg.norm(c - o) > min_sep for k, (o, _) in enumerate(slots) if k != skip)

    def draw(make):
        for _ in range(MAX_PLACEMENT_TRIES):
            c = make()
            if far_enough(c):
                return c
        raise ConfigError("could not place identity centres; lower twin_distance or n_ids")

    for _ in range(n_pairs):
        a = draw(lambda: rng.uniform(0.0, 1.0, cfg.d_in))
        slots.append((a, len(slots) + 1))

        def twin():
            direction = rng.normal(size=cfg.d_in)
            return a + cfg.twin_distance * direction / np.linalg.norm(direction)

        for _ in range(MAX_PLACEMENT_TRIES):
            b = twin()
            if far_enough(b, skip=len(slots) - 1):
                break
        else:
            raise ConfigError("could not place a twin centre; lower twin_distance or n_ids")
        slots.append((b, len(slots) - 1))
    while len(slots) < cfg.n_ids:
        slots.append((draw(lambda: rng.uniform(0.0, 1.0, cfg.d_in)), -1))

    # shuffle so twins do not sit on adjacent labels
    perm = rng.permutation(cfg.n_ids)  # slot k -> label perm[k]
    centers = np.empty((cfg.n_ids, cfg.d_in))
    twin_of = np.full(cfg.n_ids, -1, dtype=np.int64)
    for k, (c, partner) in enumerate(slots):
        centers[perm[k]] = c
        if partner >= 0:
            twin_of[perm[k]] = perm[partner]
    return Layout(centers, twin_of)


def generate_with_layout(cfg: SynthConfig):
    rng = RandomSource(cfg.seed)
    layout = _place_centers(cfg, rng)
    labels = np.repeat(np.arange(cfg.n_ids, dtype=np.int64), cfg.samples_per_id)
    noise = rng.normal(0.0, cfg.cluster_spread, size=(len(labels), cfg.R, cfg.d_in))
    descriptors = layout.centers[labels][:, None, :] + noise
    if cfg.foreground is not None and cfg.foreground < cfg.R:
        for i in range(len(labels)):
            background = rng.permutation(cfg.R)[cfg.foreground:]
            descriptors[i, background] = noise[i, background]
    return Dataset(labels, descriptors), layout


def generate(cfg: SynthConfig) -> Dataset:
    """Identity centres uniform in the unit cube, twins at ``twin_distance`` from a
    partner, every descriptor = centre + isotropic Gaussian noise.

    With ``cfg.foreground = k < R`` only k randomly placed descriptors of each
    sample sit on the identity centre; the others are centred on the origin.
    """
    return generate_with_layout(cfg)[0]


def center_distances(layout: Layout) -> np.ndarray:
    return np.sqrt(pairwise_distances(layout.centers))


# --- file I/O -------------------------------------------------------------

def _header(n_ids, spi, d_in, R, records) -> bytes:
    return (f"{MAGIC} v={FORMAT_VERSION} n_ids={n_ids} samples_per_id={spi} "
            f"d_in={d_in} R={R} records={records}\n").encode("ascii")


def dataset_bytes(ds: Dataset) -> bytes:
    N, R, d_in = ds.descriptors.shape
    rec = np.zeros(N, dtype=np.dtype([("id", "<i8"), ("x", "<f8", (R * d_in,))]))
    rec["id"] = ds.labels
    rec["x"] = ds.descriptors.reshape(N, R * d_in)
    return _header(ds.n_ids, ds.samples_per_id, d_in, R, N) + rec.tobytes()


def save(path, ds: Dataset) -> None:
    atomic_write_bytes(path, dataset_bytes(ds))


def parse(data: bytes) -> Dataset:
    nl = data.find(b"\n")
    if nl < 0:
        raise TruncatedFileError("missing header line")
    fields = data[:nl].decode("ascii", errors="replace").split()
    if not fields or fields[0] != MAGIC:
        raise DatasetFormatError("not a dataset file")
    try:
        meta = dict(f.split("=", 1) for f in fields[1:])
        meta = {k: int(v) for k, v in meta.items()}
    except ValueError as exc:
        raise DatasetFormatError("malformed header") from exc
    if meta.get("v") != FORMAT_VERSION:
        raise VersionMismatchError(f"dataset format version {meta.get('v')} != {FORMAT_VERSION}")
    try:
        n_ids, spi, d_in, R, records = (meta[k] for k in ("n_ids", "samples_per_id", "d_in", "R", "records"))
    except KeyError as exc:
        raise DatasetFormatError(f"header lacks {exc}") from exc
    if min(d_in, R) < 1 or min(n_ids, spi, records) < 0:
        raise InconsistentDataError("non-positive dimensions in header")

    dtype = np.dtype([("id", "<i8"), ("x", "<f8", (R * d_in,))])
    body = data[nl + 1:]
    if len(body) < records * dtype.itemsize:
        raise TruncatedFileError(f"expected {records} records, file ends after "
                                 f"{len(body) // dtype.itemsize}")
    if len(body) > records * dtype.itemsize:
        raise InconsistentDataError("trailing bytes after the last record")
    if records != n_ids * spi:
        raise InconsistentDataError(f"records={records} but n_ids*samples_per_id={n_ids * spi}")
    rec = np.frombuffer(body, dtype=dtype, count=records)
    labels = rec["id"].astype(np.int64)
    ids, counts = np.unique(labels, return_counts=True)
    if len(ids) != n_ids or (len(counts) and (counts.min() != spi or counts.max() != spi)):
        raise InconsistentDataError(
            f"header says {n_ids} identities x {spi} samples, records hold {len(ids)} identities"
        )
    return Dataset(labels, rec["x"].astype(np.float64).reshape(records, R, d_in))


def load(path) -> Dataset:
    with open(path, "rb") as fh:
        return parse(fh.read())


def import_csv(path, R: int = 1) -> Dataset:
    """Read ``identity,v_1,...,v_k`` rows; each row's values are reshaped to (R, k/R)."""
    labels, rows = [], []
    with open(path, newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#"):
                continue
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError:
                if line_no == 1:  # header row
                    continue
                raise InconsistentDataError(f"line {line_no}: not numeric")
    if not rows:
        raise InconsistentDataError("no records in CSV")
    widths = {len(r) for r in rows}
    if len(widths) != 1 or next(iter(widths)) % R:
        raise InconsistentDataError("CSV rows have inconsistent widths")
    x = np.asarray(rows, dtype=np.float64)
    ds = Dataset(np.asarray(labels), x.reshape(len(rows), R, -1))
    ds.samples_per_id  # raises if unbalanced
    return ds


def split_queries(ds: Dataset, query_fraction: float, rng: RandomSource):
    """Per identity, move ``round(fraction * count)`` samples (at least one, leaving at
    least one) into the query set. Returns (query_idx, gallery_idx)."""
    if not 0.0 < query_fraction < 1.0:
        raise ConfigError("query fraction must lie strictly between 0 and 1")
    q_idx, g_idx = [], []
    for ident, idx in ds.by_identity().items():
        if len(idx) < 2:
            raise InconsistentDataError(f"identity {ident} needs >= 2 samples for a query split")
        n_q = min(max(1, int(round(query_fraction * len(idx)))), len(idx) - 1)
        perm = rng.permutation(idx)
        q_idx.extend(sorted(perm[:n_q]))
        g_idx.extend(sorted(perm[n_q:]))
    return np.asarray(q_idx, dtype=np.int64), np.asarray(g_idx, dtype=np.int64)

