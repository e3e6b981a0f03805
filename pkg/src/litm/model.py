"""Descriptor-bag embedding network with multi-level feature shifts.

Each sample is a bag of R local descriptors. Every descriptor runs through the
same ReLU MLP; after each hidden layer the R activation vectors are pooled
(element-wise max or mean) into one vector per level. The deepest pooled
level feeds an affine base head giving ``f_0``. Shift head ``j`` (affine,
ReLU, affine) reads a shallower pooled level and produces a shift vector, and
the stage embeddings accumulate as ``f_j = f_{j-1} + shift_j``.

Parameters live in a plain ``dict[str, np.ndarray]`` whose key order is the
fixed enumeration order used by checkpoints and flat vectors:

    backbone.{l}.weight  (fan_in, hidden_dims[l])     l = 0 .. L-1
    backbone.{l}.bias    (hidden_dims[l],)
    base.weight          (hidden_dims[base_source], d_emb)
    base.bias            (d_emb,)
    shift.{j}.weight1    (hidden_dims[src_j], width_j)  j = 1 .. M
    shift.{j}.bias1      (width_j,)
    shift.{j}.weight2    (width_j, d_emb)
    shift.{j}.bias2      (d_emb,)

Layers compute ``x @ W + b``.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from ._io import atomic_write_bytes
from .errors import CheckpointError, ConfigError, DimensionError
from .numeric import RandomSource

GMP = "GMP"
GAP = "GAP"
POOLING_MODES = (GMP, GAP)

Params = Dict[str, np.ndarray]


@dataclass(frozen=True)
class Sample:
    identity: int
    descriptors: np.ndarray  # (R, d_in)

    def __post_init__(self):
        desc = np.asarray(self.descriptors, dtype=np.float64)
        if desc.ndim != 2 or desc.shape[0] < 1:
            raise DimensionError("a sample needs R >= 1 descriptors of equal dimension")
        if self.identity < 0:
            raise ValueError("identity labels are non-negative")
        object.__setattr__(self, "descriptors", desc)


@dataclass(frozen=True)
class ModelConfig:
    d_in: int
    hidden_dims: Tuple[int, ...] = (32, 32, 32)
    d_emb: int = 32
    M: int = 2
    pooling: str = GMP
    # hidden-layer index (0-based) feeding shift head j+1; default walks
    # upward from the layer just below the base source
    stage_sources: Optional[Tuple[int, ...]] = None
    base_source: Optional[int] = None
    # hidden width of each shift head; default keeps the source width
    shift_widths: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        hidden = tuple(int(h) for h in self.hidden_dims)
        object.__setattr__(self, "hidden_dims", hidden)
        if self.d_in < 1 or self.d_emb < 1 or not hidden or min(hidden) < 1:
            raise ConfigError("d_in, d_emb and every hidden width must be positive")
        if self.M < 0:
            raise ConfigError("M must be >= 0")
        if self.pooling not in POOLING_MODES:
            raise ConfigError(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")
        L = len(hidden)
        base = L - 1 if self.base_source is None else int(self.base_source)
        if not 0 <= base < L:
            raise ConfigError(f"base_source {base} is not a hidden layer index")
        object.__setattr__(self, "base_source", base)

        if self.stage_sources is None:
            sources = tuple(base - j for j in range(1, self.M + 1))
            if any(s < 0 for s in sources):
                raise ConfigError(
                    f"M={self.M} shift stages need more than {L} hidden layers; set stage_sources"
                )
        else:
            sources = tuple(int(s) for s in self.stage_sources)
        if len(sources) != self.M:
            raise ConfigError(f"stage_sources must list {self.M} layers, got {len(sources)}")
        if any(not 0 <= s < L for s in sources):
            raise ConfigError(f"stage_sources {sources} reference missing hidden layers")
        object.__setattr__(self, "stage_sources", sources)

        if self.shift_widths is None:
            widths = tuple(hidden[s] for s in sources)
        else:
            widths = tuple(int(w) for w in self.shift_widths)
        if len(widths) != self.M or any(w < 1 for w in widths):
            raise ConfigError("shift_widths must give one positive width per stage")
        object.__setattr__(self, "shift_widths", widths)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("hidden_dims", "stage_sources", "shift_widths"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kw = dict(d)
        for k in ("hidden_dims", "stage_sources", "shift_widths"):
            if kw.get(k) is not None:
                kw[k] = tuple(kw[k])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def param_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {}
    fan_in = cfg.d_in
    for l, h in enumerate(cfg.hidden_dims):
        shapes[f"backbone.{l}.weight"] = (fan_in, h)
        shapes[f"backbone.{l}.bias"] = (h,)
        fan_in = h
    shapes["base.weight"] = (cfg.hidden_dims[cfg.base_source], cfg.d_emb)
    shapes["base.bias"] = (cfg.d_emb,)
    for j, (src, w) in enumerate(zip(cfg.stage_sources, cfg.shift_widths), start=1):
        shapes[f"shift.{j}.weight1"] = (cfg.hidden_dims[src], w)
        shapes[f"shift.{j}.bias1"] = (w,)
        shapes[f"shift.{j}.weight2"] = (w, cfg.d_emb)
        shapes[f"shift.{j}.bias2"] = (cfg.d_emb,)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def init_params(cfg: ModelConfig, rng: RandomSource) -> Params:
    """He-normal weights (std sqrt(2 / fan_in)) and zero biases, in enumeration order."""
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        if ".weight" in name:
            params[name] = rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


def flatten(params: Params) -> np.ndarray:
    return np.concatenate([np.ravel(v) for v in params.values()])


def unflatten(cfg: ModelConfig, vec: np.ndarray) -> Params:
    vec = np.asarray(vec, dtype=np.float64)
    out: Params = {}
    pos = 0
    for name, shape in param_shapes(cfg).items():
        n = int(np.prod(shape))
        if pos + n > vec.size:
            raise DimensionError("flat parameter vector is too short")
        out[name] = vec[pos:pos + n].reshape(shape).copy()
        pos += n
    if pos != vec.size:
        raise DimensionError("flat parameter vector is too long")
    return out


def check_params(params: Params, cfg: ModelConfig) -> None:
    shapes = param_shapes(cfg)
    if list(params) != list(shapes):
        raise DimensionError("parameter names/order do not match the model config")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise DimensionError(f"{name}: expected shape {shape}, got {params[name].shape}")


def _mean_pool(h: np.ndarray, axis: int) -> np.ndarray:
    # rounding can push a float mean an ulp above the maximum; clamp so the
    # pooled value always lies inside the range of its inputs
    return np.minimum(h.mean(axis=axis), h.max(axis=axis))


def pool(vectors, mode: str) -> np.ndarray:
    """Pool a list of equal-length vectors: GMP = element-wise max, GAP = mean."""
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("pool needs a non-empty list of equal-length vectors")
    if mode == GMP:
        return arr.max(axis=0)
    if mode == GAP:
        return _mean_pool(arr, 0)
    raise ValueError(f"unknown pooling mode {mode!r}")


@dataclass
class StageEmbeddings:
    """``f[0]`` is the base embedding, ``f[j] = f[j-1] + shifts[j-1]``."""

    f: np.ndarray       # (M+1, d_emb)
    shifts: np.ndarray  # (M, d_emb)

    @property
    def final(self) -> np.ndarray:
        return self.f[-1]


@dataclass
class BatchEmbeddings:
    f: np.ndarray       # (B, M+1, d_emb)
    shifts: np.ndarray  # (B, M, d_emb)
    cache: Optional[dict] = field(default=None, repr=False)

    def __len__(self):
        return self.f.shape[0]

    def sample(self, i: int) -> StageEmbeddings:
        return StageEmbeddings(self.f[i].copy(), self.shifts[i].copy())

    def stage(self, j: int) -> np.ndarray:
        return self.f[:, j, :]


def _as_bag_batch(batch, d_in: int) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        X = np.asarray(batch, dtype=np.float64)
    else:
        X = np.stack([s.descriptors for s in batch])
    if X.ndim != 3:
        raise DimensionError(f"expected a (B, R, d_in) descriptor batch, got shape {X.shape}")
    if X.shape[2] != d_in:
        raise DimensionError(f"descriptor dimension {X.shape[2]} != model d_in {d_in}")
    if X.shape[1] < 1:
        raise DimensionError("every sample needs at least one descriptor")
    return X


def forward_batch(params: Params, cfg: ModelConfig, batch, keep_cache: bool = False) -> BatchEmbeddings:
    """Embed a batch given as a list of Samples or a (B, R, d_in) array with shared R."""
    X = _as_bag_batch(batch, cfg.d_in)
    B, R, _ = X.shape
    pre, acts, pooled, argmax = [], [], [], []
    h = X
    for l in range(len(cfg.hidden_dims)):
        z = h @ params[f"backbone.{l}.weight"] + params[f"backbone.{l}.bias"]
        h = np.maximum(z, 0.0)
        pre.append(z)
        acts.append(h)
        if cfg.pooling == GMP:
            idx = np.argmax(h, axis=1)  # first maximum wins ties
            argmax.append(idx)
            pooled.append(np.take_along_axis(h, idx[:, None, :], axis=1)[:, 0, :])
        else:
            pooled.append(_mean_pool(h, 1))

    f0 = pooled[cfg.base_source] @ params["base.weight"] + params["base.bias"]
    shifts = np.empty((B, cfg.M, cfg.d_emb))
    shift_pre = []
    for j, src in enumerate(cfg.stage_sources, start=1):
        u = pooled[src] @ params[f"shift.{j}.weight1"] + params[f"shift.{j}.bias1"]
        a = np.maximum(u, 0.0)
        shifts[:, j - 1] = a @ params[f"shift.{j}.weight2"] + params[f"shift.{j}.bias2"]
        shift_pre.append((u, a))

    f = np.empty((B, cfg.M + 1, cfg.d_emb))
    f[:, 0] = f0
    for j in range(1, cfg.M + 1):
        f[:, j] = f[:, j - 1] + shifts[:, j - 1]

    cache = None
    if keep_cache:
        cache = dict(X=X, pre=pre, acts=acts, pooled=pooled, argmax=argmax, shift_pre=shift_pre)
    return BatchEmbeddings(f=f, shifts=shifts, cache=cache)


def forward(params: Params, cfg: ModelConfig, s: Sample) -> StageEmbeddings:
    """Stage embeddings of a single sample."""
    return forward_batch(params, cfg, [s]).sample(0)


def embed(params: Params, cfg: ModelConfig, descriptors: np.ndarray, stage: int = -1,
          chunk: int = 512) -> np.ndarray:
    """Stage-``stage`` embeddings (default ``f_M``) for an (N, R, d_in) array, in chunks."""
    out = []
    for start in range(0, len(descriptors), chunk):
        out.append(forward_batch(params, cfg, descriptors[start:start + chunk]).f[:, stage, :])
    if not out:
        return np.zeros((0, cfg.d_emb))
    return np.concatenate(out)


def backward_from_cache(params: Params, cfg: ModelConfig, emb: BatchEmbeddings,
                        upstream: np.ndarray) -> Params:
    """Gradient of ``sum(upstream * emb.f)`` with respect to every parameter."""
    if emb.cache is None:
        raise ValueError("forward_batch(..., keep_cache=True) is required before backward")
    G = np.asarray(upstream, dtype=np.float64)
    if G.shape != emb.f.shape:
        raise DimensionError(f"upstream shape {G.shape} != embedding shape {emb.f.shape}")
    c = emb.cache
    X, pre, acts, pooled = c["X"], c["pre"], c["acts"], c["pooled"]
    B, R, _ = X.shape
    L = len(cfg.hidden_dims)
    grads: Params = {}

    # f_j = f_0 + shift_1 + ... + shift_j, so f_0 collects every stage's
    # gradient and shift_k collects the gradients of stages k..M
    g_shift = np.cumsum(G[:, ::-1, :], axis=1)[:, ::-1, :]
    g_f0 = g_shift[:, 0, :]
    g_pooled = [np.zeros_like(p) for p in pooled]

    grads["base.weight"] = pooled[cfg.base_source].T @ g_f0
    grads["base.bias"] = g_f0.sum(axis=0)
    g_pooled[cfg.base_source] += g_f0 @ params["base.weight"].T

    for j, src in enumerate(cfg.stage_sources, start=1):
        u, a = c["shift_pre"][j - 1]
        gs = g_shift[:, j, :]
        ga = gs @ params[f"shift.{j}.weight2"].T
        gu = ga * (u > 0)
        grads[f"shift.{j}.weight1"] = pooled[src].T @ gu
        grads[f"shift.{j}.bias1"] = gu.sum(axis=0)
        grads[f"shift.{j}.weight2"] = a.T @ gs
        grads[f"shift.{j}.bias2"] = gs.sum(axis=0)
        g_pooled[src] += gu @ params[f"shift.{j}.weight1"].T

    g_h = np.zeros_like(acts[-1])
    for l in range(L - 1, -1, -1):
        if cfg.pooling == GMP:
            idx = c["argmax"][l]
            g_pool_full = np.zeros_like(acts[l])
            np.put_along_axis(g_pool_full, idx[:, None, :], g_pooled[l][:, None, :], axis=1)
        else:
            g_pool_full = np.broadcast_to(g_pooled[l][:, None, :] / R, acts[l].shape)
        g_h = g_h + g_pool_full
        g_z = g_h * (pre[l] > 0)
        below = X if l == 0 else acts[l - 1]
        g_z2 = g_z.reshape(B * R, -1)
        grads[f"backbone.{l}.weight"] = below.reshape(B * R, -1).T @ g_z2
        grads[f"backbone.{l}.bias"] = g_z2.sum(axis=0)
        if l > 0:
            g_h = g_z @ params[f"backbone.{l}.weight"].T

    return {name: grads[name] for name in param_shapes(cfg)}


def backward(params: Params, cfg: ModelConfig, batch, upstream) -> Params:
    """Exact gradients of ``<upstream, stage embeddings>`` summed over the batch.

    ``upstream`` has shape (B, M+1, d_emb). GMP routes each element's gradient
    to the lowest-index descriptor attaining the maximum; GAP splits it evenly.
    """
    emb = forward_batch(params, cfg, batch, keep_cache=True)
    return backward_from_cache(params, cfg, emb, upstream)


CHECKPOINT_MAGIC = b"LITMCKPT"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(params: Params, cfg: ModelConfig) -> bytes:
    """Serialise as ``LITMCKPT <version>\\n``, one JSON line of ModelConfig, then every
    parameter as little-endian float64 in enumeration order."""
    check_params(params, cfg)
    header = CHECKPOINT_MAGIC + b" %d\n" % CHECKPOINT_VERSION
    cfg_line = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode() + b"\n"
    body = flatten(params).astype("<f8").tobytes()
    return header + cfg_line + body


def save_checkpoint(path, params: Params, cfg: ModelConfig) -> None:
    atomic_write_bytes(path, checkpoint_bytes(params, cfg))


def parse_checkpoint(data: bytes) -> Tuple[Params, ModelConfig]:
    try:
        head, rest = data.split(b"\n", 1)
        magic, version = head.split(b" ")
        cfg_line, body = rest.split(b"\n", 1)
    except ValueError as exc:
        raise CheckpointError("malformed checkpoint header") from exc
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    if int(version) != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {int(version)}")
    try:
        cfg = ModelConfig.from_dict(json.loads(cfg_line))
    except (json.JSONDecodeError, ConfigError) as exc:
        raise CheckpointError(f"bad model config in checkpoint: {exc}") from exc
    n = param_count(cfg)
    if len(body) != 8 * n:
        raise CheckpointError(f"expected {n} parameters, found {len(body) / 8:g}")
    vec = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return unflatten(cfg, vec), cfg


def load_checkpoint(path) -> Tuple[Params, ModelConfig]:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def zero_like(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def describe(cfg: ModelConfig) -> Sequence[str]:
    lines = [f"backbone {cfg.d_in} -> " + " -> ".join(map(str, cfg.hidden_dims)) + f" ({cfg.pooling})",
             f"f_0 from hidden layer {cfg.base_source} -> {cfg.d_emb}"]
    for j, (src, w) in enumerate(zip(cfg.stage_sources, cfg.shift_widths), start=1):
        lines.append(f"shift {j} from hidden layer {src} (width {w}) -> {cfg.d_emb}")
    return lines
