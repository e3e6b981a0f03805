"""Adam, the piecewise learning-rate schedule and the training loop.

One iteration: pick the sampler for the epoch, build a P x K batch, embed it,
mine batch-hard triplets on ``f_M``, evaluate the weighted stage losses,
backpropagate and take an Adam step. Every iteration appends one JSON line to
the metrics log.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigError, NonFiniteError
from .losses import MarginSchedule, joint_loss
from .mining import (BatchSpec, GhisConfig, SamplerMode, batch_hard_triplets,
                     epoch_sampler_schedule, format_hard_sets, ghis_batch, ghis_groups,
                     mean_distance_matrix, random_pk_batch)
from .model import (ModelConfig, Params, backward_from_cache, forward_batch, init_params,
                    save_checkpoint)
from .numeric import RandomSource

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batches_per_epoch: Optional[int] = None  # None: ceil(N / (P*K))
    base_lr: float = 2e-4
    lr_breakpoint: int = 150
    beta1: float = 0.99
    beta2: float = 0.999
    eps: float = 1e-3
    P: int = 20
    K: int = 4
    g: int = 5
    q: int = 3
    use_ghis: bool = True
    k_probe: int = 4
    m0: float = 4.0
    margin_deltas: Tuple[float, ...] = (3.0, 3.0)
    lambdas: Tuple[float, ...] = (1.0, 1.0, 1.0)
    seed: int = 0
    checkpoint_every: int = 0  # 0: only at the end

    def __post_init__(self):
        for k in ("margin_deltas", "lambdas"):
            object.__setattr__(self, k, tuple(float(x) for x in getattr(self, k)))
        if self.epochs <= 0:
            raise ConfigError("epochs must be positive")
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be positive")
        if not 0 < self.lr_breakpoint <= self.epochs:
            raise ConfigError("lr_breakpoint must lie in 1..epochs")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1) or not self.eps > 0:
            raise ConfigError("Adam needs 0 < beta1, beta2 < 1 and eps > 0")
        if self.batches_per_epoch is not None and self.batches_per_epoch < 1:
            raise ConfigError("batches_per_epoch must be positive")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if len(self.lambdas) != len(self.margin_deltas) + 1:
            raise ConfigError("need one lambda per stage (len(margin_deltas) + 1)")
        self.batch_spec, self.ghis, self.schedule  # validate eagerly

    @property
    def batch_spec(self) -> BatchSpec:
        return BatchSpec(self.P, self.K)

    @property
    def ghis(self) -> GhisConfig:
        return GhisConfig(self.g, self.q)

    @property
    def schedule(self) -> MarginSchedule:
        return MarginSchedule(self.m0, self.margin_deltas)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["margin_deltas"] = list(d["margin_deltas"])
        d["lambdas"] = list(d["lambdas"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def lr_at(t: int, cfg: TrainConfig) -> float:
    """Learning rate for 1-based epoch ``t``: constant up to the breakpoint, then
    decaying exponentially to ``base_lr * 1e-3`` at the final epoch."""
    if not 1 <= t <= cfg.epochs:
        raise ValueError(f"epoch {t} outside 1..{cfg.epochs}")
    if t <= cfg.lr_breakpoint:
        return cfg.base_lr
    return cfg.base_lr * 10.0 ** (-3.0 * (t - cfg.lr_breakpoint) / (cfg.epochs - cfg.lr_breakpoint))


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: Params) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params: Params, grads: Params, state: OptimizerState, lr: float,
              cfg: TrainConfig) -> Tuple[Params, OptimizerState]:
    """Bias-corrected Adam update. Returns new params and state; inputs are untouched."""
    if list(grads) != list(params):
        raise ConfigError("gradient names do not match parameter names")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in {name}")
    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        new_p[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        new_m[name] = m
        new_v[name] = v
    return new_p, OptimizerState(new_m, new_v, t)


@dataclass
class TrainResult:
    params: Params
    initial_params: Params
    metrics: List[dict] = field(default_factory=list)


def metrics_line(row: dict) -> str:
    return json.dumps(row, separators=(",", ":")) + "\n"


def batches_per_epoch(n_samples: int, cfg: TrainConfig) -> int:
    if cfg.batches_per_epoch is not None:
        return cfg.batches_per_epoch
    return max(1, math.ceil(n_samples / cfg.batch_spec.size))


def train(dataset, model_cfg: ModelConfig, cfg: TrainConfig, checkpoint_path=None,
          metrics_path=None, dry_run: bool = False, hard_set_log: Optional[Callable[[str], None]] = None
          ) -> TrainResult:
    """Train from scratch; deterministic given (dataset, configs).

    ``checkpoint_path`` is rewritten every ``cfg.checkpoint_every`` epochs and at
    the end; ``metrics_path`` receives one JSON line per iteration. With
    ``dry_run`` only the initial checkpoint is written.
    """
    if len(cfg.lambdas) != model_cfg.M + 1:
        raise ConfigError(f"model has M={model_cfg.M} shift stages but the margin schedule "
                          f"has {len(cfg.margin_deltas)}")
    if dataset.d_in != model_cfg.d_in:
        raise ConfigError(f"dataset d_in={dataset.d_in} but model d_in={model_cfg.d_in}")
    spec, ghis_cfg, sched = cfg.batch_spec, cfg.ghis, cfg.schedule
    if dataset.n_ids < spec.P:
        raise ConfigError(f"P={spec.P} exceeds the {dataset.n_ids} identities in the dataset")
    if cfg.use_ghis:
        ghis_cfg.validate(dataset.n_ids, spec)

    root = RandomSource(cfg.seed)
    params = init_params(model_cfg, root.child(0))
    rng = root.child(1)
    result = TrainResult(params=params, initial_params=params)
    if dry_run:
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, params, model_cfg)
        return result

    n_batches = batches_per_epoch(len(dataset), cfg)
    state = OptimizerState.zeros(params)
    metrics_fh = open(metrics_path, "w") if metrics_path is not None else None
    try:
        step = 0
        for epoch in range(cfg.epochs):
            mode = epoch_sampler_schedule(epoch) if cfg.use_ghis else SamplerMode.RANDOM
            groups = None
            if mode is SamplerMode.GHIS:
                dbar = mean_distance_matrix(dataset, params, model_cfg, cfg.k_probe, rng)
                groups = ghis_groups(dbar, ghis_cfg, rng)
                if hard_set_log is not None:
                    hard_set_log(f"# epoch {epoch}\n" + format_hard_sets(groups))
            lr = lr_at(epoch + 1, cfg)
            for _ in range(n_batches):
                if groups is None:
                    idx = random_pk_batch(dataset, spec, rng)
                else:
                    idx = ghis_batch(groups, spec, ghis_cfg, dataset, rng, fill_random=True)
                emb = forward_batch(params, model_cfg, dataset.descriptors[idx], keep_cache=True)
                triplets = batch_hard_triplets(emb.f[:, -1, :], dataset.labels[idx])
                report, upstream = joint_loss(emb, triplets, sched, cfg.lambdas)
                if not math.isfinite(report.total):
                    raise NonFiniteError(f"non-finite loss at epoch {epoch}, iteration {step}")
                grads = backward_from_cache(params, model_cfg, emb, upstream)
                params, state = adam_step(params, grads, state, lr, cfg)
                row = {"epoch": epoch, "iter": step, "sampler": mode.value, "lr": lr,
                       **report.as_dict()}
                result.metrics.append(row)
                if metrics_fh is not None:
                    metrics_fh.write(metrics_line(row))
                step += 1
            if checkpoint_path is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, params, model_cfg)
            if metrics_fh is not None:
                metrics_fh.flush()
            log.debug("epoch %d %s lr=%.3g loss=%.4f", epoch, mode.value, lr, row["total"])
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    result.params = params
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params, model_cfg)
    return result


# --- configuration document -------------------------------------------------

TOP_LEVEL_KEYS = ("synth", "model", "train")


def parse_config(doc: dict):
    """Split a config document into (synth dict or None, model dict, TrainConfig).

    The model section may omit ``d_in``; it then comes from the dataset.
    """
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - set(TOP_LEVEL_KEYS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    model = dict(doc.get("model", {}))
    unknown = set(model) - {f.name for f in dataclasses.fields(ModelConfig)}
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    return doc.get("synth"), model, TrainConfig.from_dict(doc.get("train", {}))


def load_config(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(doc)


def model_config_from(model: dict, d_in: int) -> ModelConfig:
    d = dict(model)
    d.setdefault("d_in", d_in)
    return ModelConfig.from_dict(d)
