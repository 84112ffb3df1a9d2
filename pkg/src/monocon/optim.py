"""Training protocol: AdamW, cosine annealing, global-norm clipping,
frozen-encoder warmup, per-group learning rates and early stopping."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import models as M
from .data import LabeledDataset, split_gallery_query
from .errors import ConfigError, DataError, DimensionError
from .metrics import EvalSplit, knn_accuracy, recall_at_k
from .objective import supcon_loss
from .spectra import effective_dim, pca_fit
from .tensor import backward

log = logging.getLogger(__name__)

EMBEDDING_KINDS = ("encoder_out", "head_raw", "head_normalized")


@dataclass
class TrainConfig:
    lr_encoder: float = 2e-4
    lr_head: float = 2e-4
    warmup_lr_head: float = 1e-4
    temperature: float = 0.1
    batch_size: int = 256
    max_epochs: int = 200
    warmup_epochs: int = 10
    patience: int = 20
    validate_every: int = 5
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    seed: int = 42
    cosine_floor: float = 0.0
    metric: str = "knn"  # "knn" or "recall@1"
    knn_k: int = 5
    loss_reduction: str = "mean"
    gallery_fraction: float = 0.9
    d_eff_threshold: float = 0.99
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.validate()

    def validate(self):
        for name in ("lr_encoder", "lr_head", "warmup_lr_head", "temperature", "clip_norm"):
            v = getattr(self, name)
            if not v > 0:
                raise ConfigError(f"{name} must be positive, got {v}")
        if self.weight_decay < 0 or self.cosine_floor < 0:
            raise ConfigError("weight_decay and cosine_floor must be non-negative")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.max_epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.validate_every < 1:
            raise ConfigError("validate_every must be at least 1")
        if self.patience < self.validate_every:
            raise ConfigError(f"patience ({self.patience}) must be >= validate_every ({self.validate_every})")
        if self.metric not in ("knn", "recall@1"):
            raise ConfigError(f"unknown validation metric {self.metric!r}")
        if self.loss_reduction not in ("mean", "sum"):
            raise ConfigError(f"unknown loss reduction {self.loss_reduction!r}")


def train_config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["betas"] = list(cfg.betas)
    if math.isinf(d["clip_norm"]):
        d["clip_norm"] = "inf"
    return d


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    if d.get("clip_norm") == "inf":
        d["clip_norm"] = math.inf
    known = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in d.items() if k in known})


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    steps: list[int]

    @classmethod
    def zeros_like(cls, arrays) -> "OptimizerState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays],
                   [0] * len(arrays))


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState,
               lr: float | list[float], weight_decay: float | list[float],
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               active: list[bool] | None = None) -> list[np.ndarray]:
    """One decoupled-weight-decay Adam update; returns new parameter arrays.

    ``lr`` and ``weight_decay`` may be given per parameter. Inactive
    parameters are returned untouched and their state is not advanced.
    """
    n = len(params)
    if len(grads) != n or len(state.m) != n:
        raise DimensionError(f"{n} params, {len(grads)} grads, {len(state.m)} state slots")
    lrs = lr if isinstance(lr, (list, tuple)) else [lr] * n
    wds = weight_decay if isinstance(weight_decay, (list, tuple)) else [weight_decay] * n
    active = active or [True] * n
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if not active[i]:
            out.append(p)
            continue
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise DimensionError(f"param {i}: shape {p.shape} vs grad {g.shape}")
        state.steps[i] += 1
        t = state.steps[i]
        state.m[i] = beta1 * state.m[i] + (1 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1 - beta2) * g * g
        m_hat = state.m[i] / (1 - beta1**t)
        v_hat = state.v[i] / (1 - beta2**t)
        out.append(p - lrs[i] * (m_hat / (np.sqrt(v_hat) + eps) + wds[i] * p))
    return out


def cosine_lr(base_lr: float, epoch: float, max_epochs: int, floor: float = 0.0) -> float:
    if max_epochs <= 0:
        raise ConfigError("max_epochs must be positive")
    if not 0 <= epoch <= max_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {max_epochs}]")
    return floor + 0.5 * (base_lr - floor) * (1 + math.cos(math.pi * epoch / max_epochs))


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale all gradients together so their joint L2 norm is at most ``max_norm``.

    Returns the (possibly scaled) gradients and the norm before clipping.
    """
    if not max_norm > 0:
        raise ConfigError("max_norm must be positive")
    norm = math.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for g in grads))
    if norm > max_norm:
        s = max_norm / norm
        return [g * s for g in grads], norm
    return list(grads), norm


def make_batches(n: int, batch_size: int, seed: int, epoch: int, labels=None) -> list[np.ndarray]:
    """Shuffled index batches, deterministic in ``(seed, epoch)``.

    The last short batch is dropped when it holds no same-label pair (any
    batch of fewer than 2 rows when ``labels`` is not given).
    """
    if batch_size < 2:
        raise ConfigError("batch_size must be at least 2")
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if batches and len(batches[-1]) < batch_size:
        last = batches[-1]
        if labels is None:
            keep = len(last) >= 2
        else:
            lab = np.asarray(labels)[last]
            keep = len(np.unique(lab)) < len(lab)
        if not keep:
            batches.pop()
    return batches


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    snapshots: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_metric: float | None = None
    stopped_epoch: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainLog":
        return cls(**d)

    def jsonl_records(self) -> list[dict]:
        snaps = {s["epoch"]: s for s in self.snapshots}
        rows = []
        for e in self.epochs:
            rec = dict(e)
            if e["epoch"] in snaps:
                rec["validation"] = snaps[e["epoch"]]
            rows.append(rec)
        return rows

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.jsonl_records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def snapshot(params: M.ModelParams, gallery: LabeledDataset, query: LabeledDataset,
             config: TrainConfig) -> dict:
    """Validation metric plus d_eff of all three embeddings on the gallery."""
    g_out = {k: M.embed(gallery.features, params, k) for k in EMBEDDING_KINDS}
    q_emb = M.embed(query.features, params, "head_normalized")
    split = EvalSplit(g_out["head_normalized"], gallery.labels, q_emb, query.labels)
    if config.metric == "knn":
        metric = knn_accuracy(split, config.knn_k)
    else:
        metric = recall_at_k(split, 1)
    d_eff = {k: effective_dim(pca_fit(v), config.d_eff_threshold) for k, v in g_out.items()}
    return {"metric": metric, "d_eff": d_eff}


@dataclass
class FitResult:
    params: M.ModelParams  # best validation checkpoint
    log: TrainLog
    final_params: M.ModelParams
    gallery: LabeledDataset
    query: LabeledDataset


def train_step(params: M.ModelParams, x: np.ndarray, y: np.ndarray, config: TrainConfig):
    """Forward, SupCon loss and backward on one batch.

    Returns ``(per-anchor-mean loss, Eq.-style sum loss, grads)`` with
    grads aligned to ``params.named_arrays()``.
    """
    leaves = M.param_leaves(params)
    out = M.forward_model(x, params, leaves)
    loss = supcon_loss(out["head_normalized"], y, config.temperature, config.loss_reduction)
    backward(loss)
    value = float(loss.value[0, 0])
    n_valid = _n_valid_anchors(y)
    if config.loss_reduction == "mean":
        mean, total = value, value * n_valid
    else:
        mean, total = value / n_valid, value
    return mean, total, [leaf.grad for leaf in leaves]


def _n_valid_anchors(y: np.ndarray) -> int:
    _, inv, counts = np.unique(y, return_inverse=True, return_counts=True)
    return int(np.sum(counts[inv] > 1))


def fit(dataset: LabeledDataset, params: M.ModelParams, config: TrainConfig,
        validation: tuple[LabeledDataset, LabeledDataset] | None = None,
        log_path=None, metric_fn: Callable[[M.ModelParams], float] | None = None) -> FitResult:
    """Train ``params`` on ``dataset`` with warmup, cosine annealing and early stopping.

    Without ``validation`` the dataset is split (stratified, by seed) into a
    gallery used for training and a held-out query set; k-NN queries run
    against the gallery. Snapshots are taken every ``validate_every``
    epochs and after the last epoch. Warmup epochs come first and do not
    count toward ``max_epochs``; the cosine schedule spans the main phase.
    ``metric_fn`` replaces the built-in validation metric.
    """
    config.validate()
    if len(dataset) == 0:
        raise DataError("empty dataset")
    if validation is None:
        gallery, query = split_gallery_query(dataset, config.gallery_fraction, config.seed)
    else:
        gallery, query = validation
    if len(query) == 0:
        raise DataError("validation query set is empty")
    if config.batch_size > len(gallery):
        raise ConfigError(f"batch_size {config.batch_size} exceeds training set size {len(gallery)}")
    if gallery.dim != params.encoder_layers[0].in_dim:
        raise DimensionError(f"data width {gallery.dim} != model input {params.encoder_layers[0].in_dim}")

    params = params.copy()
    names = [n for n, _ in params.named_arrays()]
    is_enc = [n.startswith("encoder.") for n in names]
    wds = [config.weight_decay if n.endswith(".weight") else 0.0 for n in names]
    state = OptimizerState.zeros_like([a for _, a in params.named_arrays()])
    b1, b2 = config.betas
    tlog = TrainLog()
    best_params = params.copy()
    x_all, y_all = gallery.features, gallery.labels
    total_epochs = config.warmup_epochs + config.max_epochs

    def validate(epoch: int) -> bool:
        snap = snapshot(params, gallery, query, config)
        if metric_fn is not None:
            snap["metric"] = float(metric_fn(params))
        snap["epoch"] = epoch
        tlog.snapshots.append(snap)
        nonlocal best_params
        if tlog.best_metric is None or snap["metric"] > tlog.best_metric:
            tlog.best_metric, tlog.best_epoch = snap["metric"], epoch
            best_params = params.copy()
            return False
        in_main = epoch > config.warmup_epochs
        return in_main and epoch - max(tlog.best_epoch, config.warmup_epochs) >= config.patience

    for epoch in range(1, total_epochs + 1):
        warm = epoch <= config.warmup_epochs
        if warm:
            lr_enc, lr_head = 0.0, config.warmup_lr_head
        else:
            t = epoch - config.warmup_epochs - 1
            lr_enc = cosine_lr(config.lr_encoder, t, config.max_epochs, config.cosine_floor)
            lr_head = cosine_lr(config.lr_head, t, config.max_epochs, config.cosine_floor)
        active = [not (warm and e) for e in is_enc]
        lrs = [lr_enc if e else lr_head for e in is_enc]
        losses, sums = [], []
        for idx in make_batches(len(gallery), config.batch_size, config.seed, epoch, y_all):
            mean, total, grads = train_step(params, x_all[idx], y_all[idx], config)
            losses.append(mean)
            sums.append(total)
            if not any(active):
                continue
            grads = [g if a else np.zeros_like(g) for g, a in zip(grads, active)]
            if math.isfinite(config.clip_norm):
                grads, _ = clip_grad_norm(grads, config.clip_norm)
            arrays = [a for _, a in params.named_arrays()]
            new = adamw_step(arrays, grads, state, lrs, wds, b1, b2, config.eps, active)
            params = params.replace_arrays(new)
        rec = {"epoch": epoch, "phase": "warmup" if warm else "main",
               "loss": float(np.mean(losses)), "loss_sum": float(np.mean(sums)),
               "lr_encoder": lr_enc, "lr_head": lr_head}
        tlog.epochs.append(rec)
        log.debug("epoch %d %s loss %.5f", epoch, rec["phase"], rec["loss"])
        if epoch % config.validate_every == 0 or epoch == total_epochs:
            if validate(epoch):
                tlog.stopped_epoch = epoch
                log.info("early stop at epoch %d (best %d)", epoch, tlog.best_epoch)
                break
    if log_path is not None:
        tlog.write_jsonl(log_path)
    return FitResult(best_params, tlog, params, gallery, query)
