"""Optimization: AdamW, plateau LR decay, early stopping and the fit loops.

Two models are trained here: the prototype head (optionally together with the
trainable last stage of a :class:`~protoxct.encoder.CompactEncoder`) and a
single-logit linear baseline head on the same embeddings.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .data import AugmentationPolicy, augment_batch, normalize_tiles
from .encoder import CompactEncoder, Standardizer, encode, encode_backward
from .head import AnchorSet, PrototypeModel, init_prototypes
from .loss import TERMS, LossWeights, class_weights, total_loss
from .numerics import clip_global_norm, global_norm, make_rng, sigmoid, softmax

__all__ = [
    "ParamGroup",
    "OptimizerState",
    "ScheduleState",
    "TrainConfig",
    "SplitData",
    "TrainingLog",
    "TrainingDiverged",
    "LinearHead",
    "adamw_step",
    "plateau_step",
    "early_stop",
    "warmup_encoder",
    "fit_prototype_model",
    "fit_baseline_head",
    "validation_loss",
]


@dataclass
class ParamGroup:
    names: list[str]
    lr: float
    weight_decay: float = 0.0


@dataclass
class OptimizerState:
    groups: list[ParamGroup]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def lrs(self) -> list[float]:
        return [g.lr for g in self.groups]


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimizerState):
    """One AdamW update; returns ``(new_params, state)``.

    Weight decay is decoupled: ``p <- p - lr * wd * p`` is applied on top of
    the bias-corrected Adam step and never enters the moment estimates.
    Parameters absent from ``grads`` are treated as having zero gradient.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    out = dict(params)
    for group in state.groups:
        if not group.lr > 0:
            raise ValueError("learning rate must be positive")
        for name in group.names:
            p = np.asarray(params[name], dtype=np.float64)
            g = grads.get(name)
            g = np.zeros_like(p) if g is None else np.asarray(g, dtype=np.float64)
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
            m = state.m.get(name, np.zeros_like(p))
            v = state.v.get(name, np.zeros_like(p))
            m = state.beta1 * m + (1.0 - state.beta1) * g
            v = state.beta2 * v + (1.0 - state.beta2) * g * g
            state.m[name], state.v[name] = m, v
            new = p - group.lr * group.weight_decay * p
            new = new - group.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
            out[name] = new
    return out, state


@dataclass
class ScheduleState:
    factor: float = 0.5
    patience: int = 10
    min_lr: float = 1e-7
    tol: float = 1e-6
    best: float = math.inf
    bad_epochs: int = 0


def plateau_step(metric: float, sched: ScheduleState, opt: OptimizerState) -> ScheduleState:
    """Halve every group's LR once ``patience`` epochs pass without improvement."""
    if metric < sched.best - sched.tol:
        sched.best = metric
        sched.bad_epochs = 0
    else:
        sched.bad_epochs += 1
    if sched.bad_epochs > sched.patience:
        for g in opt.groups:
            g.lr = max(g.lr * sched.factor, sched.min_lr)
        sched.bad_epochs = 0
    return sched


def early_stop(history, patience: int = 50, tol: float = 1e-6) -> tuple[bool, int]:
    """``(stop, best_epoch)`` for a validation-loss history.

    Stops once ``patience`` consecutive epochs fail to improve the running
    best by more than ``tol``; the best epoch is the earliest argmin.
    """
    h = np.asarray(history, dtype=np.float64)
    if h.size == 0:
        return False, -1
    best = math.inf
    since = 0
    for v in h:
        if v < best - tol:
            best = v
            since = 0
        else:
            since += 1
    return since >= patience, int(np.argmin(h))


@dataclass
class TrainConfig:
    lr_head: float = 5e-4
    lr_backbone: float = 5e-6
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    patience: int = 50
    sched_patience: int = 10
    sched_factor: float = 0.5
    min_lr: float = 1e-7
    batch_size: int = 8
    max_epochs: int = 200
    seed: int = 0
    augment: bool = True
    tau0: float = 1.0
    baseline_lr: float = 5e-5

    def __post_init__(self):
        if not (self.lr_head > 0 and self.lr_backbone > 0 and self.baseline_lr > 0):
            raise ValueError("learning rates must be positive")
        if self.patience < 1 or self.sched_patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class SplitData:
    """Training and validation inputs.

    Without an encoder, ``*_x`` hold standardized embeddings (n, D). With an
    encoder they hold windowed tiles (n, 64, 64) and ``standardizer`` maps
    raw encoder output into the prototype space.
    """

    train_x: np.ndarray
    train_y: np.ndarray
    train_ids: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    standardizer: Standardizer | None = None


@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)
    step_grad_norms: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    @property
    def val_history(self) -> list[float]:
        return [r["val_total"] for r in self.rows]

    def columns(self) -> list[str]:
        return ["epoch", "lr_head", "lr_backbone", "train_total", "val_total", *(f"val_{t}" for t in TERMS)]

    def write_csv(self, path) -> None:
        cols = self.columns() if not self.rows or "val_cls" in self.rows[0] else list(self.rows[0])
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(cols)
            for r in self.rows:
                wr.writerow([r[c] if isinstance(r[c], int) else repr(float(r[c])) for c in cols])


class TrainingDiverged(RuntimeError):
    def __init__(self, message, model=None, log=None):
        super().__init__(message)
        self.model = model
        self.log = log


# encoder plumbing -----------------------------------------------------------------


def _embed(encoder: CompactEncoder, tiles, standardizer: Standardizer) -> np.ndarray:
    raw = encode(encoder, normalize_tiles(tiles)).X
    return (raw - standardizer.mean) / standardizer.scale


def _prefix_all(encoder: CompactEncoder, tiles, batch_size: int = 256) -> np.ndarray:
    t = normalize_tiles(tiles)
    return np.concatenate([encoder.prefix(t[i:i + batch_size]) for i in range(0, t.shape[0], batch_size)])


def _embed_from_prefix(encoder: CompactEncoder, pre, standardizer: Standardizer, batch_size: int = 256) -> np.ndarray:
    # same chunking as encode(), so embeddings match it bit for bit
    raw = np.concatenate(
        [encoder.forward(pre[i:i + batch_size], start=encoder.frozen_stages) for i in range(0, pre.shape[0], batch_size)]
    )
    return (raw - standardizer.mean) / standardizer.scale


def _standardized(X):
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return (X - mu) / sd, mu, sd


def warmup_encoder(
    encoder: CompactEncoder,
    tiles,
    targets,
    n_classes: int,
    epochs: int = 8,
    seed: int = 0,
    lr: float = 3e-3,
    batch_size: int = 32,
    policy: AugmentationPolicy | None = None,
    probe: str = "distance",
) -> CompactEncoder:
    """Brief supervised pre-training of every encoder stage.

    Run before the prefix is frozen; ``targets`` are integer class ids, and
    each sample's cross-entropy is weighted inversely to its class count. The
    ``"distance"`` probe scores each class by ``-exp(s) * ||u - c_k||^2``
    with learnable centers ``c_k`` and log-scale ``s``, where ``u`` is the
    embedding standardized with statistics refreshed at the start of every
    epoch. That pulls every class into a compact cluster in the same space
    the prototype head works in. ``"linear"`` is a plain softmax-regression
    probe on raw embeddings.
    """
    if probe not in ("distance", "linear"):
        raise ValueError(f"unknown probe {probe!r}")
    policy = policy or AugmentationPolicy()
    rng = make_rng(seed)
    tiles = np.asarray(tiles, dtype=np.float64)
    y = np.asarray(targets, dtype=np.int64)
    # balanced: rare types count as much as common ones
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    cw = np.where(counts > 0, y.size / (n_classes * np.maximum(counts, 1.0)), 0.0)
    params = dict(encoder.params)
    if probe == "linear":
        params["probe.W"] = rng.normal(0.0, 0.1, size=(encoder.dim, n_classes))
        params["probe.b"] = np.zeros(n_classes)
    else:
        u0 = _standardized(encode(encoder, normalize_tiles(tiles)).X)[0]
        centers = np.stack([u0[y == k].mean(axis=0) if np.any(y == k) else np.zeros(encoder.dim) for k in range(n_classes)])
        spread = np.mean(np.sum((u0 - centers[y]) ** 2, axis=1))
        params["probe.C"] = centers
        params["probe.s"] = np.array(-math.log(max(spread, 1e-12)))
    opt = OptimizerState([ParamGroup(list(params), lr, 0.0)])
    for epoch in range(epochs):
        # cosine decay keeps the last epochs from shuffling the clusters around
        opt.groups[0].lr = lr * 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))
        if probe == "distance":
            _, mu, sd = _standardized(encode(encoder, normalize_tiles(tiles)).X)
        perm = rng.permutation(y.size)
        for start in range(0, y.size, batch_size):
            idx = perm[start:start + batch_size]
            x = augment_batch(tiles[idx], policy, seed + 7919 * (epoch + 1), idx)
            z, cache = encoder.forward(x, keep=True)
            if probe == "linear":
                logits = z @ params["probe.W"] + params["probe.b"]
            else:
                C, scale = params["probe.C"], math.exp(float(params["probe.s"]))
                u = (z - mu) / sd
                logits = -scale * np.sum((u[:, None, :] - C[None]) ** 2, axis=2)
            g = softmax(logits, axis=1)
            g[np.arange(idx.size), y[idx]] -= 1.0
            g *= (cw[y[idx]] / idx.size)[:, None]
            if probe == "linear":
                gz = g @ params["probe.W"].T
                extra = {"probe.W": z.T @ g, "probe.b": g.sum(axis=0)}
            else:
                # rows of g sum to zero, so the z-gradient only involves the centers
                gz = 2.0 * scale * (g @ C) / sd
                extra = {
                    "probe.C": 2.0 * scale * (g.T @ u - g.sum(axis=0)[:, None] * C),
                    "probe.s": np.array(np.sum(g * logits)),
                }
            grads = encoder.backward(cache, gz, down_to=0)
            grads.update(extra)
            params, opt = adamw_step(params, grads, opt)
            for k in encoder.params:
                encoder.params[k] = params[k]
    return encoder


# prototype model ------------------------------------------------------------------


def validation_loss(Z, y, model, anchorset, weights, cw):
    return total_loss(Z, y, model, anchorset, weights, cw)


def _refresh_anchors(anchorset: AnchorSet, train_ids, train_Z) -> AnchorSet:
    pos = {int(i): k for k, i in enumerate(train_ids)}
    return anchorset.with_embeddings({rid: train_Z[pos[rid]] for t in anchorset.types for rid in anchorset.ids(t)})


def fit_prototype_model(
    data: SplitData,
    encoder: CompactEncoder | None,
    anchorset: AnchorSet,
    weights: LossWeights | None = None,
    config: TrainConfig | None = None,
    model: PrototypeModel | None = None,
    policy: AugmentationPolicy | None = None,
):
    """Train the prototype head (and the encoder's trainable stage, if any).

    Returns ``(model, log)`` -- or ``(model, log, encoder)`` when an encoder
    is supplied -- restored to the epoch with the lowest validation composite
    loss. Raises :class:`TrainingDiverged` on a non-finite loss, carrying the
    best finite checkpoint.
    """
    cfg = config or TrainConfig()
    weights = weights or LossWeights()
    policy = policy or AugmentationPolicy()
    rng = make_rng(cfg.seed)
    ty = np.asarray(data.train_y, dtype=np.int64)
    vy = np.asarray(data.val_y, dtype=np.int64)
    train_ids = np.asarray(data.train_ids, dtype=np.int64)
    cw = class_weights(ty)
    log = TrainingLog()

    use_enc = encoder is not None
    train_enc = use_enc and encoder.frozen_stages < encoder.n_stages
    if use_enc:
        if data.standardizer is None:
            raise ValueError("encoder mode needs a fitted standardizer")
        std = data.standardizer
        train_Z = _embed(encoder, data.train_x, std)
        val_Z = _embed(encoder, data.val_x, std)
        anchorset = _refresh_anchors(anchorset, train_ids, train_Z)
        if train_enc:
            # the prefix is frozen, so its output on unaugmented tiles never changes
            train_pre = _prefix_all(encoder, data.train_x)
            val_pre = _prefix_all(encoder, data.val_x)
    else:
        train_Z = np.asarray(data.train_x, dtype=np.float64)
        val_Z = np.asarray(data.val_x, dtype=np.float64)

    model = model.copy() if model is not None else init_prototypes(anchorset, cfg.tau0)

    params = {"P": model.prototypes.copy(), "tau": np.array(model.tau)}
    groups = [ParamGroup(["P"], cfg.lr_head, cfg.weight_decay), ParamGroup(["tau"], cfg.lr_head, 0.0)]
    if train_enc:
        for n in encoder.trainable_names:
            params[n] = encoder.params[n]
        groups.append(ParamGroup(list(encoder.trainable_names), cfg.lr_backbone, cfg.weight_decay))
    opt = OptimizerState(groups)
    sched = ScheduleState(cfg.sched_factor, cfg.sched_patience, cfg.min_lr)

    def snapshot():
        return model.copy(), (encoder.copy() if use_enc else None), anchorset

    best_val = math.inf
    best = snapshot()
    for epoch in range(cfg.max_epochs):
        perm = rng.permutation(ty.size)
        train_totals = []
        for start in range(0, ty.size, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            cache = None
            if use_enc:
                x = data.train_x[idx]
                if cfg.augment:
                    x = augment_batch(x, policy, cfg.seed * 1_000_003 + epoch, train_ids[idx])
                else:
                    x = normalize_tiles(x)
                if train_enc:
                    pre = encoder.prefix(x)
                    raw, cache = encoder.forward(pre, keep=True, start=encoder.frozen_stages)
                else:
                    raw = encoder.forward(x)
                Z = (raw - std.mean) / std.scale
            else:
                Z = train_Z[idx]
            br = total_loss(Z, ty[idx], model, anchorset, weights, cw)
            if not math.isfinite(br.total):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}", best[0], log)
            train_totals.append(br.total)
            grads = {"P": br.grads.P, "tau": np.array(br.grads.tau)}
            if train_enc:
                grads.update(encode_backward(encoder, cache, br.grads.z / std.scale))
            names = list(grads)
            clipped, _ = clip_global_norm([grads[n] for n in names], cfg.clip_norm)
            grads = dict(zip(names, clipped))
            log.step_grad_norms.append(global_norm(clipped))
            params, opt = adamw_step(params, grads, opt)
            params["tau"] = np.array(max(float(params["tau"]), 1e-3))
            model.prototypes = params["P"]
            model.tau = float(params["tau"])
            if train_enc:
                for n in encoder.trainable_names:
                    encoder.params[n] = params[n]

        if train_enc:
            train_Z = _embed_from_prefix(encoder, train_pre, std)
            val_Z = _embed_from_prefix(encoder, val_pre, std)
            anchorset = _refresh_anchors(anchorset, train_ids, train_Z)
        vb = total_loss(val_Z, vy, model, anchorset, weights, cw)
        if not math.isfinite(vb.total):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}", best[0], log)
        row = {
            "epoch": epoch,
            "lr_head": opt.groups[0].lr,
            "lr_backbone": opt.groups[2].lr if train_enc else cfg.lr_backbone,
            "train_total": float(np.mean(train_totals)),
            "val_total": vb.total,
        }
        row.update({f"val_{t}": vb.terms[t] for t in TERMS})
        log.rows.append(row)
        if vb.total < best_val:
            best_val = vb.total
            best = snapshot()
            log.best_epoch = epoch
        plateau_step(vb.total, sched, opt)
        stop, _ = early_stop(log.val_history, cfg.patience)
        if stop:
            log.stopped_early = True
            break

    model, enc_best, _ = best
    if use_enc:
        for k in encoder.params:
            encoder.params[k] = enc_best.params[k]
        return model, log, encoder
    return model, log


# baseline ---------------------------------------------------------------------------


@dataclass
class LinearHead:
    w: np.ndarray
    b: float

    def logits(self, Z) -> np.ndarray:
        return np.asarray(Z, dtype=np.float64) @ self.w + self.b

    def predict_proba(self, Z) -> np.ndarray:
        return sigmoid(self.logits(Z))


def _bce(head_params, Z, y):
    z = Z @ head_params["w"] + float(head_params["b"])
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    g = (sigmoid(z) - y) / y.size
    return loss, {"w": Z.T @ g, "b": np.array(g.sum())}


def fit_baseline_head(data: SplitData, encoder: CompactEncoder | None = None, config: TrainConfig | None = None):
    """Single-logit linear head trained with BCE and plain Adam.

    Returns ``(LinearHead, TrainingLog)`` restored to the lowest validation
    BCE. With an encoder, training tiles are re-augmented every epoch.
    """
    cfg = config or TrainConfig()
    rng = make_rng(cfg.seed)
    ty = np.asarray(data.train_y, dtype=np.float64)
    vy = np.asarray(data.val_y, dtype=np.float64)
    use_enc = encoder is not None
    if use_enc:
        std = data.standardizer
        val_Z = _embed(encoder, data.val_x, std)
        train_Z = _embed(encoder, data.train_x, std)
    else:
        train_Z = np.asarray(data.train_x, dtype=np.float64)
        val_Z = np.asarray(data.val_x, dtype=np.float64)
    D = train_Z.shape[1]
    params = {"w": rng.normal(0.0, 0.01, size=D), "b": np.array(0.0)}
    opt = OptimizerState([ParamGroup(["w", "b"], cfg.baseline_lr, 0.0)])
    sched = ScheduleState(cfg.sched_factor, cfg.sched_patience, cfg.min_lr)
    log = TrainingLog()
    best = (params["w"].copy(), float(params["b"]))
    best_val = math.inf
    ids = np.asarray(data.train_ids)
    for epoch in range(cfg.max_epochs):
        if use_enc and cfg.augment:
            aug = augment_batch(data.train_x, AugmentationPolicy(), cfg.seed * 1_000_003 + epoch, ids)
            Zt = (encode(encoder, aug).X - std.mean) / std.scale
        else:
            Zt = train_Z
        perm = rng.permutation(ty.size)
        losses = []
        for start in range(0, ty.size, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            loss, grads = _bce(params, Zt[idx], ty[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite baseline loss at epoch {epoch}", LinearHead(*best), log)
            losses.append(loss)
            params, opt = adamw_step(params, grads, opt)
        val, _ = _bce(params, val_Z, vy)
        log.rows.append(
            {"epoch": epoch, "lr": opt.groups[0].lr, "train_bce": float(np.mean(losses)), "val_bce": val}
        )
        if val < best_val:
            best_val = val
            best = (params["w"].copy(), float(params["b"]))
            log.best_epoch = epoch
        plateau_step(val, sched, opt)
        stop, _ = early_stop([r["val_bce"] for r in log.rows], cfg.patience)
        if stop:
            log.stopped_early = True
            break
    return LinearHead(*best), log
