"""Composite training objective for the prototype head, with analytic gradients.

Every term takes a batch of standardized embeddings ``Z`` (n, D), binary
labels ``y`` and a :class:`~protoxct.head.PrototypeModel`, and returns
``(value, Gradients)`` where the gradients are taken with respect to ``Z``,
the prototype matrix ``P`` and the head temperature ``tau``.

Terms and the exact forms used here (``d`` is the dimension-normalized
squared distance, ``l = -d / tau`` the prototype logits):

* cls     -- class-weighted cross-entropy of the two-class softmax over
             log-sum-exp pooled class logits.
* pull    -- mean distance to the nearest same-class prototype.
* push    -- mean ``exp(-d_opp / tau_push)`` with ``d_opp`` the distance to
             the nearest opposite-class prototype.
* div     -- mean hinge ``max(0, cos - delta)`` over same-class prototype pairs.
* ent     -- mean negative entropy of the softmax over same-class logits, so
             minimizing it spreads assignment within a class.
* usage   -- ``K * sum_k (u_k - 1/K)^2`` where ``u`` is the batch-mean of the
             attribution distribution.
* anchor  -- mean over types of the mean distance from ``P_k`` to its anchors.
* medoid  -- mean over k of ``||P_k - M_k||^2 / D``.
* proto   -- squared Frobenius norm of ``P``.
* tau     -- ``|tau - 1|``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .head import AnchorSet, PrototypeModel, class_logits, distances, prototype_logits
from .numerics import softmax

__all__ = [
    "TERMS",
    "Gradients",
    "LossWeights",
    "LossBreakdown",
    "class_weights",
    "loss_cls",
    "loss_pull",
    "loss_push",
    "loss_div",
    "loss_ent",
    "loss_usage",
    "loss_anchor",
    "loss_medoid",
    "loss_proto_norm",
    "loss_tau",
    "term_parts",
    "total_loss",
    "write_breakdowns",
]

TERMS = ("cls", "pull", "push", "div", "ent", "usage", "anchor", "medoid", "proto_norm", "tau_pen")


@dataclass
class Gradients:
    z: np.ndarray
    P: np.ndarray
    tau: float = 0.0

    @classmethod
    def zeros(cls, n: int, K: int, D: int) -> "Gradients":
        return cls(np.zeros((n, D)), np.zeros((K, D)), 0.0)

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients(self.z + other.z, self.P + other.P, self.tau + other.tau)

    def __mul__(self, s: float) -> "Gradients":
        return Gradients(self.z * s, self.P * s, self.tau * s)

    __rmul__ = __mul__

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.z**2) + np.sum(self.P**2) + self.tau**2))


@dataclass
class LossWeights:
    """Term weights plus the push scale and diversity margin.

    Defaults are the published configuration.
    """

    cls: float = 0.1
    pull: float = 0.05
    push: float = 0.01
    div: float = 1.0
    ent: float = 0.01
    usage: float = 0.1
    anchor: float = 2.0
    medoid: float = 0.5
    proto: float = 1e-6
    tau: float = 1e-4
    tau_push: float = 0.1
    delta: float = 0.7
    entropy_scope: str = "within_class"

    def __post_init__(self):
        for f in ("cls", "pull", "push", "div", "ent", "usage", "anchor", "medoid", "proto", "tau"):
            if getattr(self, f) < 0:
                raise ValueError(f"weight {f} must be non-negative")
        if not self.tau_push > 0:
            raise ValueError("tau_push must be positive")
        if not -1.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (-1, 1)")
        if self.entropy_scope not in ("within_class", "global"):
            raise ValueError("entropy_scope must be 'within_class' or 'global'")

    def term_weights(self) -> dict[str, float]:
        return {
            "cls": self.cls,
            "pull": self.pull,
            "push": self.push,
            "div": self.div,
            "ent": self.ent,
            "usage": self.usage,
            "anchor": self.anchor,
            "medoid": self.medoid,
            "proto_norm": self.proto,
            "tau_pen": self.tau,
        }

    @classmethod
    def zero(cls) -> "LossWeights":
        return cls(0, 0, 0, 0, 0, 0, 0, 0, 0, 0)


@dataclass
class LossBreakdown:
    terms: dict[str, float]
    total: float
    grads: Gradients
    grad_norms: dict[str, float]

    def row(self) -> list[float]:
        return [self.terms[t] for t in TERMS] + [self.total]


def class_weights(labels) -> np.ndarray:
    """Inverse-frequency weights for classes (0, 1), scaled to mean 1 over ``labels``."""
    y = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(y, minlength=2).astype(np.float64)
    if np.any(counts == 0):
        raise ValueError("both classes must be present to derive class weights")
    return y.size / (2.0 * counts)


# chain rules ------------------------------------------------------------------


def _grad_from_d(G_d: np.ndarray, Z: np.ndarray, P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # d_ik = ||z_i - P_k||^2 / D
    D = P.shape[1]
    row = G_d.sum(axis=1)
    col = G_d.sum(axis=0)
    gZ = (2.0 / D) * (Z * row[:, None] - G_d @ P)
    gP = (2.0 / D) * (P * col[:, None] - G_d.T @ Z)
    return gZ, gP


def _grad_from_logits(G_l: np.ndarray, d: np.ndarray, tau: float, Z, P) -> Gradients:
    G_d = -G_l / tau
    gtau = float(np.sum(G_l * d) / tau**2)
    gZ, gP = _grad_from_d(G_d, Z, P)
    return Gradients(gZ, gP, gtau)


def _prep(Z, y, model: PrototypeModel):
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if Z.ndim != 2 or Z.shape[0] != y.shape[0]:
        raise ValueError("batch embeddings and labels do not align")
    d = distances(Z, model.prototypes)
    return Z, y, d


def _same_class(y: np.ndarray, model: PrototypeModel) -> np.ndarray:
    return model.class_index[None, :] == y[:, None]


# terms ------------------------------------------------------------------------


def loss_cls(Z, y, model: PrototypeModel, weights=(1.0, 1.0)):
    Z, y, d = _prep(Z, y, model)
    n = y.size
    w = np.asarray(weights, dtype=np.float64)[y]
    l = prototype_logits(d, model.tau)
    c = class_logits(l, model.class_map)
    logp = c - np.logaddexp(c[:, 0], c[:, 1])[:, None]
    value = float(np.mean(-w * logp[np.arange(n), y]))
    # d(-log p_y)/dl_k = pi_k - [class(k)=y] q_k, q = within-class softmax
    pi = softmax(l, axis=1)
    same = _same_class(y, model)
    q = np.where(same, pi, 0.0)
    q /= q.sum(axis=1, keepdims=True)
    G_l = (w / n)[:, None] * (pi - q)
    return value, _grad_from_logits(G_l, d, model.tau, Z, model.prototypes)


def _nearest(d: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.argmin(np.where(mask, d, np.inf), axis=1)


def loss_pull(Z, y, model: PrototypeModel):
    Z, y, d = _prep(Z, y, model)
    n = y.size
    k = _nearest(d, _same_class(y, model))
    value = float(np.mean(d[np.arange(n), k]))
    G_d = np.zeros_like(d)
    G_d[np.arange(n), k] = 1.0 / n
    gZ, gP = _grad_from_d(G_d, Z, model.prototypes)
    return value, Gradients(gZ, gP, 0.0)


def loss_push(Z, y, model: PrototypeModel, tau_push: float = 0.1):
    if not tau_push > 0:
        raise ValueError("tau_push must be positive")
    Z, y, d = _prep(Z, y, model)
    n = y.size
    k = _nearest(d, ~_same_class(y, model))
    e = np.exp(-d[np.arange(n), k] / tau_push)
    G_d = np.zeros_like(d)
    G_d[np.arange(n), k] = -e / (tau_push * n)
    gZ, gP = _grad_from_d(G_d, Z, model.prototypes)
    return float(np.mean(e)), Gradients(gZ, gP, 0.0)


def loss_div(model: PrototypeModel, delta: float = 0.7, n_batch: int = 0):
    P = model.prototypes
    cm = model.class_index
    K = P.shape[0]
    pairs = [(j, k) for j in range(K) for k in range(j + 1, K) if cm[j] == cm[k]]
    gP = np.zeros_like(P)
    if not pairs:
        return 0.0, Gradients(np.zeros((n_batch, P.shape[1])), gP, 0.0)
    norms = np.linalg.norm(P, axis=1)
    involved = {i for p in pairs for i in p}
    if any(not norms[i] > 0 for i in involved):
        raise ValueError("degenerate direction: zero-norm prototype")
    U = P / np.where(norms > 0, norms, 1.0)[:, None]
    value = 0.0
    for j, k in pairs:
        cos = float(U[j] @ U[k])
        if cos > delta:
            value += cos - delta
            gP[j] += (U[k] - cos * U[j]) / norms[j]
            gP[k] += (U[j] - cos * U[k]) / norms[k]
    m = len(pairs)
    return value / m, Gradients(np.zeros((n_batch, P.shape[1])), gP / m, 0.0)


def loss_ent(Z, y, model: PrototypeModel, scope: str = "within_class"):
    Z, y, d = _prep(Z, y, model)
    n = y.size
    l = prototype_logits(d, model.tau)
    mask = _same_class(y, model) if scope == "within_class" else np.ones_like(d, dtype=bool)
    masked = np.where(mask, l, -np.inf)
    q = softmax(masked, axis=1)
    with np.errstate(divide="ignore"):
        logq = np.where(mask, np.log(np.where(q > 0, q, 1.0)), 0.0)
    neg_h = np.sum(q * logq, axis=1)
    value = float(np.mean(neg_h))
    G_l = q * (logq - neg_h[:, None]) / n
    return value, _grad_from_logits(G_l, d, model.tau, Z, model.prototypes)


def loss_usage(Z, y, model: PrototypeModel):
    Z, y, d = _prep(Z, y, model)
    n = y.size
    if n == 0:
        raise ValueError("usage term needs a non-empty batch")
    K = model.n_prototypes
    l = prototype_logits(d, model.tau)
    pi = softmax(l, axis=1)
    u = pi.mean(axis=0)
    value = float(K * np.sum((u - 1.0 / K) ** 2))
    g_u = 2.0 * K * (u - 1.0 / K)
    G_l = pi * (g_u[None, :] - (pi @ g_u)[:, None]) / n
    return value, _grad_from_logits(G_l, d, model.tau, Z, model.prototypes)


def loss_anchor(model: PrototypeModel, anchorset: AnchorSet, n_batch: int = 0):
    P = model.prototypes
    K, D = P.shape
    gP = np.zeros_like(P)
    value = 0.0
    for k, t in enumerate(model.types):
        A = anchorset.embeddings(t)
        diff = P[k] - A
        value += float(np.mean(np.sum(diff**2, axis=1))) / D
        gP[k] = 2.0 * diff.mean(axis=0) / D
    return value / K, Gradients(np.zeros((n_batch, D)), gP / K, 0.0)


def loss_medoid(model: PrototypeModel, n_batch: int = 0):
    P, M = model.prototypes, model.medoids
    K, D = P.shape
    diff = P - M
    value = float(np.sum(diff**2)) / (K * D)
    return value, Gradients(np.zeros((n_batch, D)), 2.0 * diff / (K * D), 0.0)


def loss_proto_norm(model: PrototypeModel, n_batch: int = 0):
    P = model.prototypes
    return float(np.sum(P**2)), Gradients(np.zeros((n_batch, P.shape[1])), 2.0 * P, 0.0)


def loss_tau(model: PrototypeModel, n_batch: int = 0):
    t = model.tau
    return abs(t - 1.0), Gradients(np.zeros((n_batch, model.dim)), np.zeros_like(model.prototypes), float(np.sign(t - 1.0)))


def term_parts(
    Z,
    y,
    model: PrototypeModel,
    anchorset: AnchorSet,
    weights: LossWeights | None = None,
    cls_weights: Sequence[float] = (1.0, 1.0),
) -> dict[str, tuple[float, Gradients]]:
    """Unweighted value and gradients of every term, keyed by :data:`TERMS`."""
    w = weights or LossWeights()
    Z = np.asarray(Z, dtype=np.float64)
    n = Z.shape[0]
    return {
        "cls": loss_cls(Z, y, model, cls_weights),
        "pull": loss_pull(Z, y, model),
        "push": loss_push(Z, y, model, w.tau_push),
        "div": loss_div(model, w.delta, n),
        "ent": loss_ent(Z, y, model, w.entropy_scope),
        "usage": loss_usage(Z, y, model),
        "anchor": loss_anchor(model, anchorset, n),
        "medoid": loss_medoid(model, n),
        "proto_norm": loss_proto_norm(model, n),
        "tau_pen": loss_tau(model, n),
    }


def total_loss(
    Z,
    y,
    model: PrototypeModel,
    anchorset: AnchorSet,
    weights: LossWeights | None = None,
    cls_weights: Sequence[float] = (1.0, 1.0),
) -> LossBreakdown:
    """Weighted sum of all ten terms together with the full gradient set."""
    w = weights or LossWeights()
    Z = np.asarray(Z, dtype=np.float64)
    n = Z.shape[0]
    parts = term_parts(Z, y, model, anchorset, w, cls_weights)
    lam = w.term_weights()
    total = 0.0
    grads = Gradients.zeros(n, model.n_prototypes, model.dim)
    for name in TERMS:
        value, g = parts[name]
        total += lam[name] * value
        if lam[name] != 0.0:
            grads = grads + g * lam[name]
    return LossBreakdown(
        terms={k: v[0] for k, v in parts.items()},
        total=total,
        grads=grads,
        grad_norms={k: v[1].norm() * lam[k] for k, v in parts.items()},
    )


def write_breakdowns(path, breakdowns: Sequence[LossBreakdown], start_step: int = 0) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["step", *TERMS, "total"])
        for i, b in enumerate(breakdowns):
            wr.writerow([start_step + i, *(repr(float(v)) for v in b.row())])
