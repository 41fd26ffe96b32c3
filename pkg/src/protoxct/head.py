"""Prototype head: anchors, medoid initialization and the distance-based classifier.

A patch embedding ``z`` (already standardized) is compared with ``K`` prototype
rows of ``P`` through the dimension-normalized squared distance

    d_k = ||z - P_k||^2 / D,

turned into prototype logits ``l_k = -d_k / tau``. Class logits are the
log-sum-exp of the prototype logits belonging to each class, class
probabilities are the softmax of those two numbers, and the softmax over all
``K`` logits is the attribution distribution reported with every prediction.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .numerics import log_sum_exp, sigmoid, softmax

__all__ = [
    "SemanticType",
    "SEMANTIC_TYPES",
    "Anchor",
    "AnchorSet",
    "PrototypeModel",
    "Prediction",
    "centroid",
    "medoid",
    "init_prototypes",
    "distances",
    "prototype_logits",
    "class_logits",
    "class_probabilities",
    "defect_logit",
    "prototype_distribution",
    "predict",
    "save_model",
    "load_model",
]


class SemanticType(enum.IntEnum):
    AIR = 0
    MATRIX = 1
    MATRIX_AIR = 2
    PORES = 3
    LINES = 4
    PORES_LINES = 5

    @property
    def tag(self) -> str:
        return _TAGS[self]

    @property
    def is_defect(self) -> bool:
        return self >= SemanticType.PORES

    @classmethod
    def from_tag(cls, tag: str) -> "SemanticType":
        try:
            return _FROM_TAG[tag]
        except KeyError:
            raise ValueError(f"unknown semantic type {tag!r}") from None


_TAGS = {
    SemanticType.AIR: "air",
    SemanticType.MATRIX: "matrix",
    SemanticType.MATRIX_AIR: "matrix+air",
    SemanticType.PORES: "pores",
    SemanticType.LINES: "lines",
    SemanticType.PORES_LINES: "pores+lines",
}
_FROM_TAG = {v: k for k, v in _TAGS.items()}

SEMANTIC_TYPES = tuple(t.tag for t in SemanticType)
DEFAULT_CLASS_MAP = tuple(int(t.is_defect) for t in SemanticType)

# The earlier five-prototype taxonomy: no explicit matrix+air type.
FIVE_PROTOTYPE_TYPES = ("air", "matrix", "pores", "lines", "pores+lines")
FIVE_PROTOTYPE_CLASS_MAP = (0, 0, 1, 1, 1)


@dataclass(frozen=True)
class Anchor:
    record_id: int
    embedding: np.ndarray
    edge: bool = False


@dataclass
class AnchorSet:
    """Expert anchors, grouped by prototype type in prototype order.

    ``types`` names each prototype row; ``class_map`` gives its class (0
    non-defect, 1 defect).
    """

    anchors: dict[str, list[Anchor]]
    types: tuple[str, ...] = SEMANTIC_TYPES
    class_map: tuple[int, ...] = DEFAULT_CLASS_MAP
    per_type: int = 6

    def validate(self, train_ids=None, require_edge_balance: bool = True) -> None:
        missing = [t for t in self.types if len(self.anchors.get(t, [])) == 0]
        if missing:
            raise ValueError(f"incomplete anchor set: no anchors for {', '.join(missing)}")
        short = [t for t in self.types if len(self.anchors[t]) != self.per_type]
        if short:
            counts = ", ".join(f"{t}={len(self.anchors[t])}" for t in short)
            raise ValueError(f"expected {self.per_type} anchors per type, got {counts}")
        if train_ids is not None:
            allowed = set(int(i) for i in train_ids)
            bad = [a.record_id for t in self.types for a in self.anchors[t] if a.record_id not in allowed]
            if bad:
                raise ValueError(f"anchors outside the training split: {bad}")
        if require_edge_balance:
            half = self.per_type // 2
            for t, c in zip(self.types, self.class_map):
                if c == 1:
                    n_edge = sum(a.edge for a in self.anchors[t])
                    if n_edge != half:
                        raise ValueError(f"defect type {t} needs {half} edge anchors, has {n_edge}")

    def embeddings(self, t: str) -> np.ndarray:
        return np.stack([a.embedding for a in self.anchors[t]]).astype(np.float64)

    def ids(self, t: str) -> list[int]:
        return [a.record_id for a in self.anchors[t]]

    def with_embeddings(self, lookup: Mapping[int, np.ndarray]) -> "AnchorSet":
        """Copy with every anchor embedding replaced by ``lookup[record_id]``."""
        new = {
            t: [Anchor(a.record_id, np.asarray(lookup[a.record_id], dtype=np.float64), a.edge) for a in lst]
            for t, lst in self.anchors.items()
        }
        return AnchorSet(new, self.types, self.class_map, self.per_type)


@dataclass
class PrototypeModel:
    prototypes: np.ndarray
    tau: float
    medoids: np.ndarray
    types: tuple[str, ...] = SEMANTIC_TYPES
    class_map: tuple[int, ...] = DEFAULT_CLASS_MAP
    medoid_ids: tuple[int, ...] = ()
    anchor_ids: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        self.prototypes = np.ascontiguousarray(self.prototypes, dtype=np.float64)
        self.medoids = np.ascontiguousarray(self.medoids, dtype=np.float64)
        self.tau = float(self.tau)
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.prototypes.shape != self.medoids.shape:
            raise ValueError("prototype and medoid matrices differ in shape")
        if len(self.types) != self.prototypes.shape[0] or len(self.class_map) != len(self.types):
            raise ValueError("type/class maps do not cover every prototype")

    @property
    def n_prototypes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    @property
    def class_index(self) -> np.ndarray:
        return np.asarray(self.class_map, dtype=np.int64)

    def copy(self) -> "PrototypeModel":
        return PrototypeModel(
            self.prototypes.copy(),
            self.tau,
            self.medoids.copy(),
            self.types,
            self.class_map,
            self.medoid_ids,
            {k: list(v) for k, v in self.anchor_ids.items()},
        )


def centroid(embeddings) -> np.ndarray:
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] == 0:
        raise ValueError("centroid of an empty anchor set")
    return e.mean(axis=0)


def medoid(ids: Sequence[int], embeddings) -> tuple[int, np.ndarray]:
    """The candidate closest to the candidates' centroid.

    Ties on distance go to the lowest record id.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    if len(ids) == 0 or e.shape[0] == 0:
        raise ValueError("medoid of an empty anchor set")
    if len(ids) != e.shape[0]:
        raise ValueError("ids and embeddings differ in length")
    c = centroid(e)
    d = np.sum((e - c) ** 2, axis=1)
    order = sorted(range(len(ids)), key=lambda i: (d[i], ids[i]))
    best = order[0]
    return int(ids[best]), e[best].copy()


def init_prototypes(anchorset: AnchorSet, tau0: float = 1.0) -> PrototypeModel:
    missing = [t for t in anchorset.types if len(anchorset.anchors.get(t, [])) == 0]
    if missing:
        raise ValueError(f"incomplete anchor set: no anchors for {', '.join(missing)}")
    rows, mids = [], []
    for t in anchorset.types:
        mid, emb = medoid(anchorset.ids(t), anchorset.embeddings(t))
        rows.append(emb)
        mids.append(mid)
    P = np.stack(rows)
    return PrototypeModel(
        prototypes=P,
        tau=tau0,
        medoids=P.copy(),
        types=tuple(anchorset.types),
        class_map=tuple(anchorset.class_map),
        medoid_ids=tuple(mids),
        anchor_ids={t: anchorset.ids(t) for t in anchorset.types},
    )


def distances(z, P) -> np.ndarray:
    """Dimension-normalized squared distances.

    ``z`` of shape (D,) gives a (K,) vector; a batch (n, D) gives (n, K).
    """
    z = np.asarray(z, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    if z.shape[-1] != P.shape[1]:
        raise ValueError(f"dimension mismatch: embedding {z.shape[-1]} vs prototypes {P.shape[1]}")
    diff = z[..., None, :] - P
    return np.einsum("...kd,...kd->...k", diff, diff) / P.shape[1]


def prototype_logits(d, tau: float) -> np.ndarray:
    if not tau > 0:
        raise ValueError("tau must be positive")
    return -np.asarray(d, dtype=np.float64) / tau


def class_logits(logits, class_map) -> np.ndarray:
    """Per-class log-sum-exp pooling; last axis of the result is (non-defect, defect)."""
    l = np.asarray(logits, dtype=np.float64)
    cm = np.asarray(class_map)
    if cm.shape[0] != l.shape[-1]:
        raise ValueError("class map does not cover every prototype")
    out = []
    for c in (0, 1):
        sel = cm == c
        if not sel.any():
            raise ValueError(f"class {c} has no prototypes")
        out.append(log_sum_exp(l[..., sel], axis=-1))
    return np.stack(out, axis=-1)


def class_probabilities(class_logit) -> np.ndarray:
    return softmax(class_logit, axis=-1)


def defect_logit(class_logit) -> np.ndarray:
    """Binary logit of the defect class, i.e. log(p1/p0)."""
    c = np.asarray(class_logit, dtype=np.float64)
    return c[..., 1] - c[..., 0]


def prototype_distribution(logits) -> np.ndarray:
    return softmax(logits, axis=-1)


@dataclass(frozen=True)
class Prediction:
    label: int
    p_defect: float
    attribution: np.ndarray
    attributed_type: str


def forward(Z, model: PrototypeModel):
    """Batch forward pass: (distances, prototype logits, class logits)."""
    d = distances(Z, model.prototypes)
    l = prototype_logits(d, model.tau)
    return d, l, class_logits(l, model.class_map)


def predict(z, model: PrototypeModel, threshold: float, temperature: float = 1.0) -> Prediction:
    """Classify one standardized embedding.

    The defect probability is temperature-scaled before thresholding; the
    label is 1 when it reaches the threshold (``>=``).
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    _, l, c = forward(np.asarray(z, dtype=np.float64), model)
    p = float(sigmoid(defect_logit(c) / temperature))
    attr = prototype_distribution(l)
    k = int(np.argmax(attr))
    return Prediction(int(p >= threshold), p, attr, model.types[k])


_MAGIC = b"PMDL"


def save_model(model: PrototypeModel, path) -> None:
    K, D = model.prototypes.shape
    trailer = json.dumps(
        {
            "types": list(model.types),
            "class_map": list(model.class_map),
            "medoid_ids": list(model.medoid_ids),
            "anchor_ids": model.anchor_ids,
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", 1, K, D))
        fh.write(struct.pack("<d", model.tau))
        fh.write(model.prototypes.astype("<f8").tobytes())
        fh.write(model.medoids.astype("<f8").tobytes())
        fh.write(struct.pack("<I", len(trailer)))
        fh.write(trailer)


def load_model(path) -> PrototypeModel:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {_MAGIC!r}")
    version, K, D = struct.unpack_from("<III", raw, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported version {version}")
    (tau,) = struct.unpack_from("<d", raw, 16)
    off = 24
    need = off + 2 * K * D * 8 + 4
    if len(raw) < need:
        raise ValueError(f"{path}: truncated, expected at least {need} bytes, found {len(raw)}")
    P = np.frombuffer(raw, "<f8", K * D, off).reshape(K, D).astype(np.float64)
    off += K * D * 8
    M = np.frombuffer(raw, "<f8", K * D, off).reshape(K, D).astype(np.float64)
    off += K * D * 8
    (n,) = struct.unpack_from("<I", raw, off)
    off += 4
    if len(raw) != off + n:
        raise ValueError(f"{path}: trailer length {n} does not match file size")
    meta = json.loads(raw[off:off + n].decode("utf-8"))
    return PrototypeModel(
        P,
        tau,
        M,
        tuple(meta["types"]),
        tuple(meta["class_map"]),
        tuple(meta["medoid_ids"]),
        {k: list(v) for k, v in meta["anchor_ids"].items()},
    )
