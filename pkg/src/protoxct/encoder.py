"""Embedding providers and the standardized embedding space.

Two ways to get patch embeddings:

* file-backed: precomputed backbone features read from a ``PEMB`` file;
* :class:`CompactEncoder`: a small numpy CNN (three stride-2 3x3 conv stages
  with ReLU, then global average pooling) whose first stages can be frozen
  while the last stage keeps training.

A :class:`Standardizer` fitted on training embeddings maps everything into the
space where prototypes live.
"""

from __future__ import annotations

import csv
import hashlib
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numerics import make_rng

__all__ = [
    "EmbeddingBatch",
    "Standardizer",
    "CompactEncoder",
    "fit_standardizer",
    "standardize",
    "unstandardize",
    "encode",
    "encode_backward",
    "save_embeddings",
    "load_embeddings",
    "save_standardizer",
    "load_standardizer",
]


@dataclass
class EmbeddingBatch:
    X: np.ndarray
    ids: np.ndarray
    labels: np.ndarray | None = None
    splits: list[str] | None = None

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.X.ndim != 2 or self.X.shape[0] != self.ids.shape[0]:
            raise ValueError(f"embedding rows {self.X.shape} do not match {self.ids.shape[0]} ids")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("embeddings must be finite")

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def __len__(self) -> int:
        return self.X.shape[0]

    def select(self, split: str) -> "EmbeddingBatch":
        if self.splits is None:
            raise ValueError("batch carries no split assignment")
        m = np.array([s == split for s in self.splits], dtype=bool)
        return EmbeddingBatch(
            self.X[m],
            self.ids[m],
            None if self.labels is None else self.labels[m],
            [s for s, k in zip(self.splits, m) if k],
        )


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray
    degenerate: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def fit_standardizer(train) -> Standardizer:
    """Per-dimension mean and population std of the training embeddings.

    Dimensions with zero variance get scale 1 and are flagged in
    ``degenerate`` (a warning is also emitted).
    """
    X = train.X if isinstance(train, EmbeddingBatch) else np.asarray(train, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need at least two embeddings to fit a standardizer")
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    flat = sd <= 1e-12 * np.maximum(1.0, np.abs(mu))
    if flat.any():
        warnings.warn(f"{int(flat.sum())} embedding dimensions have zero variance", RuntimeWarning, stacklevel=2)
    return Standardizer(mu, np.where(flat, 1.0, sd), flat)


def standardize(batch, s: Standardizer):
    X = batch.X if isinstance(batch, EmbeddingBatch) else np.asarray(batch, dtype=np.float64)
    if X.shape[-1] != s.dim:
        raise ValueError(f"dimension mismatch: batch {X.shape[-1]} vs standardizer {s.dim}")
    out = (X - s.mean) / s.scale
    if isinstance(batch, EmbeddingBatch):
        return EmbeddingBatch(out, batch.ids, batch.labels, batch.splits)
    return out


def unstandardize(batch, s: Standardizer):
    X = batch.X if isinstance(batch, EmbeddingBatch) else np.asarray(batch, dtype=np.float64)
    if X.shape[-1] != s.dim:
        raise ValueError(f"dimension mismatch: batch {X.shape[-1]} vs standardizer {s.dim}")
    out = X * s.scale + s.mean
    if isinstance(batch, EmbeddingBatch):
        return EmbeddingBatch(out, batch.ids, batch.labels, batch.splits)
    return out


# compact CNN ------------------------------------------------------------------


def _im2col(x: np.ndarray) -> np.ndarray:
    # x: (n, H, W, C) -> (n, H/2, W/2, C*9) for a 3x3 stride-2 conv with padding 1
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, :-1:2, :-1:2]
    n, ho, wo, c = win.shape[:4]
    return win.reshape(n, ho, wo, c * 9)


def _col2im(dcols: np.ndarray, shape) -> np.ndarray:
    n, H, W, C = shape
    ho, wo = dcols.shape[1:3]
    d = dcols.reshape(n, ho, wo, C, 3, 3)
    dxp = np.zeros((n, H + 2, W + 2, C))
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + 2 * ho:2, j:j + 2 * wo:2, :] += d[..., i, j]
    return dxp[:, 1:-1, 1:-1, :]


class CompactEncoder:
    """Three conv stages (3x3, stride 2, ReLU) followed by global average pooling.

    Parameters are named ``conv{i}.weight`` (Cout, Cin, 3, 3) and
    ``conv{i}.bias``. Stages ``0 .. frozen_stages-1`` form the frozen prefix:
    :func:`encode_backward` never produces gradients for them.
    """

    def __init__(self, dim: int = 64, channels=(8, 16), frozen_stages: int = 2, seed: int = 0):
        if dim < 8:
            raise ValueError("embedding dimension must be >= 8")
        self.dim = int(dim)
        self.widths = (1, *(int(c) for c in channels), self.dim)
        self.n_stages = len(self.widths) - 1
        if not 0 <= frozen_stages <= self.n_stages:
            raise ValueError("frozen_stages out of range")
        self.frozen_stages = int(frozen_stages)
        rng = make_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        for i in range(self.n_stages):
            cin, cout = self.widths[i], self.widths[i + 1]
            std = np.sqrt(2.0 / (cin * 9))
            self.params[f"conv{i}.weight"] = rng.normal(0.0, std, size=(cout, cin, 3, 3))
            self.params[f"conv{i}.bias"] = np.full(cout, 0.01)

    def stage_names(self, i: int) -> tuple[str, str]:
        return f"conv{i}.weight", f"conv{i}.bias"

    @property
    def trainable_names(self) -> list[str]:
        return [n for i in range(self.frozen_stages, self.n_stages) for n in self.stage_names(i)]

    @property
    def frozen_names(self) -> list[str]:
        return [n for i in range(self.frozen_stages) for n in self.stage_names(i)]

    def frozen_checksum(self) -> str:
        h = hashlib.sha256()
        for n in self.frozen_names:
            h.update(np.ascontiguousarray(self.params[n]).tobytes())
        return h.hexdigest()

    def copy(self) -> "CompactEncoder":
        new = CompactEncoder.__new__(CompactEncoder)
        new.dim, new.widths, new.n_stages, new.frozen_stages = self.dim, self.widths, self.n_stages, self.frozen_stages
        new.params = {k: v.copy() for k, v in self.params.items()}
        return new

    def forward(self, tiles, keep: bool = False, start: int = 0):
        """Embed ``tiles`` (n, 64, 64); with ``keep`` also return the backward cache.

        ``start > 0`` means ``tiles`` are already the (n, H, W, C) activations
        entering stage ``start``.
        """
        x = np.asarray(tiles, dtype=np.float64)
        if start == 0:
            if x.ndim != 3:
                raise ValueError(f"expected (n, H, W) tiles, got shape {x.shape}")
            x = x[..., None]
        cache = []
        for i in range(start, self.n_stages):
            W, b = (self.params[n] for n in self.stage_names(i))
            if x.shape[-1] != W.shape[1]:
                raise ValueError(f"stage {i} expects {W.shape[1]} channels, got {x.shape[-1]}")
            cols = _im2col(x)
            pre = cols @ W.reshape(W.shape[0], -1).T + b
            out = np.maximum(pre, 0.0)
            if keep:
                cache.append((x.shape, cols, pre))
            x = out
        z = x.mean(axis=(1, 2))
        if keep:
            return z, (start, x.shape, cache)
        return z

    def prefix(self, tiles) -> np.ndarray:
        """Activations after the frozen prefix (input to the first trainable stage)."""
        x = np.asarray(tiles, dtype=np.float64)[..., None]
        for i in range(self.frozen_stages):
            W, b = (self.params[n] for n in self.stage_names(i))
            x = np.maximum(_im2col(x) @ W.reshape(W.shape[0], -1).T + b, 0.0)
        return x

    def backward(self, cache, g_out, down_to: int | None = None) -> dict[str, np.ndarray]:
        """Gradients of the stages ``down_to .. n_stages-1`` given dL/dz."""
        start, last_shape, stages = cache
        stop = self.frozen_stages if down_to is None else down_to
        n, ho, wo, c = last_shape
        g = np.broadcast_to(np.asarray(g_out, dtype=np.float64)[:, None, None, :] / (ho * wo), last_shape)
        grads: dict[str, np.ndarray] = {}
        for i in range(self.n_stages - 1, max(stop, start) - 1, -1):
            in_shape, cols, pre = stages[i - start]
            W = self.params[f"conv{i}.weight"]
            gpre = np.where(pre > 0, g, 0.0)
            gf = gpre.reshape(-1, W.shape[0])
            grads[f"conv{i}.weight"] = (gf.T @ cols.reshape(gf.shape[0], -1)).reshape(W.shape)
            grads[f"conv{i}.bias"] = gf.sum(axis=0)
            if i > max(stop, start):
                dcols = gf @ W.reshape(W.shape[0], -1)
                g = _col2im(dcols.reshape(*pre.shape[:3], -1), in_shape)
        return grads

    def save(self, path) -> None:
        np.savez(path, frozen_stages=self.frozen_stages, widths=np.array(self.widths), **self.params)

    @classmethod
    def load(cls, path) -> "CompactEncoder":
        with np.load(path) as f:
            widths = tuple(int(w) for w in f["widths"])
            enc = cls(dim=widths[-1], channels=widths[1:-1], frozen_stages=int(f["frozen_stages"]))
            for k in enc.params:
                enc.params[k] = f[k].astype(np.float64)
        return enc


def encode(encoder: CompactEncoder, tiles, ids=None, batch_size: int = 256) -> EmbeddingBatch:
    """Embed normalized tiles in fixed-size chunks (deterministic)."""
    tiles = np.asarray(tiles, dtype=np.float64)
    if tiles.ndim != 3:
        raise ValueError(f"expected (n, H, W) tiles, got shape {tiles.shape}")
    out = [encoder.forward(tiles[i:i + batch_size]) for i in range(0, tiles.shape[0], batch_size)]
    X = np.concatenate(out) if out else np.zeros((0, encoder.dim))
    return EmbeddingBatch(X, np.arange(tiles.shape[0]) if ids is None else ids)


def encode_backward(encoder: CompactEncoder, cache, upstream) -> dict[str, np.ndarray]:
    """Gradients for the trainable suffix only; empty when everything is frozen."""
    if encoder.frozen_stages >= encoder.n_stages:
        return {}
    return encoder.backward(cache, upstream)


# file formats -------------------------------------------------------------------


def save_embeddings(batch: EmbeddingBatch, path, extra: dict[str, list] | None = None) -> None:
    """Write a PEMB file plus its companion ``.csv`` (``id,label,split`` + extras)."""
    X = batch.X.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(b"PEMB")
        fh.write(struct.pack("<III", 1, X.shape[0], X.shape[1]))
        fh.write(X.tobytes())
    extra = extra or {}
    with open(_companion(path), "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["id", "label", "split", *extra])
        for i in range(len(batch)):
            label = "" if batch.labels is None else int(batch.labels[i])
            sp = "" if batch.splits is None else batch.splits[i]
            wr.writerow([int(batch.ids[i]), label, sp, *(v[i] for v in extra.values())])


def _companion(path) -> Path:
    return Path(path).with_suffix(".csv")


def load_embeddings(path) -> EmbeddingBatch:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated header, expected 16 bytes, found {len(raw)}")
    if raw[:4] != b"PEMB":
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected b'PEMB'")
    version, count, dim = struct.unpack_from("<III", raw, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported version {version}")
    need = 16 + count * dim * 4
    if len(raw) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(raw)}")
    X = np.frombuffer(raw, "<f4", count * dim, 16).reshape(count, dim).astype(np.float64)
    ids, labels, splits = np.arange(count), None, None
    comp = _companion(path)
    if comp.exists():
        with open(comp, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if len(rows) != count:
            raise ValueError(f"{comp}: {len(rows)} rows, header says {count}")
        ids = np.array([int(r["id"]) for r in rows])
        if all(r["label"] != "" for r in rows):
            labels = np.array([int(r["label"]) for r in rows])
        splits = [r["split"] for r in rows]
    return EmbeddingBatch(X, ids, labels, splits)


def save_standardizer(s: Standardizer, path) -> None:
    with open(path, "wb") as fh:
        fh.write(b"PSTD")
        fh.write(struct.pack("<I", s.dim))
        fh.write(np.column_stack([s.mean, s.scale]).astype("<f8").tobytes())


def load_standardizer(path) -> Standardizer:
    raw = Path(path).read_bytes()
    if raw[:4] != b"PSTD":
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected b'PSTD'")
    (dim,) = struct.unpack_from("<I", raw, 4)
    need = 8 + dim * 16
    if len(raw) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(raw)}")
    pairs = np.frombuffer(raw, "<f8", dim * 2, 8).reshape(dim, 2).astype(np.float64)
    return Standardizer(pairs[:, 0].copy(), pairs[:, 1].copy(), np.zeros(dim, dtype=bool))
