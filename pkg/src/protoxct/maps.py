"""Slice-level products: tiling, dense defect maps, majority voting, retrieval.

A slice is tiled with 64x64 windows at a fixed stride; every window is
classified by the prototype head and the per-window labels are lifted to
pixels by majority vote over all windows covering a pixel.
"""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import PATCH, normalize_tiles
from .encoder import CompactEncoder, EmbeddingBatch, Standardizer, encode, save_embeddings
from .head import PrototypeModel, defect_logit, forward
from .numerics import sigmoid

__all__ = [
    "PatchGrid",
    "DefectMap",
    "PixelMap",
    "UNCOVERED",
    "tile",
    "extract_tiles",
    "predict_map",
    "aggregate_majority",
    "nearest_anchors",
    "export_embeddings",
    "model_checksum",
    "write_defect_map",
    "read_defect_map",
    "write_pgm",
    "read_pgm",
]

UNCOVERED = -1


@dataclass(frozen=True)
class PatchGrid:
    height: int
    width: int
    stride: int
    origins: np.ndarray  # (n, 2) int64, row-major
    side: int = PATCH

    def __len__(self) -> int:
        return int(self.origins.shape[0])

    @property
    def shape(self) -> tuple[int, int]:
        """Number of origins along (rows, cols)."""
        return (self.height - self.side) // self.stride + 1, (self.width - self.side) // self.stride + 1


def tile(height: int, width: int, stride: int, side: int = PATCH) -> PatchGrid:
    """Origins ``(i*stride, j*stride)`` of every full window inside the slice."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if height < side or width < side:
        raise ValueError(f"slice {height}x{width} is smaller than the {side}x{side} window")
    r = np.arange(0, height - side + 1, stride, dtype=np.int64)
    c = np.arange(0, width - side + 1, stride, dtype=np.int64)
    R, C = np.meshgrid(r, c, indexing="ij")
    return PatchGrid(int(height), int(width), int(stride), np.column_stack([R.ravel(), C.ravel()]), side)


def extract_tiles(image, grid: PatchGrid) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.shape != (grid.height, grid.width):
        raise ValueError(f"image shape {img.shape} does not match grid {grid.height}x{grid.width}")
    win = sliding_window_view(img, (grid.side, grid.side))
    return win[grid.origins[:, 0], grid.origins[:, 1]].copy()


def model_checksum(model: PrototypeModel) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(model.prototypes, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(model.medoids, dtype="<f8").tobytes())
    h.update(np.float64(model.tau).astype("<f8").tobytes())
    return h.hexdigest()


@dataclass
class DefectMap:
    grid: PatchGrid
    p_defect: np.ndarray
    labels: np.ndarray
    proto_index: np.ndarray
    threshold: float
    temperature: float = 1.0
    checksum: str = ""
    types: tuple[str, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.grid)


def predict_map(
    image,
    model: PrototypeModel,
    encoder: CompactEncoder,
    standardizer: Standardizer,
    threshold: float,
    stride: int = PATCH,
    temperature: float = 1.0,
) -> DefectMap:
    """Classify every window of a (windowed, [0, 1]) slice.

    ``p_defect`` is the temperature-scaled defect probability, the label is
    ``p_defect >= threshold``, and ``proto_index`` is the prototype with the
    largest attribution.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    img = np.asarray(image, dtype=np.float64)
    grid = tile(img.shape[0], img.shape[1], stride)
    tiles = normalize_tiles(extract_tiles(img, grid))
    raw = encode(encoder, tiles).X
    Z = (raw - standardizer.mean) / standardizer.scale
    _, logits, c = forward(Z, model)
    p = sigmoid(defect_logit(c) / temperature)
    return DefectMap(
        grid,
        p,
        (p >= threshold).astype(np.int64),
        np.argmax(logits, axis=1).astype(np.int64),
        float(threshold),
        float(temperature),
        model_checksum(model),
        tuple(model.types),
    )


@dataclass
class PixelMap:
    label: np.ndarray  # int8: 0, 1, or UNCOVERED
    defect_votes: np.ndarray
    coverage: np.ndarray

    @property
    def uncovered(self) -> np.ndarray:
        return self.coverage == 0


def aggregate_majority(dmap: DefectMap) -> PixelMap:
    """Per-pixel majority over the windows covering each pixel.

    Ties count as defect. Pixels no window covers (right and bottom margins
    narrower than a window step) are marked ``UNCOVERED``.
    """
    g = dmap.grid
    cov = np.zeros((g.height + 1, g.width + 1), dtype=np.int64)
    hit = np.zeros_like(cov)
    r, c = g.origins[:, 0], g.origins[:, 1]
    lab = np.asarray(dmap.labels, dtype=np.int64)
    # 2-D difference arrays: +1 at the top-left corner, -1 past each edge
    for arr, w in ((cov, np.ones_like(lab)), (hit, lab)):
        np.add.at(arr, (r, c), w)
        np.add.at(arr, (r + g.side, c), -w)
        np.add.at(arr, (r, c + g.side), -w)
        np.add.at(arr, (r + g.side, c + g.side), w)
    cov = cov.cumsum(0).cumsum(1)[: g.height, : g.width]
    hit = hit.cumsum(0).cumsum(1)[: g.height, : g.width]
    out = np.where(2 * hit >= cov, 1, 0).astype(np.int8)
    out[cov == 0] = UNCOVERED
    return PixelMap(out, hit, cov)


def nearest_anchors(model: PrototypeModel, Z, ids, k: int) -> list[list[tuple[int, float]]]:
    """Exact top-``k`` training records per prototype, ascending distance, ties by id.

    Distances are the head's dimension-normalized squared distances.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    Z = np.asarray(Z, dtype=np.float64)
    ids = np.asarray(ids, dtype=np.int64)
    n = Z.shape[0]
    if k > n:
        warnings.warn(f"k={k} exceeds the {n} available records; returning all", stacklevel=2)
        k = n
    d, _, _ = forward(Z, model)
    out = []
    for j in range(model.n_prototypes):
        order = np.lexsort((ids, d[:, j]))[:k]
        out.append([(int(ids[i]), float(d[i, j])) for i in order])
    return out


def export_embeddings(
    model: PrototypeModel,
    Z,
    ids,
    labels,
    splits,
    path,
    p_defect=None,
    threshold: float | None = None,
) -> None:
    """Write standardized embeddings with attribution and test-error columns.

    ``error`` is ``FP`` or ``FN`` for misclassified test records and empty
    otherwise; it needs ``p_defect`` and ``threshold``.
    """
    Z = np.asarray(Z, dtype=np.float64)
    _, logits, c = forward(Z, model)
    attr = np.argmax(logits, axis=1)
    splits = list(splits)
    labels = np.asarray(labels, dtype=np.int64)
    err = [""] * len(splits)
    if p_defect is not None:
        if threshold is None:
            raise ValueError("threshold is required with p_defect")
        pred = np.asarray(p_defect) >= threshold
        for i, sp in enumerate(splits):
            if sp == "test" and pred[i] != labels[i]:
                err[i] = "FP" if pred[i] else "FN"
    batch = EmbeddingBatch(Z, np.asarray(ids), labels, splits)
    save_embeddings(batch, path, extra={"proto_index": [int(a) for a in attr], "error": err})


# file formats -------------------------------------------------------------------


def write_defect_map(dmap: DefectMap, path) -> None:
    """CSV ``row,col,p_defect,label,proto_index`` plus a ``.json`` header beside it."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["row", "col", "p_defect", "label", "proto_index"])
        for (r, c), p, y, k in zip(dmap.grid.origins, dmap.p_defect, dmap.labels, dmap.proto_index):
            wr.writerow([int(r), int(c), repr(float(p)), int(y), int(k)])
    header = {
        "height": dmap.grid.height,
        "width": dmap.grid.width,
        "stride": dmap.grid.stride,
        "side": dmap.grid.side,
        "threshold": dmap.threshold,
        "temperature": dmap.temperature,
        "model_checksum": dmap.checksum,
        "types": list(dmap.types),
    }
    path.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def read_defect_map(path) -> DefectMap:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    grid = tile(header["height"], header["width"], header["stride"], header["side"])
    origins = np.array([[int(r["row"]), int(r["col"])] for r in rows], dtype=np.int64).reshape(-1, 2)
    if not np.array_equal(origins, grid.origins):
        raise ValueError(f"{path}: origins do not match the declared grid")
    return DefectMap(
        grid,
        np.array([float(r["p_defect"]) for r in rows]),
        np.array([int(r["label"]) for r in rows], dtype=np.int64),
        np.array([int(r["proto_index"]) for r in rows], dtype=np.int64),
        float(header["threshold"]),
        float(header["temperature"]),
        header["model_checksum"],
        tuple(header["types"]),
    )


def write_pgm(pixmap: PixelMap, path) -> None:
    """8-bit binary PGM: 0 non-defect, 255 defect, 128 uncovered."""
    lab = pixmap.label
    img = np.where(lab == UNCOVERED, 128, np.where(lab == 1, 255, 0)).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    data = raw[len(raw) - w * h:]
    return np.frombuffer(data, np.uint8).reshape(h, w).copy()
