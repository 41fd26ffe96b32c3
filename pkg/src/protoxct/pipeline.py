"""End-to-end glue shared by the CLI, the tutorials and the acceptance tests.

Every stage takes a seed and derives its own stream from it, so a stage can be
rerun in isolation and still see the same random numbers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .data import (
    PATCH,
    DatasetManifest,
    Volume,
    VolumeSpec,
    auto_label_low_intensity,
    generate_synthetic_volume,
    inspect_patches,
    normalize_tiles,
    rebalance,
    sample_patches,
    split,
)
from .encoder import CompactEncoder, EmbeddingBatch, Standardizer, encode, fit_standardizer
from .evaluation import EvalReport, ScoredSet, apply_temperature, evaluate, fit_temperature, select_threshold
from .head import SEMANTIC_TYPES, Anchor, AnchorSet, PrototypeModel, SemanticType, class_probabilities, defect_logit, forward
from .numerics import derive_rng
from .train import warmup_encoder

__all__ = [
    "Stage",
    "synthesize",
    "script_anchors",
    "write_anchor_spec",
    "read_anchor_spec",
    "build_anchorset",
    "prepare_encoder",
    "embed_manifest",
    "defect_logits",
    "calibrate_and_evaluate",
]


class Stage:
    """Stream keys for :func:`~protoxct.numerics.derive_rng`."""

    VOLUME = 1
    SAMPLE = 2
    REBALANCE = 3
    SPLIT = 4
    ANCHORS = 5
    WARMUP = 6
    TRAIN = 7
    BOOTSTRAP = 8


def synthesize(
    seed: int,
    spec: VolumeSpec | None = None,
    n_volumes: int = 3,
    samples_per_volume: int = 5000,
    ratio: float = 2.0,
    fractions=(0.8, 0.1, 0.1),
    min_defect_px: int = 100,
    min_sliver: float = 0.25,
    pure_fraction: float = 0.002,
    min_component: int = 50,
    max_defect_air: float = 0.25,
) -> tuple[list[Volume], list, DatasetManifest]:
    """Generate volumes, sample and label patches, rebalance, split.

    Patches whose mean falls under the low-intensity cut are labelled
    non-defect without inspection (their type still comes from the air
    fraction); the rest are labelled from the ground-truth masks, and
    inconclusive ones are dropped.
    """
    spec = spec or VolumeSpec()
    volumes, truths, labelled = [], [], []
    next_id = 0
    for v in range(n_volumes):
        vol, truth = generate_synthetic_volume(spec, derive_rng(seed, Stage.VOLUME, v), volume_id=v)
        patches = sample_patches(vol, samples_per_volume, derive_rng(seed, Stage.SAMPLE, v), start_id=next_id)
        next_id += len(patches)
        auto, rest = auto_label_low_intensity(patches)
        decided, _ = inspect_patches(rest, truth, min_defect_px=min_defect_px, pure_fraction=pure_fraction, min_sliver=min_sliver, min_component=min_component, max_defect_air=max_defect_air)
        labelled += [_typed_by_air(p, truth, pure_fraction) for p in auto] + decided
        volumes.append(vol)
        truths.append(truth)
    labelled.sort(key=lambda p: p.id)
    manifest = DatasetManifest(labelled, {}, seed)
    manifest = rebalance(manifest, ratio, derive_rng(seed, Stage.REBALANCE))
    manifest = split(manifest, fractions, derive_rng(seed, Stage.SPLIT))
    manifest.seed = seed
    return volumes, truths, manifest


def _typed_by_air(patch, truth, pure_fraction: float):
    """Non-defect type of an auto-labelled patch from its air fraction."""
    air = 1.0 - float(truth.matrix[patch.slice, patch.row : patch.row + PATCH, patch.col : patch.col + PATCH].mean())
    edge = pure_fraction < air < 1.0 - pure_fraction
    t = "matrix+air" if edge else ("air" if air >= 1.0 - pure_fraction else "matrix")
    return replace(patch, label=0, semantic_type=t, edge=edge)


def script_anchors(
    manifest: DatasetManifest,
    seed: int,
    types=SEMANTIC_TYPES,
    per_type: int = 6,
):
    """Pick anchors from the training split the way an inspector would be told to.

    Returns ``{type: [(id, edge), ...]}``. Defect types get half edge and half
    interior patches; other types are drawn without regard to position.
    """
    rng = derive_rng(seed, Stage.ANCHORS)
    train = manifest.select("train")

    def draw(cand, k, what):
        if len(cand) < k:
            raise ValueError(f"not enough {what} patches in train for anchors ({len(cand)} < {k})")
        return [cand[i] for i in sorted(rng.choice(len(cand), k, replace=False))]

    out = {}
    for t in types:
        pool = [p for p in train if p.semantic_type == t]
        if SemanticType.from_tag(t).is_defect:
            half = per_type // 2
            picks = draw([p for p in pool if p.edge], half, f"edge {t}")
            picks += draw([p for p in pool if not p.edge], per_type - half, f"interior {t}")
        else:
            picks = draw(pool, per_type, t)
        out[t] = [(p.id, bool(p.edge)) for p in picks]
    return out


def write_anchor_spec(spec, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["type", "id", "edge"])
        for t, rows in spec.items():
            for rid, edge in rows:
                wr.writerow([t, rid, int(edge)])


def read_anchor_spec(path):
    out: dict[str, list] = {}
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and list(rows[0].keys()) != ["type", "id", "edge"]:
        raise ValueError(f"{path}: expected header type,id,edge")
    for r in rows:
        out.setdefault(r["type"], []).append((int(r["id"]), bool(int(r["edge"]))))
    return out


def build_anchorset(spec, ids, Z, types=SEMANTIC_TYPES, class_map=None) -> AnchorSet:
    """Attach standardized embeddings (rows of ``Z`` keyed by ``ids``) to an anchor spec."""
    pos = {int(i): k for k, i in enumerate(ids)}
    missing = [rid for rows in spec.values() for rid, _ in rows if rid not in pos]
    if missing:
        raise ValueError(f"anchor ids without embeddings: {missing[:5]}")
    anchors = {t: [Anchor(rid, np.asarray(Z[pos[rid]], dtype=np.float64), edge) for rid, edge in spec.get(t, [])] for t in types}
    kw = {} if class_map is None else {"class_map": tuple(class_map)}
    return AnchorSet(anchors, tuple(types), **kw)


def prepare_encoder(manifest: DatasetManifest, seed: int, warmup_epochs: int = 10, **encoder_kw) -> CompactEncoder:
    """Encoder with every stage warmed up on the training types, prefix then frozen."""
    enc = CompactEncoder(seed=seed, **encoder_kw)
    train = manifest.select("train")
    tiles = np.stack([p.tile for p in train])
    targets = [int(SemanticType.from_tag(p.semantic_type)) for p in train]
    warmup_encoder(enc, tiles, targets, len(SEMANTIC_TYPES), epochs=warmup_epochs, seed=int(derive_rng(seed, Stage.WARMUP).integers(2**31)))
    return enc


def embed_manifest(encoder: CompactEncoder, manifest: DatasetManifest) -> tuple[EmbeddingBatch, Standardizer]:
    """Raw embeddings of every record plus a standardizer fit on the training split."""
    tiles = manifest.tiles()
    batch = encode(encoder, normalize_tiles(tiles), ids=np.array(manifest.ids))
    batch.labels = manifest.labels()
    batch.splits = np.array([manifest.splits[i] for i in manifest.ids])
    std = fit_standardizer(batch.X[batch.splits == "train"])
    return batch, std


def defect_logits(Z, model: PrototypeModel) -> np.ndarray:
    return defect_logit(forward(np.asarray(Z, dtype=np.float64), model)[2])


@dataclass
class CalibratedEval:
    temperature: float
    threshold: float
    report: EvalReport
    test: ScoredSet


def calibrate_and_evaluate(
    model: PrototypeModel,
    val_Z,
    val_y,
    test_Z,
    test_y,
    test_ids=None,
    seed: int = 0,
    replicates: int = 2000,
) -> CalibratedEval:
    """Temperature fit on validation, threshold on calibrated validation scores, metrics on test."""
    vl = defect_logits(val_Z, model)
    T = fit_temperature(vl, val_y)
    val = ScoredSet.from_arrays(val_y, apply_temperature(vl, T), calibrated=True)
    t = select_threshold(val)
    tl = defect_logits(test_Z, model)
    ids = np.arange(len(test_y)) if test_ids is None else test_ids
    test = ScoredSet(list(ids), list(np.asarray(test_y)), apply_temperature(tl, T), calibrated=True)
    report = evaluate(test, t, T, seed=seed, replicates=replicates)
    return CalibratedEval(T, t, report, test)


def attribution_argmax(Z, model: PrototypeModel) -> np.ndarray:
    return np.argmax(forward(np.asarray(Z, dtype=np.float64), model)[1], axis=1)


def uncalibrated_probabilities(Z, model: PrototypeModel) -> np.ndarray:
    return class_probabilities(forward(np.asarray(Z, dtype=np.float64), model)[2])[..., 1]
