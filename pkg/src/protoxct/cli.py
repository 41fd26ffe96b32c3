"""Command-line entry point: ``protoxct <command> [options]``.

Commands form a pipeline over directories::

    synth-data         -> DATA   volumes, manifest, per-split patch stores, anchors
    init-protos DATA   -> INIT   warmed-up encoder, standardizer, medoid-initialized model
    train DATA INIT    -> MODEL  trained model, encoder, training log
    calibrate DATA MODEL -> CAL  temperature and threshold from validation
    eval DATA MODEL [CAL] -> REPORT   metrics on test
    predict-map, nearest-anchors, export-embeddings

Settings resolve as defaults < ``--config`` file < per-key flags; the
resolved config is written to every output directory as ``run_config.txt``.
Exit status: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import pipeline
from .config import ConfigError, RunConfig, parse_value, read_config, write_config
from .data import SPLITS, DatasetManifest, normalize_tiles, read_manifest, read_patch_store, read_volume, write_manifest, write_patch_store, write_volume
from .encoder import (
    CompactEncoder,
    EmbeddingBatch,
    Standardizer,
    encode,
    load_standardizer,
    save_embeddings,
    save_standardizer,
)
from .evaluation import (
    ScoredSet,
    apply_temperature,
    evaluate,
    fit_temperature,
    format_report,
    read_scored,
    roc_auc,
    select_threshold,
    write_report,
    write_scored,
)
from .head import PrototypeModel, init_prototypes, load_model, save_model
from .maps import aggregate_majority, export_embeddings, nearest_anchors, predict_map, write_defect_map, write_pgm
from .train import LinearHead, SplitData, TrainingDiverged, fit_baseline_head, fit_prototype_model

__all__ = ["main", "build_parser"]


class UsageError(Exception):
    """Bad or missing inputs; maps to exit status 2."""


# argument parsing -----------------------------------------------------------------

_COMMANDS = {
    "synth-data": "generate a synthetic dataset",
    "init-protos": "warm up the encoder and initialize prototypes from anchors",
    "train": "train the prototype head (and the encoder's last stage)",
    "calibrate": "fit temperature and threshold on validation",
    "eval": "evaluate on the test split, or on a scored CSV",
    "predict-map": "dense defect map for one slice",
    "nearest-anchors": "training records closest to each prototype",
    "export-embeddings": "standardized embeddings with attribution and error flags",
}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value settings file")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    keys = common.add_argument_group("settings (override the config file)")
    for f in fields(RunConfig):
        keys.add_argument(_flag(f.name), dest=f"cfg_{f.name}", metavar=f.type.upper(), default=None)

    p = argparse.ArgumentParser(prog="protoxct", description="Prototype-based defect classification for XCT patches.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_text in _COMMANDS.items():
        s = sub.add_parser(name, parents=[common], help=help_text, aliases=["synth"] if name == "synth-data" else [])
        if name != "synth-data":
            s.add_argument("--data", type=Path, required=name != "eval", help="dataset directory from synth")
        if name in ("train",):
            s.add_argument("--init", type=Path, required=True, help="directory from init-protos")
        if name in ("calibrate", "eval", "predict-map", "nearest-anchors", "export-embeddings"):
            s.add_argument("--model", type=Path, required=name != "eval", help="directory from train")
        if name in ("eval", "predict-map", "export-embeddings"):
            s.add_argument("--calibration", type=Path, help="directory from calibrate")
        if name == "eval":
            s.add_argument("--scored", type=Path, help="evaluate a scored CSV (id,label,score) instead")
            s.add_argument("--threshold", type=float, help="threshold for --scored")
    return p


def resolve_config(args) -> RunConfig:
    cfg = read_config(args.config) if args.config else RunConfig()
    overrides = {}
    for f in fields(RunConfig):
        v = getattr(args, f"cfg_{f.name}")
        if v is not None:
            overrides[f.name] = parse_value(f.name, v)
    return cfg.replace(**overrides)


# shared loading -------------------------------------------------------------------


def _need(path: Path) -> Path:
    if not path.exists():
        raise UsageError(f"missing input: {path}")
    return path


def load_dataset(data_dir: Path) -> tuple[DatasetManifest, dict]:
    manifest = read_manifest(_need(data_dir / "manifest.csv"))
    for split in SPLITS:
        tiles = read_patch_store(_need(data_dir / f"patches_{split}.ppat"))
        records = manifest.select(split)
        if tiles.shape[0] != len(records):
            raise UsageError(f"{data_dir}: {split} patch store has {tiles.shape[0]} tiles, manifest {len(records)}")
        for p, t in zip(records, tiles):
            p.tile = t
    spec = pipeline.read_anchor_spec(_need(data_dir / "anchors.csv"))
    return manifest, spec


def load_model_dir(model_dir: Path) -> tuple[PrototypeModel, CompactEncoder, Standardizer]:
    model = load_model(_need(model_dir / "model.pmdl"))
    encoder = CompactEncoder.load(_need(model_dir / "encoder.npz"))
    std = load_standardizer(_need(model_dir / "standardizer.pstd"))
    return model, encoder, std


def embed(manifest: DatasetManifest, encoder: CompactEncoder, std: Standardizer) -> np.ndarray:
    raw = encode(encoder, normalize_tiles(manifest.tiles())).X
    return (raw - std.mean) / std.scale


def _split_arrays(manifest: DatasetManifest):
    ids = np.array(manifest.ids, dtype=np.int64)
    y = manifest.labels()
    sp = np.array([manifest.splits.get(i, "") for i in manifest.ids])
    return ids, y, sp


def _prepare_out(out: Path, cfg: RunConfig) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "run_config.txt")
    return out


def _save_model_dir(out: Path, model, encoder, std) -> None:
    save_model(model, out / "model.pmdl")
    encoder.save(out / "encoder.npz")
    save_standardizer(std, out / "standardizer.pstd")


def _calibration(model, Z, y, sp):
    va = sp == "val"
    logits = pipeline.defect_logits(Z[va], model)
    T = fit_temperature(logits, y[va])
    t = select_threshold(ScoredSet.from_arrays(y[va], apply_temperature(logits, T), calibrated=True))
    return T, t


def _read_calibration(path: Path | None):
    if path is None:
        return None
    meta = json.loads(_need(path / "calibration.json").read_text())
    return float(meta["temperature"]), float(meta["threshold"])


# commands -------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, args) -> int:
    volumes, _, manifest = pipeline.synthesize(
        cfg.seed,
        cfg.volume_spec(),
        n_volumes=cfg.volumes,
        samples_per_volume=cfg.samples_per_volume,
        ratio=cfg.ratio,
        min_defect_px=cfg.min_defect_px,
        min_sliver=cfg.min_sliver,
        pure_fraction=cfg.pure_fraction,
        min_component=cfg.min_component,
        max_defect_air=cfg.max_defect_air,
    )
    spec = pipeline.script_anchors(manifest, cfg.seed)
    out = _prepare_out(args.out, cfg)
    for v in volumes:
        write_volume(v, out / f"volume_{v.volume_id}.raw")
    write_manifest(manifest, out / "manifest.csv")
    for split in SPLITS:
        write_patch_store(manifest.tiles(split), out / f"patches_{split}.ppat")
    pipeline.write_anchor_spec(spec, out / "anchors.csv")
    for split in (None, "train", "val", "test"):
        n0, n1 = manifest.class_counts(split)
        print(f"{split or 'all'}: non-defect {n0}, defect {n1}")
    return 0


def cmd_init_protos(cfg: RunConfig, args) -> int:
    manifest, spec = load_dataset(args.data)
    encoder = pipeline.prepare_encoder(
        manifest,
        cfg.seed,
        warmup_epochs=cfg.warmup_epochs,
        dim=cfg.dim,
        channels=cfg.channel_widths(),
        frozen_stages=cfg.frozen_stages,
    )
    batch, std = pipeline.embed_manifest(encoder, manifest)
    Z = (batch.X - std.mean) / std.scale
    ids, y, sp = _split_arrays(manifest)
    anchors = pipeline.build_anchorset(spec, ids, Z)
    anchors.validate(ids[sp == "train"])
    model = init_prototypes(anchors, cfg.tau0)
    out = _prepare_out(args.out, cfg)
    _save_model_dir(out, model, encoder, std)
    save_embeddings(EmbeddingBatch(Z, ids, y, list(sp)), out / "embeddings.pemb")
    print(f"initialized {model.n_prototypes} prototypes; medoids {list(model.medoid_ids)}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    manifest, spec = load_dataset(args.data)
    init, encoder, std = load_model_dir(args.init)
    ids, y, sp = _split_arrays(manifest)
    tr, va = sp == "train", sp == "val"
    Z = embed(manifest, encoder, std)
    anchors = pipeline.build_anchorset(spec, ids, Z, types=init.types, class_map=init.class_map)
    weights, tcfg = cfg.loss_weights(), cfg.train_config()
    try:
        if cfg.finetune_encoder:
            tiles = manifest.tiles()
            data = SplitData(tiles[tr], y[tr], ids[tr], tiles[va], y[va], std)
            model, log, encoder = fit_prototype_model(data, encoder, anchors, weights, tcfg, model=init)
        else:
            data = SplitData(Z[tr], y[tr], ids[tr], Z[va], y[va])
            model, log = fit_prototype_model(data, None, anchors, weights, tcfg, model=init)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out = _prepare_out(args.out, cfg)
    _save_model_dir(out, model, encoder, std)
    log.write_csv(out / "training_log.csv")
    if cfg.baseline:
        Zf = embed(manifest, encoder, std)
        head, blog = fit_baseline_head(SplitData(Zf[tr], y[tr], ids[tr], Zf[va], y[va]), None, tcfg)
        np.savez(out / "baseline.npz", w=head.w, b=np.float64(head.b))
        blog.write_csv(out / "baseline_log.csv")
    best = log.rows[log.best_epoch] if log.rows else {}
    print(f"trained {len(log.rows)} epochs; best epoch {log.best_epoch} val_total {best.get('val_total', float('nan')):.6f}")
    return 0


def cmd_calibrate(cfg: RunConfig, args) -> int:
    manifest, _ = load_dataset(args.data)
    model, encoder, std = load_model_dir(args.model)
    _, y, sp = _split_arrays(manifest)
    T, t = _calibration(model, embed(manifest, encoder, std), y, sp)
    out = _prepare_out(args.out, cfg)
    (out / "calibration.json").write_text(json.dumps({"temperature": T, "threshold": t}, indent=2, sort_keys=True) + "\n")
    print(f"temperature {T:.6f}, threshold {t:.6f}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    if args.scored is not None:
        if args.threshold is None:
            raise UsageError("--scored needs --threshold")
        scored = read_scored(_need(args.scored))
        report = evaluate(scored, args.threshold, 1.0, seed=cfg.seed, replicates=cfg.replicates, bins=cfg.ece_bins)
    else:
        if args.data is None or args.model is None:
            raise UsageError("eval needs --data and --model (or --scored)")
        manifest, _ = load_dataset(args.data)
        model, encoder, std = load_model_dir(args.model)
        ids, y, sp = _split_arrays(manifest)
        Z = embed(manifest, encoder, std)
        cal = _read_calibration(args.calibration) or _calibration(model, Z, y, sp)
        T, t = cal
        te = sp == "test"
        scores = apply_temperature(pipeline.defect_logits(Z[te], model), T)
        scored = ScoredSet(list(ids[te]), list(y[te]), scores, calibrated=True)
        report = evaluate(scored, t, T, seed=cfg.seed, replicates=cfg.replicates, bins=cfg.ece_bins)
        usage = np.bincount(pipeline.attribution_argmax(Z[sp == "train"], model), minlength=model.n_prototypes)
        report.extra["train_attribution_counts"] = [int(u) for u in usage]
        baseline = args.model / "baseline.npz"
        if baseline.exists():
            with np.load(baseline) as f:
                b_scores = LinearHead(f["w"], float(f["b"])).predict_proba(Z[te])
            report.extra["baseline_roc_auc"] = roc_auc(ScoredSet(list(ids[te]), list(y[te]), b_scores))
    out = _prepare_out(args.out, cfg)
    write_scored(scored, out / "scored.csv")
    write_report(report, out / "report.json", out / "report.txt")
    print(format_report(report), end="")
    return 0


def cmd_predict_map(cfg: RunConfig, args) -> int:
    model, encoder, std = load_model_dir(args.model)
    T, t = _read_calibration(args.calibration) or (1.0, 0.5)
    volume = read_volume(_need(args.data / f"volume_{cfg.volume_index}.raw"), cfg.volume_index)
    if not 0 <= cfg.slice_index < volume.shape[0]:
        raise UsageError(f"slice_index {cfg.slice_index} outside 0..{volume.shape[0] - 1}")
    dmap = predict_map(volume.slice(cfg.slice_index), model, encoder, std, t, stride=cfg.stride, temperature=T)
    out = _prepare_out(args.out, cfg)
    write_defect_map(dmap, out / "defect_map.csv")
    write_pgm(aggregate_majority(dmap), out / "pixel_map.pgm")
    print(f"{len(dmap)} patches, {int(dmap.labels.sum())} predicted defective")
    return 0


def cmd_nearest_anchors(cfg: RunConfig, args) -> int:
    manifest, _ = load_dataset(args.data)
    model, encoder, std = load_model_dir(args.model)
    ids, _, sp = _split_arrays(manifest)
    tr = sp == "train"
    Z = embed(manifest, encoder, std)
    kinds = {p.id: p.semantic_type for p in manifest.patches}
    result = nearest_anchors(model, Z[tr], ids[tr], cfg.k_nearest)
    out = _prepare_out(args.out, cfg)
    with open(out / "nearest_anchors.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["prototype", "type", "rank", "id", "distance", "record_type"])
        for k, rows in enumerate(result):
            for rank, (rid, d) in enumerate(rows):
                wr.writerow([k, model.types[k], rank, rid, repr(d), kinds[rid]])
    for k, rows in enumerate(result):
        print(f"{model.types[k]}: {' '.join(f'{rid}({kinds[rid]})' for rid, _ in rows)}")
    return 0


def cmd_export_embeddings(cfg: RunConfig, args) -> int:
    manifest, _ = load_dataset(args.data)
    model, encoder, std = load_model_dir(args.model)
    ids, y, sp = _split_arrays(manifest)
    Z = embed(manifest, encoder, std)
    cal = _read_calibration(args.calibration)
    out = _prepare_out(args.out, cfg)
    if cal is None:
        export_embeddings(model, Z, ids, y, sp, out / "embeddings.pemb")
    else:
        T, t = cal
        p = apply_temperature(pipeline.defect_logits(Z, model), T)
        export_embeddings(model, Z, ids, y, sp, out / "embeddings.pemb", p_defect=p, threshold=t)
    print(f"wrote {len(ids)} embeddings of dimension {Z.shape[1]}")
    return 0


_HANDLERS = {
    "synth-data": cmd_synth,
    "init-protos": cmd_init_protos,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "eval": cmd_eval,
    "predict-map": cmd_predict_map,
    "nearest-anchors": cmd_nearest_anchors,
    "export-embeddings": cmd_export_embeddings,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        with threadpool_limits(limits=cfg.threads):
            return _HANDLERS[args.command](cfg, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
