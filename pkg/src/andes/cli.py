"""andesctl: data synthesis/ingestion, pretraining, embedding, retrieval,
probing, segmentation, and scaling-law sweeps, driven by one config file.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from . import probe as probe_mod
from .backbone import MultiSpectralViT, ViTConfig, build_backbone
from .checkpoint import load_checkpoint, tensor_digest
from .config import RunConfig, load_config
from .data import (
    BandImage,
    BandStats,
    DatasetManifest,
    ManifestEntry,
    RawScene,
    TileCache,
    compute_band_stats,
    is_featureless,
    load_manifest,
    quantize_to_u8,
    read_mst,
    save_manifest,
    synth_dataset,
    tile_scene,
    write_mst,
)
from .distill import DistillTrainer, derive_rng
from .errors import ConfigError, DataError, NumericalAbort
from .report import MetricsDocument


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="YAML run config")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--threads", type=int, default=None, help="torch thread count")
    parser.add_argument("--out", type=Path, default=Path("runs/out"), help="output directory")
    parser.add_argument("--force", action="store_true", help="allow writing into non-empty outputs")
    parser.add_argument("--preset", type=str, default=None, help="config preset name")


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config, {"seed": args.seed, "threads": args.threads, "preset": args.preset})
    torch.set_num_threads(cfg.threads)
    return cfg


def _prepare_out(args, expect_empty: bool = False) -> Path:
    out: Path = args.out
    if expect_empty and out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest_from(args, cfg: RunConfig, which: str) -> DatasetManifest:
    path = getattr(args, "manifest", None)
    if path is None:
        path = cfg.data.train_manifest if which == "train" else cfg.data.eval_manifest
    if path is None:
        raise ConfigError(f"no {which} manifest given (flag --manifest or data.{which}_manifest)")
    return load_manifest(path)


def _stats_from_lists(raw: dict) -> BandStats:
    return BandStats(mean=np.asarray(raw["mean"]), std=np.asarray(raw["std"]))


def load_eval_backbone(path: Path | str, source: str = "teacher") -> tuple[MultiSpectralViT, BandStats]:
    """Rebuild the backbone from a training checkpoint (teacher weights by
    default) along with the normalization stats it was trained with."""
    config, tensors = load_checkpoint(path)
    vit_cfg = ViTConfig(**config["vit"])
    model = MultiSpectralViT(vit_cfg)
    prefix = f"{source}.backbone."
    state = {}
    for name, _ in model.named_parameters():
        key = prefix + name
        if key not in tensors:
            raise DataError(f"checkpoint {path} is missing tensor {key}")
        state[name] = torch.from_numpy(tensors[key].copy())
    model.load_state_dict(state)
    model.eval()
    return model, _stats_from_lists(config["stats"])


def _backbone_for_eval(args, cfg: RunConfig, fallback_manifest: DatasetManifest):
    """(model, stats, label) from --checkpoint, or a seed-initialized scratch
    model with stats computed over the evaluation manifest."""
    if getattr(args, "checkpoint", None):
        model, stats = load_eval_backbone(args.checkpoint)
        return model, stats, Path(args.checkpoint).stem
    model = build_backbone(cfg.vit, cfg.seed)
    model.eval()
    return model, compute_band_stats(fallback_manifest), "scratch"


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _resolve(args)
    out = _prepare_out(args, expect_empty=True)
    manifest = synth_dataset(
        out,
        seed=cfg.seed,
        n_tiles=cfg.data.synth_tiles,
        n_classes=cfg.data.synth_classes,
        tile_size=cfg.data.tile_size,
        bands=cfg.data.bands,
        imbalance=cfg.data.imbalance_ratio(),
    )
    labels = manifest.labels()
    rng = derive_rng(cfg.seed, 0x517)
    splits: dict[str, list[ManifestEntry]] = {"train": [], "val": [], "test": []}
    f_train, f_val, f_test = cfg.data.split_fracs
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        n_val = int(len(idx) * f_val)
        n_test = int(len(idx) * f_test)
        for j, i in enumerate(idx):
            bucket = "val" if j < n_val else "test" if j < n_val + n_test else "train"
            splits[bucket].append(manifest.entries[i])
    doc = MetricsDocument("synth", cfg.digest(), cfg.seed)
    for name, entries in splits.items():
        part = DatasetManifest(entries=sorted(entries, key=lambda e: e.tile_path),
                               bands=manifest.bands, tile_size=manifest.tile_size, root=out)
        save_manifest(part, out / f"{name}.manifest")
        doc.add_scalar(f"n_{name}", len(part))
    doc.add_scalar("n_tiles", len(manifest))
    doc.write(out / "synth.metrics")
    print(f"wrote {len(manifest)} tiles and train/val/test manifests to {out}")
    return 0


def cmd_ingest(args) -> int:
    cfg = _resolve(args)
    out = _prepare_out(args)
    (out / "tiles").mkdir(exist_ok=True)
    kept, dropped = 0, 0
    entries = []
    for scene_path in args.scenes:
        scene = read_mst(scene_path)
        if isinstance(scene, RawScene):
            scene = quantize_to_u8(scene, cfg.data.quantize_lo_pct, cfg.data.quantize_hi_pct)
        for tile in tile_scene(scene, cfg.data.tile_size):
            if is_featureless(
                tile, cfg.data.featureless_dark, cfg.data.featureless_bright, cfg.data.featureless_frac
            ):
                dropped += 1
                continue
            rel = f"tiles/ingest_{kept:06d}.mst"
            write_mst(out / rel, tile)
            entries.append(ManifestEntry(tile_path=rel))
            kept += 1
    manifest = DatasetManifest(entries=entries, bands=cfg.data.bands, tile_size=cfg.data.tile_size, root=out)
    save_manifest(manifest, out / "ingest.manifest")
    doc = MetricsDocument("ingest", cfg.digest(), cfg.seed)
    doc.add_scalar("kept", kept)
    doc.add_scalar("dropped", dropped)
    doc.write(out / "ingest.metrics")
    print(f"kept {kept} tiles, dropped {dropped} featureless tiles")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _resolve(args)
    out = _prepare_out(args)
    manifest = _manifest_from(args, cfg, "train")
    stats = compute_band_stats(manifest)
    trainer = DistillTrainer(
        TileCache(manifest), stats, cfg.vit, cfg.head, cfg.crop, cfg.distill, cfg.seed, cfg.aug
    )
    if args.resume:
        trainer.load_state(args.resume)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    steps = (args.steps if args.steps is not None else cfg.distill.total_steps) - trainer.step
    if steps < 0:
        raise ConfigError(f"checkpoint already at step {trainer.step}, beyond the requested total")
    log_path = out / "pretrain.log"
    mode = "a" if args.resume and log_path.exists() else "w"
    with open(log_path, mode) as log:
        if mode == "w":
            log.write("#step\tlr\twd\tmomentum\tteacher_temp\tdino\tibot\ttotal\tgrad_norm\n")

        def log_fn(rec: dict) -> None:
            log.write(
                f"{rec['step']}\t{rec['lr']:.8g}\t{rec['wd']:.8g}\t{rec['momentum']:.8g}"
                f"\t{rec['teacher_temp']:.8g}\t{rec['dino']:.8g}\t{rec['ibot']:.8g}"
                f"\t{rec['total']:.8g}\t{rec['grad_norm']:.8g}\n"
            )

        trainer.run(steps, log_fn, cfg.eval.checkpoint_every, ckpt_dir)
    final = ckpt_dir / "final.ckpt"
    trainer.save(final)
    doc = MetricsDocument("pretrain", cfg.digest(), cfg.seed)
    doc.add_scalar("steps", trainer.step)
    doc.add_scalar("param_digest", trainer.student_digest())
    doc.write(out / "pretrain.metrics")
    print(f"trained to step {trainer.step}; final checkpoint at {final}")
    return 0


def _embed(args, cfg: RunConfig, manifest: DatasetManifest):
    model, stats, label = _backbone_for_eval(args, cfg, manifest)
    return probe_mod.embed_dataset(model, manifest, stats, cfg.crop.global_size), label


def cmd_embed(args) -> int:
    cfg = _resolve(args)
    out = _prepare_out(args)
    manifest = _manifest_from(args, cfg, "eval")
    db, label = _embed(args, cfg, manifest)
    emb_path = out / "embeddings.emb"
    probe_mod.save_embeddings(db, emb_path)
    doc = MetricsDocument("embed", cfg.digest(), cfg.seed)
    doc.add_scalar("backbone", label)
    doc.add_scalar("n_vectors", len(db))
    doc.add_scalar("dim", db.vectors.shape[1])
    doc.write(out / "embed.metrics")
    print(f"wrote {len(db)} embeddings to {emb_path}")
    return 0


def cmd_retrieve(args) -> int:
    cfg = _resolve(args)
    out = _prepare_out(args)
    if args.embeddings:
        db = probe_mod.load_embeddings(args.embeddings)
        label = Path(args.embeddings).stem
    else:
        db, label = _embed(args, cfg, _manifest_from(args, cfg, "eval"))
    doc = MetricsDocument("retrieve", cfg.digest(), cfg.seed)
    doc.add_scalar("backbone", label)
    for k in cfg.eval.k_list:
        doc.add_row("map_at_k", probe_mod.map_at_k(db, k), k=k)
    doc.write(out / "retrieve.metrics")
    print(doc.render())
    return 0


def cmd_classify(args) -> int:
    cfg = _resolve(args)
    out = _prepare_out(args)
    manifest = _manifest_from(args, cfg, "eval")
    doc = MetricsDocument("classify", cfg.digest(), cfg.seed)
    scales = list(cfg.eval.scales)
    if cfg.probe.mode == "frozen":
        db, label = _embed(args, cfg, manifest)
        results = probe_mod.classification_sweep(db, scales, cfg.eval.k_folds, cfg.probe, cfg.seed)
    else:
        model, stats, label = _backbone_for_eval(args, cfg, manifest)
        results = probe_mod.classification_sweep_finetune(
            model, TileCache(manifest), manifest.labels(), scales,
            cfg.eval.k_folds, cfg.probe, stats, cfg.crop.global_size, cfg.seed,
        )
    doc.add_scalar("backbone", label)
    doc.add_scalar("mode", cfg.probe.mode)
    for scale, fold_metrics in results.items():
        for name in ("f1", "precision", "recall", "pr_auc"):
            values = [getattr(m, name) for m in fold_metrics]
            for fold, v in enumerate(values):
                doc.add_row(name, v, scale=scale, fold=fold)
            doc.add_row(name + "_mean", float(np.mean(values)), scale=scale)
            doc.add_row(name + "_std", float(np.std(values)), scale=scale)
    doc.write(out / "classify.metrics")
    print(doc.render())
    return 0


def cmd_segment(args) -> int:
    cfg = _resolve(args)
    out = _prepare_out(args)
    manifest = _manifest_from(args, cfg, "eval")
    model, stats, label = _backbone_for_eval(args, cfg, manifest)
    tiles = TileCache(manifest)
    labels = manifest.labels()
    indices = np.flatnonzero(labels >= 1)
    if indices.size == 0:
        raise DataError("segmentation needs positive-class entries with masks")
    results = probe_mod.segmentation_sweep(
        model, tiles, indices, list(cfg.eval.seg_scales), cfg.eval.k_folds,
        cfg.probe, stats, cfg.crop.global_size, cfg.seed,
    )
    doc = MetricsDocument("segment", cfg.digest(), cfg.seed)
    doc.add_scalar("backbone", label)
    doc.add_scalar("mode", cfg.probe.mode)
    for scale, fold_scores in results.items():
        for fold, v in enumerate(fold_scores):
            doc.add_row("dice", v, scale=scale, fold=fold)
        doc.add_row("dice_mean", float(np.mean(fold_scores)), scale=scale)
        doc.add_row("dice_std", float(np.std(fold_scores)), scale=scale)
    doc.write(out / "segment.metrics")
    print(doc.render())
    return 0


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    out = _prepare_out(args)
    manifest = _manifest_from(args, cfg, "eval")
    backbones: list[tuple[str, MultiSpectralViT, BandStats]] = []
    if args.include_scratch:
        model = build_backbone(cfg.vit, cfg.seed)
        model.eval()
        backbones.append(("scratch", model, compute_band_stats(manifest)))
    for path in args.checkpoints or []:
        model, stats = load_eval_backbone(path)
        backbones.append((Path(path).stem, model, stats))
    if not backbones:
        raise ConfigError("sweep needs --checkpoints and/or --include-scratch")
    doc = MetricsDocument("sweep", cfg.digest(), cfg.seed)
    for label, model, stats in backbones:
        db = probe_mod.embed_dataset(model, manifest, stats, cfg.crop.global_size)
        for k in cfg.eval.k_list:
            doc.add_row("map_at_k", probe_mod.map_at_k(db, k), k=k, model=label)
        results = probe_mod.classification_sweep(
            db, list(cfg.eval.scales), cfg.eval.k_folds, cfg.probe, cfg.seed
        )
        for scale, fold_metrics in results.items():
            doc.add_row("f1_mean", float(np.mean([m.f1 for m in fold_metrics])), scale=scale, model=label)
    doc.write(out / "sweep.metrics")
    print(doc.render())
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="andesctl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset with masks")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="quantize, tile, and filter scene rasters")
    _add_common(p)
    p.add_argument("scenes", nargs="+", type=Path, help="MST1 scene files (u8 or f32)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("pretrain", help="run self-distillation pretraining")
    _add_common(p)
    p.add_argument("--manifest", type=Path, default=None, help="training manifest")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")
    p.add_argument("--steps", type=int, default=None, help="train to this absolute step")
    p.set_defaults(func=cmd_pretrain)

    for name, fn, extras in (
        ("embed", cmd_embed, ()),
        ("retrieve", cmd_retrieve, ("embeddings",)),
        ("classify", cmd_classify, ()),
        ("segment", cmd_segment, ()),
    ):
        p = sub.add_parser(name, help=f"{name} with a frozen or fine-tuned backbone")
        _add_common(p)
        p.add_argument("--manifest", type=Path, default=None, help="evaluation manifest")
        p.add_argument("--checkpoint", type=Path, default=None, help="pretraining checkpoint")
        if "embeddings" in extras:
            p.add_argument("--embeddings", type=Path, default=None, help="precomputed EMB1 file")
        p.set_defaults(func=fn)

    p = sub.add_parser("sweep", help="compare checkpoints on retrieval and probing")
    _add_common(p)
    p.add_argument("--manifest", type=Path, default=None)
    p.add_argument("--checkpoints", nargs="*", type=Path, default=None)
    p.add_argument("--include-scratch", action="store_true")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
