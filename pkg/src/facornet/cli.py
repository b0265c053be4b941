"""Command-line entry point: ``facornet <command> [--config PATH] [--seed N] [--out DIR] [--override k=v]``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .backbone import ToyBackbone, init_toy_backbone, open_source, write_tensor_store
from .checkpoint import load_checkpoint, load_model_state, save_model
from .config import RunConfig, load_run_config
from .data import (
    gen_synthetic, load_image_list, load_pair_list, load_quality_table, load_triplet_list, make_folds,
    quality_filter,
)
from .errors import ConfigurationError, DataError, FacorError
from .evaluation import (
    ThresholdPolicy, kfold_eval, quality_binned_eval, retrieval_eval, roc_auc, score_kin_pairs, tri_subject_eval,
    verification_eval,
)
from .model import FaCoRConfig, build_model
from .reports import (
    write_csv, write_kfold, write_pgm, write_quality_bins, write_retrieval, write_scores, write_trisubject,
    write_verification,
)
from .training import embed_pairs, full_model_gradcheck, train

log = logging.getLogger("facornet")

COMMANDS = (
    "train", "eval-verification", "eval-trisubject", "eval-retrieval", "eval-kfold",
    "gen-synthetic", "export-attention", "export-embeddings", "gradcheck",
)
GRADCHECK_TOL = 1e-4


def make_run_dir(root, command: str) -> Path:
    base = Path(root) / f"{time.strftime('%Y%m%d-%H%M%S')}-{command}"
    run, n = base, 1
    while run.exists():
        run = base.with_name(f"{base.name}-{n}")
        n += 1
    run.mkdir(parents=True)
    return run


def _data_dir(cfg: RunConfig) -> Path:
    if not cfg.data_dir:
        raise ConfigurationError("data_dir is not set (use --override data_dir=PATH)")
    path = Path(cfg.data_dir)
    if not path.is_dir():
        raise ConfigurationError(f"data_dir {path} does not exist")
    return path


def _model_and_backbone(cfg: RunConfig):
    """Model (and toy backbone) from ``cfg.checkpoint``, else a fresh seeded init."""
    if cfg.checkpoint:
        if not Path(cfg.checkpoint).is_file():
            raise ConfigurationError(f"checkpoint {cfg.checkpoint} does not exist")
        tensors, meta = load_checkpoint(cfg.checkpoint)
        mc = FaCoRConfig(**meta["model_config"])
        model = build_model(meta["arch"], mc, 0)
        load_model_state(model, tensors)
        backbone = ToyBackbone(mc, meta.get("image_size", cfg.synthetic.image_size))
        bb_state = {k[len("backbone."):]: v for k, v in tensors.items() if k.startswith("backbone.")}
        if bb_state:
            backbone.load_state_dict(bb_state)
        return model, backbone, mc
    model = build_model(cfg.arch, cfg.model, cfg.seed)
    return model, init_toy_backbone(cfg.model, cfg.seed, cfg.synthetic.image_size), cfg.model


def _pairs(data_dir: Path, split: str, cfg: RunConfig, required: bool = True):
    path = data_dir / f"pairs_{split}.csv"
    if not path.exists():
        if required:
            raise DataError(f"missing pair list {path}")
        return None
    pairs = load_pair_list(path)
    if cfg.eval.quality_threshold is not None:
        pairs = quality_filter(pairs, load_quality_table(data_dir / "quality.csv"), cfg.eval.quality_threshold)
    return pairs


def _policy(cfg: RunConfig) -> ThresholdPolicy:
    return ThresholdPolicy(cfg.eval.policy, cfg.eval.fixed_threshold)


def cmd_gen_synthetic(cfg: RunConfig, run: Path) -> dict:
    ds = gen_synthetic(cfg.synthetic, cfg.seed, cfg.model)
    out = ds.write(run / "data")
    return {"data_dir": out.relative_to(run).as_posix(), "pairs": {k: len(v) for k, v in ds.pairs.items()}}


def cmd_train(cfg: RunConfig, run: Path) -> dict:
    data = _data_dir(cfg)
    model, backbone, mc = _model_and_backbone(cfg)
    source = open_source(data, mc, backbone, trainable=not cfg.train.freeze_backbone)
    meta = {"arch": cfg.arch, "model_config": mc.to_dict(), "image_size": backbone.image_size}
    result = train(cfg.train, _pairs(data, "train", cfg), source, model, run / "checkpoints", meta=meta)
    ckpt = save_model(run / "model.ckpt", model.float(), meta,
                      {f"backbone.{k}": v for k, v in backbone.state_dict().items()})
    means = result.epoch_means
    write_csv(run / "epoch_loss.csv", ["epoch", "mean_loss"], list(enumerate(means)))
    return {"checkpoint": ckpt.relative_to(run).as_posix(), "first_epoch_loss": means[0], "final_epoch_loss": means[-1]}


def _scored(cfg, data, split, model, source, required=True):
    pairs = _pairs(data, split, cfg, required)
    return None if pairs is None else score_kin_pairs(model, source, pairs)


def cmd_eval_verification(cfg: RunConfig, run: Path) -> dict:
    data = _data_dir(cfg)
    model, backbone, mc = _model_and_backbone(cfg)
    source = open_source(data, mc, backbone)
    test = _scored(cfg, data, "test", model, source)
    val = _scored(cfg, data, "val", model, source, required=False)
    report = verification_eval(test, _policy(cfg), val)
    write_scores(run / "scores.csv", test)
    print(write_verification(run, cfg.arch, report), end="")
    summary = {"average": report.average, "overall": report.overall, "threshold": report.threshold}
    labels = [s.pair.label for s in test]
    if any(labels) and not all(labels):
        summary["auc"] = roc_auc([s.score for s in test], labels)
    if cfg.eval.quality_bins and (data / "quality.csv").exists():
        bins = quality_binned_eval(test, load_quality_table(data / "quality.csv"), threshold=report.threshold)
        print(write_quality_bins(run, bins), end="")
    return summary


def cmd_eval_trisubject(cfg: RunConfig, run: Path) -> dict:
    data = _data_dir(cfg)
    model, backbone, mc = _model_and_backbone(cfg)
    source = open_source(data, mc, backbone)
    test = load_triplet_list(data / "triplets_test.csv")
    val_path = data / "triplets_val.csv"
    val = load_triplet_list(val_path) if val_path.exists() else None
    report = tri_subject_eval(test, model, source, _policy(cfg), cfg.eval.fusion, val)
    print(write_trisubject(run, cfg.arch, report), end="")
    return {"average": report.average, "threshold": report.threshold}


def cmd_eval_retrieval(cfg: RunConfig, run: Path) -> dict:
    data = _data_dir(cfg)
    model, backbone, mc = _model_and_backbone(cfg)
    source = open_source(data, mc, backbone)
    probes = load_image_list(data / "retrieval_probes.csv")
    gallery = load_image_list(data / "retrieval_gallery.csv")
    result = retrieval_eval(probes, gallery, model, source, cfg.eval.ks, cfg.eval.backbone_only)
    print(write_retrieval(run, cfg.arch, result), end="")
    return {"rank_at_k": {str(k): v for k, v in result.rank_at_k.items()}, "avg": result.avg}


def cmd_eval_kfold(cfg: RunConfig, run: Path) -> dict:
    data = _data_dir(cfg)
    pairs = [p for split in ("train", "val", "test") for p in (_pairs(data, split, cfg, False) or [])]
    folds = make_folds(pairs, cfg.eval.kfolds, cfg.seed)
    _, backbone, mc = _model_and_backbone(cfg)

    def run_fold(train_pairs, test_pairs, fold):
        model = build_model(cfg.arch, mc, cfg.seed)
        source = open_source(data, mc, backbone, trainable=False)
        train(cfg.train, train_pairs, source, model)
        report = verification_eval(score_kin_pairs(model, source, test_pairs), _policy(cfg),
                                   score_kin_pairs(model, source, train_pairs))
        return {t: a for t, a in report.accuracy.items() if t not in report.flagged}

    report = kfold_eval(folds, pairs, run_fold)
    print(write_kfold(run, report), end="")
    return {"average": report.average}


def _export_pairs(cfg: RunConfig, data: Path):
    pairs = _pairs(data, "test", cfg)
    return pairs[: cfg.eval.max_pairs] if cfg.eval.max_pairs > 0 else pairs


@torch.no_grad()
def cmd_export_attention(cfg: RunConfig, run: Path) -> dict:
    data = _data_dir(cfg)
    model, backbone, mc = _model_and_backbone(cfg)
    if not hasattr(model, "proj_a"):
        raise ConfigurationError("attention export needs the facor architecture")
    source = open_source(data, mc, backbone)
    out = run / "attention"
    out.mkdir()
    index = []
    pairs = _export_pairs(cfg, data)
    forward = embed_pairs(model, source, pairs)
    reverse = embed_pairs(model, source, [replace(p, img_a=p.img_b, img_b=p.img_a, label=False,
                                                  family_a=p.family_b, family_b=p.family_a) for p in pairs])
    for n, p in enumerate(pairs):
        beta = forward.beta.beta[n].double().numpy()
        beta_rev = reverse.beta.beta[n].double().numpy()
        heat_a = beta.sum(axis=0).reshape(mc.H, mc.W)
        heat_b = beta_rev.sum(axis=0).reshape(mc.H, mc.W)
        stem = f"pair{n:04d}"
        np.savetxt(out / f"{stem}_beta.csv", beta, delimiter=",", fmt="%.9g")
        np.savetxt(out / f"{stem}_heat_a.csv", heat_a, delimiter=",", fmt="%.9g")
        np.savetxt(out / f"{stem}_heat_b.csv", heat_b, delimiter=",", fmt="%.9g")
        write_pgm(out / f"{stem}_heat_a.pgm", heat_a)
        write_pgm(out / f"{stem}_heat_b.pgm", heat_b)
        index.append((stem, p.img_a, p.img_b, p.kin_type, "kin" if p.label else "non-kin"))
    write_csv(out / "index.csv", ["stem", "img_a", "img_b", "kin_type", "label"], index)
    return {"pairs": len(index), "dir": out.relative_to(run).as_posix()}


@torch.no_grad()
def cmd_export_embeddings(cfg: RunConfig, run: Path) -> dict:
    data = _data_dir(cfg)
    model, backbone, mc = _model_and_backbone(cfg)
    source = open_source(data, mc, backbone)
    pairs = _export_pairs(cfg, data)
    emb = embed_pairs(model, source, pairs)
    tensors = {}
    for n, p in enumerate(pairs):
        key = f"{p.img_a}~{p.img_b}"
        tensors[(key, "x_out_a")] = emb.x_out_a[n]
        tensors[(key, "x_out_b")] = emb.x_out_b[n]
    path = write_tensor_store(run / "embeddings", tensors, "embeddings.manifest")
    return {"pairs": len(pairs), "manifest": path.relative_to(run).as_posix()}


def cmd_gradcheck(cfg: RunConfig, run: Path) -> dict:
    loss = replace(cfg.train.loss, mode="rel-guided")
    report = full_model_gradcheck(cfg.model, cfg.seed, loss)
    write_csv(run / "gradcheck.csv", ["tensor", "max_rel_error"], report.rows())
    name, err = report.worst
    print(f"worst tensor {name}: max relative error {err:.3e} (step {report.step:g})")
    if err >= GRADCHECK_TOL:
        raise FacorError(f"gradient check failed: {name} has relative error {err:.3e} >= {GRADCHECK_TOL:g}")
    return {"worst": name, "max_rel_error": err}


HANDLERS = {
    "train": cmd_train,
    "eval-verification": cmd_eval_verification,
    "eval-trisubject": cmd_eval_trisubject,
    "eval-retrieval": cmd_eval_retrieval,
    "eval-kfold": cmd_eval_kfold,
    "gen-synthetic": cmd_gen_synthetic,
    "export-attention": cmd_export_attention,
    "export-embeddings": cmd_export_embeddings,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="facornet", description="Kinship representation learning toolkit.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--seed", type=int, help="global seed (overrides the config)")
    parser.add_argument("--out", help="output root (default: $FACOR_OUT or ./runs)")
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. train.lr=0.001 (repeatable)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def dispatch(command: str, cfg: RunConfig, out_root) -> tuple[int, Path]:
    """Run one command; summary paths are relative to the run directory."""
    run = make_run_dir(out_root, command)
    (run / "config.resolved.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    summary = HANDLERS[command](cfg, run)
    (run / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return 0, run


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    out_root = args.out or os.environ.get("FACOR_OUT") or "runs"
    try:
        cfg = load_run_config(args.config, args.override, args.seed)
        _, run = dispatch(args.command, cfg, out_root)
    except (FacorError, OSError) as exc:
        print(f"facornet {args.command}: error: {exc}", file=sys.stderr)
        return 1
    print(f"run directory: {run}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
