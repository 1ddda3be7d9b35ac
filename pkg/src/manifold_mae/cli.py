"""Command-line entry point: gen-data, pretrain, probe, knn, extract.

Exit codes: 0 success, 1 runtime failure, 2 validation failure. Every
failure prints a single ``error[kind]: message`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from .checkpoint import load_weights
from .config import (RunConfig, apply_overrides, load_config_file,
                     resolve_config, serialize_config)
from .data import DatasetContainer, eval_transform, generate_synthetic
from .errors import (CheckpointError, ConfigError, DataError, ManifoldMaeError,
                     TrainingAborted)
from .evaluate import (EvalReport, ProbeConfig, davies_bouldin, extract_features,
                       knn_classify, linear_probe)
from .extract import attention_maps, pca_layer_maps, write_matrix, write_pgm
from .train import pretrain
from .vit import VitMaeModel


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _common_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--seed", type=int, default=None, help="override the run seed")
    sub.add_argument("--out", type=str, default=None, help="output directory")
    sub.add_argument("--config", type=str, default=None,
                     help="config file path or preset name")
    sub.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="KEY=VALUE", help="override one config key")


def available_presets() -> list:
    base = resources.files("manifold_mae").joinpath("presets")
    return sorted(p.name[:-4] for p in base.iterdir() if p.name.endswith(".cfg"))


def _load_config(name_or_path: str | None) -> RunConfig:
    if name_or_path is None:
        return RunConfig()
    path = Path(name_or_path)
    if path.exists():
        return load_config_file(path)
    preset = resources.files("manifold_mae").joinpath(f"presets/{name_or_path}.cfg")
    if preset.is_file():
        from .config import config_from_items, parse_config_text
        return config_from_items(parse_config_text(preset.read_text()))
    raise ConfigError(f"config {name_or_path!r} is neither a file nor a preset "
                      f"(presets: {', '.join(available_presets())})")


def _build_config(args) -> RunConfig:
    cfg = _load_config(args.config)
    if args.overrides:
        cfg = apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "data", None):
        cfg.train_data = args.data
    return cfg


def _load_model(cfg: RunConfig, checkpoint: str) -> VitMaeModel:
    model = VitMaeModel(cfg.vit_config(), seed=cfg.seed)
    model.load_state(load_weights(checkpoint))
    return model


def cmd_gen_data(args) -> int:
    if args.per_class < 1:
        raise ConfigError(f"--per-class must be >= 1, got {args.per_class}")
    if args.classes < 1:
        raise ConfigError(f"--classes must be >= 1, got {args.classes}")
    ds = generate_synthetic(args.classes, args.per_class, args.size,
                            seed=args.seed if args.seed is not None else 0,
                            noise=args.noise)
    out = Path(args.out or "dataset.mgds")
    ds.write(out)
    histogram = np.bincount(ds.labels, minlength=ds.class_count).tolist()
    print(f"wrote {out}: {ds.n} samples, {ds.channels} x {ds.height} x {ds.width}, "
          f"classes {histogram}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _build_config(args)
    if not cfg.train_data:
        raise ConfigError("no training data: pass --data or set train_data")
    ds = DatasetContainer.read(cfg.train_data)
    cfg = resolve_config(cfg, ds)
    out_dir = Path(args.out or "run")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.cfg").write_text(serialize_config(cfg))
    model = VitMaeModel(cfg.vit_config(), seed=cfg.seed)
    pretrain(model, ds, cfg, out_dir=out_dir, log=print)
    print(f"done: checkpoints and metrics in {out_dir}")
    return 0


def _eval_setup(args):
    cfg = _build_config(args)
    cfg.validate()
    if not cfg.norm_mean:
        raise ConfigError("probe/knn need a resolved config (with norm stats); "
                          "point --config at config.resolved.cfg from the run")
    model = _load_model(cfg, args.checkpoint)
    train_ds = DatasetContainer.read(args.train_data)
    test_ds = DatasetContainer.read(args.test_data)
    return cfg, model, train_ds, test_ds


def _write_report(report: EvalReport, out: str | None, name: str) -> None:
    text = json.dumps(report.as_dict())
    print(text)
    if out:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / name).write_text(text + "\n")


def cmd_probe(args) -> int:
    cfg, model, train_ds, test_ds = _eval_setup(args)
    if args.epochs < 2:
        raise ConfigError(f"--epochs must be >= 2, got {args.epochs}")
    # milestones sit at 60% and 80% of the schedule ((60, 80) for 100 epochs)
    milestones = tuple(sorted({min(max(1, round(f * args.epochs)), args.epochs - 1)
                               for f in (0.6, 0.8)}))
    pcfg = ProbeConfig(epochs=args.epochs, milestones=milestones)
    t0 = time.perf_counter()
    acc = linear_probe(model, train_ds, test_ds, cfg.norm_mean, cfg.norm_std,
                       pcfg, seed=cfg.seed, feature=args.feature)
    feats, labels = extract_features(model, test_ds, cfg.norm_mean, cfg.norm_std,
                                     feature=args.feature)
    elapsed = time.perf_counter() - t0
    report = EvalReport(linear_acc=acc, dbi=davies_bouldin(feats, labels),
                        images_per_sec=(train_ds.n + 2 * test_ds.n) / elapsed)
    _write_report(report, args.out, "eval_probe.json")
    return 0


def cmd_knn(args) -> int:
    if args.k < 1:
        raise ConfigError(f"--k must be >= 1, got {args.k}")
    cfg, model, train_ds, test_ds = _eval_setup(args)
    t0 = time.perf_counter()
    train_feats, train_labels = extract_features(model, train_ds, cfg.norm_mean,
                                                 cfg.norm_std, feature=args.feature)
    test_feats, test_labels = extract_features(model, test_ds, cfg.norm_mean,
                                               cfg.norm_std, feature=args.feature)
    elapsed = time.perf_counter() - t0
    report = EvalReport(knn_acc=knn_classify(train_feats, train_labels,
                                             test_feats, test_labels, k=args.k),
                        dbi=davies_bouldin(test_feats, test_labels),
                        images_per_sec=(train_ds.n + test_ds.n) / elapsed)
    _write_report(report, args.out, "eval_knn.json")
    return 0


def cmd_extract(args) -> int:
    cfg = _build_config(args)
    cfg.validate()
    if not cfg.norm_mean:
        raise ConfigError("extract needs a resolved config (with norm stats)")
    model = _load_model(cfg, args.checkpoint)
    ds = DatasetContainer.read(args.data)
    if not 0 <= args.index < ds.n:
        raise ConfigError(f"--index {args.index} outside dataset of {ds.n}")
    count = args.count
    if count < 1 or args.index + count > ds.n:
        raise ConfigError(f"--count {count} out of range from index {args.index}")
    out_dir = Path(args.out or "extracts")
    out_dir.mkdir(parents=True, exist_ok=True)
    images = np.stack([
        eval_transform(ds.images[i], cfg.image_size, cfg.norm_mean, cfg.norm_std)
        for i in range(args.index, args.index + count)])
    written = []
    if args.kind == "pca":
        maps, diags = pca_layer_maps(model, images)
        for layer in sorted(maps):
            if not diags[layer].converged:
                print(f"warning: layer {layer} power iteration stopped at "
                      f"residual {diags[layer].residual:.3e}", file=sys.stderr)
            for j in range(count):
                stem = f"pca_layer{layer}_img{args.index + j}"
                write_matrix(out_dir / f"{stem}.txt", maps[layer][j])
                write_pgm(out_dir / f"{stem}.pgm", maps[layer][j])
                written.append(stem)
    else:
        for j in range(count):
            heads = attention_maps(model, images[j])
            for h in range(heads.shape[0]):
                stem = f"attention_head{h}_img{args.index + j}"
                write_matrix(out_dir / f"{stem}.txt", heads[h])
                write_pgm(out_dir / f"{stem}.pgm", heads[h])
                written.append(stem)
    print(f"wrote {len(written)} maps to {out_dir}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="manifold-mae",
                     description="Masked-autoencoder pretraining with manifold "
                                 "regularization, at desk scale.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="write a synthetic dataset container")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.06)
    _common_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = subs.add_parser("pretrain", help="run self-supervised pretraining")
    p.add_argument("--data", type=str, default=None, help="dataset container path")
    _common_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = subs.add_parser("probe", help="linear probe on a frozen encoder")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--train-data", type=str, required=True)
    p.add_argument("--test-data", type=str, required=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--feature", choices=("pooled", "cls"), default="pooled")
    _common_flags(p)
    p.set_defaults(func=cmd_probe)

    p = subs.add_parser("knn", help="k-nearest-neighbour evaluation")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--train-data", type=str, required=True)
    p.add_argument("--test-data", type=str, required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--feature", choices=("pooled", "cls"), default="pooled")
    _common_flags(p)
    p.set_defaults(func=cmd_knn)

    p = subs.add_parser("extract", help="write PCA or attention heatmaps")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--kind", choices=("pca", "attention"), required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    _common_flags(p)
    p.set_defaults(func=cmd_extract)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as e:
        print(f"error[config]: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"error[data]: {e}", file=sys.stderr)
        return 1
    except CheckpointError as e:
        print(f"error[checkpoint]: {e}", file=sys.stderr)
        return 1
    except TrainingAborted as e:
        print(f"error[runtime]: {e}", file=sys.stderr)
        return 1
    except ManifoldMaeError as e:
        print(f"error[runtime]: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error[io]: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
