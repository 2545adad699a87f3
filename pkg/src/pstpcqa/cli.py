"""Command-line interface: score clouds, extract patches, train, evaluate.

Subcommands:
    score    predict the quality of one PLY file with trained weights
    patches  extract and serialize a patch set (PSTP binary)
    train    run the training protocol described by a manifest
    info     print the per-layer parameter table for a configuration
    eval     recompute metrics from a predicted/ground-truth pairs CSV

Exit codes: 0 on success, 2 on I/O or configuration errors, 3 on
incompatible weights.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from pstpcqa import evaluation, network, patching, pointcloud, training
from pstpcqa.network import IncompatibleWeights, ModelConfig, SGPConfig
from pstpcqa.training import LossConfig, ScheduleConfig

EXIT_IO = 2
EXIT_WEIGHTS = 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_IO):
        super().__init__(message)
        self.code = code


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read JSON {path}: {exc}") from exc


def _sgp_from_dict(d: dict, defaults: SGPConfig) -> SGPConfig:
    return SGPConfig(
        n_out=d.get("n_out", defaults.n_out),
        k=d.get("k", defaults.k),
        d_out=d.get("d_out", defaults.d_out),
        mlp_widths=tuple(d.get("mlp_widths", defaults.mlp_widths)),
        conv_groups=d.get("conv_groups", defaults.conv_groups),
    )


def config_from_dict(doc: dict) -> ModelConfig:
    """Build a ModelConfig from a JSON document; absent fields keep defaults.

    An empty document therefore reproduces the reference configuration
    (K=16, Np=14900, Ns=1024, Nt=8192, GVP pooling, both branches on).
    """
    base = ModelConfig()
    try:
        return ModelConfig(
            K=doc.get("K", base.K),
            Np=doc.get("Np", base.Np),
            Ns=doc.get("Ns", base.Ns),
            Nt=doc.get("Nt", base.Nt),
            sgp1=_sgp_from_dict(doc.get("sgp1", {}), base.sgp1),
            sgp2=_sgp_from_dict(doc.get("sgp2", {}), base.sgp2),
            side_branch_channels=doc.get("side_branch_channels", base.side_branch_channels),
            pooling=doc.get("pooling", base.pooling),
            use_tfe=doc.get("use_tfe", base.use_tfe),
            use_sfe=doc.get("use_sfe", base.use_sfe),
            use_lbe_weights=doc.get("use_lbe_weights", base.use_lbe_weights),
            seed=doc.get("seed", base.seed),
        )
    except (ValueError, TypeError) as exc:
        raise CliError(f"bad model configuration: {exc}") from exc


def loss_from_dict(doc: dict) -> LossConfig:
    try:
        return LossConfig(alpha=doc.get("alpha", 1.0), beta=doc.get("beta", 1.0))
    except ValueError as exc:
        raise CliError(f"bad loss configuration: {exc}") from exc


def schedule_from_dict(doc: dict) -> ScheduleConfig:
    base = ScheduleConfig()
    try:
        return ScheduleConfig(
            eta_max=doc.get("eta_max", base.eta_max),
            eta_min=doc.get("eta_min", base.eta_min),
            t_max=doc.get("t_max", base.t_max),
            epochs=doc.get("epochs", base.epochs),
            batch_size=doc.get("batch_size", base.batch_size),
        )
    except ValueError as exc:
        raise CliError(f"bad schedule configuration: {exc}") from exc


def _load_config(path, seed_override=None) -> ModelConfig:
    doc = _load_json(path) if path else {}
    cfg = config_from_dict(doc)
    if seed_override is not None:
        cfg = dataclasses.replace(cfg, seed=seed_override)
    return cfg


def _load_labels(path, root: Path):
    """Read a labels CSV (path, mos, content_id, distortion_tag)."""
    samples = []
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            required = {"path", "mos", "content_id"}
            if reader.fieldnames is None or not required.issubset(reader.fieldnames):
                raise CliError(f"{path}: label file must have columns path, mos, content_id")
            for row in reader:
                cloud = pointcloud.load_ply(root / row["path"])
                samples.append(pointcloud.LabeledSample(
                    cloud=pointcloud.normalize(cloud),
                    mos=float(row["mos"]),
                    content_id=row["content_id"],
                    distortion_tag=row.get("distortion_tag", "") or "",
                ))
    except OSError as exc:
        raise CliError(f"cannot read labels: {exc}") from exc
    except (ValueError, pointcloud.MalformedHeader, pointcloud.MissingColor,
            pointcloud.TruncatedBody) as exc:
        raise CliError(f"bad label file or cloud: {exc}") from exc
    if not samples:
        raise CliError(f"{path}: no samples")
    return samples


def cmd_score(args) -> int:
    config = _load_config(args.config, args.seed)
    try:
        weights = network.load_weights(args.weights, config)
    except (network.VersionMismatch, network.ChecksumMismatch, network.NameMismatch,
            IncompatibleWeights) as exc:
        raise CliError(str(exc), code=EXIT_WEIGHTS) from exc
    try:
        cloud = pointcloud.load_ply(args.ply)
    except (pointcloud.IoFailure, pointcloud.MalformedHeader, pointcloud.MissingColor,
            pointcloud.TruncatedBody) as exc:
        raise CliError(str(exc)) from exc
    try:
        bundle = network.score_cloud(cloud, config, weights, workers=args.workers)
    except IncompatibleWeights as exc:
        raise CliError(str(exc), code=EXIT_WEIGHTS) from exc

    if args.json:
        doc = {
            "score": bundle.global_score,
            "patches": [{"weight": float(w), "score": float(s)}
                        for w, s in zip(bundle.patch_weights, bundle.patch_scores)],
            "seed": config.seed,
        }
        print(json.dumps(doc))
    else:
        print(f"score: {bundle.global_score:.6f}")
        for i, (w, s) in enumerate(zip(bundle.patch_weights, bundle.patch_scores)):
            print(f"patch {i:2d}: weight={w:+.6f} score={s:+.6f}")
    return 0


def cmd_patches(args) -> int:
    config = _load_config(args.config, args.seed)
    try:
        cloud = pointcloud.load_ply(args.ply)
    except (pointcloud.IoFailure, pointcloud.MalformedHeader, pointcloud.MissingColor,
            pointcloud.TruncatedBody) as exc:
        raise CliError(str(exc)) from exc
    patches = patching.extract_patches(
        pointcloud.normalize(cloud),
        patching.PatchConfig(config.K, config.Np, config.seed),
        workers=args.workers)
    try:
        patching.save_patches(patches, args.out)
    except pointcloud.IoFailure as exc:
        raise CliError(str(exc)) from exc
    print(f"wrote {patches.K}x{patches.Np} patches to {args.out}")
    return 0


def cmd_info(args) -> int:
    config = _load_config(args.config, args.seed)
    rows = [(name, shape, int(np.prod(shape)))
            for name, shape, _, _ in network._parameter_specs(config)]
    width = max(len(name) for name, _, _ in rows)
    print(f"{'parameter':<{width}}  {'shape':<18} count")
    for name, shape, count in rows:
        print(f"{name:<{width}}  {str(tuple(shape)):<18} {count}")
    total = network.param_count(config)
    print(f"total trainable parameters: {total} ({total / 1e6:.2f}M)")
    return 0


def cmd_eval(args) -> int:
    pred, truth = [], []
    try:
        with open(args.pairs, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"predicted", "ground_truth"}.issubset(reader.fieldnames):
                raise CliError(f"{args.pairs}: need columns predicted, ground_truth")
            for row in reader:
                pred.append(float(row["predicted"]))
                truth.append(float(row["ground_truth"]))
    except OSError as exc:
        raise CliError(f"cannot read pairs: {exc}") from exc
    try:
        report = evaluation.evaluate(pred, truth)
    except (evaluation.LengthMismatch, evaluation.ConstantInput) as exc:
        raise CliError(str(exc)) from exc
    text = evaluation.format_report(report)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_train(args) -> int:
    manifest = _load_json(args.manifest)
    for key in ("label_file", "output_dir"):
        if key not in manifest:
            raise CliError(f"manifest is missing required key {key!r}")
    root = Path(manifest.get("dataset_root", Path(args.manifest).parent))
    seed = int(manifest.get("seed", 0))

    config_doc = manifest.get("config", {})
    if isinstance(config_doc, str):
        config_doc = _load_json(root / config_doc)
    config = dataclasses.replace(config_from_dict(config_doc), seed=seed)
    loss_cfg = loss_from_dict(manifest.get("loss", {}))
    sched_cfg = schedule_from_dict(manifest.get("schedule", {}))

    samples = _load_labels(root / manifest["label_file"], root)

    split_doc = manifest.get("split", {"scheme": "leave-one-content-out"})
    scheme = split_doc.get("scheme", "leave-one-content-out")
    try:
        plans = training.make_splits(
            samples, scheme=scheme, seed=seed,
            train_contents=split_doc.get("train_contents"),
            test_contents=split_doc.get("test_contents"))
        for plan in plans:
            training.check_no_leakage(plan, samples)
    except (training.EmptyContent, ValueError) as exc:
        raise CliError(f"bad split: {exc}") from exc

    out_root = Path(manifest["output_dir"])
    out_root.mkdir(parents=True, exist_ok=True)

    # Patch extraction is deterministic and dominates runtime on real
    # clouds; cache each sample's patches on disk before any fold trains.
    cache_dir = out_root / "patch_cache"
    cache_dir.mkdir(exist_ok=True)
    patch_sets = {}
    for i, sample in enumerate(samples):
        cache_path = cache_dir / f"sample_{i:04d}.pstp"
        if cache_path.exists():
            patch_sets[i] = patching.load_patches(cache_path)
        else:
            patch_sets[i] = patching.extract_patches(
                sample.cloud, patching.PatchConfig(config.K, config.Np, config.seed))
            patching.save_patches(patch_sets[i], cache_path)

    failures = 0
    for plan in plans:
        fold_dir = out_root / f"fold_{plan.fold_index:02d}"
        fold_dir.mkdir(exist_ok=True)
        try:
            log_lines = []
            result = training.fit(samples, config, loss_cfg, sched_cfg, plan, seed=seed,
                                  patch_sets=patch_sets,
                                  on_epoch=lambda r: log_lines.append(
                                      f"epoch {r.epoch} lr {r.lr:.8g} train_loss {r.train_loss:.8g}"))
            network.save_weights(result.weights, fold_dir / "weights.pstw")
            (fold_dir / "log.txt").write_text(
                f"seed {seed}\nmos_min {result.mos_min}\nmos_max {result.mos_max}\n"
                + "\n".join(log_lines) + "\n")
            preds, truths = training.predict(samples, list(plan.test), config, result,
                                             patch_sets=patch_sets)
            report = evaluation.evaluate(preds, truths,
                                         scale_min=result.mos_min, scale_max=result.mos_max)
            (fold_dir / "report.txt").write_text(f"seed {seed}\n" + evaluation.format_report(report))
            evaluation.scatter_csv(report, fold_dir / "scatter.csv")
            print(f"fold {plan.fold_index}: n={report.n} plcc={report.plcc:.4f} "
                  f"srcc={report.srcc:.4f} krcc={report.krcc:.4f} rmse={report.rmse:.4f}")
        except (evaluation.LengthMismatch, evaluation.ConstantInput) as exc:
            failures += 1
            (fold_dir / "report.txt").write_text(f"seed {seed}\nfold failed: {exc}\n")
            print(f"fold {plan.fold_index}: failed ({exc})", file=sys.stderr)
    if failures == len(plans):
        raise CliError("every fold failed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pstpcqa",
                                     description="Patch-based no-reference point cloud quality assessment")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", help="score one PLY file")
    p.add_argument("ply")
    p.add_argument("--weights", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--json", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("patches", help="extract patches to a PSTP file")
    p.add_argument("ply")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_patches)

    p = sub.add_parser("train", help="train per a run manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("info", help="print the parameter table")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("eval", help="metrics from a pairs CSV")
    p.add_argument("pairs")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (pointcloud.IoFailure, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
