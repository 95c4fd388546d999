"""Command-line entry point: ``scenessl <command> ...``.

Exit codes: 0 success, 1 a grid finished with failed cells, 2 usage,
configuration or data error. Every command takes its randomness from
``--seed`` (or the config's seed); nothing reads system entropy.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import __version__

RUN_DIR_ENV = "SCENESSL_RUN_DIR"
EXIT_OK, EXIT_PARTIAL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("scenessl")


class UsageError(Exception):
    pass


def _fraction(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"must be in (0, 1), got {v}")
    return v


def _emit(text: str, out) -> None:
    if out:
        path = Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# -- data ------------------------------------------------------------------

def class_count_table(manifest) -> str:
    """Per-class split counts, columns as Class / Test / Train / Val / % (share of all mapped rows)."""
    from .data import PLACES8_CLASSES

    classes = manifest.classes()
    order = [c for c in PLACES8_CLASSES if c in classes] + [c for c in classes if c not in PLACES8_CLASSES]
    counts = {s: manifest.class_counts(s) for s in ("test", "train", "val")}
    total = sum(manifest.class_counts().values())
    lines = ["class\ttest\ttrain\tval\t%"]
    for c in order:
        n = sum(counts[s][c] for s in counts)
        lines.append(f"{c}\t{counts['test'][c]}\t{counts['train'][c]}\t{counts['val'][c]}\t{100.0 * n / total:.1f}")
    lines.append(f"total\t{sum(counts['test'].values())}\t{sum(counts['train'].values())}\t"
                 f"{sum(counts['val'].values())}\t100.0")
    return "\n".join(lines) + "\n"


def cmd_data_prepare(args) -> int:
    from .data import build_remap_table, read_listing, remap_manifest, stratified_split
    from .numerics import Rng

    manifest = read_listing(args.listing)
    manifest = remap_manifest(manifest, build_remap_table())
    manifest = stratified_split(manifest, args.test_frac, Rng(args.seed).child("test-split"))
    manifest = manifest.with_rows(manifest.rows, seed=args.seed)
    manifest.write(args.out)
    sys.stdout.write(class_count_table(manifest))
    print(f"unmapped rows: {manifest.unmapped_count()}")
    print(f"wrote {args.out} (checksum {manifest.checksum()})")
    return EXIT_OK


def cmd_toygen(args) -> int:
    from .data import ToySceneSpec, generate_toy_scenes

    spec = ToySceneSpec(classes=args.classes, image_size=args.size, per_class=args.per_class, seed=args.seed,
                        style=args.style, synthetic=args.style == "render",
                        source_tag="toy-render" if args.style == "render" else "toy-real")
    ds = generate_toy_scenes(spec, root=args.out)
    print(f"wrote {len(ds.images)} images to {args.out} ({spec.classes} classes x {spec.per_class})")
    print(f"manifest {Path(args.out) / 'manifest.tsv'} checksum {ds.manifest.checksum()}")
    return EXIT_OK


# -- grid ------------------------------------------------------------------

def _run_dir(args, name: str) -> Path:
    if args.run_dir:
        return Path(args.run_dir)
    base = os.environ.get(RUN_DIR_ENV)
    return Path(base) / name if base else Path("runs") / name


def cmd_grid_run(args) -> int:
    from .train import ExperimentConfig, run_grid

    cfg = ExperimentConfig.read(args.config)
    run_dir = _run_dir(args, cfg["experiment"]["name"])
    result = run_grid(cfg, run_dir, workers=args.workers, resume=args.resume)
    ok = len(result.records) - len(result.failed)
    print(f"run directory: {run_dir}")
    print(f"cells: {len(result.records)} ({ok} ok, {len(result.failed)} failed, {result.skipped} reused)")
    sys.stdout.write((run_dir / "reports" / "summary.tsv").read_text(encoding="utf-8"))
    if result.failed:
        print("failed cells:")
        for r in result.failed:
            print(f"  {r.variant} rep={r.repetition} fold={r.fold}: {r.message}")
        return EXIT_PARTIAL
    return EXIT_OK


# -- evaluate --------------------------------------------------------------

def _read_groups(path) -> dict[str, str]:
    groups = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise UsageError(f"{path}:{lineno}: expected 'uri<TAB>group'")
        groups[parts[0]] = parts[1]
    return groups


def cmd_evaluate(args) -> int:
    from .data import SampleManifest, load_images
    from .eval import evaluate, grouped_report, grouped_tsv
    from .model import load_checkpoint

    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint {args.checkpoint} not found")
    if not Path(args.manifest).is_file():
        raise UsageError(f"manifest {args.manifest} not found")
    ckpt = load_checkpoint(args.checkpoint)
    manifest = SampleManifest.read(args.manifest)
    rows = [r for r in manifest.rows if r.mapped and (args.split == "all" or r.split == args.split)]
    if not rows:
        raise UsageError(f"manifest has no mapped rows in split {args.split!r}")
    names = list(ckpt.class_names) or [f"class{i}" for i in range(ckpt.config.num_classes)]
    absent = sorted({r.mapped_class for r in rows} - set(names))
    if absent:
        raise UsageError(f"classes absent from the model head: {absent}")
    enc = ckpt.config.encoder
    root = args.image_root or Path(args.manifest).parent
    images, kept, skipped = load_images([r.uri for r in rows], tuple(enc.input_size[:2]), root)
    if skipped:
        print(f"skipped {skipped} unreadable images", file=sys.stderr)
    rows = [rows[i] for i in kept]
    report = evaluate(ckpt.build_model(), images, [r.mapped_class for r in rows], names, [r.uri for r in rows])
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.tsv").write_text(report.summary_tsv(), encoding="utf-8")
        (out / "audit.tsv").write_text(report.audit_tsv(), encoding="utf-8")
        (out / "confusion_counts.tsv").write_text(report.confusion.to_tsv(), encoding="utf-8")
        (out / "confusion_percent.tsv").write_text(report.confusion.to_tsv(percent=True), encoding="utf-8")
    sys.stdout.write(report.summary_tsv())
    if args.groups:
        table = grouped_tsv(grouped_report(report, _read_groups(args.groups)))
        if out is not None:
            (out / "groups.tsv").write_text(table, encoding="utf-8")
        sys.stdout.write(table)
    return EXIT_OK


# -- best ------------------------------------------------------------------

def cmd_best(args) -> int:
    from .best import compare_variants, comparison_report
    from .records import read_records

    records = read_records(args.results)
    a, b = args.pair
    cmp = compare_variants(records, a, b, metric=args.metric, basis=args.basis, seed=args.seed,
                           chains=args.chains, draws=args.draws, warmup=args.warmup)
    s = cmp.summary
    print(cmp.verdict)
    print(f"basis: {s.basis} (n = {s.n[0]} per variant)")
    print(f"mean difference: {s.diff_mean:.6f}  95% HDI [{s.diff_hdi[0]:.6f}, {s.diff_hdi[1]:.6f}]")
    print(f"P(diff > 0): {s.p_direction:.4f}")
    print(f"effect size: {s.effect_size_mean:.4f}  95% HDI [{s.effect_size_hdi[0]:.4f}, {s.effect_size_hdi[1]:.4f}]")
    for p in s.rhat:
        acc = s.acceptance.get(p)
        print(f"  {p:7s} R-hat {s.rhat[p]:.4f}  ESS {s.ess[p]:.0f}" + (f"  acceptance {acc:.2f}" if acc else ""))
    if not s.converged:
        print("WARNING: chains did not converge (split R-hat above threshold)")
    if args.out:
        _emit(comparison_report([cmp]), args.out)
    return EXIT_OK


# -- plotdata --------------------------------------------------------------

def five_number(values) -> tuple[float, float, float, float, float]:
    """Tukey box: whiskers at the most extreme data within 1.5 IQR of the quartiles.

    Quartiles use linear interpolation between order statistics (numpy's
    default, Hyndman-Fan type 7).
    """
    v = np.sort(np.asarray(values, dtype=np.float64))
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo = v[v >= q1 - 1.5 * iqr].min()
    hi = v[v <= q3 + 1.5 * iqr].max()
    return float(lo), float(q1), float(med), float(q3), float(hi)


def plot_box(records, metric: str) -> str:
    by = defaultdict(list)
    for r in records:
        if r.ok:
            by[r.variant].append(r.metric(metric))
    lines = ["variant\tn\twhisker_low\tq1\tmedian\tq3\twhisker_high"]
    for v in sorted(by):
        lines.append(f"{v}\t{len(by[v])}\t" + "\t".join(f"{x:.6f}" for x in five_number(by[v])))
    return "\n".join(lines) + "\n"


def plot_lr_curve(args) -> str:
    from .train import ExperimentConfig, cosine_restart_lr

    lines = ["epoch\tlr"]
    if args.config:
        cfg = ExperimentConfig.read(args.config)
        stage = cfg.stage(args.stage, "cross_entropy" if args.stage == "finetune" else "nt_xent")
        n = stage.epochs * args.points_per_epoch
        for i in range(n):
            e = i / args.points_per_epoch
            lines.append(f"{e:.4f}\t{cosine_restart_lr(e, stage.schedule, stage.optimizer.base_lr):.8f}")
    else:
        import csv

        with open(args.results, encoding="utf-8") as fh:
            for row in csv.DictReader(fh, delimiter="\t"):
                if "lr" not in row:
                    raise UsageError(f"{args.results} has no lr column; pass a metrics stream or --config")
                lines.append(f"{row['epoch']}\t{row['lr']}")
    return "\n".join(lines) + "\n"


def plot_confusion(records, variant: str | None, class_names) -> str:
    import json

    from .eval import ConfusionMatrix

    total = None
    for r in records:
        if r.ok and r.confusion and (variant is None or r.variant == variant):
            m = np.array(json.loads(r.confusion), dtype=np.int64)
            total = m if total is None else total + m
    if total is None:
        raise UsageError("no confusion matrices in the results" + (f" for variant {variant!r}" if variant else ""))
    n = total.shape[0]
    if class_names is None:
        from .data import PLACES8_CLASSES

        class_names = PLACES8_CLASSES if n == len(PLACES8_CLASSES) else tuple(f"class{i}" for i in range(n))
    if len(class_names) != n:
        raise UsageError(f"{len(class_names)} class names for a {n}-class matrix")
    return ConfusionMatrix(total, tuple(class_names)).to_tsv(percent=True)


def cmd_plotdata(args) -> int:
    from .records import read_records

    if args.kind == "lr-curve":
        text = plot_lr_curve(args)
    else:
        if not args.results:
            raise UsageError("--results is required for this kind")
        records = read_records(args.results)
        if args.kind == "box":
            text = plot_box(records, args.metric)
        else:
            names = tuple(x.strip() for x in args.class_names.split(",")) if args.class_names else None
            text = plot_confusion(records, args.variant, names)
    _emit(text, args.out)
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scenessl", description="Desk-scale self-supervised scene classification engine.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    data = sub.add_parser("data", help="dataset manifests")
    dsub = data.add_subparsers(dest="data_command", required=True)
    prep = dsub.add_parser("prepare", help="remap a listing to Places8 and split off a stratified test set")
    prep.add_argument("--listing", required=True, help="image directory or listing file")
    prep.add_argument("--remap", choices=["places8"], default="places8")
    prep.add_argument("--test-frac", type=_fraction, default=0.1)
    prep.add_argument("--seed", type=int, default=0)
    prep.add_argument("--out", required=True, help="manifest to write")
    prep.set_defaults(func=cmd_data_prepare)

    toy = sub.add_parser("toygen", help="write the procedural toy scene set")
    toy.add_argument("--classes", type=int, default=8)
    toy.add_argument("--per-class", type=int, default=120)
    toy.add_argument("--size", type=int, default=64)
    toy.add_argument("--seed", type=int, default=0)
    toy.add_argument("--style", choices=["photo", "render"], default="photo")
    toy.add_argument("--out", required=True)
    toy.set_defaults(func=cmd_toygen)

    grid = sub.add_parser("grid", help="experiment grids")
    gsub = grid.add_subparsers(dest="grid_command", required=True)
    run = gsub.add_parser("run", help="run (or resume) every cell of a grid config")
    run.add_argument("--config", required=True)
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--resume", action="store_true", help="reuse cells already committed in the run directory")
    run.add_argument("--run-dir", help=f"run directory (default: ${RUN_DIR_ENV}/<name> or runs/<name>)")
    run.set_defaults(func=cmd_grid_run)

    ev = sub.add_parser("evaluate", help="score a checkpoint on a manifest split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    ev.add_argument("--image-root", help="directory uris are relative to (default: the manifest's directory)")
    ev.add_argument("--groups", help="TSV of uri<TAB>group for a per-group report")
    ev.add_argument("--out", help="directory for metrics, audit and confusion tables")
    ev.set_defaults(func=cmd_evaluate)

    best = sub.add_parser("best", help="Bayesian comparison of two variants")
    best.add_argument("--results", required=True, help="runs.tsv of a grid")
    best.add_argument("--metric", default="balanced_acc",
                      choices=["balanced_acc", "accuracy", "test_balanced_acc", "test_accuracy"])
    best.add_argument("--pair", nargs=2, required=True, metavar=("A", "B"))
    best.add_argument("--basis", choices=["pooled", "fold-mean"], default="pooled")
    best.add_argument("--seed", type=int, default=0)
    best.add_argument("--chains", type=int, default=4)
    best.add_argument("--draws", type=int, default=5000)
    best.add_argument("--warmup", type=int, default=2000)
    best.add_argument("--out", help="comparison report TSV")
    best.set_defaults(func=cmd_best)

    plot = sub.add_parser("plotdata", help="plot-ready tables")
    plot.add_argument("--results", help="runs.tsv (box, confusion) or a metrics stream (lr-curve)")
    plot.add_argument("--kind", required=True, choices=["box", "lr-curve", "confusion"])
    plot.add_argument("--metric", default="balanced_acc")
    plot.add_argument("--variant", help="confusion: restrict to one variant")
    plot.add_argument("--class-names", help="confusion: comma-separated class names")
    plot.add_argument("--config", help="lr-curve: compute the schedule from this config")
    plot.add_argument("--stage", default="finetune", choices=["object", "pretext", "finetune"])
    plot.add_argument("--points-per-epoch", type=int, default=10)
    plot.add_argument("--out")
    plot.set_defaults(func=cmd_plotdata)
    return p


def main(argv=None) -> int:
    from .errors import ConfigError, ContractError, DataError, FingerprintError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError, DataError, ContractError, FingerprintError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
