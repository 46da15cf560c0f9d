"""Command-line entry point: generate, train, eval, bench, plot.

Exit codes: 0 success, 1 runtime failure, 2 usage or IO error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import yaml

from . import __version__

logger = logging.getLogger("tfsnerf")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad arguments, missing inputs or refused overwrites (exit 2)."""


# ---------------------------------------------------------------------------
# helpers


def _resolve(root: Path, p) -> Path | None:
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else root / p


def _load_yaml(path: Path | None) -> dict:
    if path is None:
        return {}
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise UsageError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"{path} must hold a mapping at top level")
    return doc


def _train_config(path: Path | None, overrides: dict):
    from .training import TrainConfig

    doc = _load_yaml(path)
    doc.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from exc


def _need_dataset(path: Path | None):
    from .scene import load_dataset

    if path is None or not (path / "meta.json").exists():
        raise UsageError(f"dataset not found: {path}")
    return load_dataset(path)


def _claim_dir(out: Path, overwrite: bool, owned: tuple[str, ...]) -> None:
    """Refuse to write into a non-empty directory unless ``overwrite``; then clear only our own outputs."""
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise UsageError(f"{out} exists and is not empty (pass --overwrite)")
        for name in owned:
            target = out / name
            if target.is_dir():
                import shutil

                shutil.rmtree(target)
            elif target.exists():
                target.unlink()
    out.mkdir(parents=True, exist_ok=True)


def _parse_frames(spec: str | None, n: int) -> list[int] | None:
    if spec is None:
        return None
    try:
        if ":" in spec:
            parts = [int(x) if x else None for x in spec.split(":")]
            return list(range(n))[slice(*parts)]
        frames = [int(x) for x in spec.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --frames value {spec!r}") from exc
    bad = [t for t in frames if not 0 <= t < n]
    if bad:
        raise UsageError(f"frames out of range 0..{n - 1}: {bad}")
    return frames


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    from .scene import SceneSpec, dataset_hash, generate_dataset

    doc = _load_yaml(_resolve(args.root, args.spec))
    for key in ("frames", "cams"):
        if getattr(args, key) is not None:
            doc[key] = getattr(args, key)
    try:
        spec = SceneSpec.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid scene spec: {exc}") from exc
    out = _resolve(args.root, args.out)
    try:
        generate_dataset(spec, out, seed=args.seed, overwrite=args.overwrite)
    except FileExistsError as exc:
        raise UsageError(str(exc)) from exc
    meta = json.loads((out / "meta.json").read_text())
    print(
        f"dataset {out}: {meta['n_frames']} frames, {len(meta['cameras'])} camera(s), "
        f"entities {', '.join(meta['entities'])}, hash {dataset_hash(out)[:12]}"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import TrainingAborted, train, write_manifest

    ds_path = _resolve(args.root, args.dataset)
    _need_dataset(ds_path)
    cfg = _train_config(_resolve(args.root, args.config), {"backend": args.backend, "steps": args.steps, "seed": args.seed})
    out = _resolve(args.root, args.out)
    _claim_dir(out, args.overwrite, ("checkpoints", "train_log.csv", "manifest.json", "status.json"))
    try:
        status = train(cfg, ds_path, out, log_every=args.log_every)
    except TrainingAborted as exc:
        print(f"training aborted at {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"run {out}: {status['steps_done']} steps, backend {cfg.backend}, last checkpoint {status['last_checkpoint']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import GROUPS, MeshSource, evaluate_run
    from .plotting import plot_metric_trends
    from .training import load_checkpoint

    ds = _need_dataset(_resolve(args.root, args.dataset))
    if (args.checkpoint is None) == (args.mesh_dir is None):
        raise UsageError("pass exactly one of --checkpoint or --mesh-dir")
    if args.checkpoint is not None:
        ck = _resolve(args.root, args.checkpoint)
        if not ck.exists():
            raise UsageError(f"checkpoint not found: {ck}")
        model, _, _ = load_checkpoint(ck, ds)
        model.eval()
        source = MeshSource(model, resolution=args.resolution)
    else:
        md = _resolve(args.root, args.mesh_dir)
        if not md.is_dir():
            raise UsageError(f"mesh directory not found: {md}")
        source = MeshSource(mesh_dir=md)
    out = _resolve(args.root, args.out)
    _claim_dir(out, args.overwrite, ("metrics.json", "metrics.csv", "figures"))
    frames = _parse_frames(args.frames, ds.n_frames)
    report = evaluate_run(source, ds, frames, args.threshold_cm, args.n_points, args.seed, out_dir=out)
    with open(out / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    if rows:
        plot_metric_trends(rows, out / "figures")
    for g in GROUPS:
        agg = report["groups"][g]["aggregate"]
        if agg:
            print(f"{g:>15}: chamfer {agg['chamfer']:.3f} cm  f-score {agg['f_score']:.2f}%  ({agg['n_frames']} frames)")
    if report["skipped"]:
        print(f"skipped {len(report['skipped'])} frame(s); see metrics.json", file=sys.stderr)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .plotting import plot_bench
    from .training import BENCH_COLUMNS, bench_backends, write_manifest

    ds_path = _resolve(args.root, args.dataset)
    ds = _need_dataset(ds_path)
    cfg = _train_config(_resolve(args.root, args.config), {"seed": args.seed})
    backends = [b.strip() for b in args.backends.split(",") if b.strip()]
    if any(b not in ("inn", "broyden") for b in backends) or not backends:
        raise UsageError(f"--backends takes a comma list of inn/broyden, got {args.backends!r}")
    out = _resolve(args.root, args.out)
    _claim_dir(out, args.overwrite, ("bench.csv", "bench.json", "bench.png", "manifest.json"))
    write_manifest(out, cfg, ds, {"bench": {"budget_s": args.budget_s, "backends": backends, "eval_every": args.eval_every}})
    res = bench_backends(
        cfg, ds_path, args.budget_s, eval_every=args.eval_every, eval_frames=_parse_frames(args.eval_frames, ds.n_frames),
        eval_resolution=args.eval_resolution, eval_points=args.eval_points, backends=backends, max_steps=args.max_steps,
    )
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        w.writerows(res["rows"])
    (out / "bench.json").write_text(json.dumps(res["summary"], indent=2))
    plot_bench(res["rows"], out / "bench.png")
    for lab, s in res["summary"].items():
        flag = " (partial: budget exhausted)" if s["partial"] else ""
        print(f"{lab}: {s['steps']} steps in {s['wall_s']:.1f}s, {s['mean_step_s'] * 1e3:.1f} ms/step{flag}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plotting import plot_loss_curves, plot_metric_trends
    from .training import read_log

    run = _resolve(args.root, args.run)
    log_path = run / "train_log.csv"
    if not log_path.exists():
        raise UsageError(f"no training log in {run}")
    try:
        log = read_log(log_path)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _resolve(args.root, args.out) if args.out else run / "figures"
    out.mkdir(parents=True, exist_ok=True)
    paths = plot_loss_curves(log, out)
    metrics = run / "metrics.csv"
    if metrics.exists():
        with open(metrics) as fh:
            paths += plot_metric_trends(list(csv.DictReader(fh)), out)
    print(f"wrote {len(paths)} figure(s) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tfsnerf", description="Semantic reconstruction of interacting articulated and rigid entities.")
    p.add_argument("--root", type=Path, default=Path.cwd(), help="base directory for relative paths")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic dataset with analytic ground truth")
    g.add_argument("out", help="dataset directory")
    g.add_argument("--spec", help="YAML scene spec (defaults apply to missing keys)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--frames", type=int)
    g.add_argument("--cams", type=int)
    g.add_argument("--overwrite", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="optimize the model on a dataset")
    t.add_argument("--config", help="YAML training config")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--backend", choices=("inn", "broyden"))
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--log-every", type=int, default=50)
    t.add_argument("--overwrite", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="reconstruction metrics against ground-truth meshes")
    e.add_argument("--checkpoint")
    e.add_argument("--mesh-dir", help="directory of posed_{t:04d}_{entity}.obj meshes instead of a checkpoint")
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--frames", help="comma list or python slice, e.g. 0,5,9 or 0:50:5")
    e.add_argument("--threshold-cm", type=float, default=5.0)
    e.add_argument("--n-points", type=int, default=10000)
    e.add_argument("--resolution", type=int, default=192)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--overwrite", action="store_true")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="Chamfer vs wall-clock for the inn and broyden backends")
    b.add_argument("--config")
    b.add_argument("--dataset", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--budget-s", type=float, default=3600.0, help="training seconds per backend")
    b.add_argument("--backends", default="inn,broyden")
    b.add_argument("--eval-every", type=int, default=100)
    b.add_argument("--eval-frames", default="0")
    b.add_argument("--eval-resolution", type=int, default=64)
    b.add_argument("--eval-points", type=int, default=2000)
    b.add_argument("--max-steps", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--overwrite", action="store_true")
    b.set_defaults(func=cmd_bench)

    pl = sub.add_parser("plot", help="loss-curve and metric-trend images for a run")
    pl.add_argument("run")
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args.root = args.root.resolve()
    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except UsageError as exc:
        print(f"tfsnerf {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"tfsnerf {args.command}: IO error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        logger.exception("command failed")
        print(f"tfsnerf {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    logger.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
