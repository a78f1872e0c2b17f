"""Command-line pipeline: data generation, training, evaluation, baselines,
scan fusion, and gradient checking, each as a subcommand.

Every run writes a manifest.json with the resolved flags into its output
directory, and re-running with the same flags and seed reproduces every
artifact byte for byte. Exit codes: 0 success, 1 validation or tolerance
failure, 2 I/O error.
"""

from __future__ import annotations

import argparse
import glob as globlib
import json
import sys
from pathlib import Path

import numpy as np

from . import data, network, optim
from .baselines import NWConfig, PoolConfig, closest_depth_pool, nadaraya_watson
from .errors import CheckpointFormatError, PgmFormatError, SparseDepthError
from .fusion import FusionConfig, fuse_pipeline
from .gradcheck import run_gradcheck
from .metrics import METRICS_CSV_HEADER, evaluate, report_to_csv_row, report_to_json
from .network import NetworkSpec

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; our contract reserves 2 for I/O
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


def _write_manifest(out_dir: Path, command: str, args: argparse.Namespace) -> None:
    payload = {
        "command": command,
        "args": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# shared evaluation path (used by both `train --eval-every` and `eval`)
# ---------------------------------------------------------------------------


def predict_scenes(model, scenes: np.ndarray, batch_size: int = 8) -> np.ndarray:
    preds = []
    for start in range(0, scenes.shape[0], batch_size):
        depth, mask = data.to_network_inputs(scenes[start : start + batch_size])
        pred, _, _ = network.forward(model, depth, mask)
        preds.append(pred[:, 0])
    return np.concatenate(preds, axis=0)


def eval_on_scenes(model, dense_scenes: np.ndarray, density: float, batch_size: int = 8):
    """Score a model at one input density with the canonical dropout seeds."""
    sparse = np.stack(
        [
            data.sparsify(scene, density, data.eval_sparsify_seed(i, density))
            for i, scene in enumerate(dense_scenes)
        ]
    )
    preds = predict_scenes(model, sparse, batch_size)
    return evaluate(preds, dense_scenes, unit="meters", density=density)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        cfg = data.SceneConfig(
            height=args.size, width=args.size, n_boxes=args.boxes, seed=[args.seed, i]
        )
        dense = data.generate_scene(cfg)
        sparse = data.sparsify(dense, args.density, seed=[args.seed, i, 1])
        data.write_scene_pair(out_dir, i, sparse, dense)
    _write_manifest(out_dir, "gen-data", args)
    print(f"wrote {args.count} scene pairs to {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    scenes = data.load_dense_scenes(args.data)
    spec = NetworkSpec(
        variant=args.variant,
        kernel_sizes=tuple(int(v) for v in args.kernels.split(",")),
        channels=args.channels,
    )
    cfg = optim.TrainConfig(
        loss=args.loss,
        learning_rate=args.lr,
        iterations=args.iters,
        batch_size=args.batch_size,
        seed=args.seed,
        eval_every=args.eval_every,
    )
    source = data.make_batch_source(scenes, args.density, args.batch_size, args.seed)
    eval_fn = None
    if args.eval_every > 0:
        eval_fn = lambda m: eval_on_scenes(m, scenes, args.density, args.batch_size).mae
    model, log = optim.train(spec, source, cfg, eval_fn)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    network.save(model, str(out_dir / "model.scnn"))
    (out_dir / "train_log.csv").write_text(optim.log_to_csv(log))
    _write_manifest(out_dir, "train", args)
    last = log[-1].loss if log else float("nan")
    print(f"trained {args.variant} for {args.iters} iterations, final loss {last:.6g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = network.load(args.model)
    scenes = data.load_dense_scenes(args.data)
    densities = [float(v) / 100.0 for v in args.density_sweep.split(",")]
    rows, reports = [], []
    for density in densities:
        report = eval_on_scenes(model, scenes, density, args.batch_size)
        rows.append(report_to_csv_row(report))
        reports.append(json.loads(report_to_json(report)))
        print(f"density {density:5.2f}: mae {report.mae:.6g} rmse {report.rmse:.6g}")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "results.csv").write_text(METRICS_CSV_HEADER + "\n" + "\n".join(rows) + "\n")
    (out_dir / "results.json").write_text(
        json.dumps({"densities": densities, "reports": reports}, sort_keys=True, indent=2) + "\n"
    )
    _write_manifest(out_dir, "eval", args)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    spec = NetworkSpec(variant=args.variant, channels=args.channels)
    report = run_gradcheck(
        trials=args.trials,
        tolerance=args.tolerance,
        seed=args.seed,
        spec=spec,
        corrupt=args.corrupt,
    )
    print("\n".join(report.lines()))
    if args.out_dir:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "gradcheck.txt").write_text("\n".join(report.lines()) + "\n")
        _write_manifest(out_dir, "gradcheck", args)
    return EXIT_OK if report.passed else EXIT_VALIDATION


def cmd_baseline(args) -> int:
    depth = data.read_depth_pgm(args.input)
    if args.method == "nw":
        filled = nadaraya_watson(depth, NWConfig(bandwidth=args.h, radius=args.r))
    else:
        filled = closest_depth_pool(depth, PoolConfig(radius=args.r if args.r else 2))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data.write_depth_pgm(filled, out_dir / "filled.pgm")
    if args.truth:
        truth = data.read_depth_pgm(args.truth)
        report = evaluate(filled, truth, unit="meters", mask=filled > 0)
        (out_dir / "metrics.json").write_text(report_to_json(report) + "\n")
        (out_dir / "metrics.csv").write_text(
            METRICS_CSV_HEADER + "\n" + report_to_csv_row(report) + "\n"
        )
        print(report_to_json(report))
    _write_manifest(out_dir, "baseline", args)
    return EXIT_OK


def cmd_fuse(args) -> int:
    paths = sorted(globlib.glob(args.scans))
    if not paths:
        raise FileNotFoundError(f"no scans match {args.scans!r}")
    scans = [data.read_depth_pgm(p) for p in paths]
    reference = data.read_depth_pgm(args.reference)
    truth = data.read_depth_pgm(args.truth)
    cfg = FusionConfig(n_scans=len(scans), rel_error_threshold=args.tau)
    result = fuse_pipeline(scans, reference, truth, cfg, unit=args.unit)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data.write_depth_pgm(result.cleaned, out_dir / "cleaned.pgm")
    table = ["stage," + METRICS_CSV_HEADER]
    for stage, report in (
        ("raw", result.report_raw),
        ("accumulated", result.report_accumulated),
        ("cleaned", result.report_cleaned),
    ):
        table.append(f"{stage},{report_to_csv_row(report)}")
        print(f"{stage:12s} {report_to_json(report)}")
    (out_dir / "table.csv").write_text("\n".join(table) + "\n")
    _write_manifest(out_dir, "fuse", args)
    return EXIT_OK


def cmd_sparsify(args) -> int:
    depth = data.read_depth_pgm(args.input)
    sparse = data.sparsify(depth, args.density, seed=args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data.write_depth_pgm(sparse, out_dir / "sparse.pgm")
    _write_manifest(out_dir, "sparsify", args)
    print(f"kept {(sparse > 0).sum()} of {(depth > 0).sum()} observations")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sparsedepth", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic sparse/dense scene pairs")
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--density", type=float, default=0.1)
    p.add_argument("--boxes", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a completion network on a dataset dir")
    p.add_argument("--variant", choices=network.VARIANTS, default="sparse")
    p.add_argument("--density", type=float, default=0.1)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--loss", choices=optim.LOSS_KINDS, default="l2")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--kernels", default="11,7,5,3,3")
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="sweep evaluation densities for a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--density-sweep", default="5,10,20,50,100", help="percentages")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", choices=network.VARIANTS, default="sparse")
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)  # test hook
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("baseline", help="run a classical completion baseline")
    p.add_argument("--method", choices=("nw", "pool"), required=True)
    p.add_argument("--h", type=float, default=2.0, help="kernel bandwidth in pixels")
    p.add_argument("--r", type=int, default=None, help="support/window radius in pixels")
    p.add_argument("--input", required=True)
    p.add_argument("--truth", default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("fuse", help="accumulate scans and clean against a reference")
    p.add_argument("--scans", required=True, help="glob over scan PGMs")
    p.add_argument("--reference", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--tau", type=float, default=0.05)
    p.add_argument("--unit", choices=("meters", "disparity_px"), default="disparity_px")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("sparsify", help="randomly drop observations from a PGM")
    p.add_argument("--input", required=True)
    p.add_argument("--density", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sparsify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    except (OSError, PgmFormatError, CheckpointFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SparseDepthError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
