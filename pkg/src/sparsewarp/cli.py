"""Command-line entry point: synthesize cases, train, register, evaluate, serve.

Heavy imports happen inside the subcommand handlers so that --threads can pin
the BLAS pools before numpy is loaded. Machine-readable output goes to stdout
as JSON; progress and the resolved configuration are logged to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

log = logging.getLogger("sparsewarp")

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _apply_global_flags(args) -> None:
    threads = args.threads
    if args.deterministic and threads is None:
        threads = 1
    if threads is not None:
        for var in _THREAD_VARS:
            os.environ[var] = str(threads)
    logging.basicConfig(level=getattr(logging, args.log_level.upper()),
                        format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func" and v is not None}
    log.info("resolved config: %s", json.dumps(resolved, default=str))


def _require(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _emit(payload: dict, out: str | None = None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        with open(out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    print(text)


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    from .synth import make_case, save_case

    dims = tuple(args.dims)
    spacing = tuple(args.spacing)
    base_seed = args.seed if args.seed is not None else 0
    written = []
    for i in range(args.cases):
        seed = base_seed + i
        case = make_case(seed, dims=dims, magnitude=args.magnitude,
                         spacing=spacing, n_landmarks=args.landmarks)
        out = args.out if args.cases == 1 else os.path.join(args.out, f"case_{seed:04d}")
        save_case(case, out)
        log.info("wrote case seed=%d to %s", seed, out)
        written.append(out)
    _emit({"cases": written, "dims": list(dims), "magnitude": args.magnitude,
           "spacing": list(spacing), "landmarks": args.landmarks})
    return 0


# ---------------------------------------------------------------- train


def _case_dirs(root: str) -> list:
    if os.path.exists(os.path.join(root, "case.json")):
        return [root]
    subs = sorted(os.path.join(root, d) for d in os.listdir(root)
                  if os.path.exists(os.path.join(root, d, "case.json")))
    if not subs:
        raise FileNotFoundError(f"no case directories under {root}")
    return subs


def cmd_train(args) -> int:
    from .io import save_checkpoint
    from .kernel.model import KernelModel
    from .pipeline import RegistrationConfig, train
    from .synth import load_case

    cases = [load_case(d) for d in _case_dirs(_require(args.data, "data directory"))]
    val = [load_case(d) for d in _case_dirs(args.val_data)] if args.val_data else None
    overrides = dict(
        scales=args.scales, variant=args.variant, epochs=args.epochs,
        lr=args.lr, image_loss=args.loss, seed=args.seed,
        train_keypoints=args.keypoints, augment=not args.no_augment,
        use_landmark=args.landmark_loss, patience=args.patience,
        peak_gate=args.peak_gate, peak_gate_fine=args.peak_gate_fine,
        tau=args.tau,
    )
    if args.levels:
        overrides["train_levels"] = tuple(args.levels)
    if args.radius:
        overrides["radius"] = tuple(args.radius) if len(args.radius) > 1 else int(args.radius[0])
    cfg = RegistrationConfig(**{k: v for k, v in overrides.items() if v is not None})
    model = KernelModel.build(seed=args.seed or 0, scales=cfg.scales)
    log.info("training on %d cases (%d validation)", len(cases), len(val or cases[:1]))
    result = train(cases, model, cfg, val_cases=val)
    save_checkpoint(args.out, model, meta={
        "epochs_run": len(result.epoch_losses),
        "best_epoch": result.best_epoch,
        "aborted": result.aborted,
        "epoch_losses": [round(x, 6) for x in result.epoch_losses],
        "val_scores": [round(x, 6) for x in result.val_scores],
        "config": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in vars(cfg).items()},
    })
    _emit({"checkpoint": args.out, "epochs_run": len(result.epoch_losses),
           "best_epoch": result.best_epoch, "aborted": result.aborted,
           "final_loss": result.epoch_losses[-1] if result.epoch_losses else None,
           "val_scores": result.val_scores})
    return 1 if result.aborted else 0


# ---------------------------------------------------------------- register


def cmd_register(args) -> int:
    from .io import (load_checkpoint, read_landmarks, read_volume,
                     write_field, write_volume)
    from .metrics import confidence_interval, tre, warp_landmarks
    from .pipeline import RegistrationConfig, register
    from .volume import warp

    moving = read_volume(_require(args.moving, "moving volume"))
    fixed = read_volume(_require(args.fixed, "fixed volume"))
    model, _manifest = load_checkpoint(_require(args.model, "model checkpoint"))
    overrides = dict(variant=args.variant, scales=args.scales, stride=args.stride,
                     seed=args.seed, tau=args.tau,
                     peak_gate=args.peak_gate, peak_gate_fine=args.peak_gate_fine)
    if args.radius:
        overrides["radius"] = tuple(args.radius) if len(args.radius) > 1 else int(args.radius[0])
    cfg = RegistrationConfig(**{k: v for k, v in overrides.items() if v is not None})
    result = register(moving, fixed, model, cfg)
    write_field(args.out, result.field)
    report = {"field": args.out, "scales": result.scales,
              "observations": {str(l): len(o.points) for l, o in result.observations.items()},
              "seconds": round(result.timing["total"], 3)}
    if args.warped:
        write_volume(args.warped, warp(moving, result.field))
        report["warped"] = args.warped
    if args.confidence:
        write_volume(args.confidence, result.confidence)
        report["confidence"] = args.confidence
    if args.landmarks:
        lf = read_landmarks(_require(args.landmarks, "landmark file"),
                            fixed.spacing, fixed.origin)
        lm_path = args.landmarks_moving or args.landmarks
        lm = read_landmarks(_require(lm_path, "landmark file"), fixed.spacing, fixed.origin)
        moved = warp_landmarks(lf, result.field)
        _, dists = tre(moved, lm, fixed.spacing)
        mean, lo, hi = confidence_interval(dists)
        report["metrics"] = {"tre_mm": mean, "tre_ci_mm": [lo, hi],
                             "landmarks": int(len(lf))}
    _emit(report, args.metrics)
    return 0


# ---------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    from .io import read_field
    from .metrics import confidence_interval, evaluate_case
    from .synth import load_case

    case = load_case(_require(args.case, "case directory"))
    field = read_field(_require(args.pred_field, "field file"))
    report = evaluate_case(case, field).to_dict()
    if report["per_landmark_mm"]:
        _, lo, hi = confidence_interval(report["per_landmark_mm"])
        report["tre_ci_mm"] = [lo, hi]
    _emit(report, args.out)
    return 0


# ---------------------------------------------------------------- serve


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(model_path=args.model)
    log.info("serving on %s:%d", args.host, args.port)
    uvicorn.run(app, host=args.host, port=args.port, log_level=args.log_level.lower())
    return 0


# ---------------------------------------------------------------- parser


def _add_common_config(p) -> None:
    p.add_argument("--variant", choices=["full", "only_hs", "only_hf", "bias_only", "tps"])
    p.add_argument("--scales", type=int)
    p.add_argument("--radius", type=int, nargs="+", metavar="R",
                   help="search radius, one value or per-level finest first")
    p.add_argument("--tau", type=float)
    p.add_argument("--peak-gate", dest="peak_gate", type=float)
    p.add_argument("--peak-gate-fine", dest="peak_gate_fine", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsewarp",
        description="Sparse keypoint correspondences to dense displacement fields.")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--deterministic", action="store_true",
                        help="single-threaded math pools for bit-reproducible runs")
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("--log-level", default="info",
                        choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic case directories")
    p.add_argument("--out", required=True)
    p.add_argument("--cases", type=int, default=1)
    p.add_argument("--dims", type=int, nargs=3, default=[48, 64, 64], metavar=("Z", "Y", "X"))
    p.add_argument("--magnitude", type=float, default=8.0)
    p.add_argument("--spacing", type=float, nargs=3, default=[3.0, 1.4, 1.4], metavar=("Z", "Y", "X"))
    p.add_argument("--landmarks", type=int, default=24)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit the encoder and kernel on case directories")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--val-data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--loss", choices=["ncc", "mse", "none"])
    p.add_argument("--lr", type=float)
    p.add_argument("--levels", type=int, nargs="+")
    p.add_argument("--keypoints", type=int)
    p.add_argument("--landmark-loss", action="store_true", default=None)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--patience", type=int)
    _add_common_config(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="estimate a displacement field for a pair")
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--warped")
    p.add_argument("--confidence")
    p.add_argument("--landmarks")
    p.add_argument("--landmarks-moving")
    p.add_argument("--metrics", help="also write the JSON report here")
    p.add_argument("--stride", type=int)
    _add_common_config(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("eval", help="score a predicted field against a case directory")
    p.add_argument("--pred-field", required=True)
    p.add_argument("--case", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="run the interactive session server")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--model", help="checkpoint used for new sessions")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _apply_global_flags(args)
    try:
        return args.func(args)
    # runtime failures exit 1; usage errors exit 2 via argparse
    except (ValueError, RuntimeError, OSError) as e:
        log.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
