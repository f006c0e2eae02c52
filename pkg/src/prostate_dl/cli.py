"""Command-line entry point: ``prostate-dl <command> ...`` or ``python -m prostate_dl``.

Exit codes: 0 success, 1 runtime failure, 2 bad usage.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

log = logging.getLogger("prostate_dl")


class UsageError(Exception):
    """Bad arguments detected after parsing (exit code 2)."""


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prostate-dl", description="Synthetic prostate MRI deep-learning workbench")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="synthetic cohorts")
    ph_sub = ph.add_subparsers(dest="action", required=True)
    gen = ph_sub.add_parser("generate", help="write a phantom cohort to disk")
    gen.add_argument("--out", required=True)
    gen.add_argument("--n", type=int, default=60)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--config", help="JSON file with PhantomParams overrides")

    gr = sub.add_parser("grid", help="experiment grids")
    gr_sub = gr.add_subparsers(dest="action", required=True)
    ls = gr_sub.add_parser("list", help="print one config code per line")
    ls.add_argument("--task", required=True, choices=["binary", "pirads", "prostate_seg", "lesion_seg"])
    ls.add_argument("--sequence", choices=["ADC", "T2W", "ADC_T2W"])
    ls.add_argument("--json", action="store_true", help="print full configs as JSON lines")

    run = sub.add_parser("run", help="cross-validate one configuration")
    run.add_argument("--config-code", required=True)
    run.add_argument("--cohort", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--sequence", choices=["ADC", "T2W", "ADC_T2W"],
                     help="replace the sequence part of the config code")
    run.add_argument("--config", help="JSON file with ExperimentConfig field overrides")
    run.add_argument("--no-report", action="store_true")
    run.add_argument("--stop-after", type=int, help="train at most this many folds, then stop (resumable)")

    rep = sub.add_parser("report", help="emit plots and tables from finished runs")
    rep.add_argument("--out", required=True, help="a run directory or a directory of runs")

    gc = sub.add_parser("gradcheck", help="finite-difference checks on miniature models")
    gc.add_argument("--tolerance", type=float, default=1e-3)
    gc.add_argument("--seed", type=int, default=0)

    sub.add_parser("selftest", help="fast formula and shape checks")
    return p


def _cmd_phantom(args) -> int:
    from .phantom import PhantomParams, generate_cohort
    params = PhantomParams()
    if args.config:
        params = PhantomParams.from_dict({**params.to_dict(), **json.loads(Path(args.config).read_text())})
    manifest = generate_cohort(args.n, args.seed, params, args.out)
    n_les = sum(p["n_lesions"] for p in manifest)
    print(f"wrote {len(manifest)} studies ({n_les} lesions) to {args.out}")
    return 0


def _cmd_grid(args) -> int:
    from .experiments import expand_grid
    for cfg in expand_grid(args.task):
        if args.sequence and cfg.sequence != args.sequence:
            continue
        print(json.dumps(cfg.to_dict(), sort_keys=True) if args.json else cfg.config_code)
    return 0


def _cmd_run(args) -> int:
    from .experiments import ExperimentConfig, run_experiment
    code = args.config_code
    if args.sequence:
        code = code.rsplit(":", 1)[0] + ":" + args.sequence
    try:
        cfg = ExperimentConfig.from_code(code, seed=args.seed)
        if args.config:
            cfg = cfg.with_overrides(json.loads(Path(args.config).read_text()))
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    rec = run_experiment(cfg, args.cohort, args.out, report=not args.no_report, stop_after=args.stop_after)
    if rec is None:
        print(f"{cfg.config_code}: stopped early; re-run to resume")
        return 0
    means = ", ".join(f"{k}={v:.4f}" for k, v in sorted(rec.mean.items()))
    print(f"{rec.config_code}: {means} ({rec.runtime_s:.1f}s)")
    return 0


def _cmd_report(args) -> int:
    from .report import emit_report, write_tables
    root = Path(args.out)
    runs = [root] if (root / "config.json").exists() else sorted(p.parent for p in root.glob("*/metrics.csv"))
    if not runs:
        raise FileNotFoundError(f"no finished runs under {root}")
    for run_dir in runs:
        bundle = emit_report(run_dir)
        print(f"{run_dir.name}: {len(bundle.artifacts)} report files")
    if root not in runs:
        for path in write_tables(root):
            print(f"table: {path}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .training import grad_check, miniature_cases
    worst = 0.0
    for name, (factory, loss) in miniature_cases(args.seed).items():
        err = grad_check(factory, loss)
        worst = max(worst, err)
        print(f"{name:16s} max rel err {err:.3e} {'ok' if err < args.tolerance else 'FAIL'}")
    return 0 if worst < args.tolerance else 1


def _cmd_selftest(args) -> int:
    import numpy as np
    from .geometry import ConvSpec, conv_output_size
    from .nets import ModelSpec, build_model, expected_shapes, trace_shapes
    from .objectives import bce, binary_dice, ce, combined_loss, roc_auc, soft_dice

    checks = {
        "bce(0.5, 1)": (bce(0.5, 1).item(), 0.693147),
        "ce(zeros)": (ce(np.zeros(5), 0).item(), 1.609438),
        "soft_dice(0.5, 1)": (soft_dice(np.full(10, 0.5), np.ones(10)).item(), 0.8),
        "combined(0.5, 1)": (combined_loss(np.full(10, 0.5), np.ones(10)).item(), 1.239721),
        "binary_dice": (binary_dice([1, 1, 1, 0], [1, 1, 0, 1]), 2 / 3),
        "roc_auc": (roc_auc([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0]).auc, 0.75),
        "conv 6->2": (conv_output_size(ConvSpec(6, 3, 3)), 2),
        "xmasnet flatten": (build_model(ModelSpec("xmasnet_binary", input_extent=(32, 32))).flatten_length, 4096),
    }
    ok = True
    for name, (got, want) in checks.items():
        good = abs(got - want) < 1e-6
        ok &= good
        print(f"{name:18s} {got:.6f} (expected {want:.6f}) {'ok' if good else 'FAIL'}")
    for kind, ext in (("unet3d", (16, 64, 64)), ("resnet18_3d", (16, 64, 64))):
        spec = ModelSpec(kind, input_extent=ext)
        good = trace_shapes(spec) == expected_shapes(spec)
        ok &= good
        print(f"{kind} shapes {'ok' if good else 'FAIL'}")
    return 0 if ok else 1


_COMMANDS = {"phantom": _cmd_phantom, "grid": _cmd_grid, "run": _cmd_run, "report": _cmd_report,
             "gradcheck": _cmd_gradcheck, "selftest": _cmd_selftest}


def cli_main(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())
