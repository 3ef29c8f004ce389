"""Command-line interface.

Subcommands::

    verify              run the invariant suite, print PASS/FAIL per property
    sweep-context       per-step counted work vs committed context length
    sweep-density       sparse-gap accuracy vs key density over many seeds
    analyze-similarity  cross-step partial-output similarity study
    calibrate-gates     offline per-head reuse-gate calibration (JSON)

Exit codes: 0 on success, 1 on a property failure, 2 on usage errors.  Every
delimited output starts with a comment line recording the exact invocation;
given a fixed ``--seed`` the delimited outputs are byte-identical across
runs (wall-clock columns are informational and exempt).  Report commands
render a companion PNG figure next to ``--out`` unless ``--no-plot`` is
given.  The ``FLASHBLOCK_THREADS`` environment variable caps worker
parallelism for multi-seed sweeps.
"""

from __future__ import annotations

import argparse
import os
import sys

__all__ = ["main"]


def _num(x) -> str:
    # repr() is the shortest string that round-trips the exact float value.
    return repr(float(x))


def _parse_int_list(text: str, what: str) -> list[int]:
    try:
        values = [int(part) for part in text.split(",") if part != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"{what} must be comma-separated integers")
    if not values:
        raise argparse.ArgumentTypeError(f"{what} must not be empty")
    return values


def _parse_float_list(text: str, what: str) -> list[float]:
    try:
        values = [float(part) for part in text.split(",") if part != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"{what} must be comma-separated numbers")
    if not values:
        raise argparse.ArgumentTypeError(f"{what} must not be empty")
    return values


def _write_lines(path: str | None, lines: list[str]) -> None:
    text = "\n".join(lines) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _figure_path(out: str) -> str:
    root, _ = os.path.splitext(out)
    return root + ".png"


def _invocation(argv: list[str]) -> str:
    return "# flashblock " + " ".join(argv)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flashblock",
        description="Verification and measurement harness for cached "
        "block-external attention in block diffusion.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the invariant suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--dim", type=int, default=16, help="head dimension")
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--block-size", type=int, default=8)
    p.add_argument("--tau", type=int, default=2)
    p.add_argument("--trials", type=int, default=200)

    p = sub.add_parser("sweep-context", help="counted work vs context length")
    p.add_argument("--contexts", type=str, default="128,512,2048,8192")
    p.add_argument("--tau", type=str, default="2")
    p.add_argument("--policy", choices=["reuse", "dense", "both"], default="both")
    p.add_argument("--block-size", type=int, default=8)
    p.add_argument("--steps", type=int, default=32, help="denoise steps per block")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--no-plot", action="store_true")

    p = sub.add_parser("sweep-density", help="sparse-gap accuracy vs density")
    p.add_argument("--densities", type=str, default="0.1,0.2,0.3,0.4,0.5")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--prompt-len", type=int, default=160)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--no-plot", action="store_true")

    p = sub.add_parser("analyze-similarity", help="cross-step similarity study")
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--samples", type=int, default=1, help="rollouts to average")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--step-scale", type=float, default=0.05)
    p.add_argument("--kv-noise", type=float, default=0.0)
    p.add_argument("--unmask-per-step", type=int, default=1,
                   help="0 keeps ids frozen until the forced final step")
    p.add_argument("--out", type=str, default=".", help="output directory")
    p.add_argument("--no-plot", action="store_true")

    p = sub.add_parser("calibrate-gates", help="offline head-gate calibration")
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--samples", type=int, default=3)
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--no-plot", action="store_true")

    return parser


def _cmd_verify(args, argv: list[str]) -> int:
    from .verification import run_all

    if args.trials < 1:
        print("error: --trials must be >= 1", file=sys.stderr)
        return 2
    if args.blocks < 0:
        print("error: --blocks must be >= 0", file=sys.stderr)
        return 2
    results = run_all(
        seed=args.seed,
        trials=args.trials,
        layers=args.layers,
        heads=args.heads,
        head_dim=args.dim,
        blocks=args.blocks,
        block_size=args.block_size,
        tau=args.tau,
    )
    for res in results:
        print(res.line())
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} of {len(results)} properties failed")
        return 1
    print(f"all {len(results)} properties passed")
    return 0


def _cmd_sweep_context(args, argv: list[str]) -> int:
    from .bench import sweep_context
    from .simulator import ModelConfig, SyntheticModel

    contexts = _parse_int_list(args.contexts, "--contexts")
    taus = _parse_int_list(args.tau, "--tau")
    if sorted(contexts) != contexts or len(set(contexts)) != len(contexts):
        print("error: --contexts must be strictly increasing", file=sys.stderr)
        return 2
    if any(c < args.block_size for c in contexts):
        print("error: contexts must be >= block size", file=sys.stderr)
        return 2
    if any(t < 1 for t in taus):
        print("error: --tau values must be >= 1", file=sys.stderr)
        return 2
    policies = ["dense", "reuse"] if args.policy == "both" else [args.policy]
    model = SyntheticModel(ModelConfig(seed=args.seed))
    rows = sweep_context(
        contexts, taus, policies,
        block_size=args.block_size, steps_per_block=args.steps,
        seed=args.seed, model=model,
    )
    lines = [_invocation(argv), "context,tau,policy,step,keys_attended,kv_rows_read,wall_ns"]
    for r in rows:
        lines.append(
            f"{r.context},{r.tau},{r.policy},{r.step},"
            f"{_num(r.keys_attended)},{_num(r.kv_rows_read)},{r.wall_ns}"
        )
    _write_lines(args.out, lines)
    if args.out and not args.no_plot:
        from .plotting import plot_context_sweep

        plot_context_sweep(rows, _figure_path(args.out))
    return 0


def _cmd_sweep_density(args, argv: list[str]) -> int:
    from .bench import sweep_density

    densities = _parse_float_list(args.densities, "--densities")
    if any(not 0.0 < d <= 1.0 for d in densities):
        print("error: densities must lie in (0, 1]", file=sys.stderr)
        return 2
    if args.seeds < 1:
        print("error: --seeds must be >= 1", file=sys.stderr)
        return 2
    rows = sweep_density(
        densities, args.seeds,
        layer=args.layer, base_seed=args.seed, prompt_len=args.prompt_len,
    )
    lines = [
        _invocation(argv),
        "# gap metric: mean absolute difference per output element vs dense attention",
        "density,l1_sparse_only,l1_with_residual,seed",
    ]
    for r in rows:
        lines.append(
            f"{_num(r.density)},{_num(r.l1_sparse_only)},{_num(r.l1_with_residual)},{r.seed}"
        )
    _write_lines(args.out, lines)
    if args.out and not args.no_plot:
        from .plotting import plot_density_sweep

        plot_density_sweep(rows, _figure_path(args.out))
    return 0


def _cmd_analyze_similarity(args, argv: list[str]) -> int:
    from .analysis import StabilityRecord, stability_study
    from .simulator import ModelConfig, SyntheticModel

    if args.steps < 1:
        print("error: --steps must be >= 1", file=sys.stderr)
        return 2
    if args.layers < 1:
        print("error: --layers must be >= 1", file=sys.stderr)
        return 2
    cfg = ModelConfig(
        seed=args.seed,
        num_layers=args.layers,
        step_scale=args.step_scale,
        internal_kv_noise=args.kv_noise,
    )
    model = SyntheticModel(cfg)
    sums: dict[tuple[int, int, int], list[float]] = {}
    heat_out: dict = {}
    heat_in: dict = {}
    for i in range(max(1, args.samples)):
        result = stability_study(
            model, args.steps, seed=args.seed + i,
            unmask_per_step=args.unmask_per_step,
        )
        for r in result.records:
            acc = sums.setdefault((r.layer, r.head, r.step), [0.0, 0.0, 0])
            acc[0] += r.mean_diag_out
            acc[1] += r.mean_diag_in
            acc[2] += 1
        if i == 0:
            heat_out, heat_in = result.heatmaps_out, result.heatmaps_in
    # One summary row per (layer, head, step pair), averaged over samples.
    all_records = [
        StabilityRecord(layer, head, step, s_out / n, s_in / n)
        for (layer, head, step), (s_out, s_in, n) in sorted(sums.items())
    ]
    if not all_records:
        print("warning: fewer than 2 steps, no adjacent pairs; summary is empty",
              file=sys.stderr)
    os.makedirs(args.out, exist_ok=True)

    full_lines = [_invocation(argv), "layer,head,step,i,j,sim"]
    for (layer, head, step), matrix in sorted(heat_out.items()):
        for i in range(matrix.shape[0]):
            for j in range(matrix.shape[1]):
                full_lines.append(f"{layer},{head},{step},{i},{j},{_num(matrix[i, j])}")
    _write_lines(os.path.join(args.out, "similarity_full.csv"), full_lines)

    full_in_lines = [_invocation(argv), "layer,head,step,i,j,sim"]
    for (layer, head, step), matrix in sorted(heat_in.items()):
        for i in range(matrix.shape[0]):
            for j in range(matrix.shape[1]):
                full_in_lines.append(f"{layer},{head},{step},{i},{j},{_num(matrix[i, j])}")
    _write_lines(os.path.join(args.out, "similarity_full_internal.csv"), full_in_lines)

    summary_lines = [_invocation(argv), "layer,head,step,mean_diag_out,mean_diag_in"]
    for r in sorted(all_records, key=lambda r: (r.layer, r.head, r.step)):
        summary_lines.append(
            f"{r.layer},{r.head},{r.step},{_num(r.mean_diag_out)},{_num(r.mean_diag_in)}"
        )
    _write_lines(os.path.join(args.out, "similarity_summary.csv"), summary_lines)

    if all_records and not args.no_plot:
        from .plotting import plot_similarity_summary

        plot_similarity_summary(
            all_records, os.path.join(args.out, "similarity_summary.png")
        )
    return 0


def _cmd_calibrate_gates(args, argv: list[str]) -> int:
    from .policy import CalibrationError, calibrate_head_gates
    from .simulator import ModelConfig, SyntheticModel

    if not 0.0 <= args.gamma <= 1.0:
        print("error: --gamma must lie in [0, 1]", file=sys.stderr)
        return 2
    if args.samples < 1:
        print("error: --samples must be >= 1", file=sys.stderr)
        return 2
    model = SyntheticModel(ModelConfig(seed=args.seed))
    try:
        table = calibrate_head_gates(
            model, args.samples, args.gamma,
            steps_per_block=args.steps, base_seed=args.seed,
        )
    except CalibrationError as exc:
        print(f"calibration failed: {exc}", file=sys.stderr)
        return 1
    text = table.to_json()
    if args.out is None:
        print(text)
    else:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        if not args.no_plot:
            from .plotting import plot_gate_table

            plot_gate_table(table, _figure_path(args.out))
    enabled = sum(1 for g in table.heads if g.enabled)
    print(f"calibrated {len(table.heads)} heads, {enabled} gates enabled "
          f"(gamma={args.gamma})", file=sys.stderr)
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 for --help
        return int(exc.code or 0)
    handlers = {
        "verify": _cmd_verify,
        "sweep-context": _cmd_sweep_context,
        "sweep-density": _cmd_sweep_density,
        "analyze-similarity": _cmd_analyze_similarity,
        "calibrate-gates": _cmd_calibrate_gates,
    }
    try:
        return handlers[args.command](args, argv)
    except argparse.ArgumentTypeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
