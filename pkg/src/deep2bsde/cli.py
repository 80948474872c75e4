"""Command-line entry points: solve, verify-refs, grad-check.

``solve`` accepts a JSON config file plus flag overrides (an explicit
flag always wins over the file), runs the repeated-training protocol,
and writes the result bundle to the output directory.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import autodiff as ad
from . import harness, nets, problems, sde, solver


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part != "")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deep2bsde",
                                     description="Deep 2BSDE solver for fully nonlinear PDEs")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("solve", help="train and aggregate over independent runs")
    run.add_argument("--config", help="JSON file with run settings (flags override)")
    run.add_argument("--problem", choices=sorted(problems.PROBLEMS))
    run.add_argument("--dim", type=int)
    run.add_argument("--arch", choices=["multiscale", "cnn"])
    run.add_argument("--scales", type=_parse_int_list, help="four comma-separated widths")
    run.add_argument("--channels", type=int)
    run.add_argument("--steps", type=int)
    run.add_argument("--batch", type=int)
    run.add_argument("--optimizer", choices=["adam", "sgd"])
    run.add_argument("--schedule", help="named learning-rate schedule")
    run.add_argument("--runs", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--out")
    run.add_argument("--eval-every", dest="eval_every", type=int)
    run.add_argument("--time-steps", dest="time_steps", type=int)
    run.add_argument("--checkpoints", type=_parse_int_list)
    run.add_argument("--workers", type=int)
    run.add_argument("--reference", type=float,
                     help="override the reference value used for the error column")

    refs = sub.add_parser("verify-refs", help="recompute reference values and compare")
    refs.add_argument("--hjb-samples", dest="hjb_samples", type=int, default=10_000_000)
    refs.add_argument("--seed", type=int, default=0)

    grad = sub.add_parser("grad-check", help="check unrolled-loss gradients against finite differences")
    grad.add_argument("--problem", choices=sorted(problems.PROBLEMS), default="allen-cahn")
    grad.add_argument("--arch", choices=["multiscale", "cnn", "both"], default="both")
    grad.add_argument("--dim", type=int, default=2, help="dimension for the multiscale check")
    grad.add_argument("--cnn-dim", dest="cnn_dim", type=int, default=4,
                      help="perfect-square dimension for the convolutional check")
    grad.add_argument("--time-steps", dest="time_steps", type=int, default=3)
    grad.add_argument("--batch", type=int, default=4)
    grad.add_argument("--seeds", type=int, default=20)
    grad.add_argument("--tolerance", type=float, default=1e-5)
    return parser


def _solve(args) -> int:
    settings = {}
    if args.config:
        with open(args.config) as handle:
            settings.update(json.load(handle))
    for key in ("problem", "dim", "arch", "scales", "channels", "steps", "batch",
                "optimizer", "schedule", "runs", "seed", "out", "eval_every",
                "time_steps", "checkpoints", "workers", "reference"):
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    if "problem" not in settings or "dim" not in settings:
        print("error: --problem and --dim are required (via flags or --config)", file=sys.stderr)
        return 2
    for key in ("scales", "checkpoints"):
        if settings.get(key) is not None:
            settings[key] = tuple(settings[key])
    config = harness.RunConfig(**settings)
    summary = harness.run_experiment(config)
    if summary["failures"]:
        print(f"completed with {len(summary['failures'])} failed run(s): "
              f"{summary['failures']}", file=sys.stderr)
    with open(f"{config.out}/table.txt") as handle:
        print(handle.read(), end="")
    print(f"results written to {config.out}")
    return 1 if summary["failures"] else 0


def gradient_check(problem_name: str, arch: nets.ArchSpec, time_steps: int,
                   batch: int, seed: int) -> float:
    """Max relative gradient error of the full unrolled loss at one seed.

    Uses a generic random parameter point: structured zeros (fresh biases)
    put ReLU pre-activations exactly at the kink, where centered
    differences are invalid.
    """
    problem = problems.make_problem(problem_name, arch.d)
    grid = sde.uniform_grid(problem.horizon, time_steps)
    brownian = sde.sample_brownian((seed, 1), batch, grid, problem.d)
    paths = sde.simulate(problem, brownian)
    rng = np.random.default_rng((seed, 2))
    theta = 0.4 * rng.standard_normal(nets.param_count(arch))

    def loss_of(theta_t):
        return solver.rollout(solver.NetworkHeads(arch, theta_t), problem, paths).loss

    return ad.grad_check(loss_of, theta, h=1e-6)


def _grad_check(args) -> int:
    checks = []
    if args.arch in ("multiscale", "both"):
        scales = (args.dim, args.dim + 1, args.dim + 2, args.dim)
        checks.append(("multiscale", nets.MultiscaleSpec(d=args.dim, scales=scales)))
    if args.arch in ("cnn", "both"):
        checks.append(("cnn", nets.CnnSpec(d=args.cnn_dim, channels=2)))
    ok = True
    for name, arch in checks:
        worst = 0.0
        for seed in range(args.seeds):
            worst = max(worst, gradient_check(args.problem, arch, args.time_steps,
                                              args.batch, seed))
        passed = worst <= args.tolerance
        ok = ok and passed
        print(f"[{'PASS' if passed else 'FAIL'}] {name} d={arch.d}: "
              f"max relative error {worst:.3e} over {args.seeds} seeds "
              f"(tolerance {args.tolerance:g})")
    return 0 if ok else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "solve":
        return _solve(args)
    if args.command == "verify-refs":
        report = harness.verify_references(hjb_samples=args.hjb_samples, seed=args.seed)
        harness.print_report(report)
        return 0 if report["passed"] else 1
    if args.command == "grad-check":
        return _grad_check(args)
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
