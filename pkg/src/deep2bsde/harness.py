"""Experiment protocol: repeated runs, aggregation, persistence, reports.

An experiment executes ``runs`` independent training realizations with
seeds base, base+1, ..., writes one JSON-lines metrics file per run, then
aggregates across runs at the configured checkpoint steps into a CSV and
a readable table.  Curve files carry the per-step cross-run means.  All
emitted values are deterministic functions of the stored config and seed
except the wall-clock columns, which are hardware-dependent and excluded
from any reproducibility guarantee.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import nets, problems, solver
from .errors import ConfigurationError
from .solver import MetricsRow

JSONL_FIELDS = ("run", "step", "u_estimate", "loss", "rel_l1_error", "seconds")


@dataclass(frozen=True)
class RunConfig:
    """Fully describes one experiment; serialized alongside its results."""

    problem: str
    dim: int
    arch: str = "multiscale"
    scales: tuple[int, int, int, int] | None = None
    channels: int = 32
    steps: int = 5000
    batch: int = 64
    optimizer: str = "adam"
    schedule: str | dict | None = None
    runs: int = 10
    seed: int = 0
    out: str = "results"
    eval_every: int = 1
    time_steps: int | None = None
    checkpoints: tuple[int, ...] | None = None
    workers: int | None = None
    reference: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def resolved_checkpoints(self) -> tuple[int, ...]:
        if self.checkpoints is not None:
            return tuple(sorted(set(self.checkpoints)))
        if self.steps == 0:
            return (0,)
        # six table rows including the endpoints, matching the report style
        marks = sorted({round(self.steps * k / 5) for k in range(6)})
        return tuple(marks)


@dataclass(frozen=True)
class AggregateRow:
    """Cross-run statistics at one checkpoint step."""

    step: int
    mean_u: float
    std_u: float
    mean_rel_l1: float | None
    std_rel_l1: float | None
    mean_loss: float
    mean_runtime: float
    runs: int


def resolve(config: RunConfig):
    """Instantiate the problem, architecture, schedule, and train config."""
    problem = problems.make_problem(config.problem, config.dim)
    if config.reference is not None:
        problem = replace(problem, reference=config.reference,
                          reference_provenance="supplied by run configuration")
    if config.arch == "multiscale":
        scales = config.scales or problem.default_scales
        if scales is None:
            raise ConfigurationError("no scales given and the problem has no default")
        arch = nets.MultiscaleSpec(d=config.dim, scales=tuple(scales))
    elif config.arch == "cnn":
        arch = nets.CnnSpec(d=config.dim, channels=config.channels)
    else:
        raise ConfigurationError(f"unknown architecture {config.arch!r}")
    schedule_name = config.schedule
    if schedule_name is None:
        schedule_name = problem.default_schedule.get(config.arch)
        if schedule_name is None:
            raise ConfigurationError(f"no default schedule for {config.problem}/{config.arch}")
    schedule = solver.schedule_from_config(schedule_name)
    train_config = solver.TrainConfig(
        steps=config.steps, schedule=schedule, batch_size=config.batch,
        optimizer=config.optimizer, beta1=config.beta1, beta2=config.beta2,
        eps=config.eps, eval_every=config.eval_every, runs=config.runs,
        time_steps=config.time_steps,
    )
    return problem, arch, train_config


def row_to_dict(row: MetricsRow) -> dict:
    return {name: getattr(row, name) for name in JSONL_FIELDS}


def _run_one(config_dict: dict, run_index: int) -> dict:
    """Execute a single training run and write its JSONL metrics file.

    Module-level so process pools can import it; any failure is reported
    per-run instead of aborting the whole experiment.
    """
    config = RunConfig(**config_dict)
    problem, arch, train_config = resolve(config)
    path = os.path.join(config.out, f"run_{run_index}.jsonl")
    rows = []
    try:
        with open(path, "w") as handle:
            for row in solver.train(problem, arch, train_config,
                                    seed=config.seed + run_index, run_index=run_index):
                handle.write(json.dumps(row_to_dict(row)) + "\n")
                rows.append(row_to_dict(row))
        return {"run": run_index, "rows": rows, "error": None}
    except Exception as exc:  # recorded, not raised: keep the other runs honest
        return {"run": run_index, "rows": rows, "error": f"{type(exc).__name__}: {exc}"}


def _std(values: list[float]) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(np.asarray(values), ddof=1))


def aggregate(rows_by_run: dict[int, list[dict]], checkpoints) -> list[AggregateRow]:
    """Cross-run mean/std at each checkpoint (unbiased std, 0 for one run)."""
    out = []
    for step in checkpoints:
        at_step = []
        for run in sorted(rows_by_run):
            match = [r for r in rows_by_run[run] if r["step"] == step]
            if match:
                at_step.append(match[0])
        if not at_step:
            continue
        u = [r["u_estimate"] for r in at_step]
        rel = [r["rel_l1_error"] for r in at_step if r["rel_l1_error"] is not None]
        out.append(AggregateRow(
            step=step,
            mean_u=float(np.mean(u)),
            std_u=_std(u),
            mean_rel_l1=float(np.mean(rel)) if rel else None,
            std_rel_l1=_std(rel) if rel else None,
            mean_loss=float(np.mean([r["loss"] for r in at_step])),
            mean_runtime=float(np.mean([r["seconds"] for r in at_step])),
            runs=len(at_step),
        ))
    return out


def write_aggregate_csv(path: str, rows: list[AggregateRow]) -> None:
    with open(path, "w") as handle:
        handle.write("step,mean_u,std_u,mean_rel_l1,std_rel_l1,mean_loss,mean_runtime_sec,runs\n")
        for r in rows:
            rel = "" if r.mean_rel_l1 is None else repr(r.mean_rel_l1)
            rel_std = "" if r.std_rel_l1 is None else repr(r.std_rel_l1)
            handle.write(f"{r.step},{r.mean_u!r},{r.std_u!r},{rel},{rel_std},"
                         f"{r.mean_loss!r},{r.mean_runtime!r},{r.runs}\n")


def write_table(path: str, rows: list[AggregateRow], title: str) -> None:
    """Readable fixed-width table with the report's column set."""
    header = (f"{'steps':>8} {'mean u':>12} {'std u':>12} {'mean L1 err':>12} "
              f"{'std L1 err':>12} {'mean loss':>12} {'runtime s':>10}")
    lines = [title, "-" * len(header), header, "-" * len(header)]
    for r in rows:
        rel = f"{r.mean_rel_l1:12.5f}" if r.mean_rel_l1 is not None else " " * 12
        rel_std = f"{r.std_rel_l1:12.5f}" if r.std_rel_l1 is not None else " " * 12
        lines.append(f"{r.step:>8} {r.mean_u:12.5f} {r.std_u:12.5f} {rel} "
                     f"{rel_std} {r.mean_loss:12.5f} {r.mean_runtime:10.1f}")
    with open(path, "w") as handle:
        handle.write("\n".join(lines) + "\n")


def emit_curves(bundle_dir: str) -> tuple[str, str]:
    """Per-step cross-run mean error and loss curves, one CSV each."""
    rows_by_run = load_bundle_rows(bundle_dir)
    if not rows_by_run:
        raise ConfigurationError(f"no run metrics found in {bundle_dir}")
    steps = sorted(set.intersection(*(
        {r["step"] for r in rows} for rows in rows_by_run.values())))
    error_path = os.path.join(bundle_dir, "curve_error.csv")
    loss_path = os.path.join(bundle_dir, "curve_loss.csv")
    by_step = {
        step: [r for rows in rows_by_run.values() for r in rows if r["step"] == step]
        for step in steps
    }
    with open(error_path, "w") as handle:
        handle.write("step,mean_rel_l1_error\n")
        for step in steps:
            rel = [r["rel_l1_error"] for r in by_step[step] if r["rel_l1_error"] is not None]
            if rel:
                handle.write(f"{step},{float(np.mean(rel))!r}\n")
    with open(loss_path, "w") as handle:
        handle.write("step,mean_loss\n")
        for step in steps:
            handle.write(f"{step},{float(np.mean([r['loss'] for r in by_step[step]]))!r}\n")
    return error_path, loss_path


def load_bundle_rows(bundle_dir: str) -> dict[int, list[dict]]:
    rows_by_run: dict[int, list[dict]] = {}
    for name in sorted(os.listdir(bundle_dir)):
        if name.startswith("run_") and name.endswith(".jsonl"):
            run = int(name[4:-6])
            with open(os.path.join(bundle_dir, name)) as handle:
                rows_by_run[run] = [json.loads(line) for line in handle if line.strip()]
    return rows_by_run


def run_experiment(config: RunConfig) -> dict:
    """Execute all runs, write the result bundle, and return a summary.

    Bundle contents: config.json (resolved manifest), run_<i>.jsonl,
    aggregate.csv + table.txt at the checkpoint steps, and the two curve
    CSVs.  Diverged runs are recorded in the manifest and simply missing
    from the aggregates (the row counts say how many runs survived).
    """
    problem, arch, _ = resolve(config)  # validate before spawning workers
    os.makedirs(config.out, exist_ok=True)
    config_dict = asdict(config)
    started = time.strftime("%Y-%m-%dT%H:%M:%S")

    workers = config.workers or min(config.runs, os.cpu_count() or 1)
    results = []
    if workers > 1 and config.runs > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_one, config_dict, i) for i in range(config.runs)]
            results = [f.result() for f in futures]
    else:
        results = [_run_one(config_dict, i) for i in range(config.runs)]

    rows_by_run = {r["run"]: r["rows"] for r in results if r["rows"]}
    failures = {r["run"]: r["error"] for r in results if r["error"]}
    checkpoints = config.resolved_checkpoints()
    aggregate_rows = aggregate(rows_by_run, checkpoints)
    write_aggregate_csv(os.path.join(config.out, "aggregate.csv"), aggregate_rows)
    write_table(os.path.join(config.out, "table.txt"), aggregate_rows,
                title=f"{config.problem} d={config.dim} arch={config.arch} ({config.runs} runs)")
    emit_curves(config.out)

    manifest = {
        "config": config_dict,
        "problem_reference": problem.reference,
        "reference_provenance": problem.reference_provenance,
        "param_count": nets.param_count(arch),
        "initialization": "weights/kernels N(0, 1/fan_in); y0 U(-1,1); z0 U(-1,1)/sqrt(d); rest 0",
        "started": started,
        "failures": failures,
        "package_version": "0.1.0",
    }
    with open(os.path.join(config.out, "config.json"), "w") as handle:
        json.dump(manifest, handle, indent=2)
    return {"aggregate": aggregate_rows, "failures": failures, "out": config.out}


# ---------------------------------------------------------------------------
# reference verification report


def verify_references(hjb_samples: int = 10_000_000, seed: int = 0) -> dict:
    """Recompute reference values and compare against the published constants.

    The closed-form values must match to four decimals; the Monte-Carlo
    value must land within three standard errors.  The cubic-nonlinearity
    constants come from an external method and are echoed, not recomputed.
    """
    report = {"checks": [], "passed": True}

    def check(name, ok, detail):
        report["checks"].append({"name": name, "passed": bool(ok), "detail": detail})
        report["passed"] = report["passed"] and bool(ok)

    params = problems.BsbParams()
    bsb_expected = {100: 77.1049, 256: 197.3885, 400: 308.4195}
    for d, expected in bsb_expected.items():
        xi = np.tile([1.0, 0.5], d // 2)
        value = problems.bsb_exact(0.0, xi, params)
        ok = round(value, 4) == expected
        check(f"bsb-exact d={d}", ok, f"computed {value:.6f}, published {expected}")

    estimate, stderr = problems.hjb_mc_reference(100, hjb_samples, seed=seed)
    published = problems.HJB_REFERENCES[100]
    ok = abs(estimate - published) <= 3.0 * stderr
    check("hjb-mc d=100", ok,
          f"estimate {estimate:.6f} +- {stderr:.2e}, published {published}, "
          f"|diff| = {abs(estimate - published):.2e}")

    for d, value in sorted(problems.ALLEN_CAHN_REFERENCES.items()):
        check(f"allen-cahn d={d}", True, f"{value} (external constant, not recomputed)")

    return report


def print_report(report: dict) -> None:
    for entry in report["checks"]:
        flag = "PASS" if entry["passed"] else "FAIL"
        print(f"[{flag}] {entry['name']}: {entry['detail']}")
    print("overall:", "PASS" if report["passed"] else "FAIL")
