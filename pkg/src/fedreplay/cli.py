"""Configuration loading, experiment execution, seed sweeps, and comparisons.

Config files are flat `key = value` documents ('#' starts a comment).
Unknown keys are rejected; missing keys take the documented defaults. Paper
symbols work as aliases (a -> mix, lambda -> momentum, delta -> mg_weight,
alpha -> dirichlet_alpha, M -> pool, eta -> info_lr, C/R/E/e for the count
parameters). Every report echoes the fully resolved configuration so a run
can be replayed bit-for-bit from its own output.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path
from statistics import stdev
from typing import Sequence

from .core import FederationConfig, ValidationError
from .plots import plot_mode_comparison, plot_sweep, render_run_figures
from .report import ExperimentReport, emit_report, validate_report_file
from .scenarios import SCENARIOS, build_experiment_data, build_task_stream
from .server import run_experiment


@dataclass(frozen=True)
class RunConfig:
    """Federation hyperparameters plus scenario and harness settings."""

    federation: FederationConfig = FederationConfig()
    scenario: str = "FCIL"
    class_counts: tuple[int, ...] = (4, 3, 3, 3)
    per_class_samples: int = 200
    feature_dim: int = 16
    dirichlet_alpha: float = 1.0
    num_domains: int = 1
    num_seeds: int = 1
    output_dir: str = "runs"
    parallel: bool = False

    def __post_init__(self):
        object.__setattr__(self, "class_counts", tuple(int(n) for n in self.class_counts))
        if self.scenario not in SCENARIOS:
            raise ValidationError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.num_seeds < 1:
            raise ValidationError(f"num_seeds must be >= 1, got {self.num_seeds}")
        if self.per_class_samples < 1:
            raise ValidationError(f"per_class_samples must be >= 1, got {self.per_class_samples}")
        if self.feature_dim < 2:
            raise ValidationError(f"feature_dim must be >= 2, got {self.feature_dim}")
        if self.dirichlet_alpha <= 0:
            raise ValidationError(f"dirichlet_alpha must be > 0, got {self.dirichlet_alpha}")
        if self.num_domains < 1:
            raise ValidationError(f"num_domains must be >= 1, got {self.num_domains}")

    def to_flat_dict(self) -> dict[str, object]:
        out: dict[str, object] = {}
        for f in fields(FederationConfig):
            out[f.name] = getattr(self.federation, f.name)
        for f in fields(RunConfig):
            if f.name == "federation":
                continue
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_flat_dict(cls, flat: dict[str, object]) -> "RunConfig":
        fed_names = {f.name for f in fields(FederationConfig)}
        run_names = {f.name for f in fields(cls)} - {"federation"}
        fed_kwargs = {k: v for k, v in flat.items() if k in fed_names}
        run_kwargs = {k: v for k, v in flat.items() if k in run_names}
        unknown = set(flat) - fed_names - run_names
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        if "class_counts" in run_kwargs:
            run_kwargs["class_counts"] = tuple(run_kwargs["class_counts"])
        return cls(federation=FederationConfig(**fed_kwargs), **run_kwargs)


_KEY_ALIASES = {
    "a": "mix",
    "lambda": "momentum",
    "λ": "momentum",
    "delta": "mg_weight",
    "δ": "mg_weight",
    "alpha": "dirichlet_alpha",
    "α": "dirichlet_alpha",
    "eta": "info_lr",
    "η": "info_lr",
    "M": "pool",
    "C": "num_clients",
    "R": "rounds_per_task",
    "E": "local_epochs",
    "e": "info_iters",
}

SWEEPABLE_KEYS = ("a", "lambda", "delta", "m_max", "dirichlet_alpha", "M")


def _parse_value(key: str, raw: str, target_type, line_no: int):
    raw = raw.strip()
    try:
        if target_type is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        if target_type is str:
            return raw
        if target_type is tuple:
            items = raw.strip("[]").replace(" ", "")
            return tuple(int(tok) for tok in items.split(",") if tok)
    except ValueError as exc:
        raise ValidationError(f"line {line_no}: invalid value for {key!r}: {exc}") from exc
    raise ValidationError(f"line {line_no}: unsupported type for key {key!r}")


def _config_key_types() -> dict[str, type]:
    types: dict[str, type] = {}
    for f in fields(FederationConfig):
        types[f.name] = type(getattr(FederationConfig(), f.name))
    defaults = RunConfig()
    for f in fields(RunConfig):
        if f.name == "federation":
            continue
        value = getattr(defaults, f.name)
        types[f.name] = tuple if isinstance(value, tuple) else type(value)
    return types


def load_config(path: str | Path) -> RunConfig:
    """Parse a flat key-value config file; unknown keys are errors."""
    key_types = _config_key_types()
    flat: dict[str, object] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValidationError(f"line {line_no}: expected 'key = value', got {stripped!r}")
        raw_key, raw_value = stripped.split("=", 1)
        key = _KEY_ALIASES.get(raw_key.strip(), raw_key.strip())
        if key not in key_types:
            raise ValidationError(f"line {line_no}: unknown config key {raw_key.strip()!r}")
        if key in flat:
            raise ValidationError(f"line {line_no}: duplicate config key {raw_key.strip()!r}")
        flat[key] = _parse_value(key, raw_value, key_types[key], line_no)
    return RunConfig.from_flat_dict(flat)


def _with_overrides(config: RunConfig, **kwargs) -> RunConfig:
    fed_names = {f.name for f in fields(FederationConfig)}
    fed_updates = {k: v for k, v in kwargs.items() if k in fed_names and v is not None}
    run_updates = {
        k: v for k, v in kwargs.items() if k not in fed_names and v is not None
    }
    federation = replace(config.federation, **fed_updates) if fed_updates else config.federation
    return replace(config, federation=federation, **run_updates)


def execute_single(config: RunConfig, seed: int) -> ExperimentReport:
    """Build the scenario for one seed and run the full experiment."""
    fed = replace(config.federation, seed=seed)
    stream = build_task_stream(config.scenario, config.class_counts, config.num_domains)
    data = build_experiment_data(
        stream,
        num_clients=fed.num_clients,
        per_class=config.per_class_samples,
        feature_dim=config.feature_dim,
        alpha=config.dirichlet_alpha,
        seed=seed,
    )
    echo = replace(config, federation=fed).to_flat_dict()
    return run_experiment(
        stream, data.partition, data.test_sets, fed,
        config_echo=echo, parallel=config.parallel,
    )


def _mode_tag(mode: str) -> str:
    return "fixed" if mode == "fixed_equal" else mode


def _sample_std(values: Sequence[float]) -> float:
    return stdev(values) if len(values) > 1 else 0.0


def _write_summary(path: Path, rows: list[dict[str, object]]) -> None:
    if not rows:
        return
    keys = list(rows[0].keys())
    lines = [",".join(keys)]
    for row in rows:
        lines.append(",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k])
                              for k in keys))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def run(
    config: RunConfig,
    mode_override: str | None = None,
    compare: bool = False,
    render_plots: bool = True,
) -> int:
    """Run every seed (and mode), emit reports, figures, and a summary.

    Returns 0 only if every seed completed and every written report passed
    schema validation.
    """
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    modes = ["dynamic", "fixed_equal"] if compare else [mode_override or config.federation.allocation_mode]
    base_seed = config.federation.seed
    seeds = [base_seed + i for i in range(config.num_seeds)]

    results: dict[str, list[ExperimentReport]] = {m: [] for m in modes}
    started = time.perf_counter()
    for mode in modes:
        mode_config = _with_overrides(config, allocation_mode=mode)
        for seed in seeds:
            report = execute_single(mode_config, seed)
            base = out_dir / f"report_{_mode_tag(mode)}_seed{seed:04d}"
            json_path, _ = emit_report(report, base)
            validate_report_file(json_path)
            if render_plots:
                render_run_figures(report, base)
            results[mode].append(report)
            print(f"[fedreplay] {mode} seed {seed}: "
                  f"a_avg={report.a_avg:.4f} a_last={report.a_last:.4f}")

    summary_rows = []
    for mode in modes:
        reports = results[mode]
        summary_rows.append(
            {
                "mode": mode,
                "num_seeds": len(reports),
                "mean_a_avg": sum(r.a_avg for r in reports) / len(reports),
                "std_a_avg": _sample_std([r.a_avg for r in reports]),
                "mean_a_last": sum(r.a_last for r in reports) / len(reports),
                "std_a_last": _sample_std([r.a_last for r in reports]),
            }
        )
    if compare:
        dyn, fix = results["dynamic"], results["fixed_equal"]
        summary_rows.append(
            {
                "mode": "delta_dynamic_minus_fixed",
                "num_seeds": len(seeds),
                "mean_a_avg": sum(a.a_avg - b.a_avg for a, b in zip(dyn, fix)) / len(seeds),
                "std_a_avg": _sample_std([a.a_avg - b.a_avg for a, b in zip(dyn, fix)]),
                "mean_a_last": sum(a.a_last - b.a_last for a, b in zip(dyn, fix)) / len(seeds),
                "std_a_last": _sample_std([a.a_last - b.a_last for a, b in zip(dyn, fix)]),
            }
        )
        if render_plots:
            per_seed = {
                s: {"dynamic": dyn[i].a_last, "fixed_equal": fix[i].a_last}
                for i, s in enumerate(seeds)
            }
            plot_mode_comparison(per_seed, out_dir / "comparison_a_last.png")
    _write_summary(out_dir / "summary.csv", summary_rows)
    elapsed = time.perf_counter() - started
    print(f"[fedreplay] wrote {sum(len(v) for v in results.values())} report(s) "
          f"to {out_dir} in {elapsed:.1f}s")
    return 0


def sweep(
    config: RunConfig,
    key: str,
    values: Sequence[float],
    render_plots: bool = True,
) -> list[dict[str, float]]:
    """Re-run the experiment for every value of one hyperparameter.

    Emits one summary row per value (mean and sample std of a_avg / a_last
    over the configured seeds) to sweep_<key>.csv in the output directory.
    """
    if key not in SWEEPABLE_KEYS:
        raise ValidationError(
            f"cannot sweep {key!r}; sweepable keys: {', '.join(SWEEPABLE_KEYS)}"
        )
    if not values:
        raise ValidationError("sweep requires at least one value")
    field_name = _KEY_ALIASES.get(key, key)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base_seed = config.federation.seed
    seeds = [base_seed + i for i in range(config.num_seeds)]
    rows: list[dict[str, float]] = []
    for value in values:
        typed = int(value) if field_name in ("pool", "m_max") else float(value)
        swept = _with_overrides(config, **{field_name: typed})
        reports = [execute_single(swept, seed) for seed in seeds]
        rows.append(
            {
                "value": typed,
                "mean_a_avg": sum(r.a_avg for r in reports) / len(reports),
                "std_a_avg": _sample_std([r.a_avg for r in reports]),
                "mean_a_last": sum(r.a_last for r in reports) / len(reports),
                "std_a_last": _sample_std([r.a_last for r in reports]),
            }
        )
        print(f"[fedreplay] sweep {key}={typed}: mean a_avg={rows[-1]['mean_a_avg']:.4f} "
              f"mean a_last={rows[-1]['mean_a_last']:.4f}")
    _write_summary(out_dir / f"sweep_{field_name}.csv", [dict(r) for r in rows])
    if render_plots:
        plot_sweep(key, rows, out_dir / f"sweep_{field_name}.png")
    return rows


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedreplay",
        description="Simulate federated continual learning with dynamically "
                    "allocated exemplar-replay memory.",
    )
    parser.add_argument("--config", type=str, default=None, help="flat key=value config file")
    parser.add_argument("--mode", choices=["dynamic", "fixed"], default=None,
                        help="override the allocation mode")
    parser.add_argument("--compare", action="store_true",
                        help="run dynamic and fixed_equal side by side per seed")
    parser.add_argument("--sweep", type=str, default=None, metavar="KEY",
                        help=f"sweep one of: {', '.join(SWEEPABLE_KEYS)}")
    parser.add_argument("--values", type=str, default=None,
                        help="comma-separated values for --sweep")
    parser.add_argument("--seed", type=int, default=None, help="base seed")
    parser.add_argument("--seeds", type=int, default=None, help="number of seeds")
    parser.add_argument("--out", type=str, default=None, help="output directory")
    parser.add_argument("--parallel", action="store_true",
                        help="train clients in a thread pool")
    parser.add_argument("--no-plots", action="store_true", help="skip figure rendering")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_arg_parser().parse_args(argv)
    try:
        config = load_config(args.config) if args.config else RunConfig()
        out_dir = args.out or os.environ.get("FEDREPLAY_OUT") or config.output_dir
        config = _with_overrides(
            config,
            seed=args.seed,
            num_seeds=args.seeds,
            output_dir=out_dir,
            parallel=True if args.parallel else None,
        )
        mode_override = {"fixed": "fixed_equal", "dynamic": "dynamic"}.get(args.mode or "")
        if args.sweep:
            if not args.values:
                raise ValidationError("--sweep requires --values")
            values = [float(tok) for tok in args.values.split(",") if tok.strip()]
            if mode_override:
                config = _with_overrides(config, allocation_mode=mode_override)
            sweep(config, args.sweep, values, render_plots=not args.no_plots)
            return 0
        return run(
            config,
            mode_override=mode_override,
            compare=args.compare,
            render_plots=not args.no_plots,
        )
    except ValidationError as exc:
        print(f"fedreplay: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - surfaced for CLI users
        print(f"fedreplay: unexpected failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
