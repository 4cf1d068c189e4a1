"""Command-line front end for the bench experiments.

Exit codes: 0 success, 2 bad configuration, 3 finished with some failed
cells (at most 20%), 4 run failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..manifolds import ConfigurationError, ManifoldKind, load_dataset
from ..metrics import SinkhornConfig
from ..sampler import PathMode, SamplerConfig, idm_sample, save_batch
from .experiments import (
    ExperimentConfig,
    RunFailure,
    run_circle_demo,
    run_dimension_experiment,
    run_rate_experiment,
    run_score_field,
    write_results_csv,
    write_summary_json,
)
from .figures import (
    circle_demo_figure,
    dimension_figure,
    rate_figure,
    score_field_figure,
)

_CONFIG_FIELDS = frozenset(ExperimentConfig.__dataclass_fields__) - {"experiment"}

# (argparse dest, config field); dests not on a subparser are skipped.
_FLAG_FIELDS = (
    ("kind", "kind"),
    ("m_or_d", "m_or_d"),
    ("ambient_dim", "ambient_dim"),
    ("n_list", "n_list"),
    ("d_list", "d_list"),
    ("n_fixed", "n_fixed"),
    ("c0", "c0"),
    ("m_proxy", "m_proxy"),
    ("seeds", "seeds"),
    ("path_mode", "path_mode"),
    ("ode_steps", "ode_steps"),
    ("workers", "workers"),
    ("out", "out_dir"),
    ("demo_n", "demo_n"),
    ("demo_count", "demo_count"),
    ("demo_t", "demo_t"),
    ("grid_w", "grid_w"),
    ("grid_h", "grid_h"),
    ("grid_lim", "grid_lim"),
    ("field_t", "field_t"),
)


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with ExperimentConfig fields")
    p.add_argument("--out", help="output directory (default: results)")
    p.add_argument("--seeds", type=_int_list, help="comma-separated seed list")
    p.add_argument("--workers", type=int, help="process count; 0 = one per CPU")


def _add_sweep(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kind", choices=[k.value for k in ManifoldKind])
    p.add_argument("--m-or-d", type=int, help="SO(m) order or sphere dimension")
    p.add_argument("--ambient-dim", type=int)
    p.add_argument("--c0", type=float, help="bandwidth constant")
    p.add_argument("--m-proxy", type=int, help="proxy and sample batch size")
    p.add_argument("--path-mode", choices=[m.value for m in PathMode])
    p.add_argument("--ode-steps", type=int)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="idm",
        description="Training-free diffusion sampling on embedded manifolds",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rate", help="W1 vs n sweep with slope fits")
    _add_common(p)
    _add_sweep(p)
    p.add_argument("--n-list", type=_int_list, help="training sizes, e.g. 256,512")

    p = sub.add_parser("dim", help="W1 vs ambient dimension at fixed n")
    _add_common(p)
    _add_sweep(p)
    p.add_argument("--d-list", type=_int_list, help="ambient dims, e.g. 16,32,64")
    p.add_argument("--n-fixed", type=int, help="training size for every cell")

    p = sub.add_parser("circle-demo", help="circle data, noised cloud, updated cloud")
    _add_common(p)
    p.add_argument("--demo-n", type=int, help="training points")
    p.add_argument("--demo-count", type=int, help="generated samples")
    p.add_argument("--demo-t", type=float, help="channel time for the noised cloud")

    p = sub.add_parser("score-field", help="empirical score on a 2-d grid")
    _add_common(p)
    p.add_argument("--demo-n", type=int, help="training points")
    p.add_argument("--grid-w", type=int)
    p.add_argument("--grid-h", type=int)
    p.add_argument("--grid-lim", type=float, help="half-width of the grid")
    p.add_argument("--field-t", type=float, help="channel time for the score")

    p = sub.add_parser("sample", help="draw IDM samples from a saved dataset")
    p.add_argument("--data", required=True, help="dataset CSV written by save_dataset")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="samples.csv", help="output CSV path")
    p.add_argument("--c0", type=float, default=0.8)
    p.add_argument("--path-mode", choices=[m.value for m in PathMode],
                   default=PathMode.SHORT_CIRCUIT.value)
    p.add_argument("--ode-steps", type=int, default=200)
    return parser


def _merge_config(experiment: str, args: argparse.Namespace) -> ExperimentConfig:
    kwargs: dict = {}
    if getattr(args, "config", None):
        raw = json.loads(Path(args.config).read_text())
        if not isinstance(raw, dict):
            raise ConfigurationError("config file must hold a JSON object")
        for key, val in raw.items():
            if key == "experiment":
                if val != experiment:
                    raise ConfigurationError(
                        f"config is for experiment {val!r}, command is {experiment!r}"
                    )
                continue
            if key == "sinkhorn":
                if not isinstance(val, dict):
                    raise ConfigurationError("sinkhorn config must be an object")
                try:
                    kwargs["sinkhorn"] = SinkhornConfig(**val)
                except TypeError as exc:
                    raise ConfigurationError(f"bad sinkhorn config: {exc}")
                continue
            if key not in _CONFIG_FIELDS:
                raise ConfigurationError(f"unknown config key {key!r}")
            kwargs[key] = val
    for dest, field_name in _FLAG_FIELDS:
        value = getattr(args, dest, None)
        if value is not None:
            kwargs[field_name] = value
    try:
        return ExperimentConfig(experiment=experiment, **kwargs)
    except TypeError as exc:
        raise ConfigurationError(str(exc))


def _intrinsic_dim(cfg: ExperimentConfig) -> int:
    kind = ManifoldKind(cfg.kind)
    if kind is ManifoldKind.CIRCLE:
        return 1
    if kind is ManifoldKind.SPHERE:
        return cfg.m_or_d
    return cfg.m_or_d * (cfg.m_or_d - 1) // 2


def _report_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_rate(cfg: ExperimentConfig) -> int:
    result = run_rate_experiment(cfg)
    out = _report_dir(cfg)
    write_results_csv(result.records, out / "results.csv")
    write_summary_json(result.summary, out / "summary.json")
    fig = rate_figure(result.summary, _intrinsic_dim(cfg), out / "rate.png")
    for method, fit in sorted(result.summary["fits"].items()):
        print(f"{method}: slope {fit['slope']:+.4f} (r^2 {fit['r_squared']:.4f})")
    print(f"wrote {out / 'results.csv'}, {out / 'summary.json'}, {fig}")
    return _finish(result.failures)


def _cmd_dim(cfg: ExperimentConfig) -> int:
    result = run_dimension_experiment(cfg)
    out = _report_dir(cfg)
    write_results_csv(result.records, out / "results.csv")
    write_summary_json(result.summary, out / "summary.json")
    fig = dimension_figure(result.summary, out / "dim.png")
    for method, flat in sorted(result.summary["flatness"].items()):
        rho = result.summary["spearman_rho"].get(method)
        rho_text = "n/a" if rho is None else f"{rho:+.3f}"
        print(f"{method}: spread {flat:.4f}, spearman {rho_text}")
    print(f"wrote {out / 'results.csv'}, {out / 'summary.json'}, {fig}")
    return _finish(result.failures)


def _cmd_circle_demo(cfg: ExperimentConfig) -> int:
    artifacts = run_circle_demo(cfg)
    out = _report_dir(cfg)
    fig = circle_demo_figure(
        artifacts.data, artifacts.early, artifacts.updated, out / "circle_demo.png"
    )
    written = ", ".join(str(p) for p in artifacts.paths.values())
    print(f"wrote {written}, {fig}")
    return 0


def _cmd_score_field(cfg: ExperimentConfig) -> int:
    artifacts = run_score_field(cfg)
    out = _report_dir(cfg)
    fig = score_field_figure(
        artifacts.xs, artifacts.ys, artifacts.scores, artifacts.data,
        out / "score_field.png",
    )
    print(f"wrote {artifacts.path}, {fig}")
    return 0


def _cmd_sample(args: argparse.Namespace) -> int:
    data = load_dataset(args.data)
    if args.count < 1:
        raise ConfigurationError(f"count must be >= 1, got {args.count}")
    config = SamplerConfig.from_data(
        data, args.c0, path_mode=PathMode(args.path_mode), ode_steps=args.ode_steps
    )
    batch = idm_sample(data, config, args.count, args.seed)
    save_batch(batch, args.out)
    print(f"wrote {args.count} samples to {args.out}")
    return 0


def _finish(failures: list[str]) -> int:
    if failures:
        for line in failures:
            print(f"warning: {line}", file=sys.stderr)
        return 3
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "sample":
            return _cmd_sample(args)
        cfg = _merge_config(args.command, args)
    except (ValueError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    handler = {
        "rate": _cmd_rate,
        "dim": _cmd_dim,
        "circle-demo": _cmd_circle_demo,
        "score-field": _cmd_score_field,
    }[args.command]
    try:
        return handler(cfg)
    except RunFailure as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
