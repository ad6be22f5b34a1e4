"""Command-line front end: config files, experiment dispatch, CSV reports.

Config files are ``key = value`` lines (``#`` comments); every key matches
a SimulationConfig field and unknown keys are rejected with the line
number.  Reports are CSVs with fixed headers plus JSON variants; floats
are serialized with 17 significant digits so identical results produce
byte-identical files.  Exit codes: 0 success, 2 config error, 3 runtime
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

from . import engine, metrics
from .datagen import build_dataset, write_dataset
from .engine import SimulationConfig
from .streams import run_seed_for

_FMT = "%.17g"

TABLE_HEADER = ("mechanism,reserve,level,profit_delta_pct,profit_ci_lo,profit_ci_hi,"
                "welfare_delta_pct,welfare_ci_lo,welfare_ci_hi,"
                "bidmul_mean,bidmul_ci_lo,bidmul_ci_hi,strength_mean")
TRAJECTORY_HEADER = "mechanism,reserve,level,run,iteration,relative_margin,roi,strength"


class ConfigError(ValueError):
    pass


_BOOLS = {"true": True, "false": False, "yes": True, "no": False, "1": True, "0": False}


def _coerce(name: str, text: str, target_type, line_no: int):
    text = text.strip()
    try:
        if target_type is bool:
            if text.lower() not in _BOOLS:
                raise ValueError(f"expected a boolean, got {text!r}")
            return _BOOLS[text.lower()]
        if target_type is int:
            return int(text)
        if target_type is float:
            return float(text)
        if target_type is str:
            return text
        # Tuple-typed fields: comma-separated element list.
        origin = getattr(target_type, "__origin__", None)
        if origin is tuple:
            elem = target_type.__args__[0]
            items = [t for t in (s.strip() for s in text.split(",")) if t]
            return tuple(_coerce(name, t, elem, line_no) for t in items)
        raise ValueError(f"unsupported config type {target_type}")
    except ValueError as exc:
        raise ConfigError(f"line {line_no}: key {name!r}: {exc}") from None


def parse_config(text: str) -> SimulationConfig:
    """Parse ``key = value`` text into a config, defaults applied."""
    import typing

    hints = typing.get_type_hints(SimulationConfig)
    known = {f.name for f in dataclasses.fields(SimulationConfig)}
    values = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in known:
            raise ConfigError(f"line {line_no}: unknown key {key!r}")
        values[key] = _coerce(key, val, hints[key], line_no)
    try:
        return SimulationConfig(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def serialize_config(config: SimulationConfig) -> str:
    """Config as config-file text; parse(serialize(c)) == c."""
    lines = []
    for f in dataclasses.fields(SimulationConfig):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            text = ",".join(_scalar_text(x) for x in v)
        else:
            text = _scalar_text(v)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


def _scalar_text(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return _FMT % v
    return str(v)


def _pct(x: float) -> str:
    return _FMT % (100.0 * x)


def table_csv(rows: list[metrics.AggregateRow]) -> str:
    out = [TABLE_HEADER]
    for r in rows:
        out.append(",".join([
            r.mechanism, "true" if r.reserve else "false", str(r.level),
            _pct(r.profit_delta), _pct(r.profit_ci[0]), _pct(r.profit_ci[1]),
            _pct(r.welfare_delta), _pct(r.welfare_ci[0]), _pct(r.welfare_ci[1]),
            _FMT % r.bidmul_mean, _FMT % r.bidmul_ci[0], _FMT % r.bidmul_ci[1],
            _FMT % r.strength_mean,
        ]))
    return "\n".join(out) + "\n"


def trajectory_csv(result: engine.ExperimentResult) -> str:
    out = [TRAJECTORY_HEADER]
    for cell in result.cells:
        mech, res, level = cell
        for run_idx, rep in enumerate(result.reports[cell]):
            for row in rep.trajectory:
                out.append(",".join([
                    mech, "true" if res else "false", str(level),
                    str(run_idx), str(row.iteration),
                    _FMT % row.relative_margin, _FMT % row.roi, _FMT % row.strength,
                ]))
    return "\n".join(out) + "\n"


def _table_json(rows: list[metrics.AggregateRow]) -> str:
    return json.dumps([dataclasses.asdict(r) for r in rows], indent=1, sort_keys=True)


def _trajectory_json(result: engine.ExperimentResult) -> str:
    data = []
    for cell in result.cells:
        mech, res, level = cell
        for run_idx, rep in enumerate(result.reports[cell]):
            for row in rep.trajectory:
                data.append({
                    "mechanism": mech, "reserve": res, "level": level,
                    "run": run_idx, "iteration": row.iteration,
                    "relative_margin": row.relative_margin, "roi": row.roi,
                    "strength": row.strength,
                })
    return json.dumps(data, indent=1, sort_keys=True)


def _runs_json(result: engine.ExperimentResult) -> str:
    """Per-run final metrics, enough to re-aggregate with a new benchmark."""
    data = []
    for cell in result.cells:
        for run_idx, rep in enumerate(result.reports[cell]):
            row = rep.final_row
            data.append({
                "mechanism": cell[0], "reserve": cell[1], "level": cell[2],
                "run": run_idx, "profit": row.profit, "welfare": row.welfare,
                "bid_multiplier": row.bid_multiplier, "strength": row.strength,
                "relative_margin": row.relative_margin, "roi": row.roi,
                "iteration": row.iteration,
                "dataset_digest": rep.dataset_digest,
                "auctions_simulated": rep.auctions_simulated,
            })
    return json.dumps(data, indent=1, sort_keys=True)


def emit_report(result: engine.ExperimentResult, out_dir: Path,
                config_path: str = "", subcommand: str = "experiment",
                overrides: dict | None = None) -> dict[str, str]:
    """Write table/trajectory CSVs, JSON variants, runs.json, and manifest.

    Returns {filename: sha256 digest} for everything written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {
        "table.csv": table_csv(result.aggregate()),
        "table.json": _table_json(result.aggregate()),
        "trajectory.csv": trajectory_csv(result),
        "trajectory.json": _trajectory_json(result),
        "runs.json": _runs_json(result),
        "config.resolved": serialize_config(result.config),
    }
    digests = {}
    for name, content in files.items():
        data = content.encode()
        (out_dir / name).write_bytes(data)
        digests[name] = hashlib.sha256(data).hexdigest()
    manifest = {
        "subcommand": subcommand,
        "config_path": config_path,
        "output_dir": str(out_dir),
        "overrides": overrides or {},
        "resolved_config": serialize_config(result.config),
        "files": digests,
    }
    (out_dir / "manifest").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    digests["manifest"] = hashlib.sha256((out_dir / "manifest").read_bytes()).hexdigest()
    return digests


def _load_config(args) -> SimulationConfig:
    if args.config:
        config = parse_config(Path(args.config).read_text())
    else:
        config = SimulationConfig()
    overrides = {}
    for name in ("seed", "threads", "mechanism", "level", "runs"):
        v = getattr(args, name, None)
        if v is not None:
            overrides[name] = v
    if getattr(args, "reserve", None) is not None:
        overrides["reserve"] = args.reserve
    if overrides:
        try:
            config = dataclasses.replace(config, **overrides)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return config


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file path")
    p.add_argument("--seed", type=int, help="master seed override")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--threads", type=int, help="worker processes (never affects results)")
    p.add_argument("--mechanism", choices=engine.MECHANISMS)
    p.add_argument("--level", type=int)
    p.add_argument("--reserve", action="store_true", default=None)
    p.add_argument("--runs", type=int)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="auctionsim",
                                     description="Autobidding auction simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("generate", "generate and export one run's dataset"),
        ("run", "simulate a single (mechanism, reserve, level) cell"),
        ("experiment", "run the configured cell grid and aggregate"),
        ("report", "re-aggregate a previous experiment's runs.json"),
    ]:
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        if name == "report":
            p.add_argument("--runs-file", required=True, help="runs.json to re-aggregate")

    args = parser.parse_args(argv)
    try:
        config = _load_config(args)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    out_dir = Path(args.out)
    overrides = {k: v for k, v in vars(args).items()
                 if k in ("seed", "threads", "mechanism", "level", "reserve", "runs")
                 and v is not None}
    try:
        if args.command == "generate":
            out_dir.mkdir(parents=True, exist_ok=True)
            dataset = build_dataset(config, run_seed_for(config.seed, 0))
            write_dataset(dataset, out_dir / "dataset.txt")
            (out_dir / "config.resolved").write_text(serialize_config(config))
            print(f"wrote {out_dir / 'dataset.txt'}")
        elif args.command in ("run", "experiment"):
            if args.command == "run":
                config = dataclasses.replace(
                    config,
                    experiment_mechanisms=(config.mechanism,),
                    experiment_levels=(config.level,),
                    experiment_reserves=(config.reserve,),
                    benchmark_mechanism=config.mechanism,
                    benchmark_reserve=config.reserve,
                    benchmark_level=config.level,
                )
            result = engine.run_experiment(config)
            emit_report(result, out_dir, config_path=args.config or "",
                        subcommand=args.command, overrides=overrides)
            print(f"wrote report to {out_dir}")
        elif args.command == "report":
            rows_by_cell = _load_runs(Path(args.runs_file))
            table = metrics.aggregate(rows_by_cell, config.benchmark_cell())
            order = sorted(rows_by_cell)
            table.sort(key=lambda r: order.index((r.mechanism, r.reserve, r.level)))
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "table.csv").write_text(table_csv(table))
            (out_dir / "table.json").write_text(_table_json(table))
            print(f"wrote report to {out_dir}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


def _load_runs(path: Path) -> dict[engine.Cell, list[metrics.MetricRow]]:
    records = json.loads(path.read_text())
    by_cell: dict[engine.Cell, list[tuple[int, metrics.MetricRow]]] = {}
    for rec in records:
        cell = (rec["mechanism"], bool(rec["reserve"]), int(rec["level"]))
        row = metrics.MetricRow(
            mechanism=cell[0], reserve=cell[1], level=cell[2],
            iteration=rec["iteration"], profit=rec["profit"], welfare=rec["welfare"],
            bid_multiplier=rec["bid_multiplier"], strength=rec["strength"],
            relative_margin=rec["relative_margin"], roi=rec["roi"])
        by_cell.setdefault(cell, []).append((rec["run"], row))
    return {cell: [r for _, r in sorted(rows, key=lambda t: t[0])]
            for cell, rows in by_cell.items()}


if __name__ == "__main__":
    sys.exit(main())
