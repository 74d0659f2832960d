"""Command-line entry point: ``run``, ``compare`` and ``sweep``.

Exit codes: 0 on success, 2 for configuration or validation errors,
3 for failures raised while an experiment is running.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .config import ExperimentConfig, from_dict, load_config
from .errors import ConfigError, FCAError, ValidationError
from . import source_hash
from .federation import load_summary, run_experiment

log = logging.getLogger("fcasim")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

# grid field -> config overlay builder
GRID_FIELDS = {
    "delta": lambda v: {"federation": {"delta": v}},
    "alpha": lambda v: {"data": {"alpha": v}},
    "strategy": lambda v: {"federation": {"strategy": v}},
    "seed": lambda v: {"seeds": {"data": v, "model": v, "train": v}},
    "transforms": lambda v: {"data": {"transforms": v}},
}
GRID_ALIASES = {"seeds": "seed", "strategies": "strategy"}


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Set the data, model and training seeds all to ``seed``."""
    return from_dict(GRID_FIELDS["seed"](seed), base=cfg)


def _out_dir(cfg: ExperimentConfig, override: str | None) -> Path:
    return Path(override if override is not None else cfg.output.out_dir)


# --------------------------------------------------------------------------
# run


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.seed_override is not None:
        cfg = with_seed(cfg, args.seed_override)
    out = _out_dir(cfg, args.out)
    report = run_experiment(cfg, out_dir=out)
    s = report.summary
    finals = " ".join(f"{v:.4f}" for v in s["per_client_final_mdice"])
    print(f"{s['strategy']}: mean final mDice {s['mean_final_mdice']:.4f} (clients {finals}) -> {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# compare


def _label(summary: dict, path: str, seen: dict[str, int]) -> str:
    base = summary["strategy"]
    seen[base] = seen.get(base, 0) + 1
    return base if seen[base] == 1 else f"{base}#{seen[base]}"


def comparison_rows(summaries: Sequence[dict], paths: Sequence[str]) -> list[dict[str, Any]]:
    """One row per summary: average and per-client final mDice, deltas against the first row."""
    if len(summaries) < 2:
        raise ValidationError("compare needs at least two summaries")
    ks = {s["num_clients"] for s in summaries}
    if len(ks) != 1:
        raise ValidationError(f"summaries disagree on the number of clients: {sorted(ks)}")
    seen: dict[str, int] = {}
    ref = summaries[0]["mean_final_mdice"]
    rows = []
    for s, p in zip(summaries, paths):
        stab = s.get("stability") or {}
        row = {"name": _label(s, p, seen), "average": s["mean_final_mdice"]}
        for k, v in enumerate(s["per_client_final_mdice"]):
            row[f"client_{k + 1}"] = v
        row["delta_vs_first"] = s["mean_final_mdice"] - ref
        row["tail_rolling_std"] = stab.get("tail_rolling_std")
        row["rounds_to_90pct"] = stab.get("rounds_to_90pct")
        row["source"] = str(p)
        rows.append(row)
    return rows


# higher is better for mDice, lower for instability and convergence time
_BEST = {"average": max, "tail_rolling_std": min, "rounds_to_90pct": min}


def _winners(rows: list[dict]) -> dict[str, set[int]]:
    cols = [c for c in rows[0] if c == "average" or c.startswith("client_")] + ["tail_rolling_std", "rounds_to_90pct"]
    out: dict[str, set[int]] = {}
    for c in cols:
        vals = [(i, r[c]) for i, r in enumerate(rows) if r[c] is not None]
        if not vals:
            continue
        best = _BEST.get(c, max)(v for _, v in vals)
        out[c] = {i for i, v in vals if v == best}
    return out


def format_table(rows: list[dict]) -> str:
    metric_cols = [c for c in rows[0] if c not in ("name", "source")]
    wins = _winners(rows)
    header = ["strategy"] + metric_cols
    lines = [header]
    for i, r in enumerate(rows):
        cells = [r["name"]]
        for c in metric_cols:
            v = r[c]
            if v is None:
                cell = "-"
            elif c == "rounds_to_90pct":
                cell = str(v)
            elif c == "delta_vs_first":
                cell = f"{v:+.4f}"
            else:
                cell = f"{v:.4f}"
            if i in wins.get(c, ()):
                cell += "*"
            cells.append(cell)
        lines.append(cells)
    widths = [max(len(line[j]) for line in lines) for j in range(len(header))]
    text = ["  ".join(cell.rjust(w) if j else cell.ljust(w) for j, (cell, w) in enumerate(zip(line, widths))) for line in lines]
    text.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(text) + "\n(* best in column)\n"


def rows_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if v is None else (repr(v) if isinstance(v, float) else v)) for k, v in r.items()})
    return buf.getvalue()


def cmd_compare(args: argparse.Namespace) -> int:
    summaries = [load_summary(p) for p in args.summaries]
    rows = comparison_rows(summaries, args.summaries)
    sys.stdout.write(format_table(rows))
    if args.csv:
        Path(args.csv).write_text(rows_csv(rows))
    return EXIT_OK


# --------------------------------------------------------------------------
# sweep


def load_grid(path: str | Path) -> dict[str, list]:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"grid file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    raw = raw.get("grid", raw)
    return parse_grid(raw)


def parse_grid(raw: dict[str, Any]) -> dict[str, list]:
    grid: dict[str, list] = {}
    for key, values in raw.items():
        name = GRID_ALIASES.get(key, key)
        if name not in GRID_FIELDS:
            raise ValidationError(f"unknown grid field {key!r} (allowed: {sorted(GRID_FIELDS)})")
        if not isinstance(values, list) or not values:
            raise ValidationError(f"grid field {key!r} needs a non-empty list of values")
        grid[name] = values
    if not grid:
        raise ValidationError("grid is empty")
    return grid


def _fmt_coord(v) -> str:
    if isinstance(v, list):
        return "+".join(str(x) for x in v)
    return str(v)


def grid_points(base: ExperimentConfig, grid: dict[str, list]) -> list[tuple[dict, ExperimentConfig]]:
    """Cartesian product of the grid; each point is validated up front."""
    names = list(grid)
    points = []
    for combo in itertools.product(*(grid[n] for n in names)):
        coords = dict(zip(names, combo))
        cfg = base
        for n, v in coords.items():
            cfg = from_dict(GRID_FIELDS[n](v), base=cfg)
        points.append((coords, cfg))
    return points


def point_dirname(coords: dict) -> str:
    return "__".join(f"{k}={_fmt_coord(v)}" for k, v in coords.items())


def _run_point(cfg: ExperimentConfig, out: str) -> dict:
    return run_experiment(cfg, out_dir=out).summary


def cached_summary(run_dir: str | Path, cfg: ExperimentConfig) -> dict | None:
    """The summary stored in ``run_dir`` if it came from this config and this exact source tree."""
    path = Path(run_dir) / "summary.json"
    if not path.exists():
        return None
    try:
        s = load_summary(path)
    except ValidationError:
        return None
    if s.get("config_hash") != cfg.hash() or s.get("source_hash") != source_hash():
        return None
    return s


def cmd_sweep(args: argparse.Namespace) -> int:
    base = load_config(args.config)
    grid = load_grid(args.grid)
    points = grid_points(base, grid)
    root = _out_dir(base, args.out)
    root.mkdir(parents=True, exist_ok=True)
    dirs = [str(root / point_dirname(c)) for c, _ in points]
    summaries = [cached_summary(d, cfg) if args.resume else None for (_, cfg), d in zip(points, dirs)]
    todo = [i for i, s in enumerate(summaries) if s is None]
    if len(todo) < len(points):
        log.info("reusing %d cached runs", len(points) - len(todo))
    cfgs, outs = [points[i][1] for i in todo], [dirs[i] for i in todo]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            fresh = list(pool.map(_run_point, cfgs, outs))
    else:
        fresh = [_run_point(c, d) for c, d in zip(cfgs, outs)]
    for i, s in zip(todo, fresh):
        summaries[i] = s
    names = list(grid)
    k = base.federation.num_clients
    fields = names + ["mean_final_mdice"] + [f"client_{i + 1}" for i in range(k)]
    fields += ["tail_rolling_std", "rounds_to_90pct", "mean_global_unit_fraction", "run_dir"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for (coords, _), d, s in zip(points, dirs, summaries):
        row = {n: _fmt_coord(coords[n]) for n in names}
        row["mean_final_mdice"] = repr(s["mean_final_mdice"])
        for i, v in enumerate(s["per_client_final_mdice"]):
            row[f"client_{i + 1}"] = repr(v)
        tail = s["stability"]["tail_rolling_std"]
        row["tail_rolling_std"] = "" if tail is None else repr(tail)
        rtt = s["stability"]["rounds_to_90pct"]
        row["rounds_to_90pct"] = "" if rtt is None else rtt
        guf = s["mean_global_unit_fraction"]
        row["mean_global_unit_fraction"] = "" if guf is None else repr(guf)
        row["run_dir"] = Path(d).name
        w.writerow(row)
    (root / "sweep.csv").write_text(buf.getvalue())
    print(f"{len(points)} runs -> {root / 'sweep.csv'}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fcasim", description="Federated client-tailored adapter simulator.")
    p.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment from a TOML config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help="output directory (overrides output.out_dir)")
    r.add_argument("--seed-override", type=int, help="set data, model and training seeds to N")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="tabulate two or more run summaries")
    c.add_argument("summaries", nargs="+")
    c.add_argument("--csv", help="also write the table as CSV")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("sweep", help="run a config over a parameter grid")
    s.add_argument("--config", required=True)
    s.add_argument("--grid", required=True)
    s.add_argument("--out", help="sweep root directory (overrides output.out_dir)")
    s.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    s.add_argument("--resume", action="store_true", help="reuse finished runs whose config and source match")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FCAError, FloatingPointError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
