"""Strategy comparison over seeds: FedAvg vs BFU vs SFU under mixed heterogeneity.

Runs (or reuses) one experiment per (seed, strategy) and prints per-seed final
mDice, the seed-averaged ranking and tail-stability win counts.

    python3 scripts/trend.py --out results/acceptance/mixed
"""

import argparse
from pathlib import Path

import numpy as np

from fcasim import cli
from fcasim.config import ExperimentConfig, load_config
from fcasim.federation import run_experiment

ROOT = Path(__file__).resolve().parent.parent


def run_grid(base: ExperimentConfig, seeds, strategies, out: Path) -> dict:
    """Summaries keyed by (seed, strategy); finished runs in ``out`` are reused."""
    grid = {"seed": list(seeds), "strategy": list(strategies)}
    results = {}
    for coords, cfg in cli.grid_points(base, grid):
        d = out / cli.point_dirname(coords)
        s = cli.cached_summary(d, cfg)
        if s is None:
            print(f"running {d.name} ...", flush=True)
            s = run_experiment(cfg, out_dir=d).summary
        results[coords["seed"], coords["strategy"]] = s
    return results


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=str(ROOT / "configs" / "default.toml"))
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--strategies", default="fedavg,bfu,sfu")
    p.add_argument("--out", default=str(ROOT / "results" / "acceptance" / "mixed"))
    args = p.parse_args()
    seeds = range(args.seeds)
    strategies = args.strategies.split(",")
    res = run_grid(load_config(args.config), seeds, strategies, Path(args.out))

    print("\nfinal mean mDice per seed")
    print("seed  " + "  ".join(f"{s:>8}" for s in strategies))
    for seed in seeds:
        print(f"{seed:>4}  " + "  ".join(f"{res[seed, s]['mean_final_mdice']:8.4f}" for s in strategies))
    means = {s: np.mean([res[seed, s]["mean_final_mdice"] for seed in seeds]) for s in strategies}
    print("mean  " + "  ".join(f"{means[s]:8.4f}" for s in strategies))
    print("ranking: " + " > ".join(sorted(strategies, key=means.get, reverse=True)))

    if "fedavg" in strategies:
        for s in strategies:
            if s == "fedavg":
                continue
            wins = sum(res[seed, s]["mean_final_mdice"] >= res[seed, "fedavg"]["mean_final_mdice"] for seed in seeds)
            stable = sum(
                res[seed, s]["stability"]["tail_rolling_std"] <= res[seed, "fedavg"]["stability"]["tail_rolling_std"]
                for seed in seeds
            )
            print(f"{s}: beats fedavg in {wins}/{len(seeds)} seeds, steadier tail in {stable}/{len(seeds)}")
    wall = sum(r["wall_time_s"] for r in res.values())
    print(f"compute: {wall / 60:.1f} min over {len(res)} runs")


if __name__ == "__main__":
    main()
