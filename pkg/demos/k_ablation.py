"""How far ahead should the agent look in the demonstration?

At each step the policy compares its own progress with the reference
episode at a point k steps further along. This sweeps k over 1..8 with
several seeds on 6x6 maps (about half an hour on one core) and draws the mean success rate with a one-std band.

    python demos/k_ablation.py [--seeds 8] [--pairs 1500] [--epochs 20] [--out results/]
"""
import argparse
import time
from pathlib import Path

from case_lab.datagen import GenConfig
from case_lab.evaluate import RUN_HEADER, ablate_k, csv_text, make_experiment_data
from case_lab.plotting import read_sweep_csv, render_svg, series_stats
from case_lab.train import TrainConfig

parser = argparse.ArgumentParser()
parser.add_argument("--seeds", type=int, default=8)
parser.add_argument("--pairs", type=int, default=1500)
parser.add_argument("--test", type=int, default=100)
parser.add_argument("--epochs", type=int, default=20)
parser.add_argument("--out", type=Path, default=Path("results"))
args = parser.parse_args()
args.out.mkdir(parents=True, exist_ok=True)

t0 = time.time()
data = make_experiment_data(args.pairs, args.test, GenConfig(width=6, height=6, tasks_min=2, tasks_max=3), seed=0)
base = TrainConfig(epochs=args.epochs)
rows = ablate_k(range(1, 9), data.train_pairs, data.test_pairs, range(args.seeds), base)

csv_path = args.out / "ablate_k.csv"
csv_path.write_text(csv_text(RUN_HEADER, [r.cells() for r in rows]))
series, xcol = read_sweep_csv(csv_path)
(args.out / "ablate_k.svg").write_text(render_svg(series, xcol))

# Small k follows the reference closely and is thrown off by any detour;
# large k skips intermediate steps. The middle usually does best.
for k, mean, std in zip(*series_stats(series[base.variant.value])):
    print(f"k={k}  success {mean:.3f} +/- {std:.3f}")
print(f"{len(rows)} runs in {time.time() - t0:.0f}s; wrote {csv_path} and the SVG next to it")
