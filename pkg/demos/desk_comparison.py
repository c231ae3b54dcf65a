"""Variant comparison at desk scale.

Five policies are trained by behaviour cloning on 2,000 paired episodes
(8x8 maps, 2-3 tasks each) and evaluated one-shot on task multisets that
never occur in training. Each is repeated over five seeds.

    python demos/desk_comparison.py [--seeds 5] [--pairs 2000] [--test 300] [--out results/]
"""
import argparse
import time
from pathlib import Path

from case_lab.compose import Variant
from case_lab.datagen import GenConfig
from case_lab.evaluate import (
    RUN_HEADER,
    SUMMARY_HEADER,
    compare_variants,
    csv_text,
    make_experiment_data,
    random_policy_models,
    success_rate,
    summary_rows,
)
from case_lab.train import TrainConfig

parser = argparse.ArgumentParser()
parser.add_argument("--seeds", type=int, default=5)
parser.add_argument("--pairs", type=int, default=2000)
parser.add_argument("--test", type=int, default=300)
parser.add_argument("--epochs", type=int, default=30)
parser.add_argument("--out", type=Path, default=Path("results"))
args = parser.parse_args()
args.out.mkdir(parents=True, exist_ok=True)

# Data: the multisets of 2-3 tasks are split so that every test multiset is
# a new combination of (task, count) parts that training has seen.
t0 = time.time()
gen = GenConfig(width=8, height=8, tasks_min=2, tasks_max=3)
data = make_experiment_data(args.pairs, args.test, gen, seed=0)
print(f"{len(data.split.train_sequences)} train / {len(data.split.test_sequences)} test multisets")
print(f"generated {len(data.train_pairs)} + {len(data.test_pairs)} pairs in {time.time() - t0:.0f}s")

# How often does an untrained network succeed by chance?
floor = [success_rate(random_policy_models(8, 8, seed=s), data.test_pairs).rate for s in range(args.seeds)]
print("random-policy floor:", floor)

variants = [Variant.CASE, Variant.CASE_CI, Variant.CASE_CI_L, Variant.GOAL_GUIDANCE, Variant.CPV_FULL]
rows = compare_variants(variants, data.train_pairs, data.test_pairs, range(args.seeds), TrainConfig(epochs=args.epochs))
(args.out / "variants.csv").write_text(csv_text(RUN_HEADER, [r.cells() for r in rows]))
(args.out / "variants_summary.csv").write_text(csv_text(SUMMARY_HEADER, summary_rows(rows)))

for r in rows:
    print(f"{r.variant:14s} seed {r.seed}  success {r.summary.rate:.3f}")
print(csv_text(SUMMARY_HEADER, summary_rows(rows)))
print(f"total {time.time() - t0:.0f}s")
