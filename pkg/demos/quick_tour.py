"""A five-minute walk through the library.

Builds a world, asks the expert for a plan, generates a pair of episodes
for the same task multiset on different maps, trains a small model on a
thousand pairs and lets it act on a held-out combination.

    python demos/quick_tour.py
"""
import time

from case_lab.compose import Variant
from case_lab.craftworld import TaskKind, render_ascii, step
from case_lab.datagen import GenConfig, gen_pair
from case_lab.evaluate import make_experiment_data, rollout, success_rate
from case_lab.expert import plan_sequence, validate
from case_lab.train import TrainConfig, train_loop

gen = GenConfig(width=8, height=8, tasks_min=2, tasks_max=3)

# One paired example: the same tasks on two independently sampled maps.
pair = gen_pair(3, [TaskKind.CHOP_TREE, TaskKind.MAKE_BREAD], gen)
print("demonstration map:")
print(render_ascii(pair.reference.world))
print("target map:")
print(render_ascii(pair.train.world))

# The expert solves the target map directly; replaying its actions through
# the environment must complete every task.
plan = plan_sequence(pair.train.world, pair.train.tasks)
print("expert actions:", " ".join(a.name for a in plan.actions))
print("replay completes the tasks:", validate(plan, pair.train.tasks))
state = pair.train.world
for a in plan.actions[:3]:
    state, report = step(state, a)
print("after three steps:")
print(render_ascii(state))

# A small training run on 6x6 maps. Test multisets are combinations never seen in
# training, so success measures composition rather than recall.
t0 = time.time()
small = GenConfig(width=6, height=6, tasks_min=2, tasks_max=3)
data = make_experiment_data(1000, 100, small, seed=1)
print(f"\n{len(data.train_pairs)} training pairs, {len(data.test_pairs)} held-out pairs")
cfg = TrainConfig(variant=Variant.CASE_CI_L, epochs=20, seed=0)
result = train_loop(cfg, pairs=data.train_pairs)
print(f"trained in {time.time() - t0:.0f}s; final loss {result.history[-1]['loss_total']:.3f}")

# One-shot imitation: the agent sees the reference episode from another
# map and has to carry the same tasks out on its own map.
test = data.test_pairs[0]
outcome = rollout(result.models, test.train, test.reference, k=cfg.k)
print("held-out tasks:", [t.name for t in test.train.tasks], "->", outcome)
print(f"held-out success rate: {success_rate(result.models, data.test_pairs, cfg.k).rate:.2f}")
