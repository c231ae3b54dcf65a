"""Closed-loop one-shot evaluation and the experiment sweeps built on it.

At rollout time the length of the acting trajectory is unknown, so the
waypoint index assumes it equals the reference length: ``I = min(t + k, T)``.
The goal state of the acting episode (its expert end state) is given, as
during training. Actions are the greedy argmax, lowest index on ties.
"""
from __future__ import annotations

import csv
import enum
import io
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .compose import BatchFeatures, ModelConfig, Models, Variant, goal_rows, init_models, policy_logits, rollout_waypoint_index
from .craftworld import Action, GridState, featurize, step, tasks_completed, tasks_done
from .datagen import Episode, EpisodePair, GenConfig, HoldoutSpec, TaskSplit, derive_seed, generate_pairs, split_tasks
from .train import PreparedPair, TrainConfig, prepare, train_loop

RUN_HEADER = ("variant", "k", "seed", "n_episodes", "success_rate", "mean_steps", "std")
SUMMARY_HEADER = ("variant", "k", "n_seeds", "best", "mean", "std")
SWEEP_HEADER = ("length",) + RUN_HEADER


class Termination(str, enum.Enum):
    ALL_DONE = "AllDone"
    STEP_BUDGET = "StepBudget"


@dataclass(frozen=True)
class RolloutOutcome:
    success: bool
    steps_taken: int
    tasks_completed: int
    termination: Termination


def step_budget(reference_length: int, mult: float = 2.0, extra: int = 20) -> int:
    return int(mult * reference_length) + extra


def _goal_features(models: Models, u0, ut, un, r0, ri, rt) -> np.ndarray:
    b = BatchFeatures(u0, ut, un, r0, ri, rt, actions=np.zeros(len(ut), dtype=np.int64), neg=np.arange(len(ut)))
    goal, _ = goal_rows(models, b, assistive=False)
    return policy_logits(models, ut, goal).data


def rollout_many(
    models: Models,
    episodes: Sequence[Episode],
    references: Sequence[Episode],
    k: int = 4,
    budget_mult: float = 2.0,
    budget_extra: int = 20,
) -> list[RolloutOutcome]:
    """Roll out every (episode, reference) in lock-step, one policy call per step for the batch."""
    n = len(episodes)
    if n != len(references):
        raise ValueError("episodes and references differ in length")
    for ep, ref in zip(episodes, references):
        if sorted(ep.tasks) != sorted(ref.tasks):
            raise ValueError("reference tasks differ from the episode's tasks")
    states = [ep.world for ep in episodes]
    u0 = np.stack([featurize(ep.world) for ep in episodes]) if n else np.zeros((0, 0))
    un = np.stack([featurize(ep.trajectory.states[-1]) for ep in episodes]) if n else u0
    ref_feats = [np.stack([featurize(s) for s in ref.trajectory.states]) for ref in references]
    totals = [len(ref.trajectory.actions) for ref in references]
    budgets = [step_budget(t, budget_mult, budget_extra) for t in totals]
    outcomes: list[Optional[RolloutOutcome]] = [None] * n
    for i, ep in enumerate(episodes):
        if tasks_done(states[i], ep.tasks):
            outcomes[i] = RolloutOutcome(True, 0, len(ep.tasks), Termination.ALL_DONE)
        elif budgets[i] == 0:
            outcomes[i] = RolloutOutcome(False, 0, tasks_completed(states[i], ep.tasks), Termination.STEP_BUDGET)
    t = 0
    while True:
        active = [i for i in range(n) if outcomes[i] is None]
        if not active:
            break
        ut = np.stack([featurize(states[i]) for i in active])
        ri = np.stack([ref_feats[i][rollout_waypoint_index(t, totals[i], k)] for i in active])
        r0 = np.stack([ref_feats[i][0] for i in active])
        rt = np.stack([ref_feats[i][-1] for i in active])
        logits = _goal_features(models, u0[active], ut, un[active], r0, ri, rt)
        actions = np.argmax(logits, axis=1)
        t += 1
        for j, i in enumerate(active):
            states[i] = step(states[i], Action(int(actions[j])))[0]
            if tasks_done(states[i], episodes[i].tasks):
                outcomes[i] = RolloutOutcome(True, t, len(episodes[i].tasks), Termination.ALL_DONE)
            elif t >= budgets[i]:
                outcomes[i] = RolloutOutcome(
                    False, t, tasks_completed(states[i], episodes[i].tasks), Termination.STEP_BUDGET
                )
    return outcomes  # type: ignore[return-value]


def rollout(
    models: Models,
    episode: Episode,
    reference: Episode,
    k: int = 4,
    budget_mult: float = 2.0,
    budget_extra: int = 20,
) -> RolloutOutcome:
    """Act in ``episode.world`` towards ``episode``'s goal state, guided by ``reference``."""
    return rollout_many(models, [episode], [reference], k, budget_mult, budget_extra)[0]


@dataclass(frozen=True)
class SuccessSummary:
    n_episodes: int
    successes: int
    rate: float
    mean_steps: float
    std_steps: float
    half_width: float


def summarize(outcomes: Sequence[RolloutOutcome]) -> SuccessSummary:
    """Rate as an exact integer ratio; 95% normal-approximation binomial half-width."""
    n = len(outcomes)
    if n == 0:
        raise ValueError("no outcomes to summarize")
    wins = sum(1 for o in outcomes if o.success)
    rate = wins / n
    steps = [o.steps_taken for o in outcomes]
    std = statistics.stdev(steps) if n > 1 else 0.0
    return SuccessSummary(n, wins, rate, statistics.fmean(steps), std, 1.96 * math.sqrt(rate * (1 - rate) / n))


def success_rate(
    models: Models, pairs: Sequence[EpisodePair], k: int = 4, budget_mult: float = 2.0, budget_extra: int = 20
) -> SuccessSummary:
    outcomes = rollout_many(models, [p.train for p in pairs], [p.reference for p in pairs], k, budget_mult, budget_extra)
    return summarize(outcomes)


# ------------------------------------------------------------------ experiments


@dataclass(frozen=True)
class ExperimentData:
    split: TaskSplit
    train_pairs: list
    test_pairs: list


def make_experiment_data(
    n_train: int,
    n_test: int,
    gen_config: GenConfig = GenConfig(),
    holdout: HoldoutSpec = HoldoutSpec(),
    seed: int = 0,
) -> ExperimentData:
    """Split the task multisets, then generate train pairs from one side and test pairs from the other."""
    split = split_tasks(gen_config, holdout, rng_seed=seed)
    train = generate_pairs(n_train, split.train_sequences, gen_config, rng_seed=derive_seed(seed, 1))
    test = generate_pairs(n_test, split.test_sequences, gen_config, rng_seed=derive_seed(seed, 2))
    return ExperimentData(split, train, test)


@dataclass(frozen=True)
class RunRow:
    variant: str
    k: int
    seed: int
    summary: SuccessSummary

    def cells(self) -> list:
        s = self.summary
        return [self.variant, self.k, self.seed, s.n_episodes, repr(s.rate), repr(s.mean_steps), repr(s.std_steps)]


def train_and_evaluate(
    config: TrainConfig,
    data: Sequence[PreparedPair],
    test_pairs: Sequence[EpisodePair],
    budget_mult: float = 2.0,
) -> RunRow:
    models = train_loop(config, data=data).models
    return RunRow(config.variant.value, config.k, config.seed, success_rate(models, test_pairs, config.k, budget_mult))


def _run_all(jobs: list[tuple], workers: int) -> list[RunRow]:
    if workers <= 1 or len(jobs) <= 1:
        return [train_and_evaluate(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(train_and_evaluate, *zip(*jobs)))


def compare_variants(
    variants: Iterable[Variant],
    train_pairs: Sequence[EpisodePair],
    test_pairs: Sequence[EpisodePair],
    seeds: Sequence[int],
    base: TrainConfig = TrainConfig(),
    budget_mult: float = 2.0,
    workers: int = 1,
) -> list[RunRow]:
    """Train and evaluate every (variant, seed); rows ordered by variant then seed."""
    data = prepare(train_pairs)
    jobs = [
        (replace(base, variant=v, seed=s, checkpoint=None, metrics=None), data, test_pairs, budget_mult)
        for v in variants
        for s in seeds
    ]
    return _run_all(jobs, workers)


def ablate_k(
    ks: Sequence[int],
    train_pairs: Sequence[EpisodePair],
    test_pairs: Sequence[EpisodePair],
    seeds: Sequence[int],
    base: TrainConfig = TrainConfig(),
    budget_mult: float = 2.0,
    workers: int = 1,
) -> list[RunRow]:
    """One training run per (k, seed); k is used both for training and rollouts."""
    data = prepare(train_pairs)
    jobs = [
        (replace(base, k=k, seed=s, checkpoint=None, metrics=None), data, test_pairs, budget_mult)
        for k in ks
        for s in seeds
    ]
    return _run_all(jobs, workers)


def sweep_sequence_length(
    lengths: Sequence[int],
    variants: Iterable[Variant],
    train_pairs: Sequence[EpisodePair],
    test_pools: dict[int, Sequence[tuple]],
    seeds: Sequence[int],
    gen_config: GenConfig = GenConfig(),
    episodes_per_length: int = 50,
    base: TrainConfig = TrainConfig(),
    budget_mult: float = 2.0,
    gen_seed: int = 0,
) -> list[tuple[int, RunRow]]:
    """Train each (variant, seed) once, then evaluate on a fresh test set per sequence length.

    ``test_pools[length]`` lists the held-out multisets of that length.
    """
    data = prepare(train_pairs)
    tests = {}
    for length in lengths:
        pool = test_pools.get(length)
        if not pool:
            raise ValueError(f"no held-out multisets of length {length}")
        cfg = replace(gen_config, tasks_min=length, tasks_max=length)
        tests[length] = generate_pairs(episodes_per_length, pool, cfg, rng_seed=gen_seed + 1000 * length)
    out = []
    for v in variants:
        for s in seeds:
            config = replace(base, variant=v, seed=s, checkpoint=None, metrics=None)
            models = train_loop(config, data=data).models
            for length in lengths:
                summ = success_rate(models, tests[length], config.k, budget_mult)
                out.append((length, RunRow(v.value, config.k, s, summ)))
    return out


def summary_rows(rows: Sequence[RunRow]) -> list[list]:
    """Best, mean and sample std of the success rate over seeds, per (variant, k)."""
    groups: dict[tuple[str, int], list[float]] = {}
    for r in rows:
        groups.setdefault((r.variant, r.k), []).append(r.summary.rate)
    out = []
    for (variant, k), rates in groups.items():
        std = statistics.stdev(rates) if len(rates) > 1 else 0.0
        out.append([variant, k, len(rates), repr(max(rates)), repr(statistics.fmean(rates)), repr(std)])
    return out


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def random_policy_models(width: int, height: int, variant: Variant = Variant.CASE_CI_L, seed: int = 0) -> Models:
    """Untrained networks: the random-policy floor."""
    return init_models(ModelConfig(width=width, height=height, variant=variant, seed=seed))
