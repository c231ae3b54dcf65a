import math
import statistics
from dataclasses import replace

import numpy as np
import pytest

from case_lab.compose import Variant
from case_lab.craftworld import GridState, TaskKind
from case_lab.datagen import Episode, GenConfig, generate_pairs, split_tasks
from case_lab.evaluate import (
    RUN_HEADER,
    SUMMARY_HEADER,
    SWEEP_HEADER,
    RolloutOutcome,
    RunRow,
    SuccessSummary,
    Termination,
    ablate_k,
    compare_variants,
    csv_text,
    random_policy_models,
    rollout,
    rollout_many,
    step_budget,
    success_rate,
    summarize,
    summary_rows,
    sweep_sequence_length,
)
from case_lab.expert import Trajectory
from case_lab.train import TrainConfig
from conftest import SMALL_GEN, tiny_models

TINY = TrainConfig(latent_dim=8, hidden=16, batch_size=8, epochs=1, samples_per_pair=1)


def test_csv_headers():
    assert ",".join(RUN_HEADER) == "variant,k,seed,n_episodes,success_rate,mean_steps,std"
    assert SWEEP_HEADER[0] == "length" and SWEEP_HEADER[1:] == RUN_HEADER
    assert SUMMARY_HEADER == ("variant", "k", "n_seeds", "best", "mean", "std")


def test_step_budget_default():
    assert step_budget(10) == 40
    assert step_budget(0) == 20


def test_already_done_succeeds_at_zero_steps(small_pairs):
    p = small_pairs[0]
    done = GridState(6, 6, p.train.world.cells, p.train.world.agent_pos, None, (3,) * 5)
    ep = Episode(0, done, p.train.tasks, Trajectory((done,), ()))
    out = rollout(tiny_models(), ep, p.reference)
    assert out == RolloutOutcome(True, 0, len(ep.tasks), Termination.ALL_DONE)


def test_reference_must_match_tasks(small_pairs):
    a = small_pairs[0]
    b = next(p for p in small_pairs if sorted(p.train.tasks) != sorted(a.train.tasks))
    with pytest.raises(ValueError):
        rollout(tiny_models(), a.train, b.reference)


def test_outcome_invariants_and_batching(small_pairs):
    models = tiny_models(Variant.CASE_CI)
    eps = [p.train for p in small_pairs]
    refs = [p.reference for p in small_pairs]
    batched = rollout_many(models, eps, refs, k=4)
    singles = [rollout(models, e, r, k=4) for e, r in zip(eps, refs)]
    assert batched == singles
    for o, e, r in zip(batched, eps, refs):
        assert o.success == (o.termination is Termination.ALL_DONE)
        assert o.steps_taken <= step_budget(len(r))
        if not o.success:
            assert o.steps_taken == step_budget(len(r)) and o.tasks_completed < len(e.tasks)


def test_rollouts_leave_episodes_untouched(small_pairs):
    before = [(p.train.world, p.train.trajectory) for p in small_pairs]
    rollout_many(tiny_models(), [p.train for p in small_pairs], [p.reference for p in small_pairs])
    assert before == [(p.train.world, p.train.trajectory) for p in small_pairs]


def test_random_policy_floor():
    cfg = GenConfig(tasks_min=2, tasks_max=3)
    split = split_tasks(cfg)
    pairs = generate_pairs(200, split.test_sequences, cfg, rng_seed=5)
    for v in Variant:
        s = success_rate(random_policy_models(8, 8, v, seed=1), pairs)
        assert s.n_episodes == 200 and s.rate <= 0.05


def test_success_rate_deterministic(small_pairs):
    a = success_rate(tiny_models(Variant.CPV_FULL), small_pairs)
    b = success_rate(tiny_models(Variant.CPV_FULL), small_pairs)
    assert a == b


def test_summarize():
    wins = [RolloutOutcome(True, 5, 2, Termination.ALL_DONE)] * 4
    s = summarize(wins)
    assert s.rate == 1.0 and s.half_width == 0.0 and s.std_steps == 0.0
    mixed = wins[:3] + [RolloutOutcome(False, 40, 1, Termination.STEP_BUDGET)]
    s = summarize(mixed)
    assert (s.successes, s.n_episodes, s.rate) == (3, 4, 0.75)
    assert s.half_width == pytest.approx(1.96 * math.sqrt(0.75 * 0.25 / 4))
    assert s.mean_steps == pytest.approx(55 / 4)
    with pytest.raises(ValueError):
        summarize([])


def _row(variant, seed, rate):
    return RunRow(variant, 4, seed, SuccessSummary(10, int(rate * 10), rate, 1.0, 0.0, 0.0))


def test_summary_rows_sample_std():
    rates = [0.2, 0.5, 0.6]
    rows = summary_rows([_row("CASE", s, r) for s, r in enumerate(rates)] + [_row("CPV_FULL", 0, 0.1)])
    variant, k, n, best, mean, std = rows[0]
    m = sum(rates) / 3
    assert (variant, k, n) == ("CASE", 4, 3)
    assert float(best) == 0.6 and float(mean) == pytest.approx(m)
    assert float(std) == pytest.approx(math.sqrt(sum((r - m) ** 2 for r in rates) / 2))
    assert rows[1][2:] == [1, "0.1", "0.1", "0.0"]


def test_compare_single_row(small_pairs):
    rows = compare_variants([Variant.CASE], small_pairs, small_pairs[:4], [0], TINY)
    assert len(rows) == 1 and rows[0].variant == "CASE" and rows[0].summary.n_episodes == 4
    assert len(summary_rows(rows)) == 1


def test_ablate_k_rows_and_determinism(small_pairs):
    one = ablate_k([4], small_pairs, small_pairs[:3], [0], TINY)
    assert len(one) == 1 and one[0].k == 4
    rows = ablate_k([1, 2, 3], small_pairs, small_pairs[:3], [0, 1], TINY)
    assert [(r.k, r.seed) for r in rows] == [(k, s) for k in (1, 2, 3) for s in (0, 1)]
    again = ablate_k([1, 2, 3], small_pairs, small_pairs[:3], [0, 1], TINY)
    assert csv_text(RUN_HEADER, [r.cells() for r in rows]) == csv_text(RUN_HEADER, [r.cells() for r in again])


def test_parallel_matches_serial(small_pairs):
    serial = ablate_k([1, 2], small_pairs, small_pairs[:3], [0], TINY, workers=1)
    parallel = ablate_k([1, 2], small_pairs, small_pairs[:3], [0], TINY, workers=2)
    assert [r.cells() for r in serial] == [r.cells() for r in parallel]


def test_sweep_single_bucket(small_pairs, small_split):
    pools = {2: sorted(m for m in small_split.test_sequences if len(m) == 2)}
    rows = sweep_sequence_length([2], [Variant.CASE], small_pairs, pools, [0], SMALL_GEN, 3, TINY)
    assert len(rows) == 1 and rows[0][0] == 2 and rows[0][1].summary.n_episodes == 3
    again = sweep_sequence_length([2], [Variant.CASE], small_pairs, pools, [0], SMALL_GEN, 3, TINY)
    assert [r.cells() for _, r in rows] == [r.cells() for _, r in again]
    with pytest.raises(ValueError):
        sweep_sequence_length([4], [Variant.CASE], small_pairs, pools, [0], SMALL_GEN, 3, TINY)
