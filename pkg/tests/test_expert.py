import random

import pytest

from case_lab.craftworld import Action, ObjectKind, TaskKind, new_world, step, tasks_done
from case_lab.datagen import GenConfig, random_map
from case_lab.expert import (
    PlanningError,
    Trajectory,
    _path,
    bfs_actions,
    brute_force_length,
    manhattan,
    plan_sequence,
    plan_task,
    validate,
)

E, P = Action.EAST, Action.PICKUP
SMALL = GenConfig(width=5, height=5)


def run(state, actions):
    for a in actions:
        state = step(state, a)[0]
    return state


def test_bfs_already_there():
    s = new_world(3, 3, [], (1, 1))
    assert bfs_actions(s, lambda p: p == (1, 1)) == []


def test_bfs_row():
    s = new_world(4, 1, [], (0, 0))
    assert bfs_actions(s, lambda p: p == (0, 3)) == [E, E, E]


def test_bfs_unreachable_names_predicate():
    s = new_world(2, 2, [], (0, 0))
    with pytest.raises(PlanningError, match="the moon"):
        bfs_actions(s, lambda p: False, name="the moon")


def test_bfs_matches_distance_oracle():
    rng = random.Random(0)
    for _ in range(200):
        s = new_world(6, 6, [], (rng.randrange(6), rng.randrange(6)))
        targets = set(rng.sample([(r, c) for r in range(6) for c in range(6)], rng.randint(1, 4)))
        path = bfs_actions(s, targets.__contains__)
        assert len(path) == min(manhattan(s.agent_pos, t) for t in targets)
        assert run(s, path).agent_pos in targets


def test_open_grid_path_equals_bfs():
    rng = random.Random(1)
    for _ in range(200):
        a = (rng.randrange(6), rng.randrange(6))
        b = (rng.randrange(6), rng.randrange(6))
        s = new_world(6, 6, [], a)
        assert _path(a, b) == bfs_actions(s, lambda p: p == b)


def test_plan_task_tool_already_held():
    s = new_world(3, 1, [((0, 0), ObjectKind.AXE), ((0, 2), ObjectKind.TREE)], (0, 0))
    s = step(s, P)[0]
    assert plan_task(s, TaskKind.CHOP_TREE) == [E, E]


def test_plan_task_fetch_tool():
    s = new_world(4, 1, [((0, 1), ObjectKind.AXE), ((0, 3), ObjectKind.TREE)], (0, 0))
    plan = plan_task(s, TaskKind.CHOP_TREE)
    assert plan == [E, P, E, E]
    assert brute_force_length(s, [TaskKind.CHOP_TREE]) == 4


def test_plan_task_missing_tool():
    s = new_world(3, 1, [((0, 2), ObjectKind.TREE)], (0, 0))
    with pytest.raises(PlanningError, match="AXE"):
        plan_task(s, TaskKind.CHOP_TREE)


def test_empty_multiset():
    s = random_map(0)
    traj = plan_sequence(s, [])
    assert traj.actions == () and traj.states == (s,)


def test_order_choice_is_no_worse_than_either_order():
    for seed in range(30):
        s = random_map(seed)
        tasks = [TaskKind.CHOP_TREE, TaskKind.BREAK_ROCK]
        lengths = []
        for order in (tasks, tasks[::-1]):
            state, total = s, 0
            for t in order:
                acts = plan_task(state, t)
                state, total = run(state, acts), total + len(acts)
            lengths.append(total)
        traj = plan_sequence(s, tasks, exact_limit=0)
        assert len(traj) <= min(lengths)
        assert validate(traj, tasks)


def test_dependency_order():
    for seed in range(20):
        s = random_map(seed)
        traj = plan_sequence(s, [TaskKind.EAT_BREAD, TaskKind.MAKE_BREAD], exact_limit=0)
        stages = list(traj.stages)
        assert stages.index(TaskKind.MAKE_BREAD) < stages.index(TaskKind.EAT_BREAD)


def test_implicit_prerequisite_closed():
    s = random_map(4)
    traj = plan_sequence(s, [TaskKind.BUILD_HOUSE, TaskKind.BREAK_ROCK])
    assert validate(traj, [TaskKind.BUILD_HOUSE, TaskKind.BREAK_ROCK])
    assert TaskKind.CHOP_TREE in traj.stages


def test_validate_rejects_flipped_action():
    s = random_map(5)
    tasks = [TaskKind.CHOP_TREE, TaskKind.MAKE_BREAD]
    traj = plan_sequence(s, tasks)
    assert validate(traj, tasks)
    acts = list(traj.actions)
    acts[0] = Action((acts[0] + 1) % 6)
    assert not validate(Trajectory(traj.states, tuple(acts)), tasks)


def test_validate_rejects_incomplete():
    s = random_map(6)
    traj = plan_sequence(s, [TaskKind.CHOP_TREE])
    assert not validate(traj, [TaskKind.CHOP_TREE, TaskKind.BREAK_ROCK])


def test_planner_deterministic():
    s = random_map(7)
    tasks = [TaskKind.BUILD_HOUSE, TaskKind.MAKE_BREAD, TaskKind.EAT_BREAD]
    assert plan_sequence(s, tasks) == plan_sequence(s, tasks)


@pytest.mark.parametrize("n_tasks", [3, 6])
def test_larger_multisets_valid(n_tasks):
    rng = random.Random(n_tasks)
    for seed in range(10):
        tasks = [rng.choice([TaskKind.CHOP_TREE, TaskKind.BREAK_ROCK, TaskKind.MAKE_BREAD]) for _ in range(n_tasks)]
        # at most two of each (two trees, two rocks, two wheat on the standard map)
        tasks = [t for i, t in enumerate(tasks) if tasks[:i].count(t) < 2]
        traj = plan_sequence(random_map(seed), tasks)
        assert validate(traj, tasks)


def test_exact_matches_brute_force_small():
    rng = random.Random(3)
    for seed in range(8):
        s = random_map(seed, SMALL)
        tasks = [TaskKind(rng.randrange(5)) for _ in range(rng.randint(1, 2))]
        traj = plan_sequence(s, tasks)
        assert tasks_done(traj.states[-1], tasks)
        assert len(traj) == brute_force_length(s, tasks)
