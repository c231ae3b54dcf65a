"""Random maps, paired expert episodes, task splits and the dataset file format.

A dataset file holds one JSON object per line::

    {"version": 1, "pair_id": 0,
     "train":     {"map_seed": ..., "grid": "<ascii render>", "tasks": [...], "actions": [...]},
     "reference": {...}}

Only the initial grid and the action list are stored; states are rebuilt by
replay and every trajectory is re-validated on load.
"""
from __future__ import annotations

import itertools
import json
import os
import random
import tempfile
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .craftworld import (
    Action,
    GridState,
    ObjectKind,
    TaskKind,
    WorldError,
    new_world,
    parse_ascii,
    render_ascii,
    step,
    tasks_done,
)
from .expert import (
    RECIPE,
    PlanningError,
    Trajectory,
    check_trajectory,
    event_stages,
    plan_sequence,
)

DATASET_VERSION = 1

STANDARD_PLACEMENTS: dict[ObjectKind, int] = {
    ObjectKind.AXE: 1,
    ObjectKind.HAMMER: 1,
    ObjectKind.TREE: 2,
    ObjectKind.WHEAT: 2,
    ObjectKind.ROCK: 2,
}


class GenerationError(RuntimeError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    width: int = 8
    height: int = 8
    placements: tuple[tuple[ObjectKind, int], ...] = tuple(STANDARD_PLACEMENTS.items())
    vocabulary: tuple[TaskKind, ...] = tuple(TaskKind)
    tasks_min: int = 2
    tasks_max: int = 8
    retries: int = 16
    # Planner switches, see expert.plan_sequence.
    exact_limit: int = 2
    exact_max_cells: int = 25

    def counts(self) -> Counter:
        return Counter({ObjectKind(k): n for k, n in self.placements})

    def max_multiplicity(self, task: TaskKind) -> int:
        """How many times ``task`` can appear in one feasible multiset."""
        c = self.counts()
        return {
            TaskKind.CHOP_TREE: c[ObjectKind.TREE],
            TaskKind.BUILD_HOUSE: c[ObjectKind.TREE] + c[ObjectKind.LOG],
            TaskKind.MAKE_BREAD: c[ObjectKind.WHEAT],
            TaskKind.EAT_BREAD: c[ObjectKind.WHEAT] + c[ObjectKind.BREAD],
            TaskKind.BREAK_ROCK: c[ObjectKind.ROCK],
        }[TaskKind(task)]


def _check_config(config: GenConfig) -> None:
    n_objects = sum(config.counts().values())
    if n_objects + 1 > config.width * config.height:
        raise GenerationError(
            f"{n_objects} objects plus the agent do not fit on a "
            f"{config.height}x{config.width} grid"
        )
    c = config.counts()
    for task in config.vocabulary:
        tool, target = RECIPE[TaskKind(task)]
        if tool is not None and c[tool] == 0:
            raise GenerationError(f"{task.name} needs a {tool.name} but none is placed")
        if config.max_multiplicity(task) == 0:
            raise GenerationError(f"{task.name} has no source of {target.name}")
    if not 1 <= config.tasks_min <= config.tasks_max:
        raise GenerationError(f"bad task count range [{config.tasks_min}, {config.tasks_max}]")


def random_map(rng_seed: int, config: GenConfig = GenConfig()) -> GridState:
    """Uniformly place the configured objects and the agent on distinct cells."""
    _check_config(config)
    rng = random.Random(rng_seed)
    kinds = [k for k, n in sorted(config.counts().items()) for _ in range(n)]
    cells = rng.sample(range(config.width * config.height), len(kinds) + 1)
    placements = [(divmod(c, config.width), k) for c, k in zip(cells, kinds)]
    return new_world(config.width, config.height, placements, divmod(cells[-1], config.width))


@dataclass(frozen=True)
class Episode:
    map_seed: int
    world: GridState
    tasks: tuple[TaskKind, ...]
    trajectory: Trajectory

    def __len__(self) -> int:
        return len(self.trajectory.actions)


@dataclass(frozen=True)
class EpisodePair:
    pair_id: int
    train: Episode
    reference: Episode


def planned_order(tasks: Sequence[TaskKind], traj: Trajectory) -> tuple[TaskKind, ...]:
    """Order the multiset by when each entry was first satisfied."""
    left = Counter(TaskKind(t) for t in tasks)
    order = []
    for kind in traj.stages:
        if left[kind] > 0:
            left[kind] -= 1
            order.append(kind)
    order.extend(sorted(left.elements()))
    return tuple(order)


def plan_episode(
    world: GridState, tasks: Sequence[TaskKind], map_seed: int, config: GenConfig = GenConfig()
) -> Episode:
    small = world.width * world.height <= config.exact_max_cells
    traj = plan_sequence(world, tasks, exact_limit=config.exact_limit if small else 0)
    return Episode(map_seed, world, planned_order(tasks, traj), traj)


def derive_seed(*parts: int) -> int:
    """Stable sub-seed from integer parts (independent of PYTHONHASHSEED)."""
    return random.Random(":".join(str(int(p)) for p in parts)).getrandbits(63)


def gen_pair(
    rng_seed: int, tasks: Sequence[TaskKind], config: GenConfig = GenConfig(), pair_id: int = 0
) -> EpisodePair:
    tasks = [TaskKind(t) for t in tasks]
    episodes = []
    used: set[int] = set()
    for role in (0, 1):
        last_error: Optional[Exception] = None
        for attempt in range(config.retries):
            map_seed = derive_seed(rng_seed, role, attempt)
            if map_seed in used:
                continue
            try:
                episodes.append(plan_episode(random_map(map_seed, config), tasks, map_seed, config))
            except PlanningError as exc:
                last_error = exc
                continue
            used.add(map_seed)
            break
        else:
            raise GenerationError(
                f"no feasible map for {[t.name for t in tasks]} after {config.retries} tries"
            ) from last_error
    return EpisodePair(pair_id, episodes[0], episodes[1])


# --------------------------------------------------------------------------- splits

Multiset = tuple[TaskKind, ...]


@dataclass(frozen=True)
class HoldoutSpec:
    """``mode="composition"`` holds out a fraction of multisets;
    ``mode="kind"`` holds out every multiset containing ``kind``."""

    mode: str = "composition"
    fraction: float = 0.25
    kind: Optional[TaskKind] = None


@dataclass(frozen=True)
class TaskSplit:
    train_sequences: frozenset
    test_sequences: frozenset

    def __post_init__(self) -> None:
        if self.train_sequences & self.test_sequences:
            raise GenerationError("train and test task multisets overlap")


def all_multisets(config: GenConfig) -> list[Multiset]:
    vocab = sorted(TaskKind(t) for t in config.vocabulary)
    out = []
    for size in range(config.tasks_min, config.tasks_max + 1):
        for combo in itertools.combinations_with_replacement(vocab, size):
            counts = Counter(combo)
            if all(counts[k] <= config.max_multiplicity(k) for k in counts):
                out.append(tuple(combo))
    return out


def _parts(m: Multiset) -> set[tuple[TaskKind, int]]:
    """(kind, count) pairs of a multiset, e.g. two BREAK_ROCKs gives (BREAK_ROCK, 2)."""
    return set(Counter(m).items())


def _composition_holdout(universe: list[Multiset], fraction: float, rng_seed: int) -> tuple[list, list]:
    """Hold out about ``fraction`` of the multisets as novel combinations of seen parts.

    Candidates are visited in a seeded random order. One is moved to the
    test side only if, for every (kind, count) it contains, the test side
    then holds at most ``max(1, round(fraction * support))`` of the
    ``support`` multisets sharing that part and at least one stays in
    training. No part is starved of training examples.
    """
    order = list(universe)
    random.Random(derive_seed(rng_seed, 7)).shuffle(order)
    n_test = int(round(fraction * len(order)))
    support = Counter(part for m in order for part in _parts(m))
    held: Counter = Counter()
    test = []
    for m in order:
        if len(test) >= n_test:
            break
        parts = _parts(m)
        if all(held[p] + 1 <= max(1, round(fraction * support[p])) and held[p] + 1 < support[p] for p in parts):
            test.append(m)
            held.update(parts)
    chosen = set(test)
    return test, [m for m in order if m not in chosen]


def split_tasks(
    config: GenConfig = GenConfig(), holdout: HoldoutSpec = HoldoutSpec(), rng_seed: int = 0
) -> TaskSplit:
    """Partition the feasible multisets of ``config`` into disjoint train/test sets."""
    universe = all_multisets(config)
    if holdout.mode == "composition":
        test, train = _composition_holdout(universe, holdout.fraction, rng_seed)
    elif holdout.mode == "kind":
        if holdout.kind is None:
            raise GenerationError("kind holdout needs a task kind")
        test = [m for m in universe if holdout.kind in m]
        train = [m for m in universe if holdout.kind not in m]
    else:
        raise GenerationError(f"unknown holdout mode {holdout.mode!r}")
    if not test or not train:
        raise GenerationError(
            f"degenerate split: {len(train)} train / {len(test)} test multisets"
        )
    return TaskSplit(frozenset(train), frozenset(test))


def sample_multiset(rng: random.Random, pool: Iterable[Multiset]) -> Multiset:
    """Uniform length first, then uniform among the pool's multisets of that length."""
    by_len: dict[int, list[Multiset]] = {}
    for m in sorted(pool):
        by_len.setdefault(len(m), []).append(m)
    length = rng.choice(sorted(by_len))
    return rng.choice(by_len[length])


def generate_pairs(
    n_pairs: int,
    pool: Iterable[Multiset],
    config: GenConfig = GenConfig(),
    rng_seed: int = 0,
) -> list[EpisodePair]:
    pool = sorted(pool)
    rng = random.Random(derive_seed(rng_seed, 11))
    pairs = []
    for i in range(n_pairs):
        tasks = sample_multiset(rng, pool)
        pairs.append(gen_pair(derive_seed(rng_seed, 13, i), tasks, config, pair_id=i))
    return pairs


# --------------------------------------------------------------------------- file format


def _episode_record(ep: Episode) -> dict:
    return {
        "map_seed": ep.map_seed,
        "grid": render_ascii(ep.world),
        "tasks": [t.name for t in ep.tasks],
        "actions": [int(a) for a in ep.trajectory.actions],
    }


def _episode_from_record(rec: dict) -> Episode:
    world = parse_ascii(rec["grid"])
    tasks = tuple(TaskKind[name] for name in rec["tasks"])
    actions = tuple(Action(a) for a in rec["actions"])
    states = [world]
    for a in actions:
        states.append(step(states[-1], a)[0])
    traj = Trajectory(tuple(states), actions, tuple(event_stages(world, actions)))
    problem = check_trajectory(traj, tasks)
    if problem is not None:
        raise DatasetError(problem)
    return Episode(int(rec["map_seed"]), world, tasks, traj)


def pair_to_json(pair: EpisodePair) -> str:
    rec = {
        "version": DATASET_VERSION,
        "pair_id": pair.pair_id,
        "train": _episode_record(pair.train),
        "reference": _episode_record(pair.reference),
    }
    return json.dumps(rec, sort_keys=True, ensure_ascii=False)


def pair_from_json(line: str) -> EpisodePair:
    rec = json.loads(line)
    if not isinstance(rec, dict) or "version" not in rec:
        raise DatasetError("record has no version field")
    if rec["version"] != DATASET_VERSION:
        raise DatasetError(f"unsupported dataset version {rec['version']!r}")
    return EpisodePair(
        int(rec["pair_id"]),
        _episode_from_record(rec["train"]),
        _episode_from_record(rec["reference"]),
    )


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def write_dataset(pairs: Sequence[EpisodePair], path: str | os.PathLike) -> None:
    atomic_write_text(path, "".join(pair_to_json(p) + "\n" for p in pairs))


def read_dataset(path: str | os.PathLike) -> list[EpisodePair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                pairs.append(pair_from_json(line))
            except (DatasetError, WorldError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from exc
    return pairs


def feasible_on(world: GridState, task: TaskKind) -> bool:
    """True if ``task`` alone can be planned on ``world``."""
    try:
        traj = plan_sequence(world, [task], exact_limit=0)
    except PlanningError:
        return False
    return tasks_done(traj.states[-1], [task])
