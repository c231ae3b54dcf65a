"""Expert planner producing optimal trajectories for task multisets.

Every task is solved by a fixed recipe: fetch the required tool (dropping
whatever is in hand first), then walk onto the target. ``plan_sequence``
searches over task orderings and recipe instantiations (which tool, which
target, which drop cell) with branch-and-bound, so for small task counts
the result is the optimum within the recipe family. Larger task multisets
fall back to greedy cheapest-next-task.

Prerequisites are closed automatically: a BuildHouse without a Log on the
map schedules an implicit ChopTree first, and likewise EatBread without a
Bread schedules an implicit MakeBread.
"""
from __future__ import annotations

import heapq
import itertools
import logging
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

from .craftworld import (
    CARRYABLE,
    MOVES,
    RULES,
    Action,
    GridState,
    ObjectKind,
    Position,
    TaskKind,
    step,
    tasks_done,
)

log = logging.getLogger(__name__)

# task -> (tool required in hand, object the agent must enter or pick up)
RECIPE: dict[TaskKind, tuple[Optional[ObjectKind], ObjectKind]] = {
    TaskKind.CHOP_TREE: (ObjectKind.AXE, ObjectKind.TREE),
    TaskKind.BUILD_HOUSE: (ObjectKind.HAMMER, ObjectKind.LOG),
    TaskKind.MAKE_BREAD: (ObjectKind.AXE, ObjectKind.WHEAT),
    TaskKind.EAT_BREAD: (None, ObjectKind.BREAD),
    TaskKind.BREAK_ROCK: (ObjectKind.HAMMER, ObjectKind.ROCK),
}

# Cells whose current contents can still lead to the task's event.
_EVENT_SOURCES: dict[TaskKind, tuple[ObjectKind, ...]] = {
    TaskKind.CHOP_TREE: (ObjectKind.TREE,),
    TaskKind.BUILD_HOUSE: (ObjectKind.LOG, ObjectKind.TREE),
    TaskKind.MAKE_BREAD: (ObjectKind.WHEAT,),
    TaskKind.EAT_BREAD: (ObjectKind.BREAD, ObjectKind.WHEAT),
    TaskKind.BREAK_ROCK: (ObjectKind.ROCK,),
}

DEFAULT_EXACT_LIMIT = 2
_INFEASIBLE = 10**9
DEFAULT_EXHAUSTIVE_LIMIT = 5


class PlanningError(RuntimeError):
    pass


@dataclass(frozen=True)
class Trajectory:
    states: tuple[GridState, ...]
    actions: tuple[Action, ...]
    # Order in which task recipes were executed, implicit prerequisites included.
    stages: tuple[TaskKind, ...] = field(default=())

    def __len__(self) -> int:
        return len(self.actions)


def manhattan(a: Position, b: Position) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def _neighbours(pos: Position, height: int, width: int) -> Iterator[tuple[Action, Position]]:
    for action, (dr, dc) in MOVES.items():
        nxt = (pos[0] + dr, pos[1] + dc)
        if 0 <= nxt[0] < height and 0 <= nxt[1] < width:
            yield action, nxt


def _distances_from(source: Position, height: int, width: int) -> dict[Position, int]:
    dist = {source: 0}
    queue = deque([source])
    while queue:
        cur = queue.popleft()
        for _, nxt in _neighbours(cur, height, width):
            if nxt not in dist:
                dist[nxt] = dist[cur] + 1
                queue.append(nxt)
    return dist


def bfs_actions(
    state: GridState, goal: Callable[[Position], bool], name: str = "goal"
) -> list[Action]:
    """Shortest move sequence to the nearest cell satisfying ``goal``.

    Ties between targets go to the row-major first; the path itself is the
    lexicographically smallest one under the action order N, S, E, W.
    """
    h, w = state.height, state.width
    dist = _distances_from(state.agent_pos, h, w)
    targets = [p for p in sorted(dist) if goal(p)]
    if not targets:
        raise PlanningError(f"no reachable cell satisfies {name}")
    best = min(dist[p] for p in targets)
    target = next(p for p in targets if dist[p] == best)
    to_target = _distances_from(target, h, w)
    path: list[Action] = []
    pos = state.agent_pos
    while pos != target:
        for action, nxt in _neighbours(pos, h, w):
            if to_target[nxt] == to_target[pos] - 1:
                path.append(action)
                pos = nxt
                break
    return path


def _path(start: Position, target: Position) -> list[Action]:
    # On an open grid the N<S<E<W-smallest shortest path is vertical-first,
    # which is exactly what bfs_actions returns.
    dr, dc = target[0] - start[0], target[1] - start[1]
    vertical = [Action.NORTH] * -dr if dr < 0 else [Action.SOUTH] * dr
    horizontal = [Action.WEST] * -dc if dc < 0 else [Action.EAST] * dc
    return vertical + horizontal


@dataclass(frozen=True)
class _Recipe:
    cost: int
    legs: tuple[tuple[Position, Optional[Action]], ...]

    def key(self, origin: Position) -> tuple:
        cells = tuple(cell for cell, _ in self.legs)
        return (self.cost, manhattan(origin, cells[0]), cells)


def _drop_cells(state: GridState, start: Position, nxt: Position, mode: str) -> list[Position]:
    empty = state.empty_cells()
    if mode == "all":
        return empty
    if not empty:
        return []
    best = min(manhattan(start, e) + manhattan(e, nxt) for e in empty)
    tied = [e for e in empty if manhattan(start, e) + manhattan(e, nxt) == best]
    return [min(tied, key=lambda e: (manhattan(start, e), e))]


def _recipes(state: GridState, task: TaskKind, drops: str = "greedy") -> list[_Recipe]:
    """All recipe instantiations for ``task`` from ``state`` (empty if infeasible)."""
    tool, target_kind = RECIPE[task]
    agent = state.agent_pos
    targets = state.positions_of(target_kind)
    out: list[_Recipe] = []
    if tool is None:
        for tgt in targets:
            if state.carried is None:
                out.append(_Recipe(manhattan(agent, tgt) + 1, ((tgt, Action.PICKUP),)))
                continue
            for e in _drop_cells(state, agent, tgt, drops):
                cost = manhattan(agent, e) + 1 + manhattan(e, tgt) + 1
                out.append(_Recipe(cost, ((e, Action.DROP), (tgt, Action.PICKUP))))
        return out
    if state.carried == tool:
        return [_Recipe(manhattan(agent, t), ((t, None),)) for t in targets]
    for src in state.positions_of(tool):
        for tgt in targets:
            tail = 1 + manhattan(src, tgt)
            if state.carried is None:
                out.append(_Recipe(manhattan(agent, src) + tail, ((src, Action.PICKUP), (tgt, None))))
                continue
            for e in _drop_cells(state, agent, src, drops):
                cost = manhattan(agent, e) + 1 + manhattan(e, src) + tail
                out.append(
                    _Recipe(cost, ((e, Action.DROP), (src, Action.PICKUP), (tgt, None)))
                )
    return out


def _expand(state: GridState, recipe: _Recipe) -> list[Action]:
    actions: list[Action] = []
    pos = state.agent_pos
    for cell, final in recipe.legs:
        actions.extend(_path(pos, cell))
        pos = cell
        if final is not None:
            actions.append(final)
    return actions


def _missing(state: GridState, task: TaskKind) -> Optional[str]:
    tool, target_kind = RECIPE[task]
    if not state.positions_of(target_kind):
        return f"no {target_kind.name} on the map"
    if tool is not None and state.carried != tool and not state.positions_of(tool):
        return f"no {tool.name} on the map"
    return None


def plan_task(state: GridState, task: TaskKind) -> list[Action]:
    """Cheapest recipe for one task; ties nearest-first, then row-major."""
    task = TaskKind(task)
    reason = _missing(state, task)
    if reason is not None:
        raise PlanningError(f"{task.name}: {reason}")
    recipes = _recipes(state, task)
    if not recipes:
        raise PlanningError(f"{task.name}: no empty cell to drop {state.carried.name}")
    best = min(recipes, key=lambda r: r.key(state.agent_pos))
    return _expand(state, best)


def _execute(
    state: GridState, actions: Sequence[Action], tasks: Sequence[TaskKind]
) -> tuple[GridState, list[Action], bool]:
    """Run ``actions``; stop early once the multiset is complete."""
    if tasks_done(state, tasks):
        return state, [], True
    for i, a in enumerate(actions):
        state, report = step(state, a)
        # Counters only move on transformations and eating.
        if (report.transformed is not None or report.eaten) and tasks_done(state, tasks):
            return state, list(actions[: i + 1]), True
    return state, list(actions), False


def _requirements(state: GridState, tasks: Sequence[TaskKind]) -> dict[TaskKind, int]:
    """Absolute counter targets, with implicit prerequisites folded in."""
    need = Counter(TaskKind(t) for t in tasks)
    req = {k: need[k] for k in TaskKind}
    ev = state.events
    counts = state.object_counts()
    houses_left = max(0, need[TaskKind.BUILD_HOUSE] - ev[TaskKind.BUILD_HOUSE])
    extra_logs = max(0, houses_left - counts[ObjectKind.LOG])
    req[TaskKind.CHOP_TREE] = max(req[TaskKind.CHOP_TREE], ev[TaskKind.CHOP_TREE] + extra_logs)
    eats_left = max(0, need[TaskKind.EAT_BREAD] - ev[TaskKind.EAT_BREAD])
    extra_bread = max(0, eats_left - counts[ObjectKind.BREAD])
    req[TaskKind.MAKE_BREAD] = max(req[TaskKind.MAKE_BREAD], ev[TaskKind.MAKE_BREAD] + extra_bread)
    return req


def _open_tasks(state: GridState, req: dict[TaskKind, int]) -> list[TaskKind]:
    return [k for k in TaskKind if state.events[k] < req[k]]


def _task_bound(state: GridState, task: TaskKind) -> int:
    """Admissible cost-to-go for one open task.

    A tool lying on the map can only be used after the agent walks to it and
    picks it up. Sources other than Wheat never move, so the walk continues
    from the tool to a source.
    """
    agent = state.agent_pos
    sources = [p for kind in _EVENT_SOURCES[task] for p in state.positions_of(kind)]
    if not sources:
        return _INFEASIBLE
    reach = min(manhattan(agent, p) for p in sources)
    tool, target_kind = RECIPE[task]
    if tool is None:
        return reach + 1 + (state.carried is not None)
    if state.carried == tool:
        return reach
    tools = state.positions_of(tool)
    if not tools:
        return _INFEASIBLE
    drop = int(state.carried is not None)
    if target_kind == ObjectKind.WHEAT:
        return max(reach, drop + min(manhattan(agent, t) for t in tools) + 1)
    return drop + min(manhattan(agent, t) + 1 + manhattan(t, p) for t in tools for p in sources)


def _lower_bound(state: GridState, open_tasks: Sequence[TaskKind]) -> int:
    bound = 0
    for k in open_tasks:
        bound = max(bound, _task_bound(state, k))
    return bound


def _blocking(state: GridState, req: dict[TaskKind, int]) -> str:
    parts = []
    for k in _open_tasks(state, req):
        reason = _missing(state, k)
        parts.append(f"{k.name} ({reason or 'unreachable under dependency order'})")
    return ", ".join(parts)


def _search_exhaustive(
    root: GridState, tasks: Sequence[TaskKind], drops: str
) -> tuple[list[Action], list[TaskKind]]:
    req = _requirements(root, tasks)
    best: list = [None, None]  # actions, stages
    best_len = [10**9]
    seen: dict[GridState, int] = {}

    def dfs(state: GridState, actions: list[Action], stages: list[TaskKind]) -> None:
        open_tasks = _open_tasks(state, req)
        if len(actions) + _lower_bound(state, open_tasks) >= best_len[0]:
            return
        if seen.get(state, 10**9) <= len(actions):
            return
        seen[state] = len(actions)
        children = []
        for k in open_tasks:
            if _missing(state, k) is not None:
                continue
            for r in _recipes(state, k, drops):
                children.append((r.key(state.agent_pos), k, r))
        children.sort(key=lambda c: (c[0], c[1]))
        for _, k, r in children:
            nxt, taken, done = _execute(state, _expand(state, r), tasks)
            total = len(actions) + len(taken)
            if done:
                if total < best_len[0]:
                    best_len[0] = total
                    best[0], best[1] = actions + taken, stages + [k]
                continue
            dfs(nxt, actions + taken, stages + [k])

    if tasks_done(root, tasks):
        return [], []
    dfs(root, [], [])
    if best[0] is None:
        raise PlanningError(f"infeasible task multiset; blocking: {_blocking(root, req)}")
    return best[0], best[1]


def _macros(state: GridState) -> Iterator[tuple[int, Position, Optional[Action]]]:
    """Every single-interaction move from ``state``: (travel + action cost, cell, action)."""
    agent = state.agent_pos
    w = state.width
    for i, obj in enumerate(state.cells):
        cell = divmod(i, w)
        d = manhattan(agent, cell)
        if state.carried is None:
            if obj in CARRYABLE:
                yield d + 1, cell, Action.PICKUP
        elif obj is None:
            yield d + 1, cell, Action.DROP
        elif (state.carried, obj) in RULES:
            yield max(d, 2), cell, None


def _macro_actions(state: GridState, cell: Position, final: Optional[Action]) -> list[Action]:
    if cell == state.agent_pos and final is None:
        # Re-enter the current cell through the first in-bounds neighbour.
        action, _ = next(_neighbours(cell, state.height, state.width))
        back = {Action.NORTH: Action.SOUTH, Action.SOUTH: Action.NORTH,
                Action.EAST: Action.WEST, Action.WEST: Action.EAST}[action]
        return [action, back]
    path = _path(state.agent_pos, cell)
    return path + [final] if final is not None else path


def _search_exact(root: GridState, tasks: Sequence[TaskKind]) -> tuple[list[Action], list[TaskKind]]:
    """A* over interaction events with Manhattan travel between them.

    Any optimal primitive plan is a chain of pick-ups, drops and tool
    entries separated by shortest walks, so this search is exact.
    """
    req = _requirements(root, tasks)
    if tasks_done(root, tasks):
        return [], []
    start_h = _lower_bound(root, _open_tasks(root, req))
    if start_h >= 10**9:
        raise PlanningError(f"infeasible task multiset; blocking: {_blocking(root, req)}")
    counter = itertools.count()
    heap = [(start_h, 0, next(counter), root)]
    best_g = {root: 0}
    parent: dict[GridState, tuple[GridState, list[Action]]] = {}
    goal = None
    while heap:
        f, g, _, state = heapq.heappop(heap)
        if g > best_g.get(state, 10**9):
            continue
        if tasks_done(state, tasks):
            goal = state
            break
        for _, cell, final in _macros(state):
            nxt, taken, done = _execute(state, _macro_actions(state, cell, final), tasks)
            ng = g + len(taken)
            if ng >= best_g.get(nxt, 10**9):
                continue
            h = 0 if done else _lower_bound(nxt, _open_tasks(nxt, req))
            if h >= 10**9:
                continue
            best_g[nxt] = ng
            parent[nxt] = (state, taken)
            heapq.heappush(heap, (ng + h, ng, next(counter), nxt))
    if goal is None:
        raise PlanningError(f"infeasible task multiset; blocking: {_blocking(root, req)}")
    chunks = []
    node = goal
    while node != root:
        node, taken = parent[node]
        chunks.append(taken)
    actions = [a for chunk in reversed(chunks) for a in chunk]
    return actions, event_stages(root, actions)


def event_stages(state: GridState, actions: Sequence[Action]) -> list[TaskKind]:
    """Task kinds whose counters advanced, in the order they fired."""
    stages = []
    for a in actions:
        state, report = step(state, a)
        if report.transformed is not None:
            stages.append(TaskKind(RULES[(state.carried, report.transformed[1])][1]))
        elif report.eaten:
            stages.append(TaskKind.EAT_BREAD)
    return stages


def _search_greedy(root: GridState, tasks: Sequence[TaskKind]) -> tuple[list[Action], list[TaskKind]]:
    req = _requirements(root, tasks)
    state, actions, stages = root, [], []
    while not tasks_done(state, tasks):
        options = []
        for k in _open_tasks(state, req):
            if _missing(state, k) is not None:
                continue
            recipes = _recipes(state, k)
            if recipes:
                r = min(recipes, key=lambda r: r.key(state.agent_pos))
                options.append((r.key(state.agent_pos), k, r))
        if not options:
            raise PlanningError(f"infeasible task multiset; blocking: {_blocking(state, req)}")
        _, k, r = min(options, key=lambda o: (o[0], o[1]))
        state, taken, _ = _execute(state, _expand(state, r), tasks)
        actions += taken
        stages.append(k)
    return actions, stages


def plan_sequence(
    state: GridState,
    tasks: Sequence[TaskKind],
    exact_limit: int = DEFAULT_EXACT_LIMIT,
    exhaustive_limit: int = DEFAULT_EXHAUSTIVE_LIMIT,
    drops: str = "greedy",
) -> Trajectory:
    """Plan an expert trajectory completing every task in the multiset.

    Up to ``exact_limit`` tasks the search runs over raw interaction events
    and is optimal. Up to ``exhaustive_limit`` it enumerates task orderings
    and recipe instantiations (``drops="all"`` also branches over every
    empty drop cell). Beyond that the cheapest next task is taken greedily.
    """
    tasks = [TaskKind(t) for t in tasks]
    if len(tasks) <= exact_limit:
        actions, stages = _search_exact(state, tasks)
    elif len(tasks) <= exhaustive_limit:
        actions, stages = _search_exhaustive(state, tasks, drops)
    else:
        actions, stages = _search_greedy(state, tasks)
    states = [state]
    for a in actions:
        states.append(step(states[-1], a)[0])
    return Trajectory(tuple(states), tuple(actions), tuple(event_stages(state, actions)))


def check_trajectory(traj: Trajectory, tasks: Sequence[TaskKind]) -> Optional[str]:
    """Diagnostic for the first problem found, or None if the trajectory is valid."""
    if len(traj.states) != len(traj.actions) + 1:
        return f"{len(traj.states)} states for {len(traj.actions)} actions"
    for i, a in enumerate(traj.actions):
        nxt, _ = step(traj.states[i], a)
        if nxt != traj.states[i + 1]:
            return f"replay diverges at step {i} ({Action(a).name})"
    if not tasks_done(traj.states[-1], tasks):
        return "final state does not complete the task multiset"
    return None


def validate(traj: Trajectory, tasks: Sequence[TaskKind]) -> bool:
    problem = check_trajectory(traj, tasks)
    if problem is not None:
        log.debug("invalid trajectory: %s", problem)
    return problem is None


def brute_force_length(state: GridState, tasks: Sequence[TaskKind], max_depth: int = 200) -> int:
    """Optimal solution length by breadth-first search over complete world states.

    Independent of the planners above: it re-encodes the world as flat
    integers and applies the rule table directly, so it also cross-checks
    ``step``. Counters are capped at the multiplicity needed so that
    equivalent states merge. Only usable on small maps.
    """
    need = Counter(TaskKind(t) for t in tasks)
    if tasks_done(state, tasks):
        return 0
    h, w = state.height, state.width
    cap = [need[k] for k in TaskKind]
    carryable = {int(k) + 1 for k in CARRYABLE}
    bread = int(ObjectKind.BREAD) + 1
    rules = {
        (int(tool) + 1, int(obj) + 1): (0 if res is None else int(res) + 1, ev)
        for (tool, obj), (res, ev) in RULES.items()
    }
    moves = [(-1, 0), (1, 0), (0, 1), (0, -1)]
    cells0 = bytes(0 if c is None else int(c) + 1 for c in state.cells)
    ev0 = tuple(min(e, c) for e, c in zip(state.events, cap))
    carried0 = 0 if state.carried is None else int(state.carried) + 1
    start = (cells0, state.agent_pos[0] * w + state.agent_pos[1], carried0, ev0)

    def done(ev: tuple) -> bool:
        return all(e >= c for e, c in zip(ev, cap))

    def bump(ev: tuple, i: int) -> tuple:
        out = list(ev)
        out[i] = min(out[i] + 1, cap[i])
        return tuple(out)

    seen = {start}
    frontier = [start]
    for depth in range(1, max_depth + 1):
        nxt_frontier = []
        for cells, pos, carried, ev in frontier:
            r, c = divmod(pos, w)
            successors = []
            for dr, dc in moves:
                nr, nc = r + dr, c + dc
                if not (0 <= nr < h and 0 <= nc < w):
                    continue
                npos = nr * w + nc
                rule = rules.get((carried, cells[npos]))
                if rule is None:
                    successors.append((cells, npos, carried, ev))
                else:
                    res, e = rule
                    ncells = cells[:npos] + bytes([res]) + cells[npos + 1:]
                    successors.append((ncells, npos, carried, bump(ev, e)))
            here = cells[pos]
            if carried == 0 and here in carryable:
                ncells = cells[:pos] + b"\x00" + cells[pos + 1:]
                if here == bread:
                    successors.append((ncells, pos, 0, bump(ev, int(TaskKind.EAT_BREAD))))
                else:
                    successors.append((ncells, pos, here, ev))
            elif carried != 0 and here == 0:
                ncells = cells[:pos] + bytes([carried]) + cells[pos + 1:]
                successors.append((ncells, pos, 0, ev))
            for succ in successors:
                if succ in seen:
                    continue
                if done(succ[3]):
                    return depth
                seen.add(succ)
                nxt_frontier.append(succ)
        if not nxt_frontier:
            break
        frontier = nxt_frontier
    raise PlanningError(f"no solution within {max_depth} steps")
