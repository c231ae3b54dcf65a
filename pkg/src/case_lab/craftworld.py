"""Deterministic, fully observable crafting grid world.

The world is a ``height x width`` grid. Each cell holds at most one object.
The agent walks over every cell (objects never block movement), carries at
most one object, and transforms terrain by entering it while holding the
matching tool.

Rule table::

    carried   entered cell   result    event
    Axe       Tree           Log       logs_made
    Hammer    Log            House     houses_built
    Axe       Wheat          Bread     bread_made
    Hammer    Rock           (empty)   rocks_broken

Picking up Bread eats it (``bread_eaten``) and leaves the hands empty.

Action indices are fixed: 0 North, 1 South, 2 East, 3 West, 4 PickUp, 5 Drop.
North decreases the row index.

ASCII glyphs::

    ·  empty      T Tree   L Log    H House   R Rock
    @  agent      W Wheat  B Bread  A Axe     M Hammer

The agent standing on an object is drawn as the lowercase object glyph.
A trailing ``carry=<kind> events=<a,b,c,d,e>`` line is added only when the
agent carries something or any event counter is non-zero.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Iterable, Optional, Sequence

import numpy as np

Position = tuple[int, int]


class WorldError(ValueError):
    """Raised for invalid world construction or unparseable renders."""


class ObjectKind(IntEnum):
    TREE = 0
    LOG = 1
    HOUSE = 2
    ROCK = 3
    WHEAT = 4
    BREAD = 5
    AXE = 6
    HAMMER = 7


class Action(IntEnum):
    NORTH = 0
    SOUTH = 1
    EAST = 2
    WEST = 3
    PICKUP = 4
    DROP = 5


class TaskKind(IntEnum):
    CHOP_TREE = 0
    BUILD_HOUSE = 1
    MAKE_BREAD = 2
    EAT_BREAD = 3
    BREAK_ROCK = 4


# Event counter i is the completion counter of TaskKind(i).
EVENT_NAMES = ("logs_made", "houses_built", "bread_made", "bread_eaten", "rocks_broken")
N_EVENTS = len(EVENT_NAMES)

CARRYABLE = (ObjectKind.AXE, ObjectKind.HAMMER, ObjectKind.WHEAT, ObjectKind.BREAD)
TOOLS = (ObjectKind.AXE, ObjectKind.HAMMER)

# (carried tool, entered object) -> (replacement object or None, event index)
RULES: dict[tuple[ObjectKind, ObjectKind], tuple[Optional[ObjectKind], int]] = {
    (ObjectKind.AXE, ObjectKind.TREE): (ObjectKind.LOG, 0),
    (ObjectKind.HAMMER, ObjectKind.LOG): (ObjectKind.HOUSE, 1),
    (ObjectKind.AXE, ObjectKind.WHEAT): (ObjectKind.BREAD, 2),
    (ObjectKind.HAMMER, ObjectKind.ROCK): (None, 4),
}

MOVES: dict[Action, Position] = {
    Action.NORTH: (-1, 0),
    Action.SOUTH: (1, 0),
    Action.EAST: (0, 1),
    Action.WEST: (0, -1),
}

GLYPHS = {
    ObjectKind.TREE: "T",
    ObjectKind.LOG: "L",
    ObjectKind.HOUSE: "H",
    ObjectKind.ROCK: "R",
    ObjectKind.WHEAT: "W",
    ObjectKind.BREAD: "B",
    ObjectKind.AXE: "A",
    ObjectKind.HAMMER: "M",
}
EMPTY_GLYPH = "·"
AGENT_GLYPH = "@"
_GLYPH_TO_KIND = {g: k for k, g in GLYPHS.items()}

# Divisor applied to event counters in the feature vector.
EVENT_SCALE = 8.0
CELL_CHANNELS = len(ObjectKind) + 1


@dataclass(frozen=True)
class GridState:
    """Immutable world snapshot. ``cells`` is row-major, ``None`` for empty."""

    width: int
    height: int
    cells: tuple[Optional[ObjectKind], ...]
    agent_pos: Position
    carried: Optional[ObjectKind] = None
    events: tuple[int, ...] = (0,) * N_EVENTS

    def at(self, pos: Position) -> Optional[ObjectKind]:
        return self.cells[pos[0] * self.width + pos[1]]

    def in_bounds(self, pos: Position) -> bool:
        return 0 <= pos[0] < self.height and 0 <= pos[1] < self.width

    def positions_of(self, kind: ObjectKind) -> list[Position]:
        """Row-major list of cells holding ``kind``."""
        w = self.width
        return [divmod(i, w) for i, c in enumerate(self.cells) if c == kind]

    def empty_cells(self) -> list[Position]:
        w = self.width
        return [divmod(i, w) for i, c in enumerate(self.cells) if c is None]

    def objects(self) -> dict[Position, ObjectKind]:
        w = self.width
        return {divmod(i, w): c for i, c in enumerate(self.cells) if c is not None}

    def object_counts(self) -> Counter:
        return Counter(c for c in self.cells if c is not None)

    def event(self, name: str) -> int:
        return self.events[EVENT_NAMES.index(name)]

    def check(self) -> None:
        """Raise WorldError if any structural invariant is violated."""
        if len(self.cells) != self.width * self.height:
            raise WorldError("cell count does not match grid size")
        if not self.in_bounds(self.agent_pos):
            raise WorldError(f"agent position {self.agent_pos} out of bounds")
        if self.carried is not None and self.carried not in CARRYABLE:
            raise WorldError(f"{self.carried.name} cannot be carried")
        if len(self.events) != N_EVENTS or min(self.events) < 0:
            raise WorldError("malformed event counters")


@dataclass(frozen=True)
class StepReport:
    """What a single ``step`` did. ``noop`` covers every ill-posed action."""

    blocked: bool = False
    noop: bool = False
    transformed: Optional[tuple[Position, ObjectKind, Optional[ObjectKind]]] = None
    picked: Optional[ObjectKind] = None
    dropped: Optional[ObjectKind] = None
    eaten: bool = False


def new_world(
    width: int,
    height: int,
    placements: Iterable[tuple[Position, ObjectKind]],
    agent_pos: Position,
) -> GridState:
    if width < 1 or height < 1:
        raise WorldError(f"grid must be at least 1x1, got {width}x{height}")
    cells: list[Optional[ObjectKind]] = [None] * (width * height)
    for (r, c), kind in placements:
        if not (0 <= r < height and 0 <= c < width):
            raise WorldError(f"placement {(r, c)} out of bounds for {height}x{width} grid")
        if cells[r * width + c] is not None:
            raise WorldError(f"duplicate placement at {(r, c)}")
        cells[r * width + c] = ObjectKind(kind)
    state = GridState(width, height, tuple(cells), tuple(agent_pos))
    state.check()
    return state


_MOVED = StepReport()


def _set_cell(state: GridState, pos: Position, kind: Optional[ObjectKind]) -> tuple:
    cells = list(state.cells)
    cells[pos[0] * state.width + pos[1]] = kind
    return tuple(cells)


def _bump(events: tuple[int, ...], idx: int) -> tuple[int, ...]:
    ev = list(events)
    ev[idx] += 1
    return tuple(ev)


def step(state: GridState, action: Action) -> tuple[GridState, StepReport]:
    move = MOVES.get(action)
    if move is not None:
        pos = (state.agent_pos[0] + move[0], state.agent_pos[1] + move[1])
        if not (0 <= pos[0] < state.height and 0 <= pos[1] < state.width):
            return state, StepReport(blocked=True, noop=True)
        target = state.cells[pos[0] * state.width + pos[1]]
        rule = RULES.get((state.carried, target)) if state.carried is not None else None
        if rule is None:
            new = GridState(state.width, state.height, state.cells, pos, state.carried, state.events)
            return new, _MOVED
        result, ev = rule
        new = GridState(
            state.width,
            state.height,
            _set_cell(state, pos, result),
            pos,
            state.carried,
            _bump(state.events, ev),
        )
        return new, StepReport(transformed=(pos, target, result))

    here = state.at(state.agent_pos)
    if action == Action.PICKUP:
        if state.carried is not None or here not in CARRYABLE:
            return state, StepReport(noop=True)
        cells = _set_cell(state, state.agent_pos, None)
        if here == ObjectKind.BREAD:
            new = replace(state, cells=cells, events=_bump(state.events, 3))
            return new, StepReport(picked=here, eaten=True)
        return replace(state, cells=cells, carried=here), StepReport(picked=here)

    if action != Action.DROP:
        raise ValueError(f"unknown action {action!r}")
    if state.carried is None or here is not None:
        return state, StepReport(noop=True)
    new = replace(state, cells=_set_cell(state, state.agent_pos, state.carried), carried=None)
    return new, StepReport(dropped=state.carried)


def task_done(state: GridState, task: TaskKind) -> bool:
    return state.events[int(task)] >= 1


def tasks_done(state: GridState, tasks: Sequence[TaskKind]) -> bool:
    """Multiset completion: each kind's counter must reach its multiplicity."""
    need = Counter(TaskKind(t) for t in tasks)
    return all(state.events[int(k)] >= n for k, n in need.items())


def tasks_completed(state: GridState, tasks: Sequence[TaskKind]) -> int:
    """Number of entries of the multiset ``tasks`` already satisfied."""
    need = Counter(TaskKind(t) for t in tasks)
    return sum(min(n, state.events[int(k)]) for k, n in need.items())


def feature_length(width: int, height: int) -> int:
    return width * height * CELL_CHANNELS + len(CARRYABLE) + N_EVENTS


def featurize(state: GridState) -> np.ndarray:
    """Flat float64 vector: per-cell one-hot (8 kinds + agent), carried one-hot, scaled events."""
    n_cells = state.width * state.height
    out = np.zeros(feature_length(state.width, state.height))
    for i, c in enumerate(state.cells):
        if c is not None:
            out[i * CELL_CHANNELS + int(c)] = 1.0
    r, c = state.agent_pos
    out[(r * state.width + c) * CELL_CHANNELS + len(ObjectKind)] = 1.0
    base = n_cells * CELL_CHANNELS
    if state.carried is not None:
        out[base + CARRYABLE.index(state.carried)] = 1.0
    out[base + len(CARRYABLE):] = np.asarray(state.events, dtype=float) / EVENT_SCALE
    return out


def render_ascii(state: GridState) -> str:
    lines = []
    for r in range(state.height):
        row = []
        for c in range(state.width):
            obj = state.at((r, c))
            if (r, c) == state.agent_pos:
                row.append(AGENT_GLYPH if obj is None else GLYPHS[obj].lower())
            else:
                row.append(EMPTY_GLYPH if obj is None else GLYPHS[obj])
        lines.append("".join(row))
    if state.carried is not None or any(state.events):
        carry = state.carried.name if state.carried is not None else "none"
        lines.append(f"carry={carry} events={','.join(map(str, state.events))}")
    return "\n".join(lines)


def parse_ascii(text: str) -> GridState:
    """Inverse of ``render_ascii``."""
    lines = text.strip("\n").split("\n")
    carried = None
    events = (0,) * N_EVENTS
    if lines and lines[-1].startswith("carry="):
        status = lines.pop()
        try:
            carry_part, events_part = status.split(" ")
            name = carry_part.split("=", 1)[1]
            carried = None if name == "none" else ObjectKind[name]
            events = tuple(int(x) for x in events_part.split("=", 1)[1].split(","))
        except (ValueError, KeyError) as exc:
            raise WorldError(f"bad status line {status!r}") from exc
    if not lines:
        raise WorldError("empty render")
    width = len(lines[0])
    placements = []
    agent = None
    for r, line in enumerate(lines):
        if len(line) != width:
            raise WorldError(f"ragged render at row {r}")
        for c, ch in enumerate(line):
            if ch == EMPTY_GLYPH:
                continue
            if ch == AGENT_GLYPH or ch.islower():
                if agent is not None:
                    raise WorldError("more than one agent in render")
                agent = (r, c)
                if ch == AGENT_GLYPH:
                    continue
                ch = ch.upper()
            if ch not in _GLYPH_TO_KIND:
                raise WorldError(f"unknown glyph {ch!r} at {(r, c)}")
            placements.append(((r, c), _GLYPH_TO_KIND[ch]))
    if agent is None:
        raise WorldError("render has no agent")
    world = new_world(width, len(lines), placements, agent)
    state = replace(world, carried=carried, events=events)
    state.check()
    return state
