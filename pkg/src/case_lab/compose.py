"""Compositional pair encoder, waypoint arithmetic, policy network and losses.

The encoder maps a pair of states to a latent vector meant to describe the
work that leads from the first to the second. The policy sees a waypoint
embedding

    W = encode(U_t, U_N) - encode(R_I, R_T)

where U is the episode being acted in and R is a reference episode for the
same tasks on another map. Everything works on row batches of feature
vectors; the single-state helpers just wrap one row.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import sparse

from . import nn
from .craftworld import CELL_CHANNELS, GridState, feature_length, featurize
from .nn import ParamStore, Tensor

N_ACTIONS = 6


def centred_view_dim(width: int, height: int) -> int:
    window = (2 * height - 1) * (2 * width - 1) * CELL_CHANNELS
    return window + width * height + feature_length(width, height) - width * height * CELL_CHANNELS


class Variant(str, enum.Enum):
    CASE = "CASE"
    CASE_CI = "CASE_CI"
    CASE_CI_L = "CASE_CI_L"
    GOAL_GUIDANCE = "GOAL_GUIDANCE"
    CPV_FULL = "CPV_FULL"

    @property
    def sees_current(self) -> bool:
        return self is not Variant.CASE

    @property
    def assistive(self) -> bool:
        return self is Variant.CASE_CI_L

    @property
    def is_baseline(self) -> bool:
        return self in (Variant.GOAL_GUIDANCE, Variant.CPV_FULL)


CASE_VARIANTS = (Variant.CASE, Variant.CASE_CI, Variant.CASE_CI_L)


def parse_variant(name: str | Variant) -> Variant:
    if isinstance(name, Variant):
        return name
    key = name.strip().upper().replace("+", "_").replace("-", "_")
    try:
        return Variant(key)
    except ValueError:
        raise ValueError(f"unknown variant {name!r}; choose from {[v.value for v in Variant]}") from None


@dataclass(frozen=True)
class ModelConfig:
    width: int
    height: int
    variant: Variant = Variant.CASE_CI_L
    latent_dim: int = 32
    hidden: int = 128
    policy_hidden: int = 128
    seed: int = 0
    # "centred" re-indexes cell channels around the agent before the first layer.
    view: str = "centred"

    def __post_init__(self) -> None:
        if self.view not in ("centred", "flat"):
            raise ValueError(f"unknown view {self.view!r}")

    @property
    def feature_dim(self) -> int:
        return feature_length(self.width, self.height)

    @property
    def view_dim(self) -> int:
        if self.view == "flat":
            return self.feature_dim
        return centred_view_dim(self.width, self.height)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["variant"] = parse_variant(d["variant"])
        return cls(**d)

    @property
    def policy_input_dim(self) -> int:
        return self.latent_dim + (self.view_dim if self.variant.sees_current else 0)


@dataclass
class Models:
    """Encoder and policy parameters in one store."""

    config: ModelConfig
    store: ParamStore


def init_models(config: ModelConfig) -> Models:
    rng = np.random.default_rng(config.seed)
    store = ParamStore()
    f, h, d = config.view_dim, config.hidden, config.latent_dim
    nn.init_dense(store, "enc.0", 2 * f, h, rng)
    nn.init_dense(store, "enc.1", h, h, rng)
    nn.init_dense(store, "enc.2", h, d, rng)
    # The policy's first layer is split into a goal block and, when the
    # variant sees the current state, a state block of the same layer.
    ph = config.policy_hidden
    bound = 1.0 / np.sqrt(config.policy_input_dim)
    store.add("pol.0.w", rng.uniform(-bound, bound, size=(d, ph)))
    if config.variant.sees_current:
        store.add("pol.0.s", rng.uniform(-bound, bound, size=(f, ph)))
    store.add("pol.0.b", np.zeros(ph))
    nn.init_dense(store, "pol.1", ph, ph, rng)
    nn.init_dense(store, "pol.2", ph, N_ACTIONS, rng)
    return Models(config, store)


def _mlp(store: ParamStore, prefix: str, x: Tensor, first: int, layers: int) -> Tensor:
    for i in range(first, layers):
        if i > first or first > 0:
            x = nn.relu(x)
        x = nn.dense(x, store[f"{prefix}.{i}.w"], store[f"{prefix}.{i}.b"])
    return x


def centred_view_coords(
    rows: np.ndarray, centre_rows: np.ndarray, width: int, height: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nonzeros ``(row, column, value)`` of the agent-centred view of feature rows.

    The view has three blocks: the cell channels re-indexed into a
    ``(2H-1) x (2W-1)`` window centred on the agent found in the matching
    row of ``centre_rows`` (so the whole grid is visible from any position),
    a one-hot of that agent's absolute cell (where the walls are), and the
    carried and event features unchanged.
    """
    n = rows.shape[0]
    nc = width * height * CELL_CHANNELS
    vw = 2 * width - 1
    window = (2 * height - 1) * vw * CELL_CHANNELS
    agent = centre_rows[:, CELL_CHANNELS - 1 : nc : CELL_CHANNELS].argmax(axis=1)
    ar, ac = np.divmod(agent, width)
    i, j = np.nonzero(rows[:, :nc])
    cell, ch = np.divmod(j, CELL_CHANNELS)
    r, c = np.divmod(cell, width)
    cols = ((r - ar[i] + height - 1) * vw + (c - ac[i] + width - 1)) * CELL_CHANNELS + ch
    ti, tj = np.nonzero(rows[:, nc:])
    return (
        np.concatenate([i, np.arange(n), ti]),
        np.concatenate([cols, window + agent, window + width * height + tj]),
        np.concatenate([rows[i, j], np.ones(n), rows[ti, nc + tj]]),
    )


def centred_view(rows: np.ndarray, centre_rows: np.ndarray, width: int, height: int) -> np.ndarray:
    """Dense form of :func:`centred_view_coords`."""
    n = rows.shape[0]
    dim = centred_view_dim(width, height)
    out = np.zeros((n, dim))
    i, j, v = centred_view_coords(rows, centre_rows, width, height)
    out[i, j] = v
    return out


def _view_coords(models: Models, rows: np.ndarray, centre_rows: np.ndarray):
    c = models.config
    if c.view == "flat":
        i, j = np.nonzero(rows)
        return i, j, rows[i, j]
    return centred_view_coords(rows, centre_rows, c.width, c.height)


def _sparse(n: int, dim: int, parts) -> sparse.csr_matrix:
    i = np.concatenate([p[0] for p in parts])
    j = np.concatenate([p[1] for p in parts])
    v = np.concatenate([p[2] for p in parts])
    return sparse.csr_matrix((v, (i, j)), shape=(n, dim))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_features(models: Models, *arrays: np.ndarray) -> None:
    f = models.config.feature_dim
    for a in arrays:
        if a.ndim != 2 or a.shape[1] != f:
            raise nn.ShapeError(f"expected feature rows of length {f}, got shape {a.shape}")


def encode_rows(models: Models, fa, fb) -> Tensor:
    """Encode row batches of (from, to) feature vectors.

    Both states are viewed from the first state's agent; the concatenated
    views go through three dense layers. The input is sparse, so the first
    layer is a sparse-by-dense product.
    """
    fa, fb = np.asarray(fa, dtype=np.float64), np.asarray(fb, dtype=np.float64)
    _check_features(models, fa, fb)
    vd = models.config.view_dim
    ia, ja, va = _view_coords(models, fa, fa)
    ib, jb, vb = _view_coords(models, fb, fa)
    x = _sparse(fa.shape[0], 2 * vd, [(ia, ja, va), (ib, jb + vd, vb)])
    st = models.store
    h = nn.add(nn.sparse_matmul(x, st["enc.0.w"]), st["enc.0.b"])
    return _mlp(st, "enc", h, 1, 3)


def encode(models: Models, s_a: GridState, s_b: GridState) -> np.ndarray:
    return encode_rows(models, featurize(s_a)[None], featurize(s_b)[None]).data[0]


def policy_logits(models: Models, current, goal: Tensor) -> Tensor:
    """Action logits from the goal vector, plus the current state when the variant uses it.

    Equivalent to one dense layer over ``[view(current) ++ goal]``.
    """
    goal = _as_tensor(goal)
    st = models.store
    h = nn.matmul(goal, st["pol.0.w"])
    if models.config.variant.sees_current:
        current = np.asarray(current, dtype=np.float64)
        _check_features(models, current)
        x = _sparse(current.shape[0], models.config.view_dim, [_view_coords(models, current, current)])
        h = nn.add(h, nn.sparse_matmul(x, st["pol.0.s"]))
    return _mlp(st, "pol", nn.add(h, st["pol.0.b"]), 1, 3)


def waypoint_index(t: int, n: int, total: int, k: int) -> int:
    """Reference index ``min(floor(t*total/n) + k, total)``; ``n == 0`` maps to ``total``.

    ``t > n`` is accepted and simply clamps to ``total``.
    """
    if min(t, n, total, k) < 0:
        raise ValueError(f"negative argument in waypoint_index(t={t}, n={n}, total={total}, k={k})")
    if n == 0:
        return total
    return min(t * total // n + k, total)


def rollout_waypoint_index(t: int, total: int, k: int) -> int:
    """Index used when acting: the unknown length is taken to equal ``total``.

    Past the reference's end the waypoint stays on its final state.
    """
    if min(t, total, k) < 0:
        raise ValueError(f"negative argument in rollout_waypoint_index(t={t}, total={total}, k={k})")
    return min(t + k, total)


def waypoint_embedding(
    models: Models, u_t: GridState, u_n: GridState, r_i: GridState, r_t: GridState
) -> np.ndarray:
    return encode(models, u_t, u_n) - encode(models, r_i, r_t)


def baseline_goal(
    models: Models,
    variant: Variant,
    u_0: GridState,
    u_t: GridState,
    u_n: GridState,
    r_0: GridState,
    r_t: GridState,
) -> np.ndarray:
    variant = parse_variant(variant)
    if variant is Variant.GOAL_GUIDANCE:
        return encode(models, u_t, u_n)
    if variant is Variant.CPV_FULL:
        return encode(models, r_0, r_t) - encode(models, u_0, u_t)
    raise ValueError(f"{variant.value} is not a baseline variant")


# ------------------------------------------------------------------ batched training graph


@dataclass
class BatchFeatures:
    """Feature rows for one batch. ``u_*`` come from the acting episode, ``r_*`` from the reference."""

    u_0: np.ndarray
    u_t: np.ndarray
    u_n: np.ndarray
    r_0: np.ndarray
    r_i: np.ndarray
    r_t: np.ndarray
    actions: np.ndarray
    # Row j's negatives come from row neg[j], a different pair.
    neg: np.ndarray
    # Extra negative pairs used when no other pair is in the batch.
    fallback_u: Optional[tuple[np.ndarray, np.ndarray]] = None
    fallback_r: Optional[tuple[np.ndarray, np.ndarray]] = None

    def __len__(self) -> int:
        return self.u_t.shape[0]


@dataclass
class LossParts:
    total: Tensor
    policy: Tensor
    hier: Optional[Tensor]
    pair: Optional[Tensor]

    def values(self) -> dict[str, float]:
        return {
            "loss_total": float(self.total.data),
            "loss_policy": float(self.policy.data),
            "loss_H": float(self.hier.data) if self.hier is not None else 0.0,
            "loss_P": float(self.pair.data) if self.pair is not None else 0.0,
        }


def goal_rows(models: Models, b: BatchFeatures, assistive: bool = True) -> tuple[Tensor, dict[str, Tensor]]:
    """Goal vector per row for the configured variant, plus reusable encodings.

    All encoder calls of a batch go through one stacked forward pass. With
    ``assistive=False`` the encodings only the triplet losses need are skipped.
    """
    variant = models.config.variant
    wanted: list[tuple[str, np.ndarray, np.ndarray]] = []
    if variant is Variant.CPV_FULL:
        wanted += [("r0T", b.r_0, b.r_t), ("u0t", b.u_0, b.u_t)]
    else:
        wanted.append(("utN", b.u_t, b.u_n))
        if not variant.is_baseline:
            wanted.append(("rIT", b.r_i, b.r_t))
    if assistive and variant.assistive:
        wanted += [("u0t", b.u_0, b.u_t), ("u0N", b.u_0, b.u_n), ("r0T", b.r_0, b.r_t)]
        if b.fallback_u is not None:
            wanted.append(("negU", *b.fallback_u))
        if b.fallback_r is not None:
            wanted.append(("negR", *b.fallback_r))
    seen: dict[str, int] = {}
    uniq = []
    for name, fa, fb in wanted:
        if name not in seen:
            seen[name] = len(uniq)
            uniq.append((name, fa, fb))
    sizes = [fa.shape[0] for _, fa, _ in uniq]
    enc = encode_rows(
        models,
        np.concatenate([fa for _, fa, _ in uniq]),
        np.concatenate([fb for _, _, fb in uniq]),
    )
    parts: dict[str, Tensor] = {}
    start = 0
    for (name, _, _), n in zip(uniq, sizes):
        parts[name] = nn.take_rows(enc, np.arange(start, start + n))
        start += n
    if variant is Variant.CPV_FULL:
        goal = nn.sub(parts["r0T"], parts["u0t"])
    elif variant is Variant.GOAL_GUIDANCE:
        goal = parts["utN"]
    else:
        goal = nn.sub(parts["utN"], parts["rIT"])
    return goal, parts


def _negatives(parts: dict[str, Tensor], source: str, fallback: str, b: BatchFeatures) -> Tensor:
    if fallback in parts:
        return parts[fallback]
    return nn.take_rows(parts[source], b.neg)


def batch_losses(
    models: Models, b: BatchFeatures, lambda_h: float = 1.0, lambda_p: float = 1.0, margin: float = 1.0
) -> LossParts:
    """Policy cross-entropy plus, for the assistive variant, the two triplet terms."""
    goal, parts = goal_rows(models, b)
    logits = policy_logits(models, b.u_t, goal)
    la = nn.softmax_xent_batch(logits, b.actions)
    if not models.config.variant.assistive:
        return LossParts(loss_total(la, None, None, 0.0, 0.0), la, None, None)
    lh = nn.triplet_margin_batch(
        nn.add(parts["u0t"], parts["utN"]), parts["u0N"], _negatives(parts, "u0N", "negU", b), margin
    )
    lp = nn.triplet_margin_batch(parts["u0N"], parts["r0T"], _negatives(parts, "r0T", "negR", b), margin)
    return LossParts(loss_total(la, lh, lp, lambda_h, lambda_p), la, lh, lp)


def loss_total(
    la: Tensor, lh: Optional[Tensor], lp: Optional[Tensor], lambda_h: float, lambda_p: float
) -> Tensor:
    terms = [(1.0, la)]
    if lh is not None and lambda_h:
        terms.append((lambda_h, lh))
    if lp is not None and lambda_p:
        terms.append((lambda_p, lp))
    return nn.weighted_sum(terms)


# ------------------------------------------------------------------ per-example losses


def _row(s: GridState) -> np.ndarray:
    return featurize(s)[None]


def loss_policy(
    models: Models,
    u_t: GridState,
    u_n: GridState,
    r_i: GridState,
    r_t: GridState,
    expert_action: int,
    u_0: Optional[GridState] = None,
    r_0: Optional[GridState] = None,
) -> Tensor:
    """Negative log-likelihood of ``expert_action``; baselines also need ``u_0``/``r_0``."""
    u_0 = u_t if u_0 is None else u_0
    r_0 = r_i if r_0 is None else r_0
    b = BatchFeatures(
        _row(u_0), _row(u_t), _row(u_n), _row(r_0), _row(r_i), _row(r_t),
        np.array([int(expert_action)]), np.array([0]),
    )
    goal, _ = goal_rows(models, b, assistive=False)
    return nn.softmax_xent_batch(policy_logits(models, b.u_t, goal), b.actions)


def loss_hier(
    models: Models, u_0: GridState, u_t: GridState, u_n: GridState, negative, margin: float = 1.0
) -> Tensor:
    anchor = nn.add(encode_rows(models, _row(u_0), _row(u_t)), encode_rows(models, _row(u_t), _row(u_n)))
    positive = encode_rows(models, _row(u_0), _row(u_n))
    return nn.triplet_margin_batch(anchor, positive, _as_tensor(np.atleast_2d(negative)), margin)


def loss_pair(
    models: Models, u_0: GridState, u_n: GridState, r_0: GridState, r_t: GridState, negative, margin: float = 1.0
) -> Tensor:
    anchor = encode_rows(models, _row(u_0), _row(u_n))
    positive = encode_rows(models, _row(r_0), _row(r_t))
    return nn.triplet_margin_batch(anchor, positive, _as_tensor(np.atleast_2d(negative)), margin)


def segment_sum(models: Models, states: Sequence[GridState], cuts: Sequence[int], order: Sequence[int]) -> np.ndarray:
    """Sum the embeddings of consecutive segments split at ``cuts``, in the given order."""
    bounds = [0, *cuts, len(states) - 1]
    segs = [encode(models, states[a], states[b]) for a, b in zip(bounds, bounds[1:])]
    total = np.zeros(models.config.latent_dim)
    for i in order:
        total = total + segs[i]
    return total


def composition_residual(models: Models, trajectories: Sequence[Sequence[GridState]]) -> float:
    """Mean split-sum error ``|g(s0,st) + g(st,sN) - g(s0,sN)|`` at the midpoint.

    Divided by the mean distance between the whole-trajectory embeddings of
    different trajectories, so that it does not reward a shrinking latent
    scale; the triplet losses compare against that same distance.
    """
    if len(trajectories) < 2:
        raise ValueError("need at least two trajectories")
    errors, whole = [], []
    for states in trajectories:
        t = len(states) // 2
        full = encode(models, states[0], states[-1])
        whole.append(full)
        errors.append(np.linalg.norm(encode(models, states[0], states[t]) + encode(models, states[t], states[-1]) - full))
    w = np.array(whole)
    gaps = [np.linalg.norm(w[i] - w[j]) for i in range(len(w)) for j in range(i + 1, len(w))]
    return float(np.mean(errors) / np.mean(gaps))
