"""Behaviour cloning along expert trajectories.

Each sample is a (pair, timestep) drawn uniformly; the waypoint index uses
the true length of the acting trajectory. Batches are drawn from a
generator seeded by ``(seed, step)`` so a run resumed from a checkpoint
continues exactly as the uninterrupted run would.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import nn
from .compose import BatchFeatures, ModelConfig, Models, Variant, batch_losses, init_models, parse_variant, waypoint_index
from .craftworld import CELL_CHANNELS, EVENT_SCALE, N_EVENTS, GridState, feature_length, featurize
from .datagen import EpisodePair, atomic_write_text, read_dataset

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "loss_total", "loss_policy", "loss_H", "loss_P")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    variant: Variant = Variant.CASE_CI_L
    k: int = 4
    lambda_h: float = 1.0
    lambda_p: float = 1.0
    margin: float = 1.0
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 30
    # One epoch draws this many (pair, timestep) samples per pair.
    samples_per_pair: int = 4
    seed: int = 0
    latent_dim: int = 32
    hidden: int = 128
    view: str = "centred"
    # Draw either episode of a pair as the acting one, and flip maps.
    augment: bool = True
    dataset: Optional[str] = None
    checkpoint: Optional[str] = None
    metrics: Optional[str] = None
    checkpoint_every: int = 0  # epochs; 0 writes only the final checkpoint

    def __post_init__(self) -> None:
        object.__setattr__(self, "variant", parse_variant(self.variant))
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.lambda_h < 0 or self.lambda_p < 0:
            raise ValueError("loss weights must be >= 0")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0 or self.margin <= 0 or self.samples_per_pair < 1:
            raise ValueError("batch_size >= 1, epochs >= 0, lr > 0, margin > 0 and samples_per_pair >= 1 are required")

    @property
    def effective_lambdas(self) -> tuple[float, float]:
        """Only the assistive variant trains the triplet terms."""
        if self.variant.assistive:
            return self.lambda_h, self.lambda_p
        return 0.0, 0.0

    def as_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    def model_config(self, width: int, height: int) -> ModelConfig:
        return ModelConfig(
            width=width,
            height=height,
            variant=self.variant,
            latent_dim=self.latent_dim,
            hidden=self.hidden,
            policy_hidden=self.hidden,
            seed=self.seed,
            view=self.view,
        )

    def fingerprint_dict(self) -> dict:
        """The parts of the config that determine the parameters (paths excluded)."""
        d = self.as_dict()
        for key in ("dataset", "checkpoint", "metrics", "checkpoint_every"):
            d.pop(key)
        return d


# ------------------------------------------------------------------ feature tables


def feature_table(states: Sequence[GridState]) -> np.ndarray:
    """Stack features as uint8; event columns hold raw counts (see ``as_features``)."""
    n_events = N_EVENTS
    out = np.empty((len(states), feature_length(states[0].width, states[0].height)), dtype=np.uint8)
    for i, s in enumerate(states):
        row = featurize(s)
        row[-n_events:] *= EVENT_SCALE
        out[i] = np.rint(row)
    return out


def as_features(rows: np.ndarray) -> np.ndarray:
    """Inverse of ``feature_table``: bit-identical to ``featurize`` (the scale is a power of two)."""
    out = rows.astype(np.float64)
    out[:, -N_EVENTS:] /= EVENT_SCALE
    return out


@dataclass
class PreparedPair:
    train: np.ndarray
    reference: np.ndarray
    actions: np.ndarray
    reference_actions: np.ndarray
    pair_id: int
    width: int
    height: int
    # Sorted task multiset; pairs sharing it are not used as each other's negatives.
    tasks: tuple = ()

    @property
    def n(self) -> int:
        return len(self.actions)

    @property
    def total(self) -> int:
        return self.reference.shape[0] - 1


def prepare(pairs: Sequence[EpisodePair]) -> list[PreparedPair]:
    out = []
    for p in pairs:
        if len(p.train.trajectory.actions) == 0 or len(p.reference.trajectory.actions) == 0:
            continue  # nothing to imitate
        out.append(
            PreparedPair(
                feature_table(p.train.trajectory.states),
                feature_table(p.reference.trajectory.states),
                np.array([int(a) for a in p.train.trajectory.actions], dtype=np.int64),
                np.array([int(a) for a in p.reference.trajectory.actions], dtype=np.int64),
                p.pair_id,
                p.train.world.width,
                p.train.world.height,
                tuple(sorted(int(t) for t in p.train.tasks)),
            )
        )
    return out


# ------------------------------------------------------------------ batches


@dataclass
class Batch:
    pair_index: np.ndarray
    t: np.ndarray
    features: BatchFeatures

    def ids(self, data: Sequence[PreparedPair]) -> list[tuple[int, int]]:
        return [(data[i].pair_id, int(t)) for i, t in zip(self.pair_index, self.t)]


def _negative_rows(pair_index: np.ndarray, tasks: Sequence[tuple]) -> Optional[np.ndarray]:
    """Row j takes its negatives from the next row (cyclically) holding another task multiset.

    If every other row has the same tasks, the next row holding a different
    pair is used; ``None`` when all rows hold the same pair.
    """
    m = len(pair_index)
    neg = np.empty(m, dtype=np.int64)
    for j in range(m):
        other = [(j + d) % m for d in range(1, m) if pair_index[(j + d) % m] != pair_index[j]]
        if not other:
            return None
        neg[j] = next((c for c in other if tasks[c] != tasks[j]), other[0])
    return neg


def sample_batch(
    data: Sequence[PreparedPair], rng: np.random.Generator, batch_size: int, k: int = 4, augment: bool = False
) -> Batch:
    """Uniform pairs, then a uniform timestep in ``[0, N-1]`` of the acting episode.

    With ``augment`` each sample also draws which episode of the pair acts
    and an independent mirror image for each episode.

    When every row holds the same pair (e.g. batch size 1) the negatives
    come from the designated fallback pair: the next pair in dataset order
    with a different task multiset.
    """
    if not data:
        raise TrainingError("cannot sample from an empty dataset")
    idx = rng.integers(0, len(data), size=batch_size)
    if augment:
        roles = rng.integers(0, 2, size=batch_size)
        flips = rng.integers(0, len(FLIPS), size=(batch_size, 2))
    else:
        roles = np.zeros(batch_size, dtype=np.int64)
        flips = np.zeros((batch_size, 2), dtype=np.int64)
    ts = np.empty(batch_size, dtype=np.int64)
    rows = {name: [] for name in ("u_0", "u_t", "u_n", "r_0", "r_i", "r_t")}
    actions = np.empty(batch_size, dtype=np.int64)
    perms: dict[tuple[int, int, int], np.ndarray] = {}

    def perm(p: PreparedPair, f: int) -> np.ndarray:
        key = (p.width, p.height, f)
        if key not in perms:
            perms[key] = flip_columns(p.width, p.height, FLIPS[f])
        return perms[key]

    for j, i in enumerate(idx):
        p = data[i]
        u, r, u_actions = (p.train, p.reference, p.actions) if roles[j] == 0 else (p.reference, p.train, p.reference_actions)
        n, total = len(u_actions), r.shape[0] - 1
        t = int(rng.integers(0, n))
        ts[j] = t
        wi = waypoint_index(t, n, total, k)
        pu, pr = perm(p, flips[j, 0]), perm(p, flips[j, 1])
        rows["u_0"].append(u[0, pu])
        rows["u_t"].append(u[t, pu])
        rows["u_n"].append(u[-1, pu])
        rows["r_0"].append(r[0, pr])
        rows["r_i"].append(r[wi, pr])
        rows["r_t"].append(r[-1, pr])
        actions[j] = flip_action(int(u_actions[t]), FLIPS[flips[j, 0]])
    feats = {name: as_features(np.stack(v)) for name, v in rows.items()}
    neg = _negative_rows(idx, [data[i].tasks for i in idx])
    fallback_u = fallback_r = None
    if neg is None:
        neg = np.arange(batch_size)
        f = _fallback_pair(data, int(idx[0]))
        rep = lambda row: as_features(np.repeat(row[None], batch_size, axis=0))
        fallback_u = (rep(f.train[0]), rep(f.train[-1]))
        fallback_r = (rep(f.reference[0]), rep(f.reference[-1]))
    return Batch(idx, ts, BatchFeatures(actions=actions, neg=neg, fallback_u=fallback_u, fallback_r=fallback_r, **feats))


def _fallback_pair(data: Sequence[PreparedPair], i: int) -> PreparedPair:
    """The next pair in dataset order with different tasks, else simply the next pair."""
    n = len(data)
    for d in range(1, n):
        if data[(i + d) % n].tasks != data[i].tasks:
            return data[(i + d) % n]
    return data[(i + 1) % n]


# Mirror images of the grid that keep the expert's vertical-first paths optimal.
FLIPS = ("none", "lr", "ud", "both")
_ACTION_FLIP = {
    "none": (0, 1, 2, 3, 4, 5),
    "lr": (0, 1, 3, 2, 4, 5),
    "ud": (1, 0, 2, 3, 4, 5),
    "both": (1, 0, 3, 2, 4, 5),
}


def flip_columns(width: int, height: int, flip: str) -> np.ndarray:
    """Column permutation of a feature row that mirrors the grid."""
    r, c = np.divmod(np.arange(width * height), width)
    if flip in ("lr", "both"):
        c = width - 1 - c
    if flip in ("ud", "both"):
        r = height - 1 - r
    src = r * width + c
    cells = (src[:, None] * CELL_CHANNELS + np.arange(CELL_CHANNELS)).ravel()
    tail = np.arange(width * height * CELL_CHANNELS, feature_length(width, height))
    return np.concatenate([cells, tail])


def flip_action(action: int, flip: str) -> int:
    return _ACTION_FLIP[flip][action]


def batch_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, 0x7A11])


# ------------------------------------------------------------------ steps and loops


def train_step(
    models: Models, batch: Batch, config: TrainConfig, data: Optional[Sequence[PreparedPair]] = None
) -> dict[str, float]:
    """Forward, backward and one Adam update. Raises before updating on a non-finite loss."""
    lh, lp = config.effective_lambdas
    models.store.zero_grad()
    parts = batch_losses(models, batch.features, lh, lp, config.margin)
    values = parts.values()
    if not all(math.isfinite(v) for v in values.values()):
        ids = batch.ids(data) if data is not None else list(zip(batch.pair_index.tolist(), batch.t.tolist()))
        raise TrainingError(f"non-finite loss {values} at step {models.store.step}; config={config.as_dict()}; batch (pair, t)={ids}")
    parts.total.backward()
    if not models.store.grads_finite():
        raise TrainingError(f"non-finite gradient at step {models.store.step}; config={config.as_dict()}")
    nn.adam_step(models.store, lr=config.lr)
    return values


def steps_per_epoch(n_pairs: int, batch_size: int, samples_per_pair: int = 1) -> int:
    """Steps needed to draw ``samples_per_pair`` samples per pair."""
    return max(1, math.ceil(n_pairs * samples_per_pair / batch_size))


@dataclass
class TrainResult:
    models: Models
    history: list[dict[str, float]] = field(default_factory=list)


def save_models(models: Models, config: TrainConfig, path: str | os.PathLike) -> None:
    nn.save_checkpoint(models.store, checkpoint_config(models, config), path)


def checkpoint_config(models: Models, config: TrainConfig) -> dict:
    return {"train": config.fingerprint_dict(), "model": models.config.as_dict()}


def load_models(path: str | os.PathLike, expect: Optional[TrainConfig] = None) -> tuple[Models, dict]:
    """Load a checkpoint; with ``expect`` the stored training configuration must match it."""
    store, cfg = nn.load_checkpoint(path)
    model_config = ModelConfig.from_dict(cfg["model"])
    if expect is not None:
        want = {"train": expect.fingerprint_dict(), "model": expect.model_config(model_config.width, model_config.height).as_dict()}
        if nn.fingerprint(want) != nn.fingerprint(cfg):
            raise nn.CheckpointError("checkpoint was produced by a different configuration")
    return Models(model_config, store), cfg


def _metrics_text(history: Sequence[dict[str, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for row in history:
        w.writerow([int(row["step"])] + [repr(float(row[k])) for k in METRICS_HEADER[1:]])
    return buf.getvalue()


def train_loop(
    config: TrainConfig,
    pairs: Optional[Sequence[EpisodePair]] = None,
    data: Optional[Sequence[PreparedPair]] = None,
    resume: Optional[Models] = None,
    max_steps: Optional[int] = None,
) -> TrainResult:
    """Run ``config.epochs`` epochs; writes metrics and checkpoints when paths are set."""
    if data is None:
        if pairs is None:
            if config.dataset is None:
                raise TrainingError("no dataset given")
            pairs = read_dataset(config.dataset)
        data = prepare(pairs)
    if not data:
        raise TrainingError("dataset has no trainable pairs")
    shapes = {(p.width, p.height) for p in data}
    if len(shapes) != 1:
        raise TrainingError(f"dataset mixes grid sizes {sorted(shapes)}")
    models = resume if resume is not None else init_models(config.model_config(data[0].width, data[0].height))
    per_epoch = steps_per_epoch(len(data), config.batch_size, config.samples_per_pair)
    total = per_epoch * config.epochs if max_steps is None else max_steps
    history: list[dict[str, float]] = []
    while models.store.step < total:
        step = models.store.step
        batch = sample_batch(data, batch_rng(config.seed, step), config.batch_size, config.k, config.augment)
        values = train_step(models, batch, config, data)
        history.append({"step": step + 1, **values})
        done = models.store.step
        if config.checkpoint and config.checkpoint_every and done % (per_epoch * config.checkpoint_every) == 0 and done < total:
            save_models(models, config, config.checkpoint)
        if done % per_epoch == 0:
            log.info("epoch %d step %d loss %.4f", done // per_epoch, done, values["loss_total"])
    if config.metrics:
        atomic_write_text(config.metrics, _metrics_text(history))
    if config.checkpoint:
        save_models(models, config, config.checkpoint)
    return TrainResult(models, history)
