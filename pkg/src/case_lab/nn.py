"""Small reverse-mode autodiff over float64 numpy arrays.

``Tensor`` records the operation that produced it; ``Tensor.backward``
walks the graph in reverse topological order and accumulates ``grad``.
Only the handful of operations the models need are provided.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "requires_grad")

    def __init__(
        self,
        data,
        parents: Sequence["Tensor"] = (),
        backward: Optional[Callable[[np.ndarray], None]] = None,
        requires_grad: bool = False,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self._parents = tuple(parents)
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in self._parents)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def _accumulate(self, g: np.ndarray, owned: bool = False) -> None:
        """Add ``g`` into ``grad``; ``owned`` means ``g`` is a fresh array nobody else holds."""
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = g if owned and g.dtype == np.float64 else np.array(g, dtype=np.float64)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        # Intermediate gradients are rebuilt on every call; parameter grads accumulate.
        for node in order:
            if node._parents:
                node.grad = None
        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic -------------------------------------------------------------
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __getitem__(self, idx) -> "Tensor":
        return take_rows(self, idx)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, (a, b))
    out._backward = lambda g: (a._accumulate(_unbroadcast(g, a.shape)), b._accumulate(_unbroadcast(g, b.shape)))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, (a, b))
    out._backward = lambda g: (a._accumulate(_unbroadcast(g, a.shape)), b._accumulate(-_unbroadcast(g, b.shape)))
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c, (a,))
    out._backward = lambda g: a._accumulate(g * c)
    return out


def take_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx)
    out = Tensor(a.data[idx], (a,))

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    out._backward = backward
    return out


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), parts)

    def backward(g: np.ndarray) -> None:
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        for p, piece in zip(parts, pieces):
            p._accumulate(piece)

    out._backward = backward
    return out


def matmul(x: Tensor, w: Tensor) -> Tensor:
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"cannot multiply input {x.shape} by weights {w.shape}")
    out = Tensor(x.data @ w.data, (x, w))

    def backward(g: np.ndarray) -> None:
        if w.requires_grad:
            w._accumulate(x.data.T @ g, owned=True)
        if x.requires_grad:
            x._accumulate(g @ w.data.T, owned=True)

    out._backward = backward
    return out


def sparse_matmul(x, w: Tensor) -> Tensor:
    """``x @ w`` for a constant scipy sparse matrix ``x``; gradients flow to ``w`` only."""
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"cannot multiply input {x.shape} by weights {w.shape}")
    out = Tensor(np.asarray(x @ w.data), (w,))
    out._backward = lambda g: w._accumulate(np.asarray(x.T @ g), owned=True)
    return out


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` for row-batched ``x``."""
    if b.shape != (w.shape[1],):
        raise ShapeError(f"bias {b.shape} does not match weights {w.shape}")
    return add(matmul(x, w), b)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0), (x,))
    out._backward = lambda g: x._accumulate(g * mask)
    return out


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(x.data.mean(), (x,))
    out._backward = lambda g: x._accumulate(np.full_like(x.data, float(g) / n))
    return out


def weighted_sum(terms: Sequence[tuple[float, Tensor]]) -> Tensor:
    out = Tensor(sum(c * t.data for c, t in terms), [t for _, t in terms])

    def backward(g: np.ndarray) -> None:
        for c, t in terms:
            t._accumulate(g * c)

    out._backward = backward
    return out


# losses --------------------------------------------------------------------


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_xent(logits: np.ndarray, target_index: int) -> tuple[float, np.ndarray]:
    """Loss ``-log softmax(logits)[target]`` and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= target_index < logits.shape[-1]:
        raise IndexError(f"target {target_index} outside {logits.shape[-1]} classes")
    logp = log_softmax(logits)
    grad = np.exp(logp)
    grad[target_index] -= 1.0
    return float(-logp[target_index]), grad


def softmax_xent_batch(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy over rows."""
    targets = np.asarray(targets)
    n, k = logits.shape
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= k:
        raise IndexError(f"targets outside {k} classes")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    out = Tensor(-logp[rows, targets].mean(), (logits,))

    def backward(g: np.ndarray) -> None:
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        logits._accumulate(grad * (float(g) / n))

    out._backward = backward
    return out


def triplet_margin(
    anchor: np.ndarray, positive: np.ndarray, negative: np.ndarray, margin: float = 1.0
) -> tuple[float, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """``max(0, |a-p| - |a-n| + margin)`` with plain L2 distances.

    The subgradient is zero at the hinge kink, and a zero distance
    contributes no gradient.
    """
    a, p, n = (np.asarray(v, dtype=np.float64) for v in (anchor, positive, negative))
    if not (a.shape == p.shape == n.shape):
        raise ShapeError(f"triplet shapes differ: {a.shape}, {p.shape}, {n.shape}")
    if margin <= 0:
        raise ValueError("margin must be positive")
    loss, (ga, gp, gn) = _triplet_rows(a.reshape(1, -1), p.reshape(1, -1), n.reshape(1, -1), margin)
    return float(loss[0]), (ga.reshape(a.shape), gp.reshape(a.shape), gn.reshape(a.shape))


def _triplet_rows(a: np.ndarray, p: np.ndarray, n: np.ndarray, margin: float):
    dp_vec, dn_vec = a - p, a - n
    dp = np.sqrt((dp_vec**2).sum(axis=1))
    dn = np.sqrt((dn_vec**2).sum(axis=1))
    raw = dp - dn + margin
    active = raw > 0
    loss = np.where(active, raw, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        up = np.where((dp > 0)[:, None], dp_vec / dp[:, None], 0.0)
        un = np.where((dn > 0)[:, None], dn_vec / dn[:, None], 0.0)
    act = active[:, None].astype(np.float64)
    ga = act * (up - un)
    gp = -act * up
    gn = act * un
    return loss, (ga, gp, gn)


def triplet_margin_batch(anchor: Tensor, positive: Tensor, negative: Tensor, margin: float = 1.0) -> Tensor:
    """Mean triplet margin loss over rows."""
    if not (anchor.shape == positive.shape == negative.shape):
        raise ShapeError(f"triplet shapes differ: {anchor.shape}, {positive.shape}, {negative.shape}")
    loss, (ga, gp, gn) = _triplet_rows(anchor.data, positive.data, negative.data, margin)
    m = loss.shape[0]
    out = Tensor(loss.mean(), (anchor, positive, negative))

    def backward(g: np.ndarray) -> None:
        c = float(g) / m
        anchor._accumulate(ga * c)
        positive._accumulate(gp * c)
        negative._accumulate(gn * c)

    out._backward = backward
    return out


# parameters and optimisation ---------------------------------------------------


@dataclass
class ParamStore:
    """Named parameters with Adam moment buffers."""

    params: dict[str, Tensor] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def zero_grad(self) -> None:
        """Drop gradients; the next backward pass allocates them afresh."""
        for t in self.params.values():
            t.grad = None

    def grad(self, name: str) -> np.ndarray:
        g = self.params[name].grad
        return np.zeros_like(self.params[name].data) if g is None else g

    def grads_finite(self) -> bool:
        return all(t.grad is None or np.isfinite(t.grad).all() for t in self.params.values())


def init_dense(store: ParamStore, name: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> None:
    """Fan-in scaled uniform weights, zero bias."""
    bound = 1.0 / np.sqrt(fan_in)
    store.add(f"{name}.w", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    store.add(f"{name}.b", np.zeros(fan_out))


_ADAM_CHUNK = 1 << 14


def adam_step(
    store: ParamStore,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamStore:
    """One bias-corrected Adam update, in place; returns ``store``."""
    store.step += 1
    t = store.step
    step_size = lr / (1.0 - beta1**t)
    root_c2 = np.sqrt(1.0 - beta2**t)
    for name, p in store.params.items():
        g = store.grad(name).reshape(-1)
        m = store.m[name].reshape(-1)
        v = store.v[name].reshape(-1)
        w = p.data.reshape(-1)
        # Chunked so the temporaries stay in cache; elementwise, so the result
        # does not depend on the chunk size.
        for lo in range(0, w.size, _ADAM_CHUNK):
            sl = slice(lo, lo + _ADAM_CHUNK)
            gs, ms, vs = g[sl], m[sl], v[sl]
            ms *= beta1
            ms += (1.0 - beta1) * gs
            vs *= beta2
            vs += (1.0 - beta2) * (gs * gs)
            denom = np.sqrt(vs)
            denom /= root_c2
            denom += eps
            w[sl] -= step_size * ms / denom
    return store


# checkpoints -------------------------------------------------------------------


def fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _pack(arrays: dict[str, np.ndarray]) -> dict:
    return {k: {"shape": list(a.shape), "data": a.ravel().tolist()} for k, a in sorted(arrays.items())}


def _unpack(blob: dict) -> dict[str, np.ndarray]:
    return {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in blob.items()}


def checkpoint_text(store: ParamStore, config: dict) -> str:
    doc = {
        "version": CHECKPOINT_VERSION,
        "fingerprint": fingerprint(config),
        "config": config,
        "step": store.step,
        "params": _pack({k: t.data for k, t in store.params.items()}),
        "adam_m": _pack(store.m),
        "adam_v": _pack(store.v),
    }
    return json.dumps(doc, sort_keys=True, default=str)


def save_checkpoint(store: ParamStore, config: dict, path: str | os.PathLike) -> None:
    from .datagen import atomic_write_text

    atomic_write_text(path, checkpoint_text(store, config))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str | os.PathLike, expect_config: Optional[dict] = None) -> tuple[ParamStore, dict]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    if fingerprint(doc["config"]) != doc["fingerprint"]:
        raise CheckpointError("checkpoint fingerprint does not match its stored config")
    if expect_config is not None and fingerprint(expect_config) != doc["fingerprint"]:
        raise CheckpointError("checkpoint was produced by a different configuration")
    store = ParamStore()
    m, v = _unpack(doc["adam_m"]), _unpack(doc["adam_v"])
    for name, value in _unpack(doc["params"]).items():
        store.add(name, value)
        store.m[name] = m[name]
        store.v[name] = v[name]
    store.step = int(doc["step"])
    return store, doc["config"]


def finite_difference_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        grad[i] = (hi - lo) / (2 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def iter_params(stores: Iterable[ParamStore]):
    for s in stores:
        yield from s.params.items()
