"""
numerics.py  --  float64 tensors with reverse-mode gradients

Every op takes Tensors, returns a new Tensor and, when any input needs a
gradient, records a closure that maps the output gradient to input gradients.
backward(loss) walks the recorded graph in reverse topological order, adds
gradients into the leaf parameters' .grad buffers and frees the graph.

Arrays carry an optional leading batch axis; ops work on the last axis.

Config (env vars):
  MORPHSEQ_DEBUG   "1" -> every op checks its output for NaN/Inf

Checkpoint format ("MSQ1"):
  magic, then per parameter in store order: name length (u64), name bytes,
  rank (u64), dims (u64 each), values (f64), all little-endian.
"""
from __future__ import annotations

import logging
import os
import struct
import threading
from contextlib import contextmanager
from functools import reduce
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from text_pipeline import DataError

logger = logging.getLogger(__name__)

DEBUG_FINITE = os.getenv("MORPHSEQ_DEBUG", "0") not in ("", "0")
LOG_EPS = 1e-12
CHECKPOINT_MAGIC = b"MSQ1"

_grad_mode = threading.local()   # per thread: translate may decode in a pool


class GraphError(RuntimeError):
    pass


# ── Tensor ────────────────────────────────────────────────────────────────────

class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_freed")

    def __init__(self, data, requires_grad: bool = False,
                 parents: tuple = (), backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self._freed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view."""
        return self.data.reshape(-1)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    if DEBUG_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from {backward.__qualname__.split('.')[0]}")
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    prev = grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = prev


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ── Elementwise ops ───────────────────────────────────────────────────────────

def add(a: Tensor, b: Tensor) -> Tensor:
    def add_backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _node(a.data + b.data, (a, b), add_backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def sub_backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)
    return _node(a.data - b.data, (a, b), sub_backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def mul_backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _node(a.data * b.data, (a, b), mul_backward)


def scale(a: Tensor, c: float) -> Tensor:
    def scale_backward(g):
        return (g * c,)
    return _node(a.data * c, (a,), scale_backward)


def one_minus(a: Tensor) -> Tensor:
    def one_minus_backward(g):
        return (-g,)
    return _node(1.0 - a.data, (a,), one_minus_backward)


def sigmoid(a: Tensor) -> Tensor:
    # tanh form: no overflow, sigmoid(0) == 0.5 and sigmoid(-inf) == 0 exactly
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def sigmoid_backward(g):
        return (g * out * (1.0 - out),)
    return _node(out, (a,), sigmoid_backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def tanh_backward(g):
        return (g * (1.0 - out * out),)
    return _node(out, (a,), tanh_backward)


# ── Shape ops ─────────────────────────────────────────────────────────────────

def matmul(a: Tensor, w: Tensor) -> Tensor:
    """a[..., k] @ w[k, n]."""
    if a.shape[-1] != w.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {w.shape}")

    def matmul_backward(g):
        ga = g @ w.data.T
        gw = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gw
    return _node(a.data @ w.data, (a, w), matmul_backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def concat_backward(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), concat_backward)


def stack(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    def stack_backward(g):
        return tuple(np.moveaxis(g, axis, 0))
    return _node(np.stack([p.data for p in parts], axis=axis), tuple(parts), stack_backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def reshape_backward(g):
        return (g.reshape(a.shape),)
    return _node(a.data.reshape(shape), (a,), reshape_backward)


def take_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    """a[rows] along the leading axis; repeated rows accumulate gradient."""
    rows = np.asarray(rows, dtype=np.int64)

    def take_rows_backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, rows, g)
        return (ga,)
    return _node(a.data[rows], (a,), take_rows_backward)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for embedding of size {table.shape[0]}")
    return take_rows(table, ids)


def sum_all(a: Tensor) -> Tensor:
    def sum_all_backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)
    return _node(np.asarray(a.data.sum()), (a,), sum_all_backward)


def weighted_sum(weights: Tensor, rows: Tensor) -> Tensor:
    """weights[b, m] . rows[b, m, d] -> [b, d]."""
    def weighted_sum_backward(g):
        gw = np.einsum("bd,bmd->bm", g, rows.data)
        gr = weights.data[:, :, None] * g[:, None, :]
        return gw, gr
    return _node(np.einsum("bm,bmd->bd", weights.data, rows.data), (weights, rows),
                 weighted_sum_backward)


# ── Probability ops ───────────────────────────────────────────────────────────

def softmax(logits: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; masked-out entries get probability 0."""
    if logits.shape[-1] == 0:
        raise ValueError("empty distribution")
    z = logits.data if mask is None else np.where(mask, logits.data, -np.inf)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def softmax_backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)
    return _node(p, (logits,), softmax_backward)


def cross_entropy(dist: Tensor, gold, mask: np.ndarray | None = None) -> Tensor:
    """sum of -log(dist[gold] + 1e-12) over the (masked) leading positions."""
    gold = np.asarray(gold, dtype=np.int64)
    n = dist.shape[-1]
    if gold.size and (gold.min() < 0 or gold.max() >= n):
        raise IndexError(f"gold index out of range for distribution of size {n}")
    flat = dist.data.reshape(-1, n)
    g_flat = gold.reshape(-1)
    w = np.ones(g_flat.shape) if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1)
    picked = flat[np.arange(len(g_flat)), g_flat]
    loss = -(w * np.log(picked + LOG_EPS)).sum()

    def cross_entropy_backward(g):
        gd = np.zeros_like(flat)
        gd[np.arange(len(g_flat)), g_flat] = -g * w / (picked + LOG_EPS)
        return (gd.reshape(dist.shape),)
    return _node(np.asarray(loss), (dist,), cross_entropy_backward)


# ── Randomness ────────────────────────────────────────────────────────────────

class Rng:
    """Counter-based stream (Philox); same seed, same numbers on every platform."""

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(key)
        ss = np.random.SeedSequence([self.seed, *self.key])
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *key: int) -> Rng:
        return Rng(self.seed, self.key + tuple(key))

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def random(self, shape) -> np.ndarray:
        return self._gen.random(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int) -> int:
        return int(self._gen.integers(low, high))

    def choice(self, seq: Sequence):
        return seq[self.integers(0, len(seq))]

    def bernoulli(self, p: float) -> bool:
        return bool(self._gen.random() < p)


def dropout(x: Tensor, rate: float, rng: Rng | None, training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate); identity at inference."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))


# ── Parameters ────────────────────────────────────────────────────────────────

class ParamStore:
    """Named trainable tensors in insertion order."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, values) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def clear_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def copy(self) -> ParamStore:
        out = ParamStore()
        for name, t in self._params.items():
            out.add(name, t.data.copy())
        return out

    def load_values(self, other: ParamStore) -> None:
        for name, t in self._params.items():
            t.data = other[name].data.copy()

    @staticmethod
    def average(stores: Sequence[ParamStore]) -> ParamStore:
        if not stores:
            raise ValueError("nothing to average")
        out = ParamStore()
        for name in stores[0]:
            total = reduce(np.add, [s[name].data for s in stores])
            out.add(name, total / len(stores))
        return out


def init_uniform(params: ParamStore, name: str, shape: tuple[int, ...],
                 rng: Rng, scale_: float = 0.08) -> Tensor:
    return params.add(name, rng.uniform(-scale_, scale_, shape))


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((t.grad ** 2).sum()) for _, t in params.items()
                             if t.grad is not None)))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for _, t in params.items():
            if t.grad is not None:
                t.grad *= factor
    return norm


# ── GRU ───────────────────────────────────────────────────────────────────────

GRU_WEIGHTS = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")


def init_gru(params: ParamStore, prefix: str, d_in: int, d_h: int,
             rng: Rng, scale_: float = 0.08) -> None:
    for gate in "zrh":
        init_uniform(params, f"{prefix}.W_{gate}", (d_in, d_h), rng, scale_)
        init_uniform(params, f"{prefix}.U_{gate}", (d_h, d_h), rng, scale_)
        init_uniform(params, f"{prefix}.b_{gate}", (d_h,), rng, scale_)


def gru_step(x: Tensor, h_prev: Tensor, params: ParamStore, prefix: str) -> Tensor:
    """
    z  = sigmoid(x W_z + h_prev U_z + b_z)
    r  = sigmoid(x W_r + h_prev U_r + b_r)
    h~ = tanh(x W_h + (r * h_prev) U_h + b_h)
    h  = (1 - z) * h_prev + z * h~
    """
    d_in, d_h = x.shape[-1], h_prev.shape[-1]
    w = {}
    for name in GRU_WEIGHTS:
        t = params[f"{prefix}.{name}"]
        expected = {"W": (d_in, d_h), "U": (d_h, d_h), "b": (d_h,)}[name[0]]
        if t.shape != expected:
            raise ValueError(f"GRU parameter {prefix}.{name} has shape {t.shape}, expected {expected}")
        w[name] = t
    z = sigmoid(add(add(matmul(x, w["W_z"]), matmul(h_prev, w["U_z"])), w["b_z"]))
    r = sigmoid(add(add(matmul(x, w["W_r"]), matmul(h_prev, w["U_r"])), w["b_r"]))
    h_tilde = tanh(add(add(matmul(x, w["W_h"]), matmul(mul(r, h_prev), w["U_h"])), w["b_h"]))
    return add(mul(one_minus(z), h_prev), mul(z, h_tilde))


# ── Backward ──────────────────────────────────────────────────────────────────

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable leaf's .grad, then free the graph."""
    if loss._freed:
        raise GraphError("backward called twice on the same graph; run the forward pass again")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    loss._freed = True
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g if node.grad is None else node.grad + g
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if parent.requires_grad and pg is not None:
                    prev = grads.get(id(parent))
                    grads[id(parent)] = pg if prev is None else prev + pg
        node._parents = ()
        node._backward = None


def finite_diff_check(f: Callable[[ParamStore], Tensor], params: ParamStore,
                      h: float = 1e-5, names: Sequence[str] | None = None,
                      floor: float = 1e-8) -> float:
    """
    Max relative error between backward() and central differences, denominator
    max(|a|, |b|, floor). For whole-model losses raise `floor` to about 1e-5:
    below it the difference quotient is dominated by rounding in f.
    """
    params.zero_grad()
    backward(f(params))
    worst = 0.0
    for name in names or list(params):
        t = params[name]
        analytic = t.grad.reshape(-1).copy()
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                plus = f(params).item()
                flat[i] = orig - h
                minus = f(params).item()
            flat[i] = orig
            numeric = (plus - minus) / (2 * h)
            a = analytic[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if err > worst:
                worst = err
                logger.debug("finite diff %s[%d]: analytic %.3e numeric %.3e", name, i, a, numeric)
    return worst


# ── Checkpoints ───────────────────────────────────────────────────────────────

def save_checkpoint(params: ParamStore, path: str | Path) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        for name, t in params.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<Q", len(raw)))
            f.write(raw)
            f.write(struct.pack("<Q", t.data.ndim))
            f.write(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> ParamStore:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    params, pos = ParamStore(), 4
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            values = np.frombuffer(blob, dtype="<f8", count=count, offset=pos)
            pos += 8 * count
            params.add(name, values.reshape(dims).astype(np.float64))
    except (struct.error, ValueError) as e:
        raise DataError(f"{path}: truncated checkpoint ({e})") from None
    return params
