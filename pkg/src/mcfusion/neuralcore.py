"""Minimal reverse-mode autodiff over numpy arrays, plus the layers and
optimiser pieces the MDN and fusion networks are built from."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np


class ShapeError(ValueError):
    pass


class TrainingDivergedError(FloatingPointError):
    pass


class GradientCheckError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


# --- graph -------------------------------------------------------------------


class Node:
    """A value in the computation graph.

    ``backward_fn`` maps the gradient of this node to a tuple of gradients,
    one per parent (``None`` for parents that do not need one).
    """

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape})"

    def backward(self, grad=None):
        if grad is None:
            if self.value.size != 1:
                raise ShapeError("backward() without a seed needs a scalar root")
            grad = np.ones_like(self.value)
        order = _topo_order(self)
        for n in order:
            n.grad = None
        self.grad = np.asarray(grad, dtype=float)
        for n in reversed(order):
            if n.backward_fn is None or n.grad is None:
                continue
            grads = n.backward_fn(n.grad)
            for p, g in zip(n.parents, grads):
                if g is None or not p.requires_grad:
                    continue
                p.grad = g if p.grad is None else p.grad + g

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return mul(self, 1.0 / o) if not isinstance(o, Node) else div(self, o)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _topo_order(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        n, done = stack.pop()
        if done:
            order.append(n)
            continue
        if id(n) in seen or not n.requires_grad:
            continue
        seen.add(id(n))
        stack.append((n, True))
        for p in n.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def const(x) -> Node:
    return x if isinstance(x, Node) else Node(x, requires_grad=False)


def leaf(x) -> Node:
    return Node(x, requires_grad=True)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- elementwise / structural ops ---------------------------------------------


def add(a, b) -> Node:
    a, b = const(a), const(b)
    sa, sb = a.shape, b.shape
    return Node(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    a, b = const(a), const(b)
    sa, sb = a.shape, b.shape
    return Node(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Node:
    a, b = const(a), const(b)
    av, bv = a.value, b.value
    return Node(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b) -> Node:
    a, b = const(a), const(b)
    av, bv = a.value, b.value
    out = av / bv
    return Node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def square(a) -> Node:
    a = const(a)
    av = a.value
    return Node(av * av, (a,), lambda g: (2.0 * g * av,))


def exp(a) -> Node:
    a = const(a)
    out = np.exp(a.value)
    return Node(out, (a,), lambda g: (g * out,))


def log(a) -> Node:
    a = const(a)
    av = a.value
    return Node(np.log(av), (a,), lambda g: (g / av,))


def tanh(a) -> Node:
    a = const(a)
    out = np.tanh(a.value)
    return Node(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Node:
    a = const(a)
    out = _sigmoid(a.value)
    return Node(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Node:
    a = const(a)
    mask = a.value > 0
    return Node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def clip(a, lo, hi) -> Node:
    """Clamp values; gradient passes only where the input is inside [lo, hi]."""
    a = const(a)
    mask = (a.value >= lo) & (a.value <= hi)
    return Node(np.clip(a.value, lo, hi), (a,), lambda g: (g * mask,))


def matmul(a, b) -> Node:
    a, b = const(a), const(b)
    av, bv = a.value, b.value
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul shape mismatch {av.shape} @ {bv.shape}")

    def back(g):
        if av.ndim == 1:
            return g @ bv.T, np.outer(av, g)
        return g @ bv.T, av.T @ g

    return Node(av @ bv, (a, b), back)


def reduce_sum(a, axis=None, keepdims=False) -> Node:
    a = const(a)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Node(a.value.sum(axis=axis, keepdims=keepdims), (a,), back)


def reduce_mean(a, axis=None, keepdims=False) -> Node:
    a = const(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def logsumexp(a, axis=-1, keepdims=False) -> Node:
    a = const(a)
    av = a.value
    m = np.max(av, axis=axis, keepdims=True)
    s = np.exp(av - m)
    tot = s.sum(axis=axis, keepdims=True)
    out = m + np.log(tot)
    w = s / tot

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * w,)

    return Node(out if keepdims else np.squeeze(out, axis=axis), (a,), back)


def log_softmax(a, axis=-1) -> Node:
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


def concat(nodes, axis=-1) -> Node:
    nodes = [const(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Node(np.concatenate([n.value for n in nodes], axis=axis), nodes, back)


def getitem(a, idx) -> Node:
    a = const(a)
    shape = a.shape

    fancy = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def back(g):
        out = np.zeros(shape)
        if fancy:
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return Node(a.value[idx], (a,), back)


def reshape(a, shape) -> Node:
    a = const(a)
    old = a.shape
    return Node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


# --- layers ------------------------------------------------------------------


def dense(x, weights, bias) -> Node:
    """``x @ W + b`` with ``W`` stored as (in, out); ``x`` is (in,) or (B, in)."""
    x, weights, bias = const(x), const(weights), const(bias)
    if x.shape[-1] != weights.shape[0] or weights.shape[1] != bias.shape[-1]:
        raise ShapeError(f"dense shapes x{x.shape} W{weights.shape} b{bias.shape}")
    return add(matmul(x, weights), bias)


def dropout(x, rate: float, training: bool, rng: np.random.Generator | int | None = None) -> Node:
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    x = const(x)
    if not training or rate == 0.0:
        return x
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, mask)


@dataclass
class LstmState:
    hidden: Node
    cell: Node

    @classmethod
    def zeros(cls, hidden_size: int, batch: int | None = None) -> "LstmState":
        shape = (hidden_size,) if batch is None else (batch, hidden_size)
        return cls(const(np.zeros(shape)), const(np.zeros(shape)))


def lstm_cell(x, state: LstmState, params: Mapping[str, Node]) -> LstmState:
    """One LSTM step. ``params['W']`` is (in + H, 4H), ``params['b']`` is (4H,);
    gate blocks are ordered input, forget, candidate, output."""
    x = const(x)
    W, b = const(params["W"]), const(params["b"])
    H = state.hidden.shape[-1]
    if W.shape != (x.shape[-1] + H, 4 * H):
        raise ShapeError(f"lstm weight shape {W.shape} for input {x.shape[-1]} / hidden {H}")
    z = dense(concat([x, state.hidden], axis=-1), W, b)
    i = sigmoid(z[..., 0:H])
    f = sigmoid(z[..., H : 2 * H])
    g = tanh(z[..., 2 * H : 3 * H])
    o = sigmoid(z[..., 3 * H : 4 * H])
    c = add(mul(f, state.cell), mul(i, g))
    h = mul(o, tanh(c))
    return LstmState(h, c)


def lstm_sequence(xs, params, hidden_size: int, state: LstmState | None = None) -> list[Node]:
    xs = [const(x) for x in xs]
    if state is None:
        batch = xs[0].shape[0] if xs[0].value.ndim == 2 else None
        state = LstmState.zeros(hidden_size, batch)
    out = []
    for x in xs:
        state = lstm_cell(x, state, params)
        out.append(state.hidden)
    return out


def bilstm_window(features, fwd_params, bwd_params, hidden_size: int) -> list[Node]:
    """Bidirectional LSTM over a short window; returns one (…, 2H) output per
    position, forward and backward hidden states concatenated."""
    features = list(features)
    if not features:
        raise ShapeError("empty window")
    fwd = lstm_sequence(features, fwd_params, hidden_size)
    bwd = lstm_sequence(features[::-1], bwd_params, hidden_size)[::-1]
    return [concat([f, b], axis=-1) for f, b in zip(fwd, bwd)]


# --- parameters & optimisation -------------------------------------------------


class ParamStore:
    """Named parameter arrays with Adam moment accumulators."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=float)
        self.params[name] = value
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        return value

    def add_xavier(self, name, fan_in, fan_out, rng, shape=None):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return self.add(name, rng.uniform(-limit, limit, size=shape or (fan_in, fan_out)))

    def add_dense(self, prefix, n_in, n_out, rng):
        self.add_xavier(f"{prefix}.W", n_in, n_out, rng)
        self.add(f"{prefix}.b", np.zeros(n_out))

    def add_lstm(self, prefix, n_in, hidden, rng, forget_bias=1.0):
        # xavier per gate block
        blocks = [
            rng.uniform(-1, 1, size=(n_in + hidden, hidden)) * np.sqrt(6.0 / (n_in + 2 * hidden))
            for _ in range(4)
        ]
        self.add(f"{prefix}.W", np.concatenate(blocks, axis=1))
        b = np.zeros(4 * hidden)
        b[hidden : 2 * hidden] = forget_bias
        self.add(f"{prefix}.b", b)

    def leaves(self) -> dict[str, Node]:
        return {k: leaf(v) for k, v in self.params.items()}

    def shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self.params.items()}

    def copy(self) -> "ParamStore":
        out = ParamStore()
        out.params = {k: v.copy() for k, v in self.params.items()}
        out.m = {k: v.copy() for k, v in self.m.items()}
        out.v = {k: v.copy() for k, v in self.v.items()}
        out.step = self.step
        return out


def sub_params(leaves: Mapping[str, Node], prefix: str) -> dict[str, Node]:
    p = prefix + "."
    return {k[len(p) :]: v for k, v in leaves.items() if k.startswith(p)}


def collect_grads(leaves: Mapping[str, Node]) -> dict[str, np.ndarray]:
    return {k: (n.grad if n.grad is not None else np.zeros_like(n.value)) for k, n in leaves.items()}


def adam_step(
    store: ParamStore,
    grads: Mapping[str, np.ndarray],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamStore:
    """In-place bias-corrected Adam update; returns ``store`` for chaining."""
    for name, g in grads.items():
        if name not in store.params:
            raise KeyError(name)
        if np.shape(g) != store.params[name].shape:
            raise ShapeError(f"gradient shape {np.shape(g)} for {name} {store.params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient for {name}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, g in grads.items():
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        store.params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


def plateau_scheduler(history, base_lr: float, patience: int = 8, factor: float = 0.7) -> float:
    """Learning rate after a sequence of validation losses.

    The first loss sets the best value; each later loss that does not beat the
    best increments a counter, and when the counter reaches ``patience`` the
    rate is multiplied by ``factor`` and the counter restarts.
    """
    if base_lr <= 0:
        raise ValueError("base_lr must be positive")
    lr, best, bad = base_lr, np.inf, 0
    for loss in history:
        if loss < best:
            best, bad = loss, 0
        else:
            bad += 1
            if bad >= patience:
                lr *= factor
                bad = 0
    return lr


class PlateauScheduler:
    """Stateful counterpart of :func:`plateau_scheduler`."""

    def __init__(self, base_lr: float, patience: int = 8, factor: float = 0.7):
        self.base_lr = base_lr
        self.patience = patience
        self.factor = factor
        self.history: list[float] = []

    def step(self, val_loss: float) -> float:
        self.history.append(float(val_loss))
        return self.lr

    @property
    def lr(self) -> float:
        return plateau_scheduler(self.history, self.base_lr, self.patience, self.factor)


def gradient_check(
    f: Callable[[dict[str, Node]], Node],
    params: Mapping[str, np.ndarray],
    epsilon: float = 1e-6,
) -> float:
    """Max relative error between backprop and central differences over every
    parameter entry."""
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    base = {k: np.array(v, dtype=float) for k, v in params.items()}
    leaves = {k: leaf(v) for k, v in base.items()}
    out = f(leaves)
    if out.value.size != 1:
        raise ShapeError("gradient_check needs a scalar function")
    if not np.isfinite(out.value).all():
        raise GradientCheckError("non-finite function value")
    out.backward()
    worst = 0.0
    for name, arr in base.items():
        analytic = leaves[name].grad
        if analytic is None:
            analytic = np.zeros_like(arr)
        if not np.all(np.isfinite(analytic)):
            raise GradientCheckError(f"non-finite analytic gradient for {name}")
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + epsilon
            fp = float(f({k: const(v) for k, v in base.items()}).value)
            arr[idx] = orig - epsilon
            fm = float(f({k: const(v) for k, v in base.items()}).value)
            arr[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradientCheckError(f"non-finite perturbed value at {name}{idx}")
            numeric = (fp - fm) / (2.0 * epsilon)
            a = analytic[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# --- checkpoints -----------------------------------------------------------------

_MAGIC = b"MCFCKPT\x00"
_VERSION = 1


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    """Versioned binary checkpoint: header, JSON metadata, then named arrays as
    shape-prefixed little-endian float64."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(meta_bytes)), meta_bytes]
    chunks.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8")
        nb = name.encode()
        chunks.append(struct.pack("<H", len(nb)) + nb)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path, expected_shapes: Mapping[str, tuple] | None = None):
    """Returns ``(arrays, meta)``; raises :class:`CheckpointError` when names or
    shapes disagree with ``expected_shapes``."""
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = 8
    version, mlen = struct.unpack_from("<II", data, off)
    off += 8
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(data[off : off + mlen].decode())
    off += mlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(float)
        off += 8 * n
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes")
    if expected_shapes is not None:
        missing = set(expected_shapes) - set(arrays)
        extra = set(arrays) - set(expected_shapes)
        if missing or extra:
            raise CheckpointError(f"{path}: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, shp in expected_shapes.items():
            if tuple(arrays[k].shape) != tuple(shp):
                raise CheckpointError(f"{path}: {k} has shape {arrays[k].shape}, expected {tuple(shp)}")
    return arrays, meta


# --- training loop -----------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


def fit(
    store: ParamStore,
    batch_loss: Callable[[dict[str, Node], np.ndarray, np.random.Generator], Node],
    n_train: int,
    val_loss: Callable[[ParamStore], float],
    epochs: int,
    batch_size: int,
    seed: int,
    lr: float = 1e-3,
    patience: int = 8,
    factor: float = 0.7,
    on_epoch: Callable[[EpochRecord, ParamStore], None] | None = None,
) -> tuple[ParamStore, list[EpochRecord]]:
    """Minibatch Adam with plateau scheduling on the validation loss.

    ``batch_loss(leaves, idx, rng)`` builds the loss graph for the training
    examples ``idx``. Returns the parameters with the best validation loss
    and one record per epoch.
    """
    rng = np.random.default_rng(seed)
    sched = PlateauScheduler(lr, patience, factor)
    best_store, best_val = store.copy(), np.inf
    log = []
    cur_lr = lr
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n_train)
        total, count = 0.0, 0
        for start in range(0, n_train, batch_size):
            idx = order[start : start + batch_size]
            leaves = store.leaves()
            loss = batch_loss(leaves, idx, rng)
            lv = float(loss.value)
            if not np.isfinite(lv):
                raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            adam_step(store, collect_grads(leaves), cur_lr)
            total += lv * len(idx)
            count += len(idx)
        v = float(val_loss(store))
        if not np.isfinite(v):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        rec = EpochRecord(epoch, total / count, v, cur_lr)
        log.append(rec)
        if v < best_val:
            best_val, best_store = v, store.copy()
        if on_epoch is not None:
            on_epoch(rec, store)
        cur_lr = sched.step(v)
    return best_store, log
