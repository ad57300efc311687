"""Dense float64 tensors with tape-based reverse-mode differentiation.

The primitive set is intentionally small: enough to express modular layers,
gated recurrent cells, and the Gaussian / categorical output likelihoods.
A computation is recorded on a ``Tape`` (a context manager); tensors built
while no tape is active are plain values and cost no bookkeeping.
"""

from __future__ import annotations

import contextvars
import math

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)

# Logits pushed this far down vanish exactly under softmax in float64.
NEG_MASK = -1e30


class ShapeError(ValueError):
    """Operands do not conform to a primitive's signature."""


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "modnet_active_tape", default=None
)


def active_tape() -> "Tape | None":
    return _ACTIVE_TAPE.get()


class Parameter:
    """A named, persistent float64 array updated by an optimizer."""

    __slots__ = ("name", "data")

    def __init__(self, data, name: str = ""):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class Tensor:
    """A float64 array, optionally bound to a node of the active tape."""

    __slots__ = ("data", "node", "tape")

    def __init__(self, data, node: int | None = None, tape: "Tape | None" = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node = node
        self.tape = tape

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, node={self.node})"


class _Record:
    __slots__ = ("kind", "out", "pulls")

    def __init__(self, kind, out, pulls):
        self.kind = kind
        self.out = out
        # pulls: list of (input node id, fn(grad_out) -> grad contribution)
        self.pulls = pulls


class Tape:
    """Ordered record of primitive applications for one reverse sweep.

    Use as a context manager; primitives applied inside the ``with`` block
    whose inputs carry gradients are appended to the record.  ``backward``
    walks the record once, strictly in reverse.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._next_node = 0
        self._watched: dict[int, tuple[int, Parameter]] = {}
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self._records)

    def _new_node(self) -> int:
        node = self._next_node
        self._next_node += 1
        return node

    def watch(self, param: Parameter) -> Tensor:
        """Register a parameter as a leaf; repeated watches share one node."""
        entry = self._watched.get(id(param))
        if entry is None:
            node = self._new_node()
            self._watched[id(param)] = (node, param)
        else:
            node = entry[0]
        return Tensor(param.data, node, self)

    def record(self, kind: str, out_data, pulls) -> Tensor:
        node = self._new_node()
        self._records.append(_Record(kind, node, pulls))
        return Tensor(out_data, node, self)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradients of a scalar loss with respect to every watched leaf.

        Returns a map node-id -> gradient array.  Watched leaves that never
        fed the loss get exact zero gradients of their own shape.
        """
        if loss.tape is not self or loss.node is None:
            raise ValueError("backward: loss was not produced on this tape")
        if loss.data.ndim != 0:
            raise ValueError(
                f"backward: loss must be a scalar, got shape {loss.data.shape}"
            )
        grads: dict[int, np.ndarray] = {loss.node: np.ones((), dtype=np.float64)}
        for rec in reversed(self._records):
            g = grads.pop(rec.out, None)
            if g is None:
                continue
            for node, pull in rec.pulls:
                contrib = pull(g)
                prev = grads.get(node)
                grads[node] = contrib if prev is None else prev + contrib
        out: dict[int, np.ndarray] = {}
        for node, param in self._watched.values():
            g = grads.get(node)
            out[node] = np.zeros_like(param.data) if g is None else np.asarray(g)
        # expose surviving non-leaf grads too (inputs watched as Tensors)
        for node, g in grads.items():
            out.setdefault(node, np.asarray(g))
        return out

    def grad(self, grads: dict[int, np.ndarray], ref) -> np.ndarray:
        """Look up the gradient of a watched Parameter or a node-bound Tensor."""
        if isinstance(ref, Parameter):
            entry = self._watched.get(id(ref))
            if entry is None:
                return np.zeros_like(ref.data)
            return grads.get(entry[0], np.zeros_like(ref.data))
        if isinstance(ref, Tensor) and ref.node is not None:
            return grads.get(ref.node, np.zeros_like(ref.data))
        raise KeyError("grad: reference is not tracked on this tape")

    def parameter_grads(
        self, grads: dict[int, np.ndarray], params=None
    ) -> dict[Parameter, np.ndarray]:
        """Per-parameter gradient dict; zero-filled for unused params."""
        if params is None:
            return {p: grads[node] for node, p in self._watched.values()}
        return {p: self.grad(grads, p) for p in params}


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        tape = active_tape()
        return tape.watch(x) if tape is not None else Tensor(x.data)
    return Tensor(np.asarray(x, dtype=np.float64))


def constant(x) -> Tensor:
    """Detach: a value-only tensor that blocks gradient flow."""
    if isinstance(x, Tensor):
        return Tensor(x.data)
    if isinstance(x, Parameter):
        return Tensor(x.data)
    return Tensor(np.asarray(x, dtype=np.float64))


def _emit(kind: str, out_data, inputs: list[Tensor], pull_fns) -> Tensor:
    """Record the op if a tape is active and any input is on it."""
    tape = active_tape()
    if tape is None:
        return Tensor(out_data)
    pulls = [
        (t.node, fn)
        for t, fn in zip(inputs, pull_fns)
        if t.node is not None and t.tape is tape and fn is not None
    ]
    if not pulls:
        return Tensor(out_data)
    return tape.record(kind, out_data, pulls)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = a.data @ b.data
    ad, bd = a.data, b.data
    return _emit(
        "matmul",
        out,
        [a, b],
        [lambda g: g @ bd.T, lambda g: ad.T @ g],
    )


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    ash, bsh = a.shape, b.shape
    return _emit(
        "add",
        a.data + b.data,
        [a, b],
        [lambda g: _unbroadcast(g, ash), lambda g: _unbroadcast(g, bsh)],
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"elementwise-mul: shapes {a.shape} and {b.shape} do not broadcast"
        )
    ad, bd = a.data, b.data
    return _emit(
        "elementwise-mul",
        ad * bd,
        [a, b],
        [
            lambda g: _unbroadcast(g * bd, ad.shape),
            lambda g: _unbroadcast(g * ad, bd.shape),
        ],
    )


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = (x.data > 0).astype(np.float64)  # subgradient at 0 is 0
    return _emit("relu", x.data * mask, [x], [lambda g: g * mask])


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit("sigmoid", out, [x], [lambda g: g * out * (1.0 - out)])


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)
    return _emit("tanh", out, [x], [lambda g: g * (1.0 - out * out)])


def softplus(x) -> Tensor:
    x = _as_tensor(x)
    out = np.logaddexp(0.0, x.data)
    xd = x.data

    def pull(g):
        s = np.empty_like(xd)
        pos = xd >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
        ex = np.exp(xd[~pos])
        s[~pos] = ex / (1.0 + ex)
        return g * s

    return _emit("softplus", out, [x], [pull])


def row_softmax(x) -> Tensor:
    """Stabilized softmax along the last axis."""
    x = _as_tensor(x)
    if x.ndim < 1:
        raise ShapeError(f"row-softmax: needs at least 1 axis, got shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return _emit(
        "row-softmax",
        p,
        [x],
        [lambda g: p * (g - (g * p).sum(axis=-1, keepdims=True))],
    )


def concat_last(*xs) -> Tensor:
    ts = [_as_tensor(x) for x in xs]
    if not ts:
        raise ShapeError("concat-last-axis: no inputs")
    lead = ts[0].shape[:-1]
    for t in ts[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(
                "concat-last-axis: leading shapes differ: "
                f"{[t.shape for t in ts]}"
            )
    out = np.concatenate([t.data for t in ts], axis=-1)
    widths = [t.shape[-1] for t in ts]
    offsets = np.cumsum([0] + widths)

    def make_pull(i):
        lo, hi = offsets[i], offsets[i + 1]
        return lambda g: g[..., lo:hi]

    return _emit("concat-last-axis", out, ts, [make_pull(i) for i in range(len(ts))])


def sum_over_axis(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    if axis is None:
        out = x.data.sum()
        return _emit(
            "sum-over-axis", out, [x], [lambda g: np.full(shape, g, dtype=np.float64)]
        )
    ax = axis if axis >= 0 else x.ndim + axis
    if not 0 <= ax < x.ndim:
        raise ShapeError(f"sum-over-axis: axis {axis} invalid for shape {shape}")
    out = x.data.sum(axis=ax, keepdims=keepdims)

    def pull(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return np.broadcast_to(g, shape)

    return _emit("sum-over-axis", out, [x], [pull])


def embedding_lookup(table, ids) -> Tensor:
    table = _as_tensor(table)
    if table.ndim != 2:
        raise ShapeError(f"embedding-lookup: table must be 2-D, got {table.shape}")
    idx = np.asarray(ids)
    if idx.dtype.kind not in "iu":
        raise ShapeError("embedding-lookup: ids must be integers")
    vocab = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise ShapeError(
            f"embedding-lookup: id out of range [0, {vocab}): "
            f"min={idx.min()}, max={idx.max()}"
        )
    out = table.data[idx]
    tshape = table.shape

    def pull(g):
        dt = np.zeros(tshape, dtype=np.float64)
        np.add.at(dt, idx.reshape(-1), g.reshape(-1, tshape[1]))
        return dt

    return _emit("embedding-lookup", out, [table], [pull])


def gaussian_log_density(y, mean) -> Tensor:
    """Row-wise log N(y; mean, I): -0.5*||y-mean||^2 - (d/2)*log(2*pi)."""
    y, mean = _as_tensor(y), _as_tensor(mean)
    if y.shape != mean.shape:
        raise ShapeError(
            f"gaussian-log-density: shapes {y.shape} and {mean.shape} differ"
        )
    if y.ndim < 1:
        raise ShapeError("gaussian-log-density: needs at least 1 axis")
    diff = y.data - mean.data
    d = y.shape[-1]
    out = -0.5 * (diff * diff).sum(axis=-1) - 0.5 * d * LOG_2PI
    return _emit(
        "gaussian-log-density",
        out,
        [y, mean],
        [
            lambda g: -np.expand_dims(g, -1) * diff,
            lambda g: np.expand_dims(g, -1) * diff,
        ],
    )


def categorical_log_prob(logits, targets) -> Tensor:
    """log softmax(logits)[target] along the last axis, stabilized."""
    logits = _as_tensor(logits)
    idx = np.asarray(targets)
    if idx.dtype.kind not in "iu":
        raise ShapeError("categorical-log-prob: targets must be integers")
    if logits.ndim < 1 or idx.shape != logits.shape[:-1]:
        raise ShapeError(
            f"categorical-log-prob: targets shape {idx.shape} does not match "
            f"logits shape {logits.shape}"
        )
    n = logits.shape[-1]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(
            f"categorical-log-prob: target out of range [0, {n}): "
            f"min={idx.min()}, max={idx.max()}"
        )
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    out = np.take_along_axis(logp, idx[..., None], axis=-1)[..., 0]

    def pull(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
        return np.expand_dims(g, -1) * (onehot - p)

    return _emit("categorical-log-prob", out, [logits], [pull])


_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "elementwise-mul": mul,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softplus": softplus,
    "row-softmax": row_softmax,
    "concat-last-axis": concat_last,
    "sum-over-axis": sum_over_axis,
    "embedding-lookup": embedding_lookup,
    "gaussian-log-density": gaussian_log_density,
    "categorical-log-prob": categorical_log_prob,
}


def apply_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ShapeError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **kwargs)


def mean_all(x) -> Tensor:
    """Scalar mean of all elements (sum primitive scaled by a constant)."""
    x = _as_tensor(x)
    return mul(sum_over_axis(x), 1.0 / x.data.size)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(fn, params, step: float = 1e-5, skip=None) -> float:
    """Max relative error between analytic gradients and central differences.

    ``fn`` is a zero-argument callable returning a scalar Tensor; it must
    reach every parameter in ``params`` through the recorded primitives.
    ``skip`` optionally maps a Parameter to a boolean mask of coordinates to
    exclude (e.g. relu inputs sitting exactly on the kink).

    Relative error per coordinate: |analytic - numeric| /
    max(|analytic|, |numeric|, 1e-8).
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    params = list(params)
    skip = skip or {}
    with Tape() as tape:
        loss = fn()
    grads = tape.backward(loss)
    analytic = {p: tape.grad(grads, p) for p in params}

    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        a = analytic[p].reshape(-1)
        mask = skip.get(p)
        mask = None if mask is None else np.asarray(mask).reshape(-1)
        for i in range(flat.size):
            if mask is not None and mask[i]:
                continue
            orig = flat[i]
            flat[i] = orig + step
            hi = float(fn().data)
            flat[i] = orig - step
            lo = float(fn().data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            if not (math.isfinite(numeric) and math.isfinite(a[i])):
                raise ArithmeticError(
                    f"grad_check: non-finite value at {p.name}[{i}]: "
                    f"analytic={a[i]}, numeric={numeric}"
                )
            err = abs(a[i] - numeric) / max(abs(a[i]), abs(numeric), 1e-8)
            if err > worst:
                worst = err
    return worst
