"""Minimal reverse-mode autodiff over float64 numpy arrays.

Values are plain ``numpy.ndarray`` (float64, rank 0-3). A :class:`Tape` records
every differentiable op in execution order; :meth:`Tape.backward` replays it in
reverse and writes gradients into the registered :class:`Parameter` objects.

Ops accept an optional leading batch axis, so a rank-3 ``[B, m, k]`` array can
be multiplied by a rank-2 ``[k, n]`` weight; gradients are summed back over the
broadcast axis.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit, ndtr

_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ContractError(ValueError):
    """An op was called with arguments outside its contract (shapes, masks)."""


class NonFiniteError(FloatingPointError):
    def __init__(self, op_name: str):
        super().__init__(f"non-finite value first produced by op '{op_name}'")
        self.op_name = op_name


class Parameter:
    """A named trainable array with a same-shaped gradient buffer."""

    def __init__(self, name: str, value):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Var:
    """A value slot on a tape."""

    __slots__ = ("value", "tape", "index", "requires_grad")

    def __init__(self, value: np.ndarray, tape: "Tape", index: int, requires_grad: bool):
        self.value = value
        self.tape = tape
        self.index = index
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Var):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, index={self.index})"


class _Op:
    __slots__ = ("name", "out", "inputs", "backward")

    def __init__(self, name, out, inputs, backward):
        self.name = name
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of executed ops.

    One tape per forward/backward pass. Not shared between threads.
    """

    def __init__(self, check_finite: bool = True, grad: bool = True):
        self.grad = grad
        self._ops: list[_Op] = []
        self._n = 0
        self._params: dict[int, tuple[Parameter, Var]] = {}
        self.check_finite = check_finite
        self.first_nonfinite: str | None = None

    def __len__(self):
        return len(self._ops)

    def _slot(self, value, requires_grad):
        v = Var(value, self, self._n, requires_grad)
        self._n += 1
        return v

    def param(self, p: Parameter) -> Var:
        """Register ``p`` as a differentiable leaf (idempotent per parameter).

        On a ``grad=False`` tape parameters enter as constants and nothing is recorded.
        """
        hit = self._params.get(id(p))
        if hit is not None:
            return hit[1]
        v = self._slot(p.value, self.grad)
        self._params[id(p)] = (p, v)
        return v

    def const(self, value) -> Var:
        return self._slot(np.asarray(value, dtype=np.float64), False)

    def release(self) -> None:
        """Drop recorded ops and parameter slots.

        Vars and the tape reference each other, so without this the activations of a
        finished step linger until the cycle collector runs.
        """
        self._ops = []
        self._params = {}

    @property
    def parameters(self) -> list[Parameter]:
        return [p for p, _ in self._params.values()]

    def record(self, name: str, value: np.ndarray, inputs: Sequence[Var],
               backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Var:
        requires_grad = any(x.requires_grad for x in inputs)
        if self.check_finite and self.first_nonfinite is None and not np.all(np.isfinite(value)):
            if all(np.all(np.isfinite(x.value)) for x in inputs):
                self.first_nonfinite = name
        out = self._slot(value, requires_grad)
        if requires_grad:
            self._ops.append(_Op(name, out.index, tuple(inputs), backward))
        return out

    def backward(self, loss: Var) -> None:
        """Reverse-mode accumulation from scalar ``loss`` into every registered parameter.

        Parameters that ``loss`` does not depend on get an all-zero gradient.
        """
        if loss.tape is not self:
            raise ContractError("loss was not produced on this tape")
        if loss.value.size != 1 or loss.value.ndim > 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        for op in reversed(self._ops):
            g = grads.pop(op.out, None)
            if g is None:
                continue
            for x, gx in zip(op.inputs, op.backward(g)):
                if gx is None or not x.requires_grad:
                    continue
                prev = grads.get(x.index)
                grads[x.index] = gx if prev is None else prev + gx
        for p, v in self._params.values():
            g = grads.get(v.index)
            p.grad = np.zeros_like(p.value) if g is None else np.array(g, dtype=np.float64).reshape(p.value.shape)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise ContractError("at least one operand must be a tape Var")


def _lift(tape: Tape, x) -> Var:
    return x if isinstance(x, Var) else tape.const(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Var:
    """Matrix product over the last two axes (``[.., m, k] @ [.., k, n]``)."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul: shapes {a.shape} and {b.shape} do not agree")
    av, bv = a.value, b.value
    need_a, need_b = a.requires_grad, b.requires_grad

    if bv.ndim == 2 and av.ndim > 2:
        # batched activations times a weight: one flat GEMM
        a2 = av.reshape(-1, av.shape[-1])

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bv.T).reshape(av.shape) if need_a else None
            gb = a2.T @ g2 if need_b else None
            return ga, gb

        return tape.record("matmul", (a2 @ bv).reshape(av.shape[:-1] + bv.shape[-1:]), (a, b), backward)

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if need_a else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if need_b else None
        return ga, gb

    return tape.record("matmul", av @ bv, (a, b), backward)


def linear(x, w, b) -> Var:
    """``x @ w + b`` for ``x`` of shape ``[.., k]``, ``w`` ``[k, n]``, ``b`` ``[n]``."""
    tape = _tape_of(x, w, b)
    x, w, b = _lift(tape, x), _lift(tape, w), _lift(tape, b)
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != w.shape[1:]:
        raise ContractError(f"linear: shapes {x.shape}, {w.shape}, {b.shape} do not agree")
    xv, wv = x.value, w.value
    x2 = xv.reshape(-1, xv.shape[-1])
    out = x2 @ wv
    out += b.value
    need_x = x.requires_grad

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wv.T).reshape(xv.shape) if need_x else None
        return gx, x2.T @ g2, g2.sum(axis=0)

    return tape.record("linear", out.reshape(xv.shape[:-1] + wv.shape[1:]), (x, w, b), backward)


def transpose(a: Var) -> Var:
    """Swap the last two axes."""
    return a.tape.record("transpose", np.swapaxes(a.value, -1, -2), (a,),
                         lambda g: (np.swapaxes(g, -1, -2),))


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return tape.record("add", a.value + b.value, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return tape.record("sub", a.value - b.value, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Var:
    """Elementwise product (numpy broadcasting)."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast("mul", a, b)
    av, bv = a.value, b.value
    return tape.record("mul", av * bv, (a, b),
                       lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a: Var, c: float) -> Var:
    return a.tape.record("scale", a.value * c, (a,), lambda g: (g * c,))


def gelu(a: Var) -> Var:
    """Exact GELU, ``x * Phi(x)``."""
    x = a.value
    cdf = ndtr(x)

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return a.tape.record("gelu", x * cdf, (a,), backward)


def layer_norm(x: Var, gain: Var, bias: Var, eps: float = 1e-5) -> Var:
    """Normalize over the last axis, then ``gain * xhat + bias``."""
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ContractError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs input {x.shape}")
    xv, gv = x.value, gain.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        dxhat = g * gv
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return x.tape.record("layer_norm", xhat * gv + bias.value, (x, gain, bias), backward)


def row_softmax(t: Var, mask=None) -> Var:
    """Softmax along the last axis.

    With ``mask`` (same shape, 0/1), masked entries act as ``-inf`` and come out
    as exactly 0; a row with no unmasked entry is returned as all zeros.
    """
    tv = t.value
    if mask is None:
        z = tv - tv.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)
    else:
        m = np.asarray(mask.value if isinstance(mask, Var) else mask, dtype=bool)
        if m.shape != tv.shape:
            raise ContractError(f"row_softmax: mask shape {m.shape} vs input {tv.shape}")
        zmax = np.where(m, tv, -np.inf).max(axis=-1, keepdims=True)
        zmax = np.where(np.isfinite(zmax), zmax, 0.0)
        e = np.where(m, np.exp(np.where(m, tv - zmax, 0.0)), 0.0)
        s = e.sum(axis=-1, keepdims=True)
        y = e / np.where(s > 0, s, 1.0)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return t.tape.record("row_softmax", y, (t,), backward)


# ----------------------------------------------------------------------------
# shape plumbing


def take(a: Var, index) -> Var:
    """Basic (slice/int) indexing."""
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return a.tape.record("take", np.array(a.value[index]), (a,), backward)


def gather_rows(table: Var, rows) -> Var:
    """``table[rows]`` for an integer index array (embedding lookup)."""
    rows = np.asarray(rows, dtype=np.intp)
    shape = table.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, rows, g)
        return (full,)

    return table.tape.record("gather_rows", table.value[rows], (table,), backward)


def concat(xs: Sequence[Var], axis: int) -> Var:
    tape = _tape_of(*xs)
    xs = [_lift(tape, x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tape.record("concat", np.concatenate([x.value for x in xs], axis=axis), xs,
                       lambda g: np.split(g, sizes, axis=axis))


def reshape(a: Var, shape) -> Var:
    old = a.shape
    return a.tape.record("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def expand(a: Var, n: int) -> Var:
    """Prepend a batch axis of size ``n`` by repetition."""
    return a.tape.record("expand", np.broadcast_to(a.value, (n,) + a.shape).copy(), (a,),
                         lambda g: (g.sum(axis=0),))


def where(cond, a, b) -> Var:
    """Select ``a`` where ``cond`` is true, else ``b`` (cond is a constant)."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    c = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return tape.record("where", np.where(c, a.value, b.value), (a, b),
                       lambda g: (_unbroadcast(np.where(c, g, 0.0), sa),
                                  _unbroadcast(np.where(c, 0.0, g), sb)))


# ----------------------------------------------------------------------------
# reductions and losses


def sum_all(a: Var) -> Var:
    shape = a.shape
    return a.tape.record("sum", np.asarray(a.value.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: Var) -> Var:
    shape, n = a.shape, a.value.size
    return a.tape.record("mean", np.asarray(a.value.mean()), (a,),
                         lambda g: (np.full(shape, float(g) / n),))


def _frobenius(name, a, b, axes):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.shape != b.shape:
        raise ContractError(f"{name}: shapes {a.shape} and {b.shape} differ")
    diff = a.value - b.value
    d = np.sqrt((diff * diff).sum(axis=axes))
    expand_d = d.reshape(d.shape + (1,) * len(axes))
    # zero-distance subgradient: 0
    safe = np.where(expand_d > 0, expand_d, 1.0)

    def backward(g):
        gg = np.asarray(g).reshape(np.shape(g) + (1,) * len(axes))
        ga = np.where(expand_d > 0, gg * diff / safe, 0.0)
        return ga, -ga

    return tape.record(name, d, (a, b), backward)


def frobenius_distance(a, b) -> Var:
    """``sqrt(sum((a - b)**2))`` over all entries; scalar."""
    nd = (a if isinstance(a, Var) else b).ndim
    return _frobenius("frobenius_distance", a, b, tuple(range(nd)))


def batch_frobenius(a, b) -> Var:
    """Per-sample Frobenius distance of ``[B, m, n]`` stacks; returns ``[B]``."""
    return _frobenius("batch_frobenius", a, b, (-2, -1))


def bce_with_logits(logits: Var, targets) -> Var:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    y = np.asarray(targets, dtype=np.float64)
    z = logits.value
    if y.shape != z.shape:
        raise ContractError(f"bce_with_logits: targets {y.shape} vs logits {z.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("bce_with_logits: targets must be 0 or 1")
    n = z.size
    loss = (np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean()

    def backward(g):
        return (float(g) * (expit(z) - y) / n,)

    return logits.tape.record("bce_with_logits", np.asarray(loss), (logits,), backward)


def masked_mse(pred: Var, target, mask) -> Var:
    """Mean squared error over entries where ``mask`` is 1."""
    t = np.asarray(target, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if t.shape != pred.shape or m.shape != pred.shape:
        raise ContractError(f"masked_mse: pred {pred.shape}, target {t.shape}, mask {m.shape}")
    count = m.sum()
    if count <= 0:
        raise ContractError("masked_mse: mask selects no entries")
    diff = (pred.value - t) * m
    return pred.tape.record("masked_mse", np.asarray((diff * diff).sum() / count), (pred,),
                            lambda g: (float(g) * 2.0 * diff / count,))


# ----------------------------------------------------------------------------
# verification


def grad_check(loss_fn: Callable[[Tape], Var], params: Sequence[Parameter], eps: float = 1e-5) -> float:
    """Max relative error between backward() and central finite differences.

    ``loss_fn`` builds the loss on the tape it is given, reading parameter
    values through ``tape.param``. Every coordinate of every parameter is probed.
    Relative error is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if eps <= 0:
        raise ContractError("grad_check: eps must be positive")
    tape = Tape()
    for p in params:
        tape.param(p)
    tape.backward(loss_fn(tape))
    analytic = {id(p): p.grad.copy() for p in params}

    def value():
        return float(loss_fn(Tape(check_finite=False)).value)

    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        an = analytic[id(p)].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = value()
            flat[i] = orig - eps
            down = value()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            err = abs(an[i] - num) / max(1e-8, abs(an[i]) + abs(num))
            worst = max(worst, err)
    return worst
