"""A small reverse-mode differentiation engine over numpy arrays.

Operations executed while a :class:`Tape` is active are recorded together
with their adjoint rules; :func:`backward` replays the tape in reverse.
Outside a tape the same functions simply compute values, which is how
inference and finite-difference probes run.

Only the operators the detector needs are provided.  Element-wise ops
follow numpy broadcasting and sum gradients back to the input shapes.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit, ndtr

from . import ssm as _ssm
from .errors import InvalidInputError, NumericError

_SQRT_2PI = np.sqrt(2.0 * np.pi)
BCE_CLAMP = 1e-7


class Tensor:
    """A float64 array that can take part in recorded computations."""

    __slots__ = ("value", "requires_grad", "grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.value

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    adjoint: Callable


@dataclass
class Tape:
    """Ordered record of operations; use as a context manager."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


_TAPES: list[Tape] = []


@contextlib.contextmanager
def no_tape():
    """Temporarily stop recording."""
    saved = _TAPES[:]
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(op: str, value: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite output in {op}", op=op)
    return value


def _record(op: str, inputs, value, adjoint) -> Tensor:
    """Wrap ``value`` and, if needed, put the op on the active tape.

    ``adjoint(g)`` returns one gradient (or ``None``) per input.
    """
    out = Tensor(_check(op, value))
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1].nodes.append(Node(op, tuple(inputs), out, adjoint))
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _same_broadcast(op, *arrays):
    try:
        return np.broadcast_shapes(*(a.shape for a in arrays))
    except ValueError:
        raise InvalidInputError(f"{op}: incompatible shapes {[a.shape for a in arrays]}") from None


# ---------------------------------------------------------------- element-wise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_broadcast("add", a, b)
    return _record("add", (a, b), a.value + b.value,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_broadcast("sub", a, b)
    return _record("sub", (a, b), a.value - b.value,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_broadcast("mul", a, b)
    return _record("mul", (a, b), a.value * b.value,
                   lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _record("scale", (a,), a.value * c, lambda g: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow is reported by _check
        value = np.exp(a.value)
    return _record("exp", (a,), value, lambda g: (g * value,))


def gelu(a) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the standard normal CDF."""
    a = as_tensor(a)
    cdf = ndtr(a.value)
    pdf = np.exp(-0.5 * a.value ** 2) / _SQRT_2PI
    return _record("gelu", (a,), a.value * cdf, lambda g: (g * (cdf + a.value * pdf),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    value = expit(a.value)
    return _record("sigmoid", (a,), value, lambda g: (g * value * (1.0 - value),))


# ---------------------------------------------------------------- shape / reductions

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _record("reshape", (a,), a.value.reshape(shape), lambda g: (g.reshape(a.shape),))


def flip(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    return _record("flip", (a,), np.flip(a.value, axis).copy(), lambda g: (np.flip(g, axis),))


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)

    def adjoint(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", (a,), a.value.sum(axis=axis), adjoint)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]

    def adjoint(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _record("mean", (a,), a.value.mean(axis=axis), adjoint)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """``a @ b`` for arrays of rank >= 2 with numpy batch broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise InvalidInputError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _record("matmul", (a, b), a.value @ b.value,
                   lambda g: (_unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape),
                              _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape)))


def matvec(m, v) -> Tensor:
    """``m @ v`` with ``v`` a vector along its last axis."""
    m, v = as_tensor(m), as_tensor(v)
    if m.ndim < 2 or v.ndim < 1 or m.shape[-1] != v.shape[-1]:
        raise InvalidInputError(f"matvec: incompatible shapes {m.shape} @ {v.shape}")
    value = np.einsum("...ij,...j->...i", m.value, v.value)
    return _record("matvec", (m, v), value,
                   lambda g: (_unbroadcast(g[..., :, None] * v.value[..., None, :], m.shape),
                              _unbroadcast(np.einsum("...ij,...i->...j", m.value, g), v.shape)))


def linear_solve(m, rhs) -> Tensor:
    """Solve ``m x = rhs``; ``rhs`` is ``(..., N)`` or ``(..., N, K)``.

    The adjoint solves with the transposed matrix: ``rhs_bar = m^-T g`` and
    ``m_bar = -rhs_bar x^T``.
    """
    m, rhs = as_tensor(m), as_tensor(rhs)
    vector = rhs.ndim == m.ndim - 1
    r = rhs.value[..., None] if vector else rhs.value
    if m.shape[-1] != m.shape[-2] or r.shape[-2] != m.shape[-1]:
        raise InvalidInputError(f"linear_solve: incompatible shapes {m.shape}, {rhs.shape}")
    try:
        x = np.linalg.solve(m.value, r)
    except np.linalg.LinAlgError:
        raise NumericError("singular matrix in linear_solve", op="linear_solve") from None

    def adjoint(g):
        g = g[..., None] if vector else g
        lam = np.linalg.solve(np.swapaxes(m.value, -1, -2), g)
        m_bar = -lam @ np.swapaxes(x, -1, -2)
        rhs_bar = lam[..., 0] if vector else lam
        return _unbroadcast(m_bar, m.shape), _unbroadcast(rhs_bar, rhs.shape)

    return _record("linear_solve", (m, rhs), x[..., 0] if vector else x, adjoint)


# ---------------------------------------------------------------- network layers

def layer_norm(x, gain, bias, eps: float = 1e-5, axis: int = -1) -> Tensor:
    """Normalise ``x`` over ``axis``; ``gain``/``bias`` broadcast against the result."""
    if not eps > 0:
        raise InvalidInputError("layer_norm eps must be positive")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.value.mean(axis=axis, keepdims=True)
    centred = x.value - mu
    inv_std = 1.0 / np.sqrt((centred ** 2).mean(axis=axis, keepdims=True) + eps)
    xhat = centred * inv_std
    _same_broadcast("layer_norm", x, gain, bias)

    def adjoint(g):
        gx = g * gain.value
        gx = inv_std * (gx - gx.mean(axis=axis, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=axis, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _record("layer_norm", (x, gain, bias), xhat * gain.value + bias.value, adjoint)


def bce_loss(p, y, pos_weight: float = 1.0) -> Tensor:
    """Weighted binary cross-entropy ``-mean(w y ln p + (1-y) ln(1-p))``.

    ``p`` is clamped to ``[1e-7, 1 - 1e-7]``; the clamp passes no gradient.
    """
    p = as_tensor(p)
    y = np.asarray(getattr(y, "value", y), dtype=np.float64)
    if p.shape != y.shape:
        raise InvalidInputError(f"bce_loss: shape mismatch {p.shape} vs {y.shape}")
    q = np.clip(p.value, BCE_CLAMP, 1.0 - BCE_CLAMP)
    inside = (p.value >= BCE_CLAMP) & (p.value <= 1.0 - BCE_CLAMP)
    value = -np.mean(pos_weight * y * np.log(q) + (1.0 - y) * np.log1p(-q))

    def adjoint(g):
        dq = -(pos_weight * y / q - (1.0 - y) / (1.0 - q)) / q.size
        return (g * dq * inside,)

    return _record("bce_loss", (p,), np.asarray(value), adjoint)


# ---------------------------------------------------------------- state-space ops

def ssm_recurrence(a_bar, b_bar, c, d, u) -> Tensor:
    """Run ``x[n] = Abar x[n-1] + Bbar u[n]``, ``y[n] = C x[n] + D u[n]`` per channel.

    Shapes: ``a_bar (H, N, N)``, ``b_bar (H, N)``, ``c (H, N)``, ``d (H,)``,
    ``u (..., H, L)``.  The adjoint runs the recurrence backwards in time.
    """
    a_bar, b_bar, c, d, u = map(as_tensor, (a_bar, b_bar, c, d, u))
    A, B, C, D, U = a_bar.value, b_bar.value, c.value, d.value, u.value
    if U.ndim < 2 or U.shape[-2] != B.shape[0] or A.shape[:-1] != B.shape or C.shape != B.shape:
        raise InvalidInputError("ssm_recurrence: inconsistent shapes")
    L = U.shape[-1]
    U3 = U.reshape((-1,) + U.shape[-2:])
    states = np.empty(U3.shape + (B.shape[-1],))
    x = np.zeros(U3.shape[:-1] + (B.shape[-1],))
    for n in range(L):
        x = np.einsum("hij,bhj->bhi", A, x) + B * U3[..., n, None]
        states[:, :, n, :] = x
    y = np.einsum("bhln,hn->bhl", states, C) + D[:, None] * U3

    def adjoint(g):
        g = g.reshape(U3.shape)
        gC = np.einsum("bhl,bhln->hn", g, states)
        gD = np.einsum("bhl,bhl->h", g, U3)
        gA = np.zeros_like(A)
        gB = np.zeros_like(B)
        gU = g * D[:, None]
        lam = np.zeros_like(x)
        for n in range(L - 1, -1, -1):
            lam = lam + g[..., n, None] * C
            gB = gB + np.einsum("bhi,bh->hi", lam, U3[..., n])
            gU[..., n] += np.einsum("bhi,hi->bh", lam, B)
            if n > 0:
                gA = gA + np.einsum("bhi,bhj->hij", lam, states[:, :, n - 1, :])
            lam = np.einsum("hji,bhj->bhi", A, lam)
        return gA, gB, gC, gD, gU.reshape(U.shape)

    return _record("ssm_recurrence", (a_bar, b_bar, c, d, u), y.reshape(U.shape), adjoint)


def krylov(a_bar, b_bar, c, L: int) -> Tensor:
    """Per-channel kernel ``k[h, j] = C_h Abar_h^j Bbar_h`` for ``j < L``.

    The adjoint accumulates ``lam_j = g_j C + Abar^T lam_{j+1}`` backwards,
    giving ``Bbar_bar = lam_0`` and ``Abar_bar = sum_j lam_{j+1} v_j^T``.
    """
    a_bar, b_bar, c = map(as_tensor, (a_bar, b_bar, c))
    A, B, C = a_bar.value, b_bar.value, c.value
    V = _ssm.krylov_vectors(A, B, L)  # (H, L, N)
    k = (V @ C[..., None])[..., 0]

    def adjoint(g):
        gC = (g[:, None, :] @ V)[:, 0]
        At = np.swapaxes(A, -1, -2)
        lams = np.empty_like(V)
        lam = g[:, L - 1, None, None] * C[..., None]
        lams[:, L - 1] = lam[..., 0]
        for j in range(L - 2, -1, -1):
            lam = At @ lam + g[:, j, None, None] * C[..., None]
            lams[:, j] = lam[..., 0]
        gA = np.swapaxes(lams[:, 1:], -1, -2) @ V[:, :-1]
        return gA, lams[:, 0], gC

    return _record("krylov", (a_bar, b_bar, c), k, adjoint)


def causal_conv(kernel, u) -> Tensor:
    """FFT causal convolution along the last axis; leading axes broadcast."""
    kernel, u = as_tensor(kernel), as_tensor(u)
    if kernel.shape[-1] != u.shape[-1]:
        raise InvalidInputError(f"causal_conv: kernel {kernel.shape} vs input {u.shape}")
    _same_broadcast("causal_conv", kernel, u)
    L = u.shape[-1]
    n = _ssm.fft_length(L)
    Ku = np.fft.rfft(kernel.value, n)
    Uu = np.fft.rfft(u.value, n)
    value = np.fft.irfft(Ku * Uu, n)[..., :L]

    def adjoint(g):
        Gg = np.fft.rfft(g, n)
        gk = np.fft.irfft(Gg * np.conj(Uu), n)[..., :L]
        gu = np.fft.irfft(Gg * np.conj(Ku), n)[..., :L]
        return _unbroadcast(gk, kernel.shape), _unbroadcast(gu, u.shape)

    return _record("causal_conv", (kernel, u), value, adjoint)


# ---------------------------------------------------------------- reverse pass

def backward(tape: Tape, loss: Tensor) -> dict:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns ``{leaf: gradient}`` for every ``requires_grad`` leaf reached and
    stores the gradient on ``leaf.grad`` (replacing earlier values).
    """
    if loss.size != 1:
        raise InvalidInputError(f"loss must be a scalar, got shape {loss.shape}")
    produced = {id(node.output) for node in tape.nodes}
    grads = {id(loss): np.ones_like(loss.value)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.adjoint(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else gi
            if key not in produced:
                leaves[key] = inp
    out = {}
    for key, leaf in leaves.items():
        leaf.grad = grads[key].reshape(leaf.shape)
        out[leaf] = leaf.grad
    return out


# ---------------------------------------------------------------- verification

@dataclass
class GradcheckEntry:
    name: str
    max_rel_error: float
    passed: bool


@dataclass
class GradcheckReport:
    entries: list[GradcheckEntry]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def failures(self) -> list[GradcheckEntry]:
        return [e for e in self.entries if not e.passed]


def gradcheck(closure, params, tolerance: float = 1e-4, step: float = 1e-5,
              floor: float = 1e-6, max_entries: int | None = None, seed: int = 0) -> GradcheckReport:
    """Compare analytic gradients with central finite differences.

    ``closure()`` must rebuild and return the scalar loss from the current
    parameter values.  ``params`` is a list of tensors or a ``{name: tensor}``
    mapping.  The relative error of one entry is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    ``max_entries`` limits the number of probed entries per tensor.
    """
    named = params.items() if isinstance(params, dict) else (
        (p.name or f"param{i}", p) for i, p in enumerate(params))
    named = list(named)
    with Tape() as tape:
        loss = closure()
    grads = backward(tape, loss)
    rng = np.random.default_rng(seed)
    entries = []
    for name, p in named:
        analytic = grads.get(p, np.zeros(p.shape)).ravel()
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        worst = 0.0
        with no_tape():
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                up = float(closure().value)
                flat[i] = orig - step
                down = float(closure().value)
                flat[i] = orig
                numeric = (up - down) / (2 * step)
                denom = max(abs(analytic[i]), abs(numeric), floor)
                worst = max(worst, abs(analytic[i] - numeric) / denom)
        entries.append(GradcheckEntry(name, worst, worst < tolerance))
    return GradcheckReport(entries, tolerance)
