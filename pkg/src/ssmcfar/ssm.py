"""Linear state-space machinery.

Continuous system ``x' = A x + B u``, ``y = C x + D u``; its trapezoidal
(bilinear) discretisation; the step recurrence; the convolution kernel
``k[j] = C Abar^j Bbar``; and FFT evaluation of the causal convolution
``y = k * u + D u``.  A Picard fixed-point solver is kept alongside as an
independent check on the recurrence.

Everything runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, SingularityError


@dataclass
class ContinuousSSM:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: float = 0.0

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_1d(np.asarray(self.B, dtype=float))
        self.C = np.atleast_1d(np.asarray(self.C, dtype=float))
        n = self.A.shape[0]
        if n < 1 or self.A.shape != (n, n) or self.B.shape != (n,) or self.C.shape != (n,):
            raise InvalidInputError("A must be NxN and B, C length-N vectors")
        if not all(np.all(np.isfinite(m)) for m in (self.A, self.B, self.C, self.D)):
            raise InvalidInputError("state-space matrices must be finite")

    @property
    def N(self) -> int:
        return self.A.shape[0]


@dataclass
class DiscreteSSM:
    A_bar: np.ndarray
    B_bar: np.ndarray
    C: np.ndarray
    D: float
    dt: float

    def __post_init__(self):
        self.A_bar = np.atleast_2d(np.asarray(self.A_bar, dtype=float))
        self.B_bar = np.atleast_1d(np.asarray(self.B_bar, dtype=float))
        self.C = np.atleast_1d(np.asarray(self.C, dtype=float))
        if not self.dt > 0:
            raise InvalidInputError("dt must be positive")

    @property
    def N(self) -> int:
        return self.A_bar.shape[0]


def hippo_legt(N: int, theta: float = 1.0):
    """Translated-Legendre memory pair ``(A, B)`` for a sliding window of length ``theta``.

    ``A[n, k] = -(2n+1)/theta * ((-1)^(n-k) if n >= k else 1)`` and
    ``B[n] = (2n+1)/theta * (-1)^n``.  The state then holds the shifted
    Legendre coefficients of the last ``theta`` time units of input; see
    :func:`legt_reconstruct`.
    """
    if int(N) != N or N < 1:
        raise InvalidInputError(f"N must be a positive integer, got {N}")
    if not theta > 0:
        raise InvalidInputError(f"theta must be positive, got {theta}")
    n = np.arange(N)
    sign = np.where(n[:, None] >= n[None, :], (-1.0) ** (n[:, None] - n[None, :]), 1.0)
    A = -(2 * n[:, None] + 1) * sign / theta
    B = (2 * n + 1) * (-1.0) ** n / theta
    return A, B.astype(float)


def legt_reconstruct(state: np.ndarray, lags: np.ndarray, theta: float = 1.0) -> np.ndarray:
    """Rebuild ``u(t - lag)`` for ``0 <= lag <= theta`` from a LegT state at time ``t``."""
    from scipy.special import eval_legendre

    n = np.arange(state.shape[-1])
    basis = eval_legendre(n[None, :], 2.0 * np.asarray(lags)[:, None] / theta - 1.0)
    return basis @ state


def discretize_bilinear(ssm: ContinuousSSM, dt: float) -> DiscreteSSM:
    """Trapezoidal-rule discretisation.

    ``Abar = (I - dt/2 A)^-1 (I + dt/2 A)``, ``Bbar = (I - dt/2 A)^-1 dt B``.
    """
    if not dt > 0:
        raise InvalidInputError(f"dt must be positive, got {dt}")
    eye = np.eye(ssm.N)
    lhs = eye - dt / 2 * ssm.A
    rhs = np.column_stack([eye + dt / 2 * ssm.A, dt * ssm.B])
    try:
        sol = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError:
        raise SingularityError(dt) from None
    if not np.all(np.isfinite(sol)) or np.linalg.cond(lhs) > 1e15:
        raise SingularityError(dt)
    return DiscreteSSM(sol[:, :-1], sol[:, -1], ssm.C.copy(), float(ssm.D), float(dt))


def picard_solve(ssm: ContinuousSSM, u, dt: float, iterations: int, return_history: bool = False):
    """Picard fixed-point iteration on the integral form of ``x' = A x + B u``.

    The grid has uniform spacing ``dt``; ``x[n]`` is the state one step after
    ``x[n-1]`` with ``x[-1] = 0``.  Each sweep rebuilds the whole trajectory
    from the trapezoidal increments ``dt/2 A (x[n] + x[n-1]) + dt B u[n]``
    evaluated on the previous sweep, starting from the zero trajectory.
    The fixed point is the bilinear recurrence, so this is a slow but
    independent route to the same states.
    """
    u = np.asarray(u, dtype=float)
    if u.ndim != 1:
        raise InvalidInputError("u must be a 1D sequence")
    x = np.zeros((u.size, ssm.N))
    history = [x]
    drive = dt * np.outer(u, ssm.B)
    for _ in range(iterations):
        prev = np.vstack([np.zeros((1, ssm.N)), x[:-1]])
        increments = dt / 2 * (x + prev) @ ssm.A.T + drive
        x = np.cumsum(increments, axis=0)
        history.append(x)
    return (x, history) if return_history else x


def ssm_recurrent_forward(dssm: DiscreteSSM, u, return_states: bool = False):
    """Step the recurrence ``x[n] = Abar x[n-1] + Bbar u[n]`` from ``x[-1] = 0``."""
    u = np.asarray(u, dtype=float)
    if u.ndim != 1 or u.size < 1:
        raise InvalidInputError("u must be a non-empty 1D sequence")
    x = np.zeros(dssm.N)
    states = np.empty((u.size, dssm.N))
    for n, un in enumerate(u):
        x = dssm.A_bar @ x + dssm.B_bar * un
        states[n] = x
    y = states @ dssm.C + dssm.D * u
    return (y, states) if return_states else y


def krylov_vectors(A_bar: np.ndarray, B_bar: np.ndarray, L: int) -> np.ndarray:
    """``[Bbar, Abar Bbar, ..., Abar^(L-1) Bbar]`` by repeated mat-vec products.

    Accepts a leading batch axis: ``A_bar`` of shape ``(..., N, N)`` and
    ``B_bar`` of shape ``(..., N)`` give ``(..., L, N)``.
    """
    if L < 1:
        raise InvalidInputError("kernel length must be >= 1")
    out = np.empty(B_bar.shape[:-1] + (L, B_bar.shape[-1]))
    v = B_bar[..., None]
    for j in range(L):
        out[..., j, :] = v[..., 0]
        if j + 1 < L:
            v = A_bar @ v
    return out


def krylov_kernel(dssm: DiscreteSSM, L: int) -> np.ndarray:
    """Convolution kernel ``k[j] = C Abar^j Bbar`` for ``j = 0..L-1``."""
    return krylov_vectors(dssm.A_bar, dssm.B_bar, L) @ dssm.C


def fft_length(L: int) -> int:
    """Smallest power of two that holds a non-circular length-``L`` convolution."""
    return 1 << max(2 * L - 2, 0).bit_length()


def causal_conv(kernel: np.ndarray, u: np.ndarray) -> np.ndarray:
    """``y[n] = sum_{j<=n} k[j] u[n-j]`` along the last axis via zero-padded FFT.

    Leading axes broadcast against each other.
    """
    L = u.shape[-1]
    if kernel.shape[-1] != L:
        raise InvalidInputError(f"kernel length {kernel.shape[-1]} != input length {L}")
    n = fft_length(L)
    spec = np.fft.rfft(kernel, n) * np.fft.rfft(u, n)
    return np.fft.irfft(spec, n)[..., :L]


def causal_corr(g: np.ndarray, u: np.ndarray) -> np.ndarray:
    """``c[j] = sum_{n>=j} g[n] u[n-j]``, the adjoint of :func:`causal_conv` w.r.t. the kernel."""
    L = u.shape[-1]
    n = fft_length(L)
    spec = np.fft.rfft(g, n) * np.conj(np.fft.rfft(u, n))
    return np.fft.irfft(spec, n)[..., :L]


def conv_forward(kernel, u, D: float = 0.0) -> np.ndarray:
    """SSM output from its kernel: ``k * u + D u`` (causal, non-circular)."""
    kernel = np.asarray(kernel, dtype=float)
    u = np.asarray(u, dtype=float)
    if kernel.shape != u.shape:
        raise InvalidInputError(f"kernel shape {kernel.shape} != input shape {u.shape}")
    return causal_conv(kernel, u) + D * u
