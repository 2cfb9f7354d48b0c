"""State-space model core: discretization, recurrences and the selective scan.

The recurrence ``h_t = a_t * h_{t-1} + b_t`` is treated as a prefix
composition of affine maps ``(a, b): h -> a*h + b``, which is associative and
therefore admits a work-efficient parallel scan.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

SERIES_THRESHOLD = 1e-6
CHUNK = 64


@dataclass
class ContinuousSSM:
    """Diagonal continuous system ``h' = A h + B x``, ``y = <C, h> + D x``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: float = 0.0

    def __post_init__(self):
        self.A = np.atleast_1d(np.asarray(self.A, dtype=np.float64))
        self.B = np.broadcast_to(np.asarray(self.B, dtype=np.float64), self.A.shape).copy()
        self.C = np.broadcast_to(np.asarray(self.C, dtype=np.float64), self.A.shape).copy()

    @classmethod
    def from_log(cls, A_log, B, C, D=0.0) -> "ContinuousSSM":
        return cls(-np.exp(np.asarray(A_log, dtype=np.float64)), B, C, D)


@dataclass
class DiscreteSSM:
    A_bar: np.ndarray
    B_bar: np.ndarray
    C_bar: np.ndarray
    delta: float
    D: float = 0.0


@dataclass
class SelectiveParams:
    """Per-timestep step sizes and input/output maps produced from the input."""

    delta: Tensor  # (..., L, E), strictly positive
    B: Tensor      # (..., L, N)
    C: Tensor      # (..., L, N)


# ---------------------------------------------------------------------------
# discretization
# ---------------------------------------------------------------------------

def _phi1(z: np.ndarray) -> np.ndarray:
    """``(e^z - 1) / z`` with a series fallback near zero."""
    z = np.asarray(z, dtype=np.float64)
    small = np.abs(z) < SERIES_THRESHOLD
    safe = np.where(small, 1.0, z)
    out = np.expm1(safe) / safe
    series = 1.0 + z / 2.0 + z * z / 6.0
    return np.where(small, series, out)


def zoh_discretize(A, B, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold discretization of a diagonal system.

    Returns ``(A_bar, B_bar)`` with ``A_bar = exp(delta*A)`` and
    ``B_bar = (delta*A)^-1 (exp(delta*A) - 1) * delta*B``.
    """
    if not delta > 0:
        raise ValueError(f"step size must be positive, got {delta}")
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    dA = delta * A
    return np.exp(dA), _phi1(dA) * (delta * B)


def discretize(ssm: ContinuousSSM, delta: float) -> DiscreteSSM:
    A_bar, B_bar = zoh_discretize(ssm.A, ssm.B, delta)
    return DiscreteSSM(A_bar, B_bar, ssm.C.copy(), delta, ssm.D)


# ---------------------------------------------------------------------------
# recurrences
# ---------------------------------------------------------------------------

def sequential_recurrence(ssm: DiscreteSSM, x, h0=None, include_d: bool = True):
    """Step-by-step ``h_t = A_bar*h_{t-1} + B_bar*x_t``, ``y_t = <C, h_t> + D*x_t``."""
    x = np.asarray(x, dtype=np.float64)
    h = np.zeros_like(ssm.A_bar) if h0 is None else np.array(h0, dtype=np.float64)
    y = np.empty_like(x)
    for t in range(x.shape[0]):
        h = ssm.A_bar * h + ssm.B_bar * x[t]
        y[t] = ssm.C_bar @ h + (ssm.D * x[t] if include_d else 0.0)
    return y, h


def sequential_scan(a, b, h0=None) -> np.ndarray:
    """Reference loop for ``h_t = a_t * h_{t-1} + b_t`` over axis 0."""
    a = np.asarray(a)
    b = np.asarray(b)
    h = np.zeros(a.shape[1:], dtype=np.result_type(a, b)) if h0 is None else np.asarray(h0)
    out = np.empty(np.broadcast_shapes(a.shape, b.shape), dtype=np.result_type(a, b, h))
    for t in range(a.shape[0]):
        h = a[t] * h + b[t]
        out[t] = h
    return out


def compose(first, second):
    """Affine-map composition ``second o first`` for ScanElements ``(a, b)``."""
    a1, b1 = first
    a2, b2 = second
    return a1 * a2, a2 * b1 + b2


def _fold_h0(a: np.ndarray, b: np.ndarray, h0) -> np.ndarray:
    b = np.array(np.broadcast_to(b, np.broadcast_shapes(a.shape, b.shape)), copy=True)
    if h0 is not None:
        b[0] += a[0] * h0
    return b


def blelloch_scan(a, b, h0=None) -> np.ndarray:
    """Work-efficient up-sweep/down-sweep scan over axis 0."""
    a = np.asarray(a)
    b = _fold_h0(a, np.asarray(b), h0)
    a = np.broadcast_to(a, b.shape)
    L = b.shape[0]
    n = 1 << max(0, (L - 1).bit_length())
    A = np.ones((n,) + b.shape[1:], dtype=b.dtype)
    B = np.zeros((n,) + b.shape[1:], dtype=b.dtype)
    A[:L] = a
    B[:L] = b

    # up-sweep: node at right end of each span accumulates its span's map
    step = 1
    while step < n:
        r = slice(2 * step - 1, n, 2 * step)
        l = slice(step - 1, n, 2 * step)
        B[r] = A[r] * B[l] + B[r]
        A[r] = A[l] * A[r]
        step *= 2

    # down-sweep: convert to exclusive prefixes
    A[n - 1] = 1.0
    B[n - 1] = 0.0
    step = n // 2
    while step >= 1:
        r = slice(2 * step - 1, n, 2 * step)
        l = slice(step - 1, n, 2 * step)
        la, lb = A[l].copy(), B[l].copy()
        A[l], B[l] = A[r], B[r]
        # prefix for right child = (prefix of parent) then (left subtree)
        B[r] = la * B[r] + lb
        A[r] = A[r] * la
        step //= 2

    # inclusive state: apply own element to the exclusive prefix state
    return a * B[:L] + b


def chunked_scan(a, b, h0=None, chunk: int = CHUNK) -> np.ndarray:
    """Blocked scan: local scans inside chunks, a carry pass, then a fix-up.

    With a single chunk this degenerates to the plain loop, which is the
    fast path for short token sequences.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    shape = np.broadcast_shapes(a.shape, b.shape)
    a = np.broadcast_to(a, shape)
    b = np.broadcast_to(b, shape)
    L = shape[0]
    out = np.empty(shape, dtype=np.result_type(a, b))
    if L <= chunk:
        if h0 is None:
            out[0] = b[0]
        else:
            out[0] = a[0] * h0 + b[0]
        for t in range(1, L):
            out[t] = a[t] * out[t - 1] + b[t]
        return out

    nc = -(-L // chunk)
    pad = nc * chunk - L
    if pad:
        a = np.concatenate([a, np.ones((pad,) + shape[1:], dtype=a.dtype)])
        b = np.concatenate([b, np.zeros((pad,) + shape[1:], dtype=b.dtype)])
    a = a.reshape((nc, chunk) + shape[1:])
    b = b.reshape((nc, chunk) + shape[1:])
    # phase 1: every chunk scanned from a zero state, all chunks at once
    la = np.empty(a.shape, dtype=out.dtype)
    lb = np.empty(a.shape, dtype=out.dtype)
    la[:, 0], lb[:, 0] = a[:, 0], b[:, 0]
    for t in range(1, chunk):
        np.multiply(a[:, t], la[:, t - 1], out=la[:, t])
        np.multiply(a[:, t], lb[:, t - 1], out=lb[:, t])
        lb[:, t] += b[:, t]
    # phase 2/3: thread the carry through chunks and fix up each one
    carry = np.zeros(shape[1:], dtype=out.dtype) if h0 is None else np.asarray(h0)
    full = la  # reuse the buffer
    for c in range(nc):
        np.multiply(la[c], carry, out=full[c])
        full[c] += lb[c]
        carry = full[c, -1]
    out[:] = full.reshape((nc * chunk,) + shape[1:])[:L]
    return out


def parallel_scan(a, b, h0=None, method: str = "blelloch") -> np.ndarray:
    """All states of ``h_t = a_t * h_{t-1} + b_t`` along axis 0."""
    if method == "blelloch":
        return blelloch_scan(a, b, h0)
    if method == "chunked":
        return chunked_scan(a, b, h0)
    if method == "sequential":
        return sequential_scan(a, b, h0)
    raise ValueError(f"unknown scan method {method!r}")


def linear_scan(a: Tensor, b: Tensor, axis: int = 0, method: str = "chunked") -> Tensor:
    """Differentiable scan along ``axis`` with zero initial state.

    The adjoint is itself a reversed linear recurrence
    ``g_t = dh_t + a_{t+1} g_{t+1}``, evaluated with the same kernel.
    """
    a, b = T.as_tensor(a), T.as_tensor(b)
    ad = np.moveaxis(a.data, axis, 0)
    bd = np.moveaxis(b.data, axis, 0)
    h = parallel_scan(ad, bd, method=method)

    def backward(g):
        g = np.moveaxis(g, axis, 0)
        a_next = np.empty_like(h)
        a_next[:-1] = np.broadcast_to(ad, h.shape)[1:]
        a_next[-1] = 0.0
        gh = parallel_scan(a_next[::-1], g[::-1], method=method)[::-1]
        ga = gb = None
        if a.requires_grad:
            h_prev = np.empty_like(h)
            h_prev[0] = 0.0
            h_prev[1:] = h[:-1]
            ga = T._unbroadcast(np.moveaxis(gh * h_prev, 0, axis), a.shape)
        if b.requires_grad:
            gb = T._unbroadcast(np.moveaxis(gh, 0, axis), b.shape)
        return ga, gb

    return T.make_op(np.ascontiguousarray(np.moveaxis(h, 0, axis)), (a, b), backward, "linear_scan")


# ---------------------------------------------------------------------------
# selective scan
# ---------------------------------------------------------------------------

def selective_scan_composite(x: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor,
                             D: Tensor | None, method: str = "chunked") -> Tensor:
    """Selective scan assembled from taped primitives (autodiff does the adjoint)."""
    lead = x.shape[:-1]
    E, N = A.shape
    a = T.exp(delta.reshape(lead + (E, 1)) * A)
    bx = (delta * x).reshape(lead + (E, 1)) * B.reshape(lead + (1, N))
    h = linear_scan(a, bx, axis=-3, method=method)
    y = (h * C.reshape(lead + (1, N))).sum(axis=-1)
    if D is not None:
        y = y + x * D
    return y


def selective_scan(x: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor | None,
                   method: str = "chunked") -> Tensor:
    """Input-dependent scan over the time axis (-2), fused forward and adjoint.

    Shapes: ``x, delta``: (..., L, E); ``A``: (E, N); ``B, C``: (..., L, N);
    ``D``: (E,). Uses ``A_bar = exp(delta*A)`` and the Euler input map
    ``delta*B*x``; ``y_t = <C_t, h_t> + D*x_t``.
    """
    xd, dd, Ad, Bd, Cd = x.data, delta.data, A.data, B.data, C.data
    if Ad.ndim != 2 or xd.shape != dd.shape or xd.shape[-1] != Ad.shape[0]:
        raise ValueError(f"selective_scan shapes: x{xd.shape} delta{dd.shape} A{Ad.shape}")
    du = dd * xd
    parents = (x, delta, A, B, C) + ((D,) if D is not None else ())
    keep = T.is_grad_enabled() and any(p.requires_grad for p in parents)
    L = xd.shape[-2]
    E, N = Ad.shape
    y = np.empty(np.broadcast_shapes(xd.shape, Cd.shape[:-1] + (E,)), dtype=xd.dtype)
    h = np.empty(y.shape + (N,), dtype=xd.dtype) if keep else None
    carry = None
    # walk time in cache-sized chunks, threading the state between them
    for s in range(0, L, CHUNK):
        sl = slice(s, s + CHUNK)
        a_c = np.exp(dd[..., sl, :, None] * Ad)         # (..., l, E, N)
        bx_c = du[..., sl, :, None] * Bd[..., sl, None, :]
        h_c = parallel_scan(np.moveaxis(a_c, -3, 0), np.moveaxis(bx_c, -3, 0), h0=carry, method=method)
        h_c = np.moveaxis(h_c, 0, -3)
        y[..., sl, :] = (h_c @ Cd[..., sl, :, None])[..., 0]
        carry = h_c[..., -1, :, :]
        if keep:
            h[..., sl, :, :] = h_c
    if D is not None:
        y = y + xd * D.data

    def backward(gy):
        a = np.exp(dd[..., None] * Ad)
        gC = (gy[..., None, :] @ h)[..., 0, :] if C.requires_grad else None
        gh = gy[..., None] * Cd[..., None, :]
        a_next = np.empty_like(a)
        a_next[..., :-1, :, :] = a[..., 1:, :, :]
        a_next[..., -1, :, :] = 0.0
        # adjoint recurrence runs backwards in time
        g = parallel_scan(np.moveaxis(a_next, -3, 0)[::-1], np.moveaxis(gh, -3, 0)[::-1], method=method)
        g = np.moveaxis(g[::-1], 0, -3)
        del gh, a_next
        gB_e = (g @ Bd[..., :, None])[..., 0]             # sum_n g * B  -> (..., L, E)
        h_prev = np.empty_like(h)
        h_prev[..., 0, :, :] = 0.0
        h_prev[..., 1:, :, :] = h[..., :-1, :, :]
        gdA = g * h_prev
        gdA *= a                                           # d loss / d(delta*A)
        gdelta = np.einsum("...en,en->...e", gdA, Ad)
        gdelta += gB_e * xd
        gx = gB_e * dd
        if D is not None:
            gx = gx + gy * D.data
        lead_axes = tuple(range(dd.ndim - 1))
        gA = np.einsum("me,men->en", dd.reshape(-1, E), gdA.reshape(-1, E, N)) if A.requires_grad else None
        gB = (du[..., None, :] @ g)[..., 0, :] if B.requires_grad else None
        grads = [gx, gdelta, gA, gB, gC]
        if D is not None:
            grads.append((gy * xd).sum(axis=lead_axes))
        return tuple(grads)

    return T.make_op(y, parents, backward, "selective_scan")


def selective_scan_reference(x, delta, A, B, C, D) -> np.ndarray:
    """Plain per-step, per-channel loop; an oracle for ``selective_scan``."""
    x, delta, A, B, C = (np.asarray(v, dtype=np.float64) for v in (x, delta, A, B, C))
    L, E = x.shape
    N = A.shape[1]
    y = np.zeros((L, E))
    for e in range(E):
        h = np.zeros(N)
        for t in range(L):
            for n in range(N):
                h[n] = math.exp(delta[t, e] * A[e, n]) * h[n] + delta[t, e] * B[t, n] * x[t, e]
            y[t, e] = sum(C[t, n] * h[n] for n in range(N))
            if D is not None:
                y[t, e] += D[e] * x[t, e]
    return y


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


# ---------------------------------------------------------------------------
# continuous-time oracle
# ---------------------------------------------------------------------------

def continuous_simulate(ssm: ContinuousSSM, x, delta: float, h0=None, include_d: bool = True):
    """Exact solution for piecewise-constant input held over steps of length ``delta``.

    Integrates ``exp(A s)`` in closed form per interval, independently of
    ``zoh_discretize``.
    """
    x = np.asarray(x, dtype=np.float64)
    A = ssm.A
    h = np.zeros_like(A) if h0 is None else np.array(h0, dtype=np.float64)
    decay = np.exp(A * delta)
    with np.errstate(divide="ignore", invalid="ignore"):
        integral = np.where(A == 0.0, delta, (decay - 1.0) / np.where(A == 0.0, 1.0, A))
    y = np.empty_like(x)
    for t in range(x.shape[0]):
        h = decay * h + integral * ssm.B * x[t]
        y[t] = ssm.C @ h + (ssm.D * x[t] if include_d else 0.0)
    return y, h
