"""Hot numeric kernels with an optional numba backend.

Every kernel exists twice: a pure-numpy version (``*_numpy``) and a
loop version compiled with ``numba.njit`` (``*_numba``).  The public
names bound at import time point at the numba versions unless numba is
missing or the environment variable ``CPXG_DISABLE_NUMBA`` is set to a
truthy value (``1``, ``true``, ``yes``).

The two backends agree to rounding; within one backend results are
bit-reproducible.
"""
import os

import numpy as np

_FALSY = {"", "0", "false", "no", "off"}

try:  # pragma: no cover - exercised implicitly
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("CPXG_DISABLE_NUMBA", "").strip().lower() in _FALSY

BACKEND = "numba" if USE_NUMBA else "numpy"


def _njit(fn):
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# ---------------------------------------------------------------------------
# soft thresholding


def soft_threshold_numpy(x, thresh):
    return np.sign(x) * np.maximum(np.abs(x) - thresh, 0.0)


def _soft_threshold_loop(x, thresh):
    # x is 1-D; callers flatten
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        v = x[i]
        if v > thresh:
            out[i] = v - thresh
        elif v < -thresh:
            out[i] = v + thresh
        else:
            out[i] = 0.0
    return out


soft_threshold_numba = _njit(_soft_threshold_loop)


# ---------------------------------------------------------------------------
# multi-round consensus mixing: values <- A[idx[r]] @ values, r = 0..len(idx)-1


def mix_rounds_numpy(values, stack, idx):
    out = values
    for r in idx:
        out = stack[r] @ out
    return np.array(out, dtype=np.float64, copy=True)


def _mix_rounds_loop(values, stack, idx):
    m, d = values.shape
    cur = values.copy()
    nxt = np.empty_like(cur)
    for r in range(idx.shape[0]):
        A = stack[idx[r]]
        for i in range(m):
            for c in range(d):
                nxt[i, c] = 0.0
            for j in range(m):
                a = A[i, j]
                if a != 0.0:
                    for c in range(d):
                        nxt[i, c] += a * cur[j, c]
        cur, nxt = nxt, cur
    return cur


mix_rounds_numba = _njit(_mix_rounds_loop)


# ---------------------------------------------------------------------------
# transition-matrix deviation sweep
#
# dev[L-1] = max over admissible starts s and entries (i, j) of
# |[A(s+L-1) ... A(s)]_ij - 1/m|, for L = 1..max_len.


def window_deviation_numpy(stack, idx, max_len, n_starts):
    m = stack.shape[1]
    dev = np.zeros(max_len)
    for s in range(n_starts):
        P = np.eye(m)
        for L in range(1, max_len + 1):
            P = stack[idx[s + L - 1]] @ P
            v = np.max(np.abs(P - 1.0 / m))
            if v > dev[L - 1]:
                dev[L - 1] = v
    return dev


def _window_deviation_loop(stack, idx, max_len, n_starts):
    m = stack.shape[1]
    dev = np.zeros(max_len)
    P = np.empty((m, m))
    Q = np.empty((m, m))
    inv_m = 1.0 / m
    for s in range(n_starts):
        for i in range(m):
            for j in range(m):
                P[i, j] = 1.0 if i == j else 0.0
        for L in range(1, max_len + 1):
            A = stack[idx[s + L - 1]]
            worst = 0.0
            for i in range(m):
                for j in range(m):
                    acc = 0.0
                    for l in range(m):
                        acc += A[i, l] * P[l, j]
                    Q[i, j] = acc
                    v = abs(acc - inv_m)
                    if v > worst:
                        worst = v
            for i in range(m):
                for j in range(m):
                    P[i, j] = Q[i, j]
            if worst > dev[L - 1]:
                dev[L - 1] = worst
    return dev


window_deviation_numba = _njit(_window_deviation_loop)


# ---------------------------------------------------------------------------
# polynomial-geometric partial sums  sum_{k>=0} k^N gamma^k


def poly_geo_partial_numpy(order, gamma, rel_tol, max_terms):
    # chunked vectorised summation; same stopping rule as the loop kernel
    total = 0.0
    start = 0
    chunk = 4096
    while start < max_terms:
        k = np.arange(start, min(start + chunk, max_terms), dtype=np.float64)
        terms = k**order * gamma**k
        for j in range(k.size):
            total += terms[j]
            kk = k[j]
            if kk > order / (1.0 - gamma) + 1.0 and total > 0.0:
                if _tail_bound(order, gamma, kk) <= rel_tol * total:
                    return total, int(kk) + 1
        start += chunk
    return total, -1


def _tail_bound_impl(order, gamma, k):
    # Past the mode of k^N g^k consecutive term ratios are bounded by
    # r = ((k+1)/k)^N g < 1, so the remainder is at most t_{k+1} / (1 - r).
    nxt = (k + 1.0) ** order * gamma ** (k + 1.0)
    r = ((k + 1.0) / k) ** order * gamma if k > 0 else gamma
    if r >= 1.0:
        return np.inf
    return nxt / (1.0 - r)


_tail_bound = _tail_bound_impl
_tail_bound_numba = _njit(_tail_bound_impl)


def _poly_geo_partial_loop(order, gamma, rel_tol, max_terms):
    total = 0.0
    g_pow = 1.0
    for k in range(max_terms):
        kk = float(k)
        total += kk**order * g_pow
        g_pow *= gamma
        if kk > order / (1.0 - gamma) + 1.0 and total > 0.0:
            if _tail_bound_numba(order, gamma, kk) <= rel_tol * total:
                return total, k + 1
    return total, -1


poly_geo_partial_numba = _njit(_poly_geo_partial_loop)


# ---------------------------------------------------------------------------
# backend selection

if USE_NUMBA:
    soft_threshold = soft_threshold_numba
    mix_rounds = mix_rounds_numba
    window_deviation = window_deviation_numba
    poly_geo_partial = poly_geo_partial_numba
else:
    soft_threshold = soft_threshold_numpy
    mix_rounds = mix_rounds_numpy
    window_deviation = window_deviation_numpy
    poly_geo_partial = poly_geo_partial_numpy
