"""Proximal machinery for the shared nondifferentiable term ``h``.

Only two members of the family are supported: ``h(x) = lam * ||x||_1``
and the zero function (which behaves exactly like ``lam = 0``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _accel


@dataclass(frozen=True)
class ProxSpec:
    """The shared regulariser ``h``.

    Parameters
    ----------
    kind : {"l1", "zero"}
    lam : float
        Regularisation weight, only meaningful for ``kind="l1"``.
    """

    kind: str = "l1"
    lam: float = 0.0

    def __post_init__(self):
        if self.kind not in ("l1", "zero"):
            raise ValueError(f"unknown regulariser kind {self.kind!r}")
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ValueError(f"regularisation weight must be finite and >= 0, got {self.lam!r}")
        if self.kind == "zero" and self.lam != 0:
            raise ValueError("the zero regulariser takes no weight")

    @classmethod
    def l1(cls, lam: float) -> "ProxSpec":
        return cls("l1", float(lam))

    @classmethod
    def zero(cls) -> "ProxSpec":
        return cls("zero", 0.0)

    @property
    def weight(self) -> float:
        return self.lam if self.kind == "l1" else 0.0

    @property
    def is_zero(self) -> bool:
        return self.weight == 0.0

    def describe(self) -> str:
        return "zero" if self.kind == "zero" else f"l1(lam={self.lam!r})"


def _as_vector(x, name="x"):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


def _check_step(alpha):
    if not (isinstance(alpha, (int, float, np.floating)) and math.isfinite(alpha) and alpha > 0):
        raise ValueError(f"step size alpha must be a finite positive number, got {alpha!r}")


def prox(h: ProxSpec, alpha: float, x) -> np.ndarray:
    """Evaluate ``argmin_z h(z) + ||z - x||^2 / (2 alpha)``.

    For the l1 case this is coordinatewise soft-thresholding at level
    ``alpha * lam``.  Works on any array shape (rows are treated as
    independent points, which is what the agent-stacked solvers need).
    """
    _check_step(alpha)
    arr = _as_vector(x)
    if h.is_zero:
        return arr.copy()
    flat = np.ascontiguousarray(arr).reshape(-1)
    return _accel.soft_threshold(flat, alpha * h.weight).reshape(arr.shape)


def h_value(h: ProxSpec, x) -> float:
    arr = _as_vector(x)
    if h.is_zero:
        return 0.0
    return h.weight * float(np.sum(np.abs(arr)))


def subgradient_bound(h: ProxSpec, d: int) -> float:
    """Uniform bound on subgradient norms of ``h`` in dimension ``d``.

    Every l1 subgradient has coordinates in ``[-lam, lam]``; the bound
    ``lam * sqrt(d)`` is attained by sign vectors.
    """
    if d < 1:
        raise ValueError("dimension must be >= 1")
    return h.weight * math.sqrt(d)


def min_norm_subgradient(h: ProxSpec, x) -> np.ndarray:
    """Minimum-norm element of the subdifferential (``0`` at kinks)."""
    arr = _as_vector(x)
    if h.is_zero:
        return np.zeros_like(arr)
    return h.weight * np.sign(arr)


def prox_subgradient(h: ProxSpec, alpha: float, center, y) -> np.ndarray:
    """The subgradient ``(center - y) / alpha`` certified by the prox optimality condition.

    ``y`` must be ``prox(h, alpha, center)``.  For l1 the value is snapped
    to ``lam * sign(y)`` on the support and clipped to ``[-lam, lam]`` off
    it, removing rounding noise.
    """
    c = np.asarray(center, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if h.is_zero:
        return np.zeros_like(c)
    lam = h.weight
    z = np.clip((c - y) / alpha, -lam, lam)
    return np.where(y != 0, lam * np.sign(y), z)


def prox_objective(h: ProxSpec, alpha: float, center, z) -> float:
    c = np.asarray(center, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    return h_value(h, z) + float(np.sum((z - c) ** 2)) / (2.0 * alpha)


def prox_gap(h: ProxSpec, alpha: float, center, candidate) -> float:
    """Suboptimality of ``candidate`` in the prox problem centred at ``center``.

    Evaluated through the exact identity

        Phi(c) - Phi(y*) = [h(c) - h(y*) - <z, c - y*>] + ||c - y*||^2 / (2 alpha),

    with ``y* = prox(center)`` and ``z = (center - y*) / alpha``, which
    avoids cancelling two O(1) objective values when the gap is tiny.
    """
    _check_step(alpha)
    c = _as_vector(center, "center")
    cand = _as_vector(candidate, "candidate")
    if c.shape != cand.shape:
        raise ValueError(f"shape mismatch: center {c.shape} vs candidate {cand.shape}")
    y = prox(h, alpha, c)
    diff = cand - y
    quad = float(np.dot(diff.ravel(), diff.ravel())) / (2.0 * alpha)
    if h.is_zero:
        return quad
    lam = h.weight
    # per-coordinate Bregman term of lam*|.| at y with subgradient z
    on_support = y != 0
    sgn = np.sign(y)
    breg_support = lam * (np.abs(cand) - sgn * cand)
    z_off = np.clip(c / alpha, -lam, lam)  # y == 0 here, so (c - y)/alpha = c/alpha
    breg_off = lam * np.abs(cand) - z_off * cand
    breg = np.where(on_support, breg_support, breg_off)
    gap = float(np.sum(np.maximum(breg, 0.0))) + quad
    return max(gap, 0.0)
