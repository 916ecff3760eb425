"""Barrier distortion summands, their log-sum-exp variant, and scaled Jacobians.

The per-tet summand is

    s(J) = lam_angle * tr(J^T J) / R_eps(det J)^(2/3)
         + lam_vol * (det^2 J + 1) / R_eps(det J)

with the regularizer R_eps(x) = (x + sqrt(x^2 + eps^2)) / 2, which stays
positive everywhere and blows the energy up as det J drops toward zero.
Gradients are given with respect to J; chaining to vertex positions lives in
meshes.jacobian_grad_to_vertices.
"""

from __future__ import annotations

import numpy as np

from .meshes import cof3, det3

DEGENERATE_COLUMN = 1e-12


def regularizer(x, eps: float):
    """R_eps(x): smooth positive ramp, ~x for x >> eps and ->0+ as x -> -inf.

    For negative x the defining form (x + sqrt(x^2 + eps^2)) / 2 cancels
    catastrophically, so the conjugate form keeps the barrier positive there.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    root = np.sqrt(x * x + eps * eps)
    return np.where(x >= 0, 0.5 * (x + root), 0.5 * eps * eps / (root - x))


def regularizer_grad(x, eps: float):
    # dR/dx = (1 + x / s) / 2 = R / s with s = sqrt(x^2 + eps^2): exact and
    # cancellation-free given a stable R.
    x = np.asarray(x, dtype=np.float64)
    return regularizer(x, eps) / np.sqrt(x * x + eps * eps)


def distortion_summands(
    jac: np.ndarray, lam_angle: float, lam_vol: float, eps: float
) -> tuple[np.ndarray, np.ndarray]:
    """Per-tet summands s (m,) and their gradients ds/dJ (m, 3, 3)."""
    trace = np.einsum("mij,mij->m", jac, jac)
    dets = det3(jac)
    cofs = cof3(jac)
    reg = regularizer(dets, eps)
    reg_grad = regularizer_grad(dets, eps)
    r23 = reg ** (2.0 / 3.0)
    s = lam_angle * trace / r23 + lam_vol * (dets * dets + 1.0) / reg

    coef_cof = (
        lam_angle * (-2.0 / 3.0) * trace * reg ** (-5.0 / 3.0) * reg_grad
        + lam_vol * (2.0 * dets * reg - (dets * dets + 1.0) * reg_grad) / (reg * reg)
    )
    grad = (2.0 * lam_angle / r23)[:, None, None] * jac
    grad += coef_cof[:, None, None] * cofs
    return s, grad


def weighted_distortion(
    jac: np.ndarray, weights: np.ndarray | float,
    lam_angle: float, lam_vol: float, eps: float,
) -> tuple[float, np.ndarray]:
    """Sum of weighted summands and dE/dJ."""
    s, ds = distortion_summands(jac, lam_angle, lam_vol, eps)
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), s.shape)
    return float((w * s).sum()), w[:, None, None] * ds


def lse_distortion(
    jac: np.ndarray, lam_angle: float, lam_vol: float, eps: float
) -> tuple[float, np.ndarray]:
    """Log-sum-exp of the summands: a smooth worst-element surrogate.

    Requires an inversion-free state; raises otherwise so callers fall back
    to the average-mode energy first.
    """
    dets = det3(jac)
    if (dets <= 0.0).any():
        raise ValueError(
            "inverted elements present; optimize with the average-mode "
            "distortion energy before switching to worst-element mode"
        )
    s, ds = distortion_summands(jac, lam_angle, lam_vol, eps)
    shift = s.max()
    expo = np.exp(s - shift)
    total = expo.sum()
    value = float(shift + np.log(total))
    soft = expo / total
    return value, soft[:, None, None] * ds


def scaled_jacobian(frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Determinants of column-normalized frames, with gradients w.r.t. frames.

    Always in [-1, 1]; equals 1 exactly for positively oriented orthonormal
    columns. Frames with a column shorter than 1e-12 keep their (clamped)
    value but get zero gradient.
    """
    lengths = np.linalg.norm(frames, axis=1)  # (m, 3) column norms
    degenerate = (lengths < DEGENERATE_COLUMN).any(axis=1)
    safe = np.maximum(lengths, DEGENERATE_COLUMN)
    prod = safe.prod(axis=1)
    dets = det3(frames)
    dethat = dets / prod

    cofs = cof3(frames)
    grad = cofs / prod[:, None, None]
    grad -= dethat[:, None, None] * frames / (safe * safe)[:, None, :]
    grad[degenerate] = 0.0
    return dethat, grad
