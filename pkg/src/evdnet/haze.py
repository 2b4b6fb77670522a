"""Atmospheric scattering model and its K-reformulation.

Hazy image ``I = J t + A (1 - t)`` with transmission ``t = exp(-beta d)``.
The end-to-end form folds ``1/t`` and ``A`` into a single map ``K`` so that
``J = K I - K + b``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ContractError


@dataclass(frozen=True)
class HazeParams:
    """Global atmospheric light ``A`` (scalar or per-channel) and scattering ``beta``."""

    A: float | tuple = 0.8
    beta: float = 1.0

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.A, dtype=np.float64))
        if a.size not in (1, 3) or np.any(a <= 0) or np.any(a > 1):
            raise ContractError(f"A must be in (0, 1] (scalar or 3 channels), got {self.A}")
        if not (self.beta >= 0):
            raise ContractError(f"beta must be >= 0, got {self.beta}")

    def light(self, dtype=np.float64):
        """``A`` shaped for broadcasting against ``(n, c, h, w)``."""
        a = np.atleast_1d(np.asarray(self.A, dtype=dtype))
        return a.reshape(1, -1, 1, 1) if a.size > 1 else a.reshape(())


def _light(A, dtype=np.float64):
    if isinstance(A, HazeParams):
        return A.light(dtype)
    a = np.atleast_1d(np.asarray(A, dtype=dtype))
    return a.reshape(1, -1, 1, 1) if a.size > 1 else a.reshape(())


def transmission_from_depth(depth, beta):
    if not (beta >= 0):
        raise ContractError(f"beta must be >= 0, got {beta}")
    if np.any(depth < 0):
        raise ContractError("depth must be non-negative")
    return np.exp(-beta * depth)


def synthesize_haze(J, t, A):
    """``I = J t + A (1 - t)``, broadcasting single-channel ``t`` over color."""
    if np.any(J < 0) or np.any(J > 1):
        raise ContractError("clean image J must lie in [0, 1]")
    if np.any(t <= 0) or np.any(t > 1):
        raise ContractError("transmission must lie in (0, 1]")
    a = _light(A, J.dtype)
    return J * t + a * (1 - t)


def invert_haze(I, t, A, t_floor=0.01, clamp=False):
    if t_floor <= 0:
        raise ContractError(f"t_floor must be > 0, got {t_floor}")
    a = _light(A, I.dtype)
    J = (I - a) / np.maximum(t, t_floor) + a
    return np.clip(J, 0, 1) if clamp else J


def _guard(z, eps):
    # sign(0) := -1 because I <= 1 puts I - 1 on the non-positive side
    sign = np.where(z > 0, 1.0, -1.0)
    return sign * np.maximum(np.abs(z), eps)


def compute_K(I, t, A, denom_eps=1e-4, t_floor=0.01, bias=0.0):
    """K map such that :func:`apply_K` with the same ``bias`` inverts the haze."""
    if denom_eps <= 0:
        raise ContractError(f"denom_eps must be > 0, got {denom_eps}")
    return (invert_haze(I, t, A, t_floor) - bias) / _guard(I - 1, denom_eps)


def apply_K(I, K, bias=0.0):
    """Clean-image generation ``J = K I - K + bias``.

    Its partial derivatives are ``dJ/dK = I - 1`` and ``dJ/dI = K``.
    """
    if I.shape != K.shape:
        raise ContractError(f"apply_K shapes differ: I {I.shape} vs K {K.shape}")
    return K * I - K + bias


def apply_K_backward(I, K, grad_J):
    """Return ``(grad_I, grad_K)`` for :func:`apply_K`."""
    return grad_J * K, grad_J * (I - 1)
