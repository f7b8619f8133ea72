"""
Damped parallel transport along sampled paths.

Omega = 1/2 Ric - (nabla V)^T in frame coordinates; Lambda solves
Lambda' = -Lambda Omega and Phi solves Phi' = -1/2 Phi Ric, both from the
identity, by the explicit midpoint rule on the path grid.
"""

import logging
from dataclasses import dataclass
from typing import Union

import numpy as np

from csde_lab.development import PathBatch, PathSample
from csde_lab.errors import InvalidInputError
from csde_lab.geometry import FramePoint, ManifoldModel, VectorFieldSpec, ZeroField

logger = logging.getLogger(__name__)

CONVENTIONS = ("standard", "flipped_sign", "untransposed")


@dataclass
class TransportMatrix:
    """Lambda (or Phi) at every grid time; matrices has shape (..., K, d, d)."""

    times: np.ndarray
    matrices: np.ndarray
    mode: str = "lambda"

    def at(self, t: float) -> np.ndarray:
        return self.matrices[..., int(np.argmin(np.abs(self.times - t))), :, :]

    @property
    def final(self) -> np.ndarray:
        return self.matrices[..., -1, :, :]


def omega_field(model: ManifoldModel, V: VectorFieldSpec, points: np.ndarray,
                frames: np.ndarray, convention: str = "standard") -> np.ndarray:
    """
    Omega at a stack of frame points.

    ``convention`` selects the drift correction: "standard" subtracts the
    transpose of the nabla V frame matrix, "flipped_sign" adds it and
    "untransposed" subtracts the matrix itself. Only "standard" satisfies the
    Ornstein-Uhlenbeck integration-by-parts identity; the others exist for
    negative controls.
    """
    if convention not in CONVENTIONS:
        raise InvalidInputError(f"Unknown Omega convention '{convention}'. Valid: {', '.join(CONVENTIONS)}")
    ricci = model.ricci_matrix(frames)
    if V.is_zero:
        return 0.5 * ricci
    grad = V.covariant_derivative(model, points, frames)
    if convention == "standard":
        return 0.5 * ricci - np.swapaxes(grad, -1, -2)
    if convention == "flipped_sign":
        return 0.5 * ricci + np.swapaxes(grad, -1, -2)
    return 0.5 * ricci - grad


def omega_matrix(u: FramePoint, V: VectorFieldSpec, convention: str = "standard") -> np.ndarray:
    """Omega at one frame point: 1/2 Ric minus the transposed nabla V frame matrix."""
    return omega_field(u.model, V or ZeroField(), u.base, u.frame, convention)


def integrate_transport(times: np.ndarray, omegas: np.ndarray) -> np.ndarray:
    """
    Solve M' = -M Omega(t), M(0) = I with the explicit midpoint rule, Omega
    at the half step taken as the average of the endpoint values.

    Args:
        times: Grid (K,)
        omegas: Omega on the grid, shape (..., K, d, d)

    Returns:
        Matrices on the grid, shape (..., K, d, d)
    """
    K = len(times)
    d = omegas.shape[-1]
    out = np.empty(omegas.shape)
    current = np.broadcast_to(np.eye(d), omegas.shape[:-3] + (d, d)).copy()
    out[..., 0, :, :] = current
    steps = np.diff(times)
    for k in range(K - 1):
        h = steps[k]
        omega_k = omegas[..., k, :, :]
        omega_mid = 0.5 * (omega_k + omegas[..., k + 1, :, :])
        half = current - 0.5 * h * current @ omega_k
        current = current - h * half @ omega_mid
        out[..., k + 1, :, :] = current
    return out


def transport_ode(path: Union[PathSample, PathBatch], V: VectorFieldSpec,
                  mode: str = "lambda", convention: str = "standard") -> TransportMatrix:
    """
    Lambda (mode "lambda") or Phi (mode "phi") along a sampled path or batch.

    Phi is Lambda for the zero field, so with V = 0 both modes run the same code.
    """
    if path.frames is None:
        raise InvalidInputError("Transport needs the frames along the path; sample with store_frames=True")
    mode = mode.lower()
    if mode not in ("lambda", "phi"):
        raise InvalidInputError(f"Unknown transport mode '{mode}', expected 'lambda' or 'phi'")
    field = ZeroField() if (mode == "phi" or V is None) else V
    omegas = omega_field(path.model, field, path.points, path.frames, convention)
    return TransportMatrix(path.times, integrate_transport(path.times, omegas), mode)


def contraction_rate(model: ManifoldModel, V: VectorFieldSpec, points: np.ndarray,
                     frames: np.ndarray) -> float:
    """
    Smallest eigenvalue of the symmetric part of Omega over the supplied frames.
    When positive, |Lambda_t| <= exp(-k t) along any path through them.
    """
    omegas = omega_field(model, V or ZeroField(), points, frames)
    sym = 0.5 * (omegas + np.swapaxes(omegas, -1, -2))
    return float(np.min(np.linalg.eigvalsh(sym)))


def gronwall_bound(times: np.ndarray, omegas: np.ndarray) -> np.ndarray:
    """exp(t * max operator norm of Omega up to t), the a-priori bound on |Lambda_t|."""
    norms = np.linalg.norm(omegas, ord=2, axis=(-2, -1))
    running = np.maximum.accumulate(norms, axis=-1)
    return np.exp(running * times)
