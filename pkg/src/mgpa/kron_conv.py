"""Separable 3-D Gaussian convolution operators.

A kernel over a (Dz, Dy, Dx) grid is stored as three 1-D factor matrices; the full
F x F operator is their Kronecker product ``Sz (x) Sy (x) Sx`` (row-major voxel
order), which is never materialized outside of tests.

Normalization: every factor is divided by its largest row sum, i.e. the row sum of
an untruncated interior row. Interior voxels therefore see a unit-mass kernel (a
constant map stays constant away from the borders) while the factor stays exactly
symmetric, so the operator is self-adjoint.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor_core import ContractError, require

# Factor entries below this (relative to the peak of 1) are set to exactly zero.
TRUNCATION = 1e-16


@dataclass(frozen=True)
class SeparableKernel:
    lambda_n: float
    spacing: float
    grid: tuple[int, int, int]
    factors: tuple[np.ndarray, np.ndarray, np.ndarray]

    @property
    def size(self) -> int:
        dz, dy, dx = self.grid
        return dz * dy * dx


def gaussian_factor(n: int, lambda_n: float, spacing: float = 1.0) -> np.ndarray:
    idx = np.arange(n, dtype=np.float64)
    dist = (idx[:, None] - idx[None, :]) * spacing
    f = np.exp(-(dist**2) / (2.0 * lambda_n**2))
    f[f < TRUNCATION] = 0.0
    return f / f.sum(axis=1).max()


def build_kernel(grid, lambda_n: float, spacing: float = 1.0) -> SeparableKernel:
    grid = tuple(int(d) for d in grid)
    require(len(grid) == 3, f"grid must have 3 dims, got {grid}")
    require(all(d >= 1 for d in grid), f"grid dims must be >= 1, got {grid}")
    require(lambda_n > 0, f"length-scale must be positive, got {lambda_n}")
    require(spacing > 0, f"spacing must be positive, got {spacing}")
    factors = tuple(gaussian_factor(d, lambda_n, spacing) for d in grid)
    for f in factors:
        f.setflags(write=False)
    return SeparableKernel(float(lambda_n), float(spacing), grid, factors)


def identity_kernel(grid) -> SeparableKernel:
    grid = tuple(int(d) for d in grid)
    factors = tuple(np.eye(d) for d in grid)
    return SeparableKernel(0.0, 1.0, grid, factors)


def _check_len(kernel: SeparableKernel, vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.size != kernel.size:
        raise ContractError(f"vector of length {vec.size} does not match grid {kernel.grid}")
    return vec.reshape(kernel.grid)


def apply(kernel: SeparableKernel, code) -> np.ndarray:
    """Return ``Sigma @ code`` as a flat length-F vector."""
    x = _check_len(kernel, code)
    fz, fy, fx = kernel.factors
    return kernels.separable_conv3d(x, fz, fy, fx).ravel()


def apply_adjoint(kernel: SeparableKernel, vec) -> np.ndarray:
    x = _check_len(kernel, vec)
    fz, fy, fx = kernel.factors
    return kernels.separable_conv3d(x, fz.T, fy.T, fx.T).ravel()


def column_sq_norms(kernel: SeparableKernel) -> np.ndarray:
    """Squared 2-norm of every column of the full operator, as a flat length-F vector."""
    cz, cy, cx = (np.sum(f * f, axis=0) for f in kernel.factors)
    return (cz[:, None, None] * cy[None, :, None] * cx[None, None, :]).ravel()


def dense_matrix(kernel: SeparableKernel) -> np.ndarray:
    """Materialize the full F x F operator. Only sensible for small grids."""
    fz, fy, fx = kernel.factors
    return np.kron(np.kron(fz, fy), fx)
