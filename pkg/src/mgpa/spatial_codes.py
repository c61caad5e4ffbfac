"""Sparse spatial codes under the variational-dropout posterior.

Each code entry has posterior ``N(mu, rho2)`` with ``rho2`` a free parameter (stored
as ``log_rho2``); the dropout coefficient is ``alpha = rho2 / mu**2``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kron_conv
from .tensor_core import ContractError, SeededRng, require

INIT_ALPHA = 19.0  # dropout probability 0.95


@dataclass
class SpatialCodeSet:
    mu: np.ndarray  # (N_s, F)
    log_rho2: np.ndarray  # (N_s, F)

    def __post_init__(self):
        require(self.mu.shape == self.log_rho2.shape, "mu and log_rho2 shapes differ")

    @property
    def rho2(self):
        return np.exp(self.log_rho2)

    @property
    def log_alpha(self) -> np.ndarray:
        """Exact ``log(rho2 / mu**2)``; ``+inf`` where ``mu == 0``."""
        with np.errstate(divide="ignore"):
            return self.log_rho2 - np.log(self.mu * self.mu)

    @property
    def alpha(self):
        return np.exp(self.log_alpha)

    @classmethod
    def initialize(cls, n_sources: int, n_features: int, rng: SeededRng, mu_var: float = 1e-2,
                   alpha: float = INIT_ALPHA):
        mu = np.sqrt(mu_var) * rng.standard_normal((n_sources, n_features))
        return cls(mu=mu, log_rho2=np.log(alpha) + np.log(mu * mu))


def sample_codes(sc: SpatialCodeSet, rng: SeededRng) -> np.ndarray:
    eps = rng.standard_normal(sc.mu.shape)
    return sc.mu + np.exp(0.5 * sc.log_rho2) * eps


def prune_mask(sc: SpatialCodeSet, log_alpha_threshold: float) -> np.ndarray:
    """True where an entry is kept, i.e. ``log alpha <= threshold``."""
    return sc.log_alpha <= log_alpha_threshold


def pruned_means(sc: SpatialCodeSet, log_alpha_threshold: float) -> np.ndarray:
    return np.where(prune_mask(sc, log_alpha_threshold), sc.mu, 0.0)


def assemble_maps(codes, kernels) -> np.ndarray:
    """Row n of the result is ``kernels[n]`` applied to ``codes[n]``."""
    codes = np.atleast_2d(np.asarray(codes, dtype=np.float64))
    if codes.shape[0] != len(kernels):
        raise ContractError(f"{codes.shape[0]} codes but {len(kernels)} kernels")
    return np.stack([kron_conv.apply(k, c) for k, c in zip(kernels, codes)])


def assemble_maps_adjoint(grads, kernels) -> np.ndarray:
    grads = np.atleast_2d(grads)
    if grads.shape[0] != len(kernels):
        raise ContractError(f"{grads.shape[0]} rows but {len(kernels)} kernels")
    return np.stack([kron_conv.apply_adjoint(k, g) for k, g in zip(kernels, grads)])
