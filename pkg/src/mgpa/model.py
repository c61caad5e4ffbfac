"""The full set of fitted quantities and a flat name -> array view used by the
optimizer, the gradient code and the checkpoint format."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kron_conv
from .spatial_codes import SpatialCodeSet
from .temporal_gp import TemporalSourceSet, TimeWarp
from .tensor_core import ContractError

# Parameter names, in a fixed order. Spatio-temporal parameters come first.
MODEL_PARAMS = ("r", "log_p2", "m", "log_s2", "log_l", "mu", "log_rho2", "z")
SHIFT_PARAMS = ("delta", "log_sigma")
ALL_PARAMS = MODEL_PARAMS + SHIFT_PARAMS


@dataclass
class ModelParams:
    temporal: TemporalSourceSet
    codes: SpatialCodeSet
    warp: TimeWarp
    z: np.ndarray  # static offset, length F
    log_sigma: np.ndarray  # 0-d array so it can be updated in place
    grid: tuple[int, int, int]
    lambdas: tuple[float, ...]
    spacing: float = 1.0
    kernels: list = field(init=False, repr=False)
    col_norms: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.log_sigma = np.asarray(self.log_sigma, dtype=np.float64).reshape(())
        self.kernels = [kron_conv.build_kernel(self.grid, lam, self.spacing) for lam in self.lambdas]
        # (N_s, F): squared column norms of each convolution, for the code-noise variance
        self.col_norms = np.stack([kron_conv.column_sq_norms(k) for k in self.kernels])

    @property
    def n_sources(self) -> int:
        return self.temporal.n_sources

    @property
    def n_features(self) -> int:
        return self.z.size

    @property
    def sigma(self) -> float:
        return float(np.exp(self.log_sigma))

    def arrays(self) -> dict[str, np.ndarray]:
        """Live views of every optimized array, keyed by name."""
        t, c = self.temporal, self.codes
        return {
            "r": t.r,
            "log_p2": t.log_p2,
            "m": t.m,
            "log_s2": t.log_s2,
            "log_l": t.log_l,
            "mu": c.mu,
            "log_rho2": c.log_rho2,
            "z": self.z,
            "delta": self.warp.delta,
            "log_sigma": self.log_sigma,
        }

    def copy(self) -> "ModelParams":
        t, c = self.temporal, self.codes
        return ModelParams(
            temporal=TemporalSourceSet(t.r.copy(), t.log_p2.copy(), t.m.copy(), t.log_s2.copy(),
                                       t.log_l.copy()),
            codes=SpatialCodeSet(c.mu.copy(), c.log_rho2.copy()),
            warp=TimeWarp(self.warp.delta.copy(), self.warp.tau.copy()),
            z=self.z.copy(),
            log_sigma=self.log_sigma.copy(),
            grid=self.grid,
            lambdas=self.lambdas,
            spacing=self.spacing,
        )


@dataclass
class DataMatrix:
    """P x F observations on a (Dz, Dy, Dx) grid, with optional nominal times."""

    y: np.ndarray
    grid: tuple[int, int, int]
    times: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.ascontiguousarray(self.y, dtype=np.float64)
        self.grid = tuple(int(d) for d in self.grid)
        if self.y.ndim != 2:
            raise ContractError(f"data must be 2-D, got shape {self.y.shape}")
        if self.y.shape[1] != int(np.prod(self.grid)):
            raise ContractError(f"{self.y.shape[1]} features do not match grid {self.grid}")
        if self.times is not None:
            self.times = np.asarray(self.times, dtype=np.float64)
            if self.times.shape != (self.y.shape[0],):
                raise ContractError("times must have one entry per sample")

    @property
    def n_samples(self) -> int:
        return self.y.shape[0]

    @property
    def n_features(self) -> int:
        return self.y.shape[1]
