"""Monotonic temporal sources as random-feature GPs, plus the per-sample time warp.

Each source n is ``S_n(t) = [cos(Omega_n t), sin(Omega_n t)] @ W_n`` with
``Omega_n ~ q(r_n, p2_n)`` (N_rf spectral frequencies) and ``W_n ~ q(m_n, s2_n)``
(2 N_rf weights). Variances are stored as logs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import ContractError, SeededRng, require


@dataclass
class TemporalSourceSet:
    r: np.ndarray  # (N_s, N_rf) spectral means
    log_p2: np.ndarray  # (N_s, N_rf)
    m: np.ndarray  # (N_s, 2 N_rf) weight means, cos block then sin block
    log_s2: np.ndarray  # (N_s, 2 N_rf)
    log_l: np.ndarray  # (N_s,) spectral prior scale

    def __post_init__(self):
        n, rf = self.r.shape
        require(self.log_p2.shape == (n, rf), "log_p2 must match r")
        require(self.m.shape == (n, 2 * rf), "m must have 2*N_rf columns")
        require(self.log_s2.shape == (n, 2 * rf), "log_s2 must match m")
        require(self.log_l.shape == (n,), "log_l must have one entry per source")

    @property
    def n_sources(self) -> int:
        return self.r.shape[0]

    @property
    def n_rf(self) -> int:
        return self.r.shape[1]

    @property
    def p2(self):
        return np.exp(self.log_p2)

    @property
    def s2(self):
        return np.exp(self.log_s2)

    @property
    def lengthscale(self):
        return np.exp(self.log_l)

    @classmethod
    def initialize(cls, n_sources: int, n_rf: int, rng: SeededRng, lengthscale: float = 4.0,
                   freq_var: float = 1e-2, weight_std: float = 0.1, weight_var: float = 1e-2):
        """Frequencies drawn from the spectral prior N(0, l); small random weight means."""
        r = np.sqrt(lengthscale) * rng.standard_normal((n_sources, n_rf))
        m = weight_std * rng.standard_normal((n_sources, 2 * n_rf))
        return cls(
            r=r,
            log_p2=np.full((n_sources, n_rf), np.log(freq_var)),
            m=m,
            log_s2=np.full((n_sources, 2 * n_rf), np.log(weight_var)),
            log_l=np.full(n_sources, np.log(lengthscale)),
        )


@dataclass
class TimeWarp:
    """Per-sample warped time ``t_i = tau_i + delta_i``."""

    delta: np.ndarray
    tau: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return self.tau + self.delta

    @classmethod
    def zeros(cls, n: int, tau=None):
        tau = np.zeros(n) if tau is None else np.asarray(tau, dtype=np.float64).copy()
        require(tau.shape == (n,), "tau must have one entry per sample")
        return cls(delta=np.zeros(n), tau=tau)


@dataclass
class TemporalDraws:
    eps_omega: np.ndarray
    eps_w: np.ndarray
    omega: np.ndarray
    w: np.ndarray


def draw_parameters(ts: TemporalSourceSet, rng: SeededRng) -> TemporalDraws:
    eps_o = rng.standard_normal(ts.r.shape)
    eps_w = rng.standard_normal(ts.m.shape)
    return draws_from_eps(ts, eps_o, eps_w)


def draws_from_eps(ts: TemporalSourceSet, eps_omega, eps_w) -> TemporalDraws:
    omega = ts.r + np.exp(0.5 * ts.log_p2) * eps_omega
    w = ts.m + np.exp(0.5 * ts.log_s2) * eps_w
    return TemporalDraws(eps_omega, eps_w, omega, w)


def mean_draws(ts: TemporalSourceSet) -> TemporalDraws:
    return TemporalDraws(np.zeros_like(ts.r), np.zeros_like(ts.m), ts.r.copy(), ts.m.copy())


def evaluate_sources(omega, w, t) -> np.ndarray:
    """``S[k, n] = phi(omega_n t_k) @ w_n`` for time points ``t`` -> (len(t), N_s)."""
    omega = np.atleast_2d(np.asarray(omega, dtype=np.float64))
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    t = np.asarray(t, dtype=np.float64)
    rf = omega.shape[1]
    arg = t[:, None, None] * omega[None]
    return np.einsum("knj,nj->kn", np.cos(arg), w[:, :rf]) + np.einsum(
        "knj,nj->kn", np.sin(arg), w[:, rf:]
    )


def evaluate_derivatives(omega, w, t) -> np.ndarray:
    """``S'[k, n] = omega_n * phi'(omega_n t_k) @ w_n`` with ``phi' = (-sin, cos)``."""
    omega = np.atleast_2d(np.asarray(omega, dtype=np.float64))
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    t = np.asarray(t, dtype=np.float64)
    rf = omega.shape[1]
    arg = t[:, None, None] * omega[None]
    inner = -np.sin(arg) * w[None, :, :rf] + np.cos(arg) * w[None, :, rf:]
    return np.einsum("knj,nj->kn", inner, omega)


def sample_sources(ts: TemporalSourceSet, warp: TimeWarp, rng: SeededRng, return_draws=False):
    draws = draw_parameters(ts, rng)
    s = evaluate_sources(draws.omega, draws.w, warp.times)
    return (s, draws) if return_draws else s


def sample_source_derivatives(ts: TemporalSourceSet, warp: TimeWarp, omega_draw, w_draw):
    require(np.shape(omega_draw) == ts.r.shape, "omega draw does not match the source set")
    require(np.shape(w_draw) == ts.m.shape, "weight draw does not match the source set")
    return evaluate_derivatives(omega_draw, w_draw, warp.times)


def constraint_log_likelihood(derivs, gamma: float) -> float:
    """Sum of ``log sigmoid(-gamma * S')``: favors non-increasing sources."""
    if not gamma > 0:
        raise ContractError(f"gamma must be positive, got {gamma}")
    return -float(np.sum(np.logaddexp(0.0, gamma * np.asarray(derivs, dtype=np.float64))))


def constraint_times(times, n_grid: int = 64) -> np.ndarray:
    """Observation times followed by a uniform grid spanning their range."""
    times = np.asarray(times, dtype=np.float64)
    if n_grid <= 0:
        return times.copy()
    grid = np.linspace(times.min(), times.max(), n_grid)
    return np.concatenate([times, grid])


def rff_backward(omega, w, t, g_s, g_d):
    """Pull upstream gradients w.r.t. S(t) and S'(t) back to (omega, w, t).

    ``g_s`` and ``g_d`` are (len(t), N_s). Returns ``(g_omega, g_w, g_t)``.
    """
    rf = omega.shape[1]
    wc = w[:, :rf]
    ws = w[:, rf:]
    arg = t[:, None, None] * omega[None]
    c = np.cos(arg)
    sn = np.sin(arg)
    slope = -sn * wc + c * ws  # d/d(arg) of phi(arg) @ w, per feature
    curv = -c * wc - sn * ws  # second derivative per feature
    gs = g_s[:, :, None]
    gd = g_d[:, :, None]
    g_wc = np.sum(gs * c - gd * omega * sn, axis=0)
    g_ws = np.sum(gs * sn + gd * omega * c, axis=0)
    tt = t[:, None, None]
    g_omega = np.sum(gs * tt * slope + gd * (slope + omega * tt * curv), axis=0)
    g_t = np.sum(gs * omega * slope + gd * omega**2 * curv, axis=(1, 2))
    return g_omega, np.concatenate([g_wc, g_ws], axis=1), g_t
