"""Stochastic gradient ascent on the ELBO with alternating parameter blocks.

Training alternates ``block_len`` steps on the spatio-temporal parameters (temporal
GP posteriors, code posteriors, static offset) with ``block_len`` steps on the
per-sample time-shifts and the noise level. Step sizes follow Adam with bias
correction; each parameter array keeps its own moment estimates and update count.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .elbo import KL_OMEGA_FORMS, Draws, ElboBreakdown, elbo_terms
from .model import ALL_PARAMS, MODEL_PARAMS, SHIFT_PARAMS, DataMatrix, ModelParams
from .spatial_codes import SpatialCodeSet, assemble_maps, pruned_means
from .temporal_gp import TemporalSourceSet, TimeWarp, evaluate_derivatives, evaluate_sources
from .tensor_core import ContractError, SeededRng, read_tensor, require, write_tensor

log = logging.getLogger(__name__)

TRACE_HEADER = ("step", "block", "data", "constraint", "kl_codes", "kl_omega", "kl_w", "total")


class FitError(RuntimeError):
    """Training produced a non-finite gradient or objective."""


@dataclass
class FitConfig:
    source_spec: tuple[float, ...] = (2.0, 2.0, 1.0, 1.0, 0.5, 0.5)
    n_epochs: int = 10
    block_len: int = 100
    lr_model: float = 1e-2
    lr_timeshift: float = 1e-2
    gamma: float = 1.0
    n_mc: int = 1
    seed: int = 0
    prune_threshold: float = 3.0
    n_rf: int = 50
    optimize_timeshift: bool = True
    kl_omega_form: str = "textbook"
    n_grid: int = 64
    spacing: float = 1.0
    init_lengthscale: float = 4.0
    init_code_var: float = 1e-2
    batch_size: Optional[int] = None
    marginalize_codes: bool = True
    lr_final_ratio: float = 1.0  # learning rates decay geometrically to lr * ratio

    def __post_init__(self):
        self.source_spec = tuple(float(v) for v in self.source_spec)
        require(len(self.source_spec) >= 1, "source_spec must list at least one length-scale")
        require(all(v > 0 for v in self.source_spec), "length-scales must be positive")
        for name in ("n_epochs", "block_len", "n_mc", "n_rf"):
            require(int(getattr(self, name)) >= 1, f"{name} must be >= 1")
        for name in ("lr_model", "lr_timeshift", "gamma", "spacing", "init_lengthscale",
                     "init_code_var", "lr_final_ratio"):
            require(getattr(self, name) > 0, f"{name} must be positive")
        require(self.kl_omega_form in KL_OMEGA_FORMS, f"kl_omega_form must be one of {KL_OMEGA_FORMS}")
        require(int(self.seed) >= 0, "seed must be non-negative")
        require(self.batch_size is None or int(self.batch_size) >= 1, "batch_size must be >= 1")

    @property
    def n_sources(self) -> int:
        return len(self.source_spec)

    @property
    def steps_per_epoch(self) -> int:
        return self.block_len * (2 if self.optimize_timeshift else 1)

    @property
    def total_steps(self) -> int:
        return self.n_epochs * self.steps_per_epoch

    def lr_at(self, step: int, block: str) -> float:
        base = self.lr_model if block == "model" else self.lr_timeshift
        return base * self.lr_final_ratio ** (step / max(self.total_steps, 1))

    def block_of(self, step: int) -> str:
        if not self.optimize_timeshift:
            return "model"
        return "model" if (step // self.block_len) % 2 == 0 else "shift"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["source_spec"] = list(self.source_spec)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown FitConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FitState:
    params: ModelParams
    step: int = 0
    # per-parameter Adam state: name -> [first moment, second moment, update count]
    moments: dict = field(default_factory=dict)
    time_offset: float = 0.0  # nominal time t maps to model time (t - offset) / scale
    time_scale: float = 1.0
    data_scale: float = 1.0  # the model is fitted to y / data_scale

    def nominal_to_model_time(self, t):
        return (np.asarray(t, dtype=np.float64) - self.time_offset) / self.time_scale


@dataclass
class FitResult:
    state: FitState
    trace: list = field(default_factory=list)  # tuples matching TRACE_HEADER


def _groups(cfg: FitConfig, block: str) -> tuple[str, ...]:
    if not cfg.optimize_timeshift:
        return MODEL_PARAMS + ("log_sigma",)
    return MODEL_PARAMS if block == "model" else SHIFT_PARAMS


def initial_state(data: DataMatrix, cfg: FitConfig) -> FitState:
    """Fresh parameters: Z at the voxelwise mean, sigma at the residual scale, delta = 0.

    The data are divided by the RMS of their deviation from the voxelwise mean, so
    initial scales and learning rates do not depend on the image intensity units.
    """
    rng = SeededRng(cfg.seed).substream(0)
    p, f = data.y.shape
    temporal = TemporalSourceSet.initialize(cfg.n_sources, cfg.n_rf, rng.substream(1),
                                            lengthscale=cfg.init_lengthscale)
    codes = SpatialCodeSet.initialize(cfg.n_sources, f, rng.substream(2), mu_var=cfg.init_code_var)
    offset, scale = 0.0, 1.0
    if data.times is not None:
        lo, hi = float(np.min(data.times)), float(np.max(data.times))
        offset = lo
        scale = hi - lo if hi > lo else 1.0
        tau = (data.times - offset) / scale
    else:
        tau = np.zeros(p)
    mean = data.y.mean(axis=0)
    resid = data.y - mean
    data_scale = float(np.sqrt(np.mean(resid * resid)))
    if not data_scale > 0:
        data_scale = float(np.sqrt(np.mean(mean * mean))) or 1.0
    z = mean / data_scale
    sigma0 = 1.0
    params = ModelParams(
        temporal=temporal,
        codes=codes,
        warp=TimeWarp.zeros(p, tau),
        z=z.copy(),
        log_sigma=np.log(sigma0),
        grid=data.grid,
        lambdas=cfg.source_spec,
        spacing=cfg.spacing,
    )
    return FitState(params=params, time_offset=offset, time_scale=scale, data_scale=data_scale)


def _adam_update(state: FitState, name: str, grad: np.ndarray, lr: float,
                 b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
    arr = state.params.arrays()[name]
    mom = state.moments.get(name)
    if mom is None:
        mom = [np.zeros_like(arr), np.zeros_like(arr), 0]
        state.moments[name] = mom
    m, v, count = mom
    count += 1
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**count)
    v_hat = v / (1.0 - b2**count)
    # ascent: maximize the ELBO
    arr += lr * m_hat / (np.sqrt(v_hat) + eps)
    mom[2] = count


def _check_finite(bd: ElboBreakdown, grads: dict, step: int):
    for key, val in bd.as_dict().items():
        if not math.isfinite(val):
            raise FitError(f"non-finite ELBO term '{key}' at step {step}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FitError(f"non-finite gradient for '{name}' at step {step}")


def train_step(state: FitState, y: np.ndarray, cfg: FitConfig) -> tuple[str, ElboBreakdown]:
    """One ascent step on ``y`` (already divided by ``state.data_scale``)."""
    step = state.step
    block = cfg.block_of(step)
    rng = SeededRng(cfg.seed).substream(1, step)
    rows = None
    n_samples = y.shape[0]
    if cfg.batch_size is not None and cfg.batch_size < n_samples:
        rows = np.sort(rng.substream(0).permutation(n_samples)[: cfg.batch_size])
    acc = None
    parts = []
    for k in range(cfg.n_mc):
        draws = Draws.sample(state.params, rng.substream(1, k))
        bd, g = elbo_terms(state.params, y, draws, cfg.gamma, cfg.kl_omega_form, cfg.n_grid,
                           True, rows, cfg.marginalize_codes)
        parts.append(bd)
        if acc is None:
            acc = {name: np.array(g[name], dtype=np.float64) for name in ALL_PARAMS}
        else:
            for name in ALL_PARAMS:
                acc[name] += g[name]
    if cfg.n_mc > 1:
        acc = {name: v / cfg.n_mc for name, v in acc.items()}
        bd = ElboBreakdown(
            sum(b.data_term for b in parts) / cfg.n_mc,
            sum(b.constraint_term for b in parts) / cfg.n_mc,
            parts[0].kl_codes, parts[0].kl_omega, parts[0].kl_w,
        )
    _check_finite(bd, acc, step)
    lr = cfg.lr_at(step, block)
    for name in _groups(cfg, block):
        _adam_update(state, name, acc[name], lr)
    state.step += 1
    return block, bd


def fit(data: DataMatrix, cfg: FitConfig, state: Optional[FitState] = None,
        stop_at: Optional[int] = None,
        callback: Optional[Callable[[FitState, ElboBreakdown], None]] = None) -> FitResult:
    """Run training to ``cfg.total_steps`` (or ``stop_at``), resuming from ``state`` if given."""
    require(bool(np.all(np.isfinite(data.y))), "data contains non-finite values")
    if state is None:
        state = initial_state(data, cfg)
    end = cfg.total_steps if stop_at is None else min(int(stop_at), cfg.total_steps)
    result = FitResult(state=state)
    y = data.y / state.data_scale
    while state.step < end:
        step = state.step
        block, bd = train_step(state, y, cfg)
        result.trace.append((step, block, bd.data_term, bd.constraint_term, bd.kl_codes,
                             bd.kl_omega, bd.kl_w, bd.total))
        if callback is not None:
            callback(state, bd)
    return result


def posterior_mean_sources(params: ModelParams, times) -> np.ndarray:
    return evaluate_sources(params.temporal.r, params.temporal.m, np.asarray(times, dtype=np.float64))


def posterior_mean_derivatives(params: ModelParams, times) -> np.ndarray:
    return evaluate_derivatives(params.temporal.r, params.temporal.m,
                                np.asarray(times, dtype=np.float64))


def posterior_maps(params: ModelParams, prune_threshold: Optional[float] = 3.0) -> np.ndarray:
    codes = params.codes.mu if prune_threshold is None else pruned_means(params.codes, prune_threshold)
    return assemble_maps(codes, params.kernels)


def predict(state: FitState, times, prune_threshold: float = 3.0) -> np.ndarray:
    """Mean reconstruction ``S(t) A + Z`` at model times ``t``, in data units; shape (len(times), F)."""
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    s = posterior_mean_sources(state.params, times)
    a = posterior_maps(state.params, prune_threshold)
    return state.data_scale * (s @ a + state.params.z)


def evaluation_grid(params: ModelParams, n: int = 200) -> np.ndarray:
    t = params.warp.times
    lo, hi = float(t.min()), float(t.max())
    return np.linspace(lo, hi, n)


def source_energy(params: ModelParams, prune_threshold: float = 3.0) -> np.ndarray:
    """Per-source RMS contribution of ``S_n(t) A_n`` over the training samples."""
    s = posterior_mean_sources(params, params.warp.times)
    a = posterior_maps(params, prune_threshold)
    s_c = s - s.mean(axis=0)
    return np.sqrt(np.mean(s_c**2, axis=0) * np.mean(a**2, axis=1))


def active_sources(params: ModelParams, prune_threshold: float = 3.0,
                   rel_energy: float = 0.05) -> np.ndarray:
    """Boolean per source: some code entry survives pruning and the source carries at
    least ``rel_energy`` of the strongest source's contribution."""
    kept = (params.codes.log_alpha <= prune_threshold).any(axis=1)
    energy = source_energy(params, prune_threshold)
    top = energy.max() if energy.size else 0.0
    if not top > 0:
        return np.zeros(params.n_sources, dtype=bool)
    return kept & (energy >= rel_energy * top)


def monotonicity_violation(params: ModelParams, which=None, n: int = 200) -> np.ndarray:
    """Per source: ``max_t S'(t) / max_t |S(t)|`` on a dense grid over the fitted range.

    A source satisfies the constraint at tolerance ``tol`` when this is ``<= tol``.
    """
    t = evaluation_grid(params, n)
    s = posterior_mean_sources(params, t)
    d = posterior_mean_derivatives(params, t)
    scale = np.max(np.abs(s), axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    out = np.max(d, axis=0) / scale
    if which is not None:
        out = out[np.asarray(which)]
    return out


@dataclass
class GammaSelection:
    gamma: float
    ok: bool  # False: no grid value gave monotonic sources; gamma is the largest tried
    violations: dict  # gamma -> number of retained sources violating monotonicity


def select_gamma(data: DataMatrix, cfg: FitConfig, gamma_grid, tol: float = 1e-3) -> GammaSelection:
    """Smallest gamma in ``gamma_grid`` whose pilot fit (``cfg`` with gamma replaced)
    yields retained sources with ``S'(t) <= tol * max|S|`` on the evaluation grid."""
    grid = [float(g) for g in gamma_grid]
    require(len(grid) >= 1, "gamma grid must be non-empty")
    require(all(g > 0 for g in grid), "gamma values must be positive")
    require(all(a < b for a, b in zip(grid, grid[1:])), "gamma grid must be increasing")
    violations = {}
    for g in grid:
        pilot = FitConfig.from_dict({**cfg.to_dict(), "gamma": g})
        res = fit(data, pilot)
        keep = active_sources(res.state.params, pilot.prune_threshold)
        viol = monotonicity_violation(res.state.params)[keep]
        violations[g] = int(np.sum(viol > tol))
        log.info("gamma=%g: %d of %d retained sources non-monotonic", g, violations[g], keep.sum())
        if violations[g] == 0:
            return GammaSelection(g, True, violations)
    log.warning("no gamma in %s gave monotonic sources; returning %g", grid, grid[-1])
    return GammaSelection(grid[-1], False, violations)


# ---------------------------------------------------------------- persistence

CHECKPOINT_VERSION = 1
MANIFEST_NAME = "manifest.json"


def save_checkpoint(state: FitState, cfg: FitConfig, directory) -> Path:
    """Write ``state`` as a JSON manifest plus one MGPT file per array.

    Optimizer moments are saved too, so a resumed run continues bit-for-bit.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pr = state.params
    tensors = {}
    for name, arr in pr.arrays().items():
        fname = f"{name}.mgpt"
        write_tensor(directory / fname, arr)
        tensors[name] = fname
    write_tensor(directory / "tau.mgpt", pr.warp.tau)
    tensors["tau"] = "tau.mgpt"
    moments = {}
    for name, (m, v, count) in sorted(state.moments.items()):
        write_tensor(directory / f"adam_m_{name}.mgpt", m)
        write_tensor(directory / f"adam_v_{name}.mgpt", v)
        moments[name] = {"m": f"adam_m_{name}.mgpt", "v": f"adam_v_{name}.mgpt", "count": int(count)}
    manifest = {
        "format": "mgpa-checkpoint",
        "version": CHECKPOINT_VERSION,
        "step": int(state.step),
        "time_offset": state.time_offset,
        "time_scale": state.time_scale,
        "data_scale": state.data_scale,
        "grid": list(pr.grid),
        "lambdas": list(pr.lambdas),
        "spacing": pr.spacing,
        "config": cfg.to_dict(),
        "tensors": tensors,
        "moments": moments,
    }
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(directory) -> tuple[FitState, FitConfig]:
    directory = Path(directory)
    path = directory / MANIFEST_NAME
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ContractError(f"{path}: invalid JSON at byte {exc.pos}: {exc.msg}") from exc
    if manifest.get("format") != "mgpa-checkpoint" or manifest.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    t = {name: read_tensor(directory / fname) for name, fname in manifest["tensors"].items()}
    params = ModelParams(
        temporal=TemporalSourceSet(t["r"], t["log_p2"], t["m"], t["log_s2"], t["log_l"]),
        codes=SpatialCodeSet(t["mu"], t["log_rho2"]),
        warp=TimeWarp(t["delta"], t["tau"]),
        z=t["z"],
        log_sigma=t["log_sigma"],
        grid=tuple(manifest["grid"]),
        lambdas=tuple(manifest["lambdas"]),
        spacing=manifest["spacing"],
    )
    moments = {
        name: [read_tensor(directory / e["m"]), read_tensor(directory / e["v"]), int(e["count"])]
        for name, e in manifest["moments"].items()
    }
    state = FitState(params=params, step=int(manifest["step"]), moments=moments,
                     time_offset=manifest["time_offset"], time_scale=manifest["time_scale"],
                     data_scale=manifest["data_scale"])
    return state, FitConfig.from_dict(manifest["config"])


def write_trace(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
        for row in trace:
            writer.writerow([row[0], row[1]] + [repr(float(v)) for v in row[2:]])


def read_trace(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != TRACE_HEADER:
            raise ContractError(f"{path}: unexpected trace header {header}")
        return [(int(r[0]), r[1], *map(float, r[2:])) for r in reader]
