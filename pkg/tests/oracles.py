"""Brute-force reference computations shared by the unit and acceptance tests."""
import numpy as np
from scipy.special import log_expit

from mgpa import kron_conv

EULER_GAMMA = 0.5772156649015329
# E log|eps| for eps ~ N(0, 1) is -(gamma + log 2) / 2
_LOG_ABS_NORMAL = -0.5 * (EULER_GAMMA + np.log(2.0))


def mc_kl_log_uniform(alpha, n=10_000_000, seed=0, chunk=1_000_000):
    """KL(N(mu, alpha mu^2) || log-uniform) by Monte Carlo, up to the prior's constant.

    The constant is fixed so the divergence vanishes as alpha -> inf. Returns
    ``(estimate, standard_error)``; the value does not depend on mu.
    """
    rng = np.random.default_rng(seed)
    root = np.sqrt(alpha)
    total = total_sq = 0.0
    done = 0
    while done < n:
        m = min(chunk, n - done)
        v = np.log(np.abs(1.0 + root * rng.standard_normal(m)))
        total += v.sum()
        total_sq += (v * v).sum()
        done += m
    mean = total / n
    se = np.sqrt(max(total_sq / n - mean * mean, 0.0) / n)
    return -0.5 * np.log(alpha) + mean - _LOG_ABS_NORMAL, se


# density constant c of the implied improper prior p(b) = c / |b|
LOG_CODE_PRIOR_CONST = _LOG_ABS_NORMAL - 0.5 * np.log(2.0 * np.pi * np.e)


def _log_normal(x, mean, var):
    return -0.5 * (np.log(2.0 * np.pi * var) + (x - mean) ** 2 / var)


def log_evidence(params, y, gamma, n=1_000_000, seed=0, chunk=2_000, n_grid=64):
    """Importance-sampling estimate of log p(Y, C) with the posterior q as proposal.

    Uses the textbook spectral prior N(0, l), standard-normal weights and the
    improper log-uniform code prior normalized as above. Returns
    ``(estimate, se, mean_log_weight, se_mean_log_weight)``; ``se`` is the
    delta-method standard error of the log-mean weight. The mean log weight is an
    independent estimate of the ELBO itself.
    """
    ts, sc = params.temporal, params.codes
    y = np.asarray(y, dtype=np.float64)
    p_obs, f = y.shape
    t_obs = params.warp.times
    t_all = np.concatenate([t_obs, np.linspace(t_obs.min(), t_obs.max(), n_grid)])
    dense = np.stack([kron_conv.dense_matrix(k) for k in params.kernels])  # (N_s, F, F)
    sigma2 = params.sigma**2
    p2, s2, rho2 = ts.p2, ts.s2, sc.rho2
    prior_var = ts.lengthscale[:, None]
    rng = np.random.default_rng(seed)
    logw = np.empty(n)
    for start in range(0, n, chunk):
        m = min(chunk, n - start)
        om = ts.r + np.sqrt(p2) * rng.standard_normal((m,) + ts.r.shape)
        w = ts.m + np.sqrt(s2) * rng.standard_normal((m,) + ts.m.shape)
        b = sc.mu + np.sqrt(rho2) * rng.standard_normal((m,) + sc.mu.shape)
        lw = np.zeros(m)
        lw += np.sum(_log_normal(om, 0.0, prior_var) - _log_normal(om, ts.r, p2), axis=(1, 2))
        lw += np.sum(_log_normal(w, 0.0, 1.0) - _log_normal(w, ts.m, s2), axis=(1, 2))
        lw += np.sum(LOG_CODE_PRIOR_CONST - np.log(np.abs(b)) - _log_normal(b, sc.mu, rho2),
                     axis=(1, 2))
        a = np.einsum("nfg,kng->knf", dense, b)  # (m, N_s, F)
        rf = om.shape[2]
        arg = t_all[None, :, None, None] * om[:, None]  # (m, T, N_s, rf)
        c, sn = np.cos(arg), np.sin(arg)
        wc, ws = w[:, None, :, :rf], w[:, None, :, rf:]
        s = np.sum(c * wc + sn * ws, axis=3)  # (m, T, N_s)
        d = np.sum(om[:, None] * (ws * c - wc * sn), axis=3)
        resid = y - np.einsum("kpn,knf->kpf", s[:, :p_obs], a) - params.z
        lw += (-0.5 * p_obs * f * np.log(2.0 * np.pi * sigma2)
               - 0.5 * np.sum(resid * resid, axis=(1, 2)) / sigma2
               + np.sum(log_expit(-gamma * d), axis=(1, 2)))
        logw[start:start + m] = lw
    top = logw.max()
    wts = np.exp(logw - top)
    mean = wts.mean()
    se = wts.std() / (mean * np.sqrt(n))
    return top + np.log(mean), se, logw.mean(), logw.std() / np.sqrt(n)
