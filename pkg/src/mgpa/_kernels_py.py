"""Pure numpy implementations of the hot kernels (fallback when the compiled
extension is unavailable, and the reference it is benchmarked against)."""
import numpy as np

from .kl_constants import K1, K2, K3, MU2_FLOOR


def separable_conv3d(x, fz, fy, fx):
    """Apply ``fz (x) fy (x) fx`` to a (Dz, Dy, Dx) block via three mode products."""
    dz, dy, dx = x.shape
    out = x.reshape(dz * dy, dx) @ fx.T
    out = np.matmul(fy, out.reshape(dz, dy, dx))
    out = fz @ out.reshape(dz, dy * dx)
    return out.reshape(dz, dy, dx)


def kl_codes_grad(mu, log_rho2):
    """Sparse-code KL approximation summed over entries, with its gradients.

    Returns ``(kl, dkl_dmu, dkl_dlog_rho2)``; ``kl`` is the positive divergence.
    """
    mu2 = mu * mu + MU2_FLOOR
    log_alpha = log_rho2 - np.log(mu2)
    u = K2 + K3 * log_alpha
    h = 0.5 * (1.0 + np.tanh(0.5 * u))
    # -0.5*log(1 + 1/alpha) == -0.5*softplus(-log_alpha)
    neg = K1 * h - 0.5 * np.logaddexp(0.0, -log_alpha) - K1
    sig_neg = 0.5 * (1.0 - np.tanh(0.5 * log_alpha))
    dneg = K1 * K3 * h * (1.0 - h) + 0.5 * sig_neg
    kl = -float(np.sum(neg))
    return kl, dneg * (2.0 * mu / mu2), -dneg


def residual_moments(y, s, a, z):
    """Return ``(sum r^2, r @ a.T, s.T @ r, r.sum(0))`` for ``r = y - s @ a - z``."""
    r = y - s @ a - z
    return float(np.vdot(r, r)), r @ a.T, s.T @ r, r.sum(axis=0)
