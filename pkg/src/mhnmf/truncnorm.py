"""Sampling and densities for the Normal distribution truncated to [0, inf)."""

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri

# Standardized lower bound above which inverse-CDF loses precision; switch to
# exponential-proposal rejection (Robert, 1995) beyond it.
_TAIL_SWITCH = 5.0


def _tail_draw(rng, alpha):
    """Standard normal draws conditioned on z >= alpha, alpha > 0, by rejection."""
    alpha = np.asarray(alpha, dtype=float)
    out = np.empty_like(alpha)
    todo = np.arange(alpha.size)
    lam = 0.5 * (alpha + np.sqrt(alpha * alpha + 4.0))
    while todo.size:
        a = alpha.flat[todo]
        lm = lam.flat[todo]
        z = a + rng.exponential(size=todo.size) / lm
        ok = rng.random(todo.size) <= np.exp(-0.5 * (z - lm) ** 2)
        out.flat[todo[ok]] = z[ok]
        todo = todo[~ok]
    return out


def rtruncnorm(rng, mean, var):
    """Draw from TruncNormal(mean, var) restricted to [0, inf), elementwise.

    ``mean`` and ``var`` broadcast against each other; ``var`` must be positive.
    """
    mean, var = np.broadcast_arrays(np.asarray(mean, dtype=float),
                                    np.asarray(var, dtype=float))
    sd = np.sqrt(var)
    alpha = -mean / sd
    z = np.empty(mean.shape)
    body = alpha < _TAIL_SWITCH
    if body.any():
        a = alpha[body]
        # P(Z > z) = Phi(-z) / Phi(-a); invert on the upper tail for accuracy.
        upper = ndtr(-a)
        u = rng.random(a.size)
        zb = -ndtri(u * upper)
        # ndtri(0) = -inf when u underflows; fall back to the bound.
        z[body] = np.maximum(np.where(np.isfinite(zb), zb, a), a)
    tail = ~body
    if tail.any():
        z[tail] = _tail_draw(rng, alpha[tail])
    x = mean + sd * z
    return np.maximum(x, 0.0)


def log_dtruncnorm(x, mean, var):
    """Log density of TruncNormal(mean, var) on [0, inf) at ``x`` (>= 0)."""
    x = np.asarray(x, dtype=float)
    sd = np.sqrt(var)
    z = (x - mean) / sd
    out = -0.5 * z * z - 0.5 * np.log(2.0 * np.pi) - np.log(sd) - log_ndtr(mean / sd)
    return np.where(x < 0, -np.inf, out)
