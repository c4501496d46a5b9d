"""Univariate slice sampling on the positive half-line.

Used for the shape parameters of the Gamma-prior model, whose full
conditionals are log-concave but not of a standard family. Sampling is done
on the log scale so a unit bracket width covers many orders of magnitude.
Elements of an array are independent targets updated in lockstep.
"""

import numpy as np


class BracketError(RuntimeError):
    """Raised when the slice cannot be bracketed within the step budget."""


def logconcave_sample(rng, log_density, x0, width=1.0, max_steps=60):
    """Draw one slice-sampling update for each element of ``x0``.

    Args:
        rng: ``numpy.random.Generator``.
        log_density: callable mapping a positive array shaped like ``x0`` to
            elementwise unnormalized log densities (element i is target i).
        x0: current positive value(s); the update is a valid Markov transition.
        width: initial bracket width on the log scale.
        max_steps: bracket expansions allowed per side.

    Returns:
        Array shaped like ``x0`` (float for scalar input) of positive draws.
    """
    x0 = np.asarray(x0, dtype=float)
    shape = x0.shape
    if np.any(~(x0 > 0)) or np.any(~np.isfinite(x0)):
        raise ValueError("slice sampler needs finite positive starting values")
    u0 = np.log(x0).ravel()

    def h(u, idx=None):
        # log density of log(x): log f(e^u) + u
        if idx is None:
            full = u
        else:
            full = u0.copy()
            full[idx] = u
        with np.errstate(over="ignore", under="ignore", invalid="ignore"):
            val = np.asarray(log_density(np.exp(full).reshape(shape)), dtype=float).ravel() + full
        val = np.where(np.isnan(val), -np.inf, val)
        return val if idx is None else val[idx]

    h0 = h(u0)
    if np.any(~np.isfinite(h0)):
        raise ValueError("log density is not finite at the starting value")
    level = h0 - rng.exponential(size=u0.size)
    left = u0 - width * rng.random(u0.size)
    right = left + width

    for side, sign in ((left, -1.0), (right, 1.0)):
        out = h(side) > level
        steps = 0
        while out.any():
            if steps == max_steps:
                bad = np.flatnonzero(out)[:5]
                raise BracketError(
                    f"slice not bracketed after {max_steps} expansions: "
                    f"start={x0.ravel()[bad]}, log-density at start={h0[bad]}, "
                    f"endpoint={np.exp(side[bad])}")
            side[out] += sign * width
            steps += 1
            out = h(side) > level

    new = np.empty_like(u0)
    todo = np.arange(u0.size)
    while todo.size:
        lo, hi = left[todo], right[todo]
        cand = lo + (hi - lo) * rng.random(todo.size)
        ok = h(cand, todo) > level[todo]
        new[todo[ok]] = cand[ok]
        rej, c = todo[~ok], cand[~ok]
        below = c < u0[rej]
        left[rej[below]] = c[below]
        right[rej[~below]] = c[~below]
        todo = rej
    out = np.exp(new).reshape(shape)
    return float(out) if out.ndim == 0 else out
