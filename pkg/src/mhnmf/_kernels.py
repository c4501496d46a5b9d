"""Compiled Metropolis-Hastings sweep for the Poisson samplers.

Element-for-element the same proposal and acceptance rule as
``samplers.mh_step_block``; elements are visited sequentially (factor-major)
instead of as numpy blocks, so the random stream differs but the target does
not. Normal CDF helpers are implemented here (erfc based) so the kernels
can be cached on disk.
"""

import math

import numpy as np
from numba import njit

PRIOR_CODES = {"truncnormal": 0, "exponential": 1}
_TAIL_SWITCH = 5.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


_SQRT1_2 = 1.0 / math.sqrt(2.0)

# Acklam's rational approximation to the normal quantile
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)


@njit(cache=True)
def _ndtr(x):
    return 0.5 * math.erfc(-x * _SQRT1_2)


@njit(cache=True)
def _log_ndtr(x):
    if x > 0.0:
        return math.log1p(-0.5 * math.erfc(x * _SQRT1_2))
    if x > -20.0:
        return math.log(0.5 * math.erfc(-x * _SQRT1_2))
    # asymptotic expansion of the lower tail
    r = 1.0 / (x * x)
    s = 1.0 - r * (1.0 - 3.0 * r * (1.0 - 5.0 * r * (1.0 - 7.0 * r)))
    return -0.5 * x * x - math.log(-x) - _HALF_LOG_2PI + math.log(s)


@njit(cache=True)
def _ndtri(p):
    if p <= 0.0:
        return -np.inf
    if p >= 1.0:
        return np.inf
    if p > 0.5:
        # 1 - p is exact here; refining against the lower tail avoids cancellation
        return -_ndtri(1.0 - p)
    if p < 0.02425:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    else:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
            (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)
    # one Halley step against the erfc-based CDF brings it to full precision
    e = _ndtr(x) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


@njit(cache=True)
def _rtn(rng, mean, var):
    sd = math.sqrt(var)
    alpha = -mean / sd
    if alpha < _TAIL_SWITCH:
        zb = -_ndtri(rng.random() * _ndtr(-alpha))
        z = zb if math.isfinite(zb) else alpha
        if z < alpha:
            z = alpha
    else:
        lam = 0.5 * (alpha + math.sqrt(alpha * alpha + 4.0))
        while True:
            z = alpha + rng.standard_exponential() / lam
            if rng.random() <= math.exp(-0.5 * (z - lam) ** 2):
                break
    x = mean + sd * z
    return x if x > 0.0 else 0.0


@njit(cache=True)
def _ldtn(x, mean, var):
    sd = math.sqrt(var)
    z = (x - mean) / sd
    return -0.5 * z * z - _HALF_LOG_2PI - math.log(sd) - _log_ndtr(mean / sd)


@njit(cache=True)
def _lprior(x, prior, pa, pb):
    if prior == 0:
        return _ldtn(x, pa, pb)
    return math.log(pa) - pa * x


@njit(cache=True)
def _cond(prior, pa, pb, B, C):
    # Normal-model conditional from the weighted sums; prec <= 0 flags degeneracy
    if prior == 0:
        return pa / pb + C, 1.0 / pb + B
    return C - pa, B


@njit(cache=True)
def mh_sweep(rng, M, Mh, X, Cf, A, prior, pa, pb, warmup, exact, floor, stats):
    """One MH pass over every element of X (I x N) for included factors.

    Oriented so that ``M`` and ``Mh`` are I x J and the reconstruction is
    ``X @ Cf`` (``Cf`` is N x J); ``Mh`` and ``X`` are updated in place.
    ``stats`` accumulates [accepted, proposed, sum of min(1, a)].
    """
    I, J = M.shape
    N = X.shape[1]
    lamc = np.empty(J)
    wc = np.empty(J)
    for n in range(N):
        if A[n] == 0:
            continue
        for i in range(I):
            x = X[i, n]
            B = 0.0
            C = 0.0
            for j in range(J):
                c = Cf[n, j]
                lam = Mh[i, j] if Mh[i, j] > floor else floor
                w = 1.0 / lam
                lamc[j] = lam
                wc[j] = w
                cw = c * w
                B += c * cw
                C += (M[i, j] - Mh[i, j] + x * c) * cw
            num, prec = _cond(prior, pa[i, n], pb[i, n], B, C)
            if not (prec > 0.0) or not math.isfinite(num / prec):
                # likelihood flat in this element: exact draw from the prior
                if prior == 0:
                    xn = _rtn(rng, pa[i, n], pb[i, n])
                else:
                    xn = rng.standard_exponential() / pa[i, n]
                for j in range(J):
                    Mh[i, j] += (xn - x) * Cf[n, j]
                X[i, n] = xn
                if not warmup:
                    stats[0] += 1.0
                    stats[1] += 1.0
                    stats[2] += 1.0
                continue
            mean = num / prec
            var = 1.0 / prec
            xn = _rtn(rng, mean, var)
            if warmup:
                for j in range(J):
                    Mh[i, j] += (xn - x) * Cf[n, j]
                X[i, n] = xn
                continue
            loga = 0.0
            Br = 0.0
            Cr = 0.0
            if exact:
                for j in range(J):
                    c = Cf[n, j]
                    mm = Mh[i, j] - x * c
                    ln = max(mm + xn * c, floor)
                    # ln and lamc are floored, so the log is finite even where M is 0
                    loga += M[i, j] * math.log(ln * wc[j]) + lamc[j] - ln
                    cw = c / ln
                    Br += c * cw
                    Cr += (M[i, j] - mm) * cw
            else:
                for j in range(J):
                    c = Cf[n, j]
                    m = M[i, j]
                    lc = lamc[j]
                    ln = max(Mh[i, j] + (xn - x) * c, floor)
                    loga += m * math.log(ln * wc[j]) + lc - ln \
                        + 0.5 * math.log(lc / ln) - 0.5 * (m - lc) ** 2 / ln \
                        + 0.5 * (m - ln) ** 2 / lc
            if exact:
                numr, precr = _cond(prior, pa[i, n], pb[i, n], Br, Cr)
                if precr > 0.0:
                    loga += _lprior(xn, prior, pa[i, n], pb[i, n]) \
                        - _lprior(x, prior, pa[i, n], pb[i, n]) \
                        + _ldtn(x, numr / precr, 1.0 / precr) - _ldtn(xn, mean, var)
                else:
                    loga = -np.inf
            if math.isnan(loga):
                loga = -np.inf
            stats[1] += 1.0
            stats[2] += math.exp(loga) if loga < 0.0 else 1.0
            if math.log(rng.random()) < loga:
                stats[0] += 1.0
                for j in range(J):
                    Mh[i, j] += (xn - x) * Cf[n, j]
                X[i, n] = xn
