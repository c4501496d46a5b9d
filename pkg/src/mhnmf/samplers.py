"""One-iteration updates for the six likelihood/prior samplers.

All factor updates are done one latent factor at a time. Within a factor the
elements of a column of P (or a row of E) are conditionally independent given
everything else, so they are updated together as a vector; this is
distributionally identical to a one-element-at-a-time systematic scan.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, xlogy

from . import rank as rank_mod
from .model import (
    NOISE_RATE, NOISE_SHAPE, RATE_FLOOR, ContractError, ModelState, PriorParams,
    check_counts, default_hyperparams, log_factorial, log_prior,
    normal_loglik, poisson_loglik,
)
from .slice import logconcave_sample
from .truncnorm import log_dtruncnorm, rtruncnorm


ENGINES = ("compiled", "numpy")


@dataclass
class ProposalParams:
    """Truncated Normal on [0, inf) with the given mean and variance."""

    mean: float
    variance: float


class ExcludedFactor(Exception):
    """Proposal requested for a factor whose inclusion indicator is 0."""


@dataclass
class MhStats:
    accept_P: int = 0
    propose_P: int = 0
    accept_E: int = 0
    propose_E: int = 0
    # mean of min(1, a) over the elements proposed this iteration
    ratio_P: float = float("nan")
    ratio_E: float = float("nan")
    _sum: dict = field(default_factory=lambda: {"P": 0.0, "E": 0.0}, repr=False)

    def reset(self):
        self.accept_P = self.propose_P = self.accept_E = self.propose_E = 0
        self._sum = {"P": 0.0, "E": 0.0}
        self.ratio_P = self.ratio_E = float("nan")

    def add(self, side, accepted, ratios):
        self.add_counts(side, int(accepted.sum()), accepted.size, float(ratios.sum()))

    def add_counts(self, side, accepted, proposed, ratio_sum):
        setattr(self, f"accept_{side}", getattr(self, f"accept_{side}") + int(accepted))
        setattr(self, f"propose_{side}", getattr(self, f"propose_{side}") + int(proposed))
        self._sum[side] += ratio_sum
        n = getattr(self, f"propose_{side}")
        setattr(self, f"ratio_{side}", self._sum[side] / n if n else float("nan"))


# ---------------------------------------------------------------------------
# building blocks shared by the Normal full conditionals and the MH proposals


def conditional_params(prior, params, coef, resid, weight, active=1.0):
    """Mean and variance of the Normal-model full conditional of a block.

    The block is a column of P (rows index k, columns of ``resid`` index g) or
    a row of E (passed transposed). ``weight`` holds inverse variances: the
    Normal model's 1/sigma2_g, or 1/(PE)_kg when building MH proposals.

    Returns:
        (mean, var) arrays; var is inf where the precision is not positive.
    """
    c2 = coef * coef
    B = active * (weight @ c2)
    C = active * ((resid * weight) @ coef)
    if prior == "truncnormal":
        prec = 1.0 / params["var"] + B
        num = params["mean"] / params["var"] + C
    elif prior == "exponential":
        prec = B
        num = C - params["rate"]
    else:
        raise ContractError(f"no Normal-model conditional for prior {prior!r}")
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = num / prec
        var = 1.0 / prec
    var = np.where(prec > 0, var, np.inf)
    return mean, var


def prior_draw(rng, prior, params):
    if prior == "truncnormal":
        return rtruncnorm(rng, params["mean"], params["var"])
    if prior == "exponential":
        return rng.exponential(1.0 / params["rate"])
    return rng.gamma(params["shape"], 1.0 / params["rate"])


def log_prior_elem(x, prior, params):
    if prior == "truncnormal":
        return log_dtruncnorm(x, params["mean"], params["var"])
    if prior == "exponential":
        return np.log(params["rate"]) - params["rate"] * x
    shape, rate = params["shape"], params["rate"]
    return shape * np.log(rate) - gammaln(shape) + xlogy(shape - 1, x) - rate * x


def _log_ratio(M, resid, lam_cur, lam_new, coef, x_cur, x_new, m_fwd, v_fwd,
               prior, params, ratio, active=1.0):
    # Poisson part, shared by both ratios
    out = np.sum(M * np.log(lam_new / lam_cur) - lam_new + lam_cur, axis=1)
    if ratio == "paper":
        out += np.sum(0.5 * np.log(lam_cur / lam_new)
                      - 0.5 * (M - lam_cur) ** 2 / lam_new
                      + 0.5 * (M - lam_new) ** 2 / lam_cur, axis=1)
        return out
    m_rev, v_rev = conditional_params(prior, params, coef, resid, 1.0 / lam_new, active)
    out += log_prior_elem(x_new, prior, params) - log_prior_elem(x_cur, prior, params)
    out += log_dtruncnorm(x_cur, m_rev, v_rev) - log_dtruncnorm(x_new, m_fwd, v_fwd)
    return out


def log_acceptance_ratio(M, mhat_minus, coef, x_cur, x_new, prior, params,
                         ratio="exact", active=1.0):
    """Log MH acceptance ratio for a block of proposals.

    ``ratio="paper"`` is the likelihood-only ratio
    prod Pois(M|P*E) N(M|PE, P*E) / (Pois(M|PE) N(M|P*E, PE)), which omits the
    state-dependent normalizer of the Truncated Normal proposal.
    ``ratio="exact"`` is the full Metropolis-Hastings ratio
    f(x*) q(x|x*) / (f(x) q(x*|x)) with both proposal densities normalized.
    """
    lam_cur = np.maximum(mhat_minus + active * np.outer(x_cur, coef), RATE_FLOOR)
    lam_new = np.maximum(mhat_minus + active * np.outer(x_new, coef), RATE_FLOOR)
    resid = M - mhat_minus
    m_fwd, v_fwd = conditional_params(prior, params, coef, resid, 1.0 / lam_cur, active)
    return _log_ratio(M, resid, lam_cur, lam_new, coef, x_cur, x_new, m_fwd, v_fwd,
                      prior, params, ratio, active)


def mh_step_block(rng, M, mhat, coef, x_cur, prior, params, warmup=False, ratio="exact"):
    """Propose and accept/reject a block of conditionally independent elements.

    ``mhat`` is the current reconstruction oriented so rows index the block.

    Returns:
        (new values, new reconstruction, accepted mask, min(1, a) per element).
    """
    mhat_minus = mhat - np.outer(x_cur, coef)
    resid = M - mhat_minus
    lam_cur = np.maximum(mhat, RATE_FLOOR)
    mean, var = conditional_params(prior, params, coef, resid, 1.0 / lam_cur)
    degenerate = ~np.isfinite(var) | ~np.isfinite(mean) | ~(var > 0)
    if degenerate.any():
        mean, var = np.where(degenerate, 0.0, mean), np.where(degenerate, 1.0, var)
    x_new = rtruncnorm(rng, mean, var)
    if degenerate.any():
        sub = {k: np.broadcast_to(v, x_cur.shape)[degenerate] for k, v in params.items()}
        x_new[degenerate] = prior_draw(rng, prior, sub)
    mh_new = mhat_minus + np.outer(x_new, coef)
    if warmup:
        return x_new, mh_new, np.ones(x_cur.shape, bool), np.ones(x_cur.shape)
    lam_new = np.maximum(mh_new, RATE_FLOOR)
    with np.errstate(invalid="ignore"):
        loga = _log_ratio(M, resid, lam_cur, lam_new, coef, x_cur, x_new, mean, var,
                          prior, params, ratio)
    loga = np.where(degenerate, 0.0, np.where(np.isnan(loga), -np.inf, loga))
    accepted = np.log(rng.random(x_cur.shape)) < loga
    x_out = np.where(accepted, x_new, x_cur)
    mh_out = np.where(accepted[:, None], mh_new, mhat)
    return x_out, mh_out, accepted, np.exp(np.minimum(loga, 0.0))


def gibbs_update_Z(rng, M, P, A, E):
    """Allocate each count M_kg over factors, proportional to P_kn A_n E_ng.

    Returns a K x G x N integer array. Cells whose weights are all zero but
    whose count is positive are split evenly (multinomially) over included
    factors, or over all factors if none is included.
    """
    w = P[:, None, :] * (A[:, None] * E).T[None, :, :]
    tot = w.sum(axis=2, keepdims=True)
    stuck = (tot[..., 0] <= 0)
    if stuck.any():
        fallback = A if A.sum() > 0 else np.ones_like(A)
        w[stuck] = fallback
        tot = w.sum(axis=2, keepdims=True)
    probs = w / tot
    counts = np.asarray(M, dtype=np.int64)
    return rng.multinomial(counts, probs)


def sigma2_params(M, Mhat):
    """Shape and rate of the InverseGamma full conditional of each sigma2_g."""
    K = M.shape[0]
    return NOISE_SHAPE + K / 2.0, NOISE_RATE + 0.5 * np.sum((M - Mhat) ** 2, axis=0)


def rinvgamma(rng, shape, rate):
    return rate / rng.gamma(shape, 1.0, size=np.shape(rate))


def update_prior_params(rng, state):
    """Gibbs (or slice) updates for every element-wise prior parameter."""
    h = state.hypers
    pr = state.priors
    for side, x in (("P", state.P), ("E", state.E)):
        p = getattr(pr, side)
        if pr.prior == "truncnormal":
            prec = 1.0 / h["s2"] + 1.0 / p["var"]
            mean = (h["m"] / h["s2"] + x / p["var"]) / prec
            p["mean"] = mean + rng.standard_normal(x.shape) / np.sqrt(prec)
            p["var"] = rinvgamma(rng, h["a"] + 0.5, h["b"] + 0.5 * (x - p["mean"]) ** 2)
        elif pr.prior == "exponential":
            p["rate"] = rng.gamma(h["a"] + 1.0, 1.0 / (h["b"] + x))
        else:
            p["rate"] = rng.gamma(h["a"] + p["shape"], 1.0 / (h["b"] + x))
            p["shape"] = sample_gamma_shape(rng, p["shape"], p["rate"], x, h["c"], h["d"])
    return pr


def gamma_shape_logdensity(alpha, rate, x, c, d):
    """Unnormalized log full conditional of a Gamma prior's shape parameter."""
    logx = np.log(np.maximum(x, 1e-300))
    return alpha * np.log(rate) - gammaln(alpha) + (alpha - 1.0) * logx \
        + (c - 1.0) * np.log(alpha) - d * alpha


def sample_gamma_shape(rng, alpha, rate, x, c, d):
    return logconcave_sample(
        rng, lambda a: gamma_shape_logdensity(a, rate, x, c, d), alpha)


# ---------------------------------------------------------------------------


def init_state(M, kind, N, rng, hyper_overrides=None, learn_rank=False):
    """Draw an initial state from the priors and hyperpriors."""
    K, G = M.shape
    mbar = float(M.mean())
    if mbar <= 0:
        raise ContractError("data matrix is all zero")
    h = default_hyperparams(kind.prior, N, mbar)
    h.update(hyper_overrides or {})
    sides = {}
    for side, shape in (("P", (K, N)), ("E", (N, G))):
        if kind.prior == "truncnormal":
            p = {"mean": h["m"] + np.sqrt(h["s2"]) * rng.standard_normal(shape),
                 "var": rinvgamma(rng, h["a"], np.full(shape, h["b"]))}
        elif kind.prior == "exponential":
            p = {"rate": rng.gamma(h["a"], 1.0 / h["b"], size=shape)}
        else:
            p = {"rate": rng.gamma(h["a"], 1.0 / h["b"], size=shape),
                 "shape": rng.gamma(h["c"], 1.0 / h["d"], size=shape)}
        sides[side] = p
    priors = PriorParams(kind.prior, sides["P"], sides["E"])
    P = prior_draw(rng, kind.prior, priors.P)
    E = prior_draw(rng, kind.prior, priors.E)
    A = np.ones(N)
    state = ModelState(P=P, E=E, A=A, R=N, priors=priors, hypers=h,
                       gamma=0.0 if learn_rank else 1.0)
    if kind.augmented:
        state.Z = gibbs_update_Z(rng, M, P, A, E)
    if kind.likelihood == "normal":
        state.sigma2 = rinvgamma(rng, NOISE_SHAPE, np.full(G, NOISE_RATE))
    return state


class Sampler:
    """Systematic-scan Gibbs sampler for one of the six models.

    Args:
        M: K x G data matrix.
        kind: ``SamplerKind``.
        N: maximum (or fixed) rank.
        rng: ``numpy.random.Generator``; the only source of randomness.
        rank_method: ``"fixed"``, ``"bfi"`` or ``"sbfi"``.
        hyper_overrides: dict of hyperprior constants to override.
        mh_ratio: ``"exact"`` (default) or ``"paper"``; see
            :func:`log_acceptance_ratio`.
        state: optional initial ``ModelState``.
        engine: ``"compiled"`` runs MH sweeps in the numba kernel,
            ``"numpy"`` uses the vectorized reference implementation.
    """

    def __init__(self, M, kind, N, rng, rank_method="fixed", hyper_overrides=None,
                 mh_ratio="exact", state=None, engine="compiled"):
        self.kind = kind
        self.M = check_counts(M, integer=kind.likelihood == "poisson")
        self.K, self.G = self.M.shape
        self.rng = rng
        if rank_method not in ("fixed", "bfi", "sbfi"):
            raise ContractError(f"unknown rank method {rank_method!r}")
        self.rank_method = rank_method
        self.learn_rank = rank_method != "fixed"
        if mh_ratio not in ("exact", "paper"):
            raise ContractError(f"unknown MH ratio {mh_ratio!r}")
        self.mh_ratio = mh_ratio
        if engine not in ENGINES:
            raise ContractError(f"unknown engine {engine!r}; use one of {ENGINES}")
        self.engine = engine
        self._Mt = None
        self.logfact = log_factorial(self.M) if kind.likelihood == "poisson" else None
        self.state = state if state is not None else init_state(
            self.M, kind, N, rng, hyper_overrides, self.learn_rank)
        self.warmup = kind.mh
        self.stats = MhStats()

    # -- likelihood helpers --------------------------------------------------

    def loglik_of(self, Mhat):
        if self.kind.likelihood == "poisson":
            return poisson_loglik(self.M, np.maximum(Mhat, RATE_FLOOR), self.logfact)
        return normal_loglik(self.M, Mhat, self.state.sigma2)

    def loglik(self):
        return self.loglik_of(self.state.Mhat)

    def log_posterior(self, loglik=None):
        if loglik is None:
            loglik = self.loglik()
        return loglik + log_prior(self.state, self.learn_rank)

    # -- factor updates ------------------------------------------------------

    def _side(self, side, n):
        s = self.state
        if side == "P":
            x, coef, M, Mh = s.P[:, n], s.E[n], self.M, s.Mhat
            params = {k: v[:, n] for k, v in s.priors.P.items()}
        else:
            x, coef, M, Mh = s.E[n], s.P[:, n], self.M.T, s.Mhat.T
            params = {k: v[n] for k, v in s.priors.E.items()}
        return x, coef, M, Mh, params

    def _store(self, side, n, x_new, mh_new):
        s = self.state
        if side == "P":
            s.P[:, n] = x_new
            s.Mhat = mh_new
        else:
            s.E[n] = x_new
            s.Mhat = mh_new.T

    def _compiled_side(self, side):
        from ._kernels import PRIOR_CODES, mh_sweep
        s = self.state
        p = getattr(s.priors, side)
        if s.priors.prior == "truncnormal":
            pa, pb = p["mean"], p["var"]
        else:
            pa = pb = p["rate"]
        acc = np.zeros(3)
        args = (s.A.astype(float), PRIOR_CODES[s.priors.prior])
        opts = (self.warmup, self.mh_ratio == "exact", RATE_FLOOR, acc)
        if side == "P":
            mh_sweep(self.rng, self.M, s.Mhat, s.P, s.E, *args, pa, pb, *opts)
        else:
            # contiguous transposed copies keep the kernel on one memory layout
            if self._Mt is None:
                self._Mt = np.ascontiguousarray(self.M.T)
            Mh, X = np.ascontiguousarray(s.Mhat.T), np.ascontiguousarray(s.E.T)
            mh_sweep(self.rng, self._Mt, Mh, X, np.ascontiguousarray(s.P.T), *args,
                     np.ascontiguousarray(pa.T), np.ascontiguousarray(pb.T), *opts)
            s.Mhat = np.ascontiguousarray(Mh.T)
            s.E = np.ascontiguousarray(X.T)
        if not self.warmup and acc[1]:
            self.stats.add_counts(side, acc[0], acc[1], acc[2])
        for n in np.flatnonzero(s.A == 0):
            x, _, _, _, params = self._side(side, n)
            x[...] = prior_draw(self.rng, s.priors.prior, params)

    def _update_side(self, side):
        s = self.state
        prior = s.priors.prior
        if self.kind.mh and self.engine == "compiled":
            self._compiled_side(side)
            return
        for n in range(s.N):
            x, coef, M, Mh, params = self._side(side, n)
            if s.A[n] == 0:
                # excluded factor: refresh from its prior, reconstruction unchanged
                new = prior_draw(self.rng, prior, params)
                if side == "P":
                    s.P[:, n] = new
                else:
                    s.E[n] = new
                continue
            if self.kind.mh:
                new, mh_new, accepted, ratios = mh_step_block(
                    self.rng, M, Mh, coef, x, prior, params,
                    warmup=self.warmup, ratio=self.mh_ratio)
                if not self.warmup:
                    self.stats.add(side, accepted, ratios)
                self._store(side, n, new, mh_new)
                continue
            mh_minus = Mh - np.outer(x, coef)
            w = 1.0 / (s.sigma2[None, :] if side == "P" else s.sigma2[:, None])
            w = np.broadcast_to(w, M.shape)
            mean, var = conditional_params(prior, params, coef, M - mh_minus, w)
            bad = ~np.isfinite(var) | ~np.isfinite(mean)
            new = np.empty_like(x)
            new[~bad] = rtruncnorm(self.rng, mean[~bad], var[~bad])
            if bad.any():
                new[bad] = prior_draw(self.rng, prior, {k: np.broadcast_to(v, x.shape)[bad]
                                                       for k, v in params.items()})
            self._store(side, n, new, mh_minus + np.outer(new, coef))

    def update_P(self):
        if self.kind.augmented:
            self._augmented_update("P")
        else:
            self._update_side("P")

    def update_E(self):
        if self.kind.augmented:
            self._augmented_update("E")
        else:
            self._update_side("E")

    def _augmented_update(self, side):
        s = self.state
        pr = s.priors
        if side == "P":
            zsum = s.Z.sum(axis=1)                       # K x N
            esum = s.E.sum(axis=1) * s.A                 # N
            p = pr.P
            shape = (p["shape"] if pr.prior == "gamma" else 1.0) + zsum
            s.P = self.rng.gamma(shape, 1.0 / (p["rate"] + esum[None, :]))
        else:
            zsum = s.Z.sum(axis=0).T                     # N x G
            psum = s.P.sum(axis=0) * s.A                 # N
            p = pr.E
            shape = (p["shape"] if pr.prior == "gamma" else 1.0) + zsum
            s.E = self.rng.gamma(shape, 1.0 / (p["rate"] + psum[:, None]))
        s.refresh()

    def update_Z(self):
        s = self.state
        s.Z = gibbs_update_Z(self.rng, self.M, s.P, s.A, s.E)

    def update_sigma2(self):
        shape, rate = sigma2_params(self.M, self.state.Mhat)
        self.state.sigma2 = rinvgamma(self.rng, shape, rate)

    def update_inclusion(self):
        s = self.state
        for n in range(s.N):
            rank_mod.update_A(self, n)
        s.R = rank_mod.update_R(self.rng, s.A, s.gamma)

    def step(self):
        """Run one full iteration and return the per-iteration MH stats."""
        s = self.state
        self.stats.reset()
        update_prior_params(self.rng, s)
        self.update_P()
        self.update_E()
        if self.kind.likelihood == "normal":
            self.update_sigma2()
        if self.learn_rank:
            self.update_inclusion()
        if self.kind.augmented:
            # refreshed after A so that counts are never attributed to excluded factors
            self.update_Z()
        s.refresh()
        s.iter += 1
        return self.stats


# ---------------------------------------------------------------------------
# element-level API


def mh_proposal_params_P(k, n, M, state, variance=None):
    """Truncated Normal proposal for P[k, n] built from the Normal-model conditional.

    ``variance`` replaces (PE)_kg by the given per-column variances, which
    yields the Normal-likelihood full conditional instead.
    """
    if state.A[n] == 0:
        raise ExcludedFactor(f"factor {n} is excluded; draw from the prior instead")
    M = np.asarray(M, dtype=float)
    mh = state.Mhat if state.Mhat is not None else state.refresh()
    minus = mh[k] - state.P[k, n] * state.E[n]
    w = 1.0 / (np.maximum(mh[k], RATE_FLOOR) if variance is None
               else np.broadcast_to(variance, mh[k].shape))
    params = {key: np.atleast_1d(v[k, n]) for key, v in state.priors.P.items()}
    mean, var = conditional_params(state.priors.prior, params, state.E[n],
                                   (M[k] - minus)[None, :], w[None, :])
    return ProposalParams(float(mean[0]), float(var[0]))


def mh_proposal_params_E(n, g, M, state, variance=None):
    """Symmetric counterpart of :func:`mh_proposal_params_P` for E[n, g]."""
    if state.A[n] == 0:
        raise ExcludedFactor(f"factor {n} is excluded; draw from the prior instead")
    M = np.asarray(M, dtype=float)
    mh = state.Mhat if state.Mhat is not None else state.refresh()
    minus = mh[:, g] - state.P[:, n] * state.E[n, g]
    w = 1.0 / (np.maximum(mh[:, g], RATE_FLOOR) if variance is None
               else np.broadcast_to(variance, mh[:, g].shape))
    params = {key: np.atleast_1d(v[n, g]) for key, v in state.priors.E.items()}
    mean, var = conditional_params(state.priors.prior, params, state.P[:, n],
                                   (M[:, g] - minus)[None, :], w[None, :])
    return ProposalParams(float(mean[0]), float(var[0]))


def augmented_gamma_params(side, idx, state):
    """Shape and rate of the augmented full conditional for P[k, n] or E[n, g]."""
    pr = state.priors
    if side == "P":
        k, n = idx
        zs = state.Z[k, :, n].sum()
        base = pr.P["shape"][k, n] if pr.prior == "gamma" else 1.0
        return base + zs, pr.P["rate"][k, n] + state.A[n] * state.E[n].sum()
    n, g = idx
    zs = state.Z[:, g, n].sum()
    base = pr.E["shape"][n, g] if pr.prior == "gamma" else 1.0
    return base + zs, pr.E["rate"][n, g] + state.A[n] * state.P[:, n].sum()
