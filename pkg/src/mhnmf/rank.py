"""Factor-inclusion (rank learning) updates, tempering, and the minBIC driver."""

import logging
import math
from concurrent.futures import ProcessPoolExecutor

import numpy as np
from scipy.special import expit, logsumexp

from .model import ContractError, inclusion_prob

log = logging.getLogger(__name__)

RAMP_FRACTION = 0.2


def q_of_R(R, N):
    return inclusion_prob(R, N)


def temper_gamma(iteration, maxiters, learn_rank=True):
    """Likelihood temperature: 1 for fixed rank, else a linear ramp to 1.

    The ramp reaches 1 at ``ceil(0.2 * maxiters)`` and stays there.
    """
    if not learn_rank:
        return 1.0
    ramp = max(1, math.ceil(RAMP_FRACTION * maxiters))
    return min(1.0, iteration / ramp)


def rank_log_weights(A, gamma):
    """Unnormalized log p(R = r | A) for r = 0..N under temperature ``gamma``."""
    A = np.asarray(A, dtype=float)
    N = A.size
    on = A.sum()
    q = np.array([inclusion_prob(r, N) for r in range(N + 1)])
    return -np.log(N + 1) + gamma * (on * np.log(q) + (N - on) * np.log1p(-q))


def rank_probs(A, gamma):
    lw = rank_log_weights(A, gamma)
    return np.exp(lw - logsumexp(lw))


def update_R(rng, A, gamma):
    p = rank_probs(A, gamma)
    return int(rng.choice(p.size, p=p))


def sbfi_penalty(K, G):
    """Log of the per-factor SBFI weight G^(-(K+G)/2)."""
    return -0.5 * (K + G) * np.log(G)


def inclusion_logodds(ll1, ll0, q, gamma, method, K, G):
    """log(p1 / p0) for one inclusion indicator.

    ``ll1``/``ll0`` are the log likelihoods with the factor included/excluded.
    SBFI multiplies the likelihood by G^(-(K+G)N'/2); only the one-factor
    difference in N' survives in the odds.
    """
    if method not in ("bfi", "sbfi"):
        raise ContractError(f"unknown inclusion method {method!r}")
    lik = ll1 - ll0
    if method == "sbfi":
        lik = lik + sbfi_penalty(K, G)
    if gamma == 0:
        lik = 0.0
    lo = math.log(q) - math.log1p(-q) + gamma * lik
    if math.isnan(lo):
        raise ContractError(
            f"inclusion odds undefined: loglik(A=1)={ll1}, loglik(A=0)={ll0}, gamma={gamma}")
    return lo


def inclusion_prob_update(ll1, ll0, q, gamma, method, K, G):
    return float(expit(inclusion_logodds(ll1, ll0, q, gamma, method, K, G)))


def update_A(sampler, n):
    """Gibbs update of inclusion indicator ``n`` on a :class:`Sampler`."""
    s = sampler.state
    contrib = np.outer(s.P[:, n], s.E[n])
    if s.A[n] == 1:
        mh1, mh0 = s.Mhat, s.Mhat - contrib
    else:
        mh0, mh1 = s.Mhat, s.Mhat + contrib
    if s.gamma == 0:
        ll1 = ll0 = 0.0
    else:
        ll1, ll0 = sampler.loglik_of(mh1), sampler.loglik_of(mh0)
    if ll1 == -np.inf and ll0 == -np.inf:
        raise ContractError(f"both inclusion settings of factor {n} have zero likelihood")
    q = inclusion_prob(s.R, s.N)
    p1 = inclusion_prob_update(ll1, ll0, q, s.gamma, sampler.rank_method,
                               sampler.K, sampler.G)
    a = 1.0 if sampler.rng.random() < p1 else 0.0
    s.A[n] = a
    s.Mhat = mh1 if a else mh0
    return a


# ---------------------------------------------------------------------------
# minBIC


def _fit_one(args):
    from .chain import run_chain
    M, config, rank, seed = args
    cfg = config.with_rank(rank)
    try:
        res = run_chain(M, cfg, np.random.default_rng(seed))
    except Exception as exc:  # recorded in the table, excluded from the argmin
        return rank, None, repr(exc)
    return rank, res, None


def run_min_bic(M, config, ranks, seed_seq=None, jobs=1):
    """Fit one fixed-rank chain per candidate rank and pick the minimum-BIC fit.

    BIC per fit is the mean per-sample BIC over its final inference window.

    Returns:
        (best ChainResult, table) where table is a list of dicts with keys
        ``rank``, ``bic``, ``converged``, ``error``.
    """
    ranks = list(ranks)
    if not ranks:
        raise ContractError("minBIC needs a nonempty rank range")
    if seed_seq is None:
        seed_seq = np.random.SeedSequence(config.seed)
    seeds = seed_seq.spawn(len(ranks))
    tasks = [(M, config, r, s) for r, s in zip(ranks, seeds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_fit_one, tasks))
    else:
        results = [_fit_one(t) for t in tasks]
    table, best = [], None
    for rank, res, err in results:
        row = {"rank": rank, "bic": float("nan"), "converged": False, "error": err}
        if res is not None:
            b = res.inference_bic()
            row.update(bic=b, converged=res.status.converged)
            if np.isfinite(b) and (best is None or b < best[0]):
                best = (b, res)
        else:
            log.warning("minBIC candidate rank %d failed: %s", rank, err)
        table.append(row)
    if best is None:
        raise RuntimeError(f"all minBIC candidate fits failed: {table}")
    return best[1], table
