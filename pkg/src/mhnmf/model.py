"""Model state, likelihoods, reconstruction and fit metrics shared by every sampler."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import gammaln, kl_div, log_ndtr, xlogy

LIKELIHOODS = ("poisson", "normal")
PRIORS = ("truncnormal", "exponential", "gamma")

# Floor applied wherever (PE)_kg is used as a Poisson rate or a proposal variance.
RATE_FLOOR = 1e-10

# Normal-likelihood noise prior: sigma2_g ~ InverseGamma(3, 3).
NOISE_SHAPE = 3.0
NOISE_RATE = 3.0


class ContractError(ValueError):
    """An operation was called with inputs that violate its preconditions."""


@dataclass(frozen=True)
class SamplerKind:
    """Likelihood / prior / MH combination; only six combinations exist."""

    likelihood: str
    prior: str
    mh: bool

    def __post_init__(self):
        if (self.likelihood, self.prior, self.mh) not in VALID_KINDS:
            raise ContractError(
                f"invalid model ({self.likelihood}, {self.prior}, mh={self.mh}); "
                f"valid combinations are: {describe_valid_kinds()}")

    @property
    def augmented(self):
        return self.likelihood == "poisson" and not self.mh

    @property
    def name(self):
        return f"{self.likelihood}-{self.prior}" + ("+mh" if self.mh else "")


VALID_KINDS = {
    ("poisson", "truncnormal", True),
    ("poisson", "exponential", True),
    ("poisson", "gamma", False),
    ("poisson", "exponential", False),
    ("normal", "truncnormal", False),
    ("normal", "exponential", False),
}


def describe_valid_kinds():
    return ", ".join(
        f"{lik}/{prior}{' +MH' if mh else ''}" for lik, prior, mh in sorted(VALID_KINDS))


def check_counts(M, integer=False):
    """Validate a K x G data matrix and return it as a float array."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] < 1 or M.shape[1] < 1:
        raise ContractError(f"data must be a nonempty 2-d matrix, got shape {M.shape}")
    if np.isnan(M).any():
        raise ContractError("data contains NaN")
    if (M < 0).any():
        raise ContractError("data contains negative entries")
    if integer and not np.all(M == np.round(M)):
        raise ContractError("Poisson likelihood requires integer counts")
    return M


def default_hyperparams(prior, N, mbar):
    """Hyperprior constants for a model of maximum rank ``N`` on data with mean ``mbar``.

    Both the P side and the E side use the same constants.
    """
    if prior == "truncnormal":
        # s2 is the variance of the Normal hyperprior on the prior means
        return {"m": 0.0, "s2": float(np.sqrt(mbar / N)), "a": N + 1.0, "b": float(np.sqrt(N))}
    if prior == "exponential":
        return {"a": 10.0 * np.sqrt(N), "b": 10.0 * np.sqrt(mbar)}
    if prior == "gamma":
        return {"a": 10.0 * np.sqrt(N), "b": 10.0, "c": 10.0 * np.sqrt(mbar), "d": 10.0}
    raise ContractError(f"unknown prior {prior!r}")


@dataclass
class PriorParams:
    """Element-wise prior parameters for P (K x N) and E (N x G).

    Keys per variant: truncnormal -> ``mean``, ``var``; exponential -> ``rate``;
    gamma -> ``shape``, ``rate``.
    """

    prior: str
    P: dict
    E: dict

    def copy(self):
        return PriorParams(self.prior, {k: v.copy() for k, v in self.P.items()},
                           {k: v.copy() for k, v in self.E.items()})


@dataclass
class ModelState:
    P: np.ndarray
    E: np.ndarray
    A: np.ndarray
    R: int
    priors: PriorParams
    hypers: dict
    Z: Optional[np.ndarray] = None  # K x G x N factor-attributed counts
    sigma2: Optional[np.ndarray] = None
    gamma: float = 1.0
    iter: int = 0
    Mhat: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        if self.Z is not None and self.sigma2 is not None:
            raise ContractError("a state cannot carry both augmentation counts and noise variances")
        if not 0.0 <= self.gamma <= 1.0:
            raise ContractError(f"temperature must lie in [0, 1], got {self.gamma}")
        if self.Mhat is None:
            self.refresh()

    @property
    def K(self):
        return self.P.shape[0]

    @property
    def N(self):
        return self.P.shape[1]

    @property
    def G(self):
        return self.E.shape[1]

    @property
    def rank(self):
        return int(self.A.sum())

    def refresh(self):
        self.Mhat = reconstruct(self.P, self.A, self.E)
        return self.Mhat

    def copy(self):
        return ModelState(
            P=self.P.copy(), E=self.E.copy(), A=self.A.copy(), R=self.R,
            priors=self.priors.copy(), hypers=dict(self.hypers),
            Z=None if self.Z is None else self.Z.copy(),
            sigma2=None if self.sigma2 is None else self.sigma2.copy(),
            gamma=self.gamma, iter=self.iter, Mhat=self.Mhat.copy())


def reconstruct(P, A, E):
    """Return PAE, the expected data under inclusion vector ``A``."""
    P = np.asarray(P, dtype=float)
    E = np.asarray(E, dtype=float)
    A = np.asarray(A, dtype=float)
    if P.ndim != 2 or E.ndim != 2 or P.shape[1] != E.shape[0] or A.shape != (P.shape[1],):
        raise ContractError(
            f"dimension mismatch: P {P.shape}, A {A.shape}, E {E.shape}")
    return P @ (A[:, None] * E)


def reconstruct_without(P, A, E, n):
    """Reconstruction after dropping factor ``n`` (the leave-one-out form)."""
    full = reconstruct(P, A, E)
    return full - A[n] * np.outer(P[:, n], E[n])


def log_factorial(M):
    return gammaln(np.asarray(M, dtype=float) + 1.0)


def poisson_loglik(M, Mhat, logfact=None):
    """Sum of Poisson log pmfs; a zero rate at a positive count gives -inf."""
    if logfact is None:
        logfact = log_factorial(M)
    with np.errstate(divide="ignore"):
        return float(np.sum(xlogy(M, Mhat) - Mhat - logfact))


def normal_loglik(M, Mhat, sigma2):
    """Sum of Normal log densities with per-column variance ``sigma2``."""
    resid = M - Mhat
    G = M.shape[1]
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=float), (G,))
    return float(-0.5 * np.sum(np.log(2 * np.pi * sigma2)[None, :] + resid ** 2 / sigma2[None, :]))


def log_likelihood(M, state, family, logfact=None):
    """Log likelihood of ``M`` under the state's reconstruction."""
    M = np.asarray(M, dtype=float)
    Mhat = reconstruct(state.P, state.A, state.E)
    if np.isnan(M).any() or np.isnan(Mhat).any():
        raise ContractError("NaN in data or state")
    if family == "poisson":
        return poisson_loglik(M, Mhat, logfact)
    if family == "normal":
        if state.sigma2 is None:
            raise ContractError("Normal likelihood requires noise variances in the state")
        return normal_loglik(M, Mhat, state.sigma2)
    raise ContractError(f"unknown likelihood family {family!r}")


def bic_from_loglik(loglik, K, G, rank):
    return -2.0 * loglik + np.log(G) * (K + G) * rank


def bic(M, state, family="poisson", logfact=None):
    M = np.asarray(M, dtype=float)
    K, G = M.shape
    return bic_from_loglik(log_likelihood(M, state, family, logfact), K, G, state.rank)


def kl_divergence(M, Mhat):
    """Generalized KL divergence sum(M log(M/Mhat) - M + Mhat)."""
    M = np.asarray(M, dtype=float)
    Mhat = np.asarray(Mhat, dtype=float)
    if (M < 0).any() or (Mhat < 0).any():
        raise ContractError("KL divergence needs nonnegative inputs")
    return float(np.sum(kl_div(M, Mhat)))


def rmse(M, Mhat):
    M = np.asarray(M, dtype=float)
    return float(np.sqrt(np.mean((M - np.asarray(Mhat, dtype=float)) ** 2)))


# ---------------------------------------------------------------------------
# log densities used for the log-posterior metric


def _lgamma_pdf(x, shape, rate):
    return shape * np.log(rate) - gammaln(shape) + xlogy(shape - 1.0, x) - rate * x


def _linvgamma_pdf(x, shape, rate):
    return shape * np.log(rate) - gammaln(shape) - (shape + 1.0) * np.log(x) - rate / x


def _log_prior_side(x, params, prior):
    if prior == "truncnormal":
        mu, var = params["mean"], params["var"]
        sd = np.sqrt(var)
        return np.sum(-0.5 * (x - mu) ** 2 / var - 0.5 * np.log(2 * np.pi * var)
                      - log_ndtr(mu / sd))
    if prior == "exponential":
        lam = params["rate"]
        return np.sum(np.log(lam) - lam * x)
    return np.sum(_lgamma_pdf(x, params["shape"], params["rate"]))


def _log_hyperprior_side(params, prior, h):
    if prior == "truncnormal":
        mu = params["mean"]
        return (np.sum(-0.5 * (mu - h["m"]) ** 2 / h["s2"] - 0.5 * np.log(2 * np.pi * h["s2"]))
                + np.sum(_linvgamma_pdf(params["var"], h["a"], h["b"])))
    if prior == "exponential":
        return np.sum(_lgamma_pdf(params["rate"], h["a"], h["b"]))
    return (np.sum(_lgamma_pdf(params["rate"], h["a"], h["b"]))
            + np.sum(_lgamma_pdf(params["shape"], h["c"], h["d"])))


def inclusion_prob(R, N):
    """Prior inclusion probability q for expected rank ``R`` of ``N``."""
    if R == 0:
        return 0.4 / N
    if R == N:
        return 1.0 - 0.4 / N
    return R / N


def log_prior(state, learn_rank=False):
    """Log prior density of all parameters (P, E, prior parameters, noise, A, R)."""
    pr = state.priors
    lp = (_log_prior_side(state.P, pr.P, pr.prior) + _log_prior_side(state.E, pr.E, pr.prior)
          + _log_hyperprior_side(pr.P, pr.prior, state.hypers)
          + _log_hyperprior_side(pr.E, pr.prior, state.hypers))
    if state.sigma2 is not None:
        lp += np.sum(_linvgamma_pdf(state.sigma2, NOISE_SHAPE, NOISE_RATE))
    if learn_rank:
        q = inclusion_prob(state.R, state.N)
        lp += np.sum(state.A * np.log(q) + (1 - state.A) * np.log1p(-q)) - np.log(state.N + 1)
    return float(lp)
