"""Hypermutated-sample screen: negative-binomial mixtures on per-sample totals."""

from dataclasses import dataclass, field
import warnings

import numpy as np
from scipy.special import digamma, polygamma, gammaln, logsumexp
from sklearn.metrics import silhouette_score

from .model import ContractError

MAX_COMPONENTS = 10
EM_MAXITER = 500
EM_TOL = 1e-8
SIZE_MAX = 1e8


@dataclass
class NBMixture:
    weights: np.ndarray
    means: np.ndarray
    sizes: np.ndarray
    loglik: float
    n_iter: int
    converged: bool

    @property
    def C(self):
        return self.weights.size

    def bic(self, G):
        return -2 * self.loglik + (3 * self.C - 1) * np.log(G)

    def log_resp(self, x):
        lp = _nb_logpmf(x[:, None], self.means[None, :], self.sizes[None, :]) + np.log(self.weights)
        return lp - logsumexp(lp, axis=1, keepdims=True)


def _nb_logpmf(x, mu, r):
    # mean / size parameterization
    return (gammaln(x + r) - gammaln(r) - gammaln(x + 1)
            + r * np.log(r / (r + mu)) + x * np.log(mu / (r + mu)))


def _moment_size(x, w=None):
    mu = np.average(x, weights=w)
    var = np.average((x - mu) ** 2, weights=w)
    return min(SIZE_MAX, mu ** 2 / (var - mu)) if var > mu else SIZE_MAX


def _newton_size(x, w, mu, r, steps=4):
    """Maximize the weighted NB likelihood in the size with the mean held fixed (Newton on log r)."""
    W = w.sum()
    t = np.log(r)
    for _ in range(steps):
        r = np.exp(t)
        g = np.dot(w, digamma(x + r)) - W * digamma(r) + W * (np.log(r) - np.log(r + mu))
        h = np.dot(w, polygamma(1, x + r)) - W * polygamma(1, r) + W * (1 / r - 1 / (r + mu))
        # derivatives with respect to t = log r
        gt, ht = g * r, h * r * r + g * r
        step = gt / ht if ht < 0 else np.sign(gt) * 1.0
        step = np.clip(step, -2.0, 2.0)
        t = min(np.log(SIZE_MAX), t - step)
        if abs(step) < 1e-10:
            break
    return float(np.exp(t))


def fit_nb_mixture(x, C, maxiter=EM_MAXITER, tol=EM_TOL):
    """EM for a C-component NB mixture with quantile initialization."""
    x = np.asarray(x, dtype=float)
    G = x.size
    if C > G:
        raise ContractError(f"cannot fit {C} components to {G} observations")
    groups = np.array_split(np.argsort(x, kind="stable"), C)
    means = np.array([max(x[g].mean(), 1e-3) for g in groups])
    sizes = np.array([_moment_size(x[g]) if g.size > 1 else SIZE_MAX for g in groups])
    weights = np.full(C, 1.0 / C)
    prev = -np.inf
    converged = False
    for it in range(1, maxiter + 1):
        lp = _nb_logpmf(x[:, None], means[None, :], sizes[None, :]) + np.log(weights)
        norm = logsumexp(lp, axis=1, keepdims=True)
        ll = float(norm.sum())
        resp = np.exp(lp - norm)
        if np.isfinite(prev) and abs(ll - prev) <= tol * abs(prev):
            converged = True
            break
        prev = ll
        Nk = resp.sum(axis=0)
        if (Nk < 1e-8).any():
            # an emptied component; the fit for this C is degenerate
            break
        weights = Nk / G
        means = np.maximum(resp.T @ x / Nk, 1e-3)
        sizes = np.array([_newton_size(x, resp[:, c], means[c], sizes[c]) for c in range(C)])
    return NBMixture(weights=weights, means=means, sizes=sizes, loglik=ll,
                     n_iter=it, converged=converged)


@dataclass
class FilterResult:
    keep: np.ndarray               # boolean, False = flagged hypermutated
    assignment: np.ndarray         # component index per sample (0 when C = 1)
    C: int
    bic: dict = field(default_factory=dict)
    silhouette: dict = field(default_factory=dict)
    means: np.ndarray = None
    warnings: list = field(default_factory=list)


def hypermutation_filter(totals, max_components=MAX_COMPONENTS):
    """Flag samples outside the lowest-mean NB component.

    BIC decides between one component and more; if more, the number of
    components in 2..max is chosen by silhouette of log totals (manhattan).
    """
    x = np.asarray(totals, dtype=float).ravel()
    G = x.size
    if G < 2:
        raise ContractError(f"hypermutation filter needs at least 2 samples, got {G}")
    if (x < 0).any() or not np.isfinite(x).all() or (x != np.round(x)).any():
        raise ContractError("totals must be nonnegative integers")
    notes = []
    fits = {}
    for C in range(1, min(max_components, G) + 1):
        with np.errstate(all="ignore"):
            f = fit_nb_mixture(x, C)
        if not (f.converged and np.isfinite(f.loglik)):
            msg = f"NB mixture with C={C} did not converge; skipped"
            warnings.warn(msg)
            notes.append(msg)
            continue
        fits[C] = f
    none = FilterResult(keep=np.ones(G, bool), assignment=np.zeros(G, int), C=1,
                        bic={c: float(f.bic(G)) for c, f in fits.items()}, warnings=notes)
    if not fits:
        msg = "no mixture fit converged; no samples filtered"
        warnings.warn(msg)
        notes.append(msg)
        return none
    best_bic = min(fits, key=lambda c: fits[c].bic(G))
    none.means = fits[best_bic].means
    if best_bic == 1:
        return none
    logx = np.log1p(x)[:, None]
    sil, labels = {}, {}
    for C, f in fits.items():
        if C < 2:
            continue
        lab = np.argmax(f.log_resp(x), axis=1)
        k = np.unique(lab).size
        if 2 <= k <= G - 1:
            sil[C] = float(silhouette_score(logx, lab, metric="manhattan"))
            labels[C] = lab
    if not sil:
        notes.append("no multi-component fit gives a valid silhouette; no samples filtered")
        return none
    C = max(sil, key=lambda c: (sil[c], -c))
    lab = labels[C]
    used = np.unique(lab)
    low = used[np.argmin(fits[C].means[used])]
    return FilterResult(keep=lab == low, assignment=lab, C=C,
                        bic={c: float(f.bic(G)) for c, f in fits.items()},
                        silhouette=sil, means=fits[C].means, warnings=notes)
