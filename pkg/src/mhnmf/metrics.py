"""Evaluation metrics: factor recovery, paired-fit agreement, effective sample size."""

from dataclasses import dataclass, asdict, field
import warnings

import numpy as np

from .inference import cosine_similarity_matrix, hungarian_assign, normalize_sample
from .model import ContractError

MATCH_THRESHOLD = 0.9


def sensitivity_precision(true_P, est_P, threshold=MATCH_THRESHOLD):
    """Fractions of true (sensitivity) and estimated (precision) factors matched above threshold."""
    true_P = np.atleast_2d(np.asarray(true_P, dtype=float))
    est_P = np.asarray(est_P, dtype=float)
    if est_P.ndim == 1:
        est_P = est_P[:, None]
    if true_P.shape[1] == 0 or est_P.shape[1] == 0:
        raise ContractError("sensitivity/precision need nonempty factor sets")
    S = cosine_similarity_matrix(true_P, est_P)
    hits = sum(S[i, j] > threshold for i, j in hungarian_assign(S))
    return hits / true_P.shape[1], hits / est_P.shape[1]


@dataclass
class Agreement:
    min_cos_P: float
    min_cos_E: float
    pairs: list            # (factor in A, factor in B)
    surplus_A: list = field(default_factory=list)
    surplus_B: list = field(default_factory=list)


def paired_model_agreement(fit_A, fit_B):
    """Worst aligned cosine for signatures and for the matched exposure rows.

    Fits are (P, E) pairs or objects with ``P`` and ``E`` attributes; both are
    normalized before comparison so rescaling and column order do not matter.
    """
    def unpack(f):
        P, E = (f.P, f.E) if hasattr(f, "P") else f
        return normalize_sample(P, E)
    PA, EA = unpack(fit_A)
    PB, EB = unpack(fit_B)
    if PA.shape[1] == 0 or PB.shape[1] == 0:
        raise ContractError("cannot compare a fit with no factors")
    S = cosine_similarity_matrix(PA, PB)
    pairs = hungarian_assign(S)
    SE = cosine_similarity_matrix(EA.T, EB.T)
    a_idx = {i for i, _ in pairs}
    b_idx = {j for _, j in pairs}
    return Agreement(min_cos_P=float(min(S[i, j] for i, j in pairs)),
                     min_cos_E=float(min(SE[i, j] for i, j in pairs)),
                     pairs=pairs,
                     surplus_A=[i for i in range(PA.shape[1]) if i not in a_idx],
                     surplus_B=[j for j in range(PB.shape[1]) if j not in b_idx])


def autocorrelation(x, max_lag=None):
    """Sample autocorrelation at lags 0..max_lag (FFT, biased normalization)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    d = x - x.mean()
    f = np.fft.rfft(d, n=2 * n)
    acov = np.fft.irfft(f * np.conj(f))[:n]
    if not acov[0] > 0:
        raise ContractError("autocorrelation undefined for a constant chain")
    rho = acov / acov[0]
    return rho if max_lag is None else rho[:max_lag + 1]


def ess(chain):
    """Effective sample size n / (1 + 2 sum_{k=1..K} rho_k), K the first lag with rho_k < 0.

    The negative rho_K is included in the sum. If the denominator is not
    positive the chain is treated as independent and n is returned.
    """
    x = np.asarray(chain, dtype=float).ravel()
    n = x.size
    if n < 3:
        raise ContractError(f"ESS needs at least 3 values, got {n}")
    if not np.isfinite(x).all():
        raise ContractError("ESS chain contains non-finite values")
    if np.ptp(x) == 0:
        raise ContractError("ESS undefined for a constant chain")
    rho = autocorrelation(x)
    neg = np.flatnonzero(rho[1:] < 0)
    K = neg[0] + 1 if neg.size else n - 1
    denom = 1 + 2 * rho[1:K + 1].sum()
    if denom <= 0:
        return float(n)
    return float(min(n, n / denom))


@dataclass
class EvalReport:
    rmse: float
    kl: float
    min_cos_P: float
    min_cos_E: float
    sensitivity: float
    precision: float
    rank_bias: int
    runtime: float
    acceptance_P: float = float("nan")
    acceptance_E: float = float("nan")
    ess_median: float = float("nan")
    ess_min: float = float("nan")

    def to_dict(self):
        return asdict(self)


def ess_summary(samples):
    """Median and minimum ESS over the non-constant element traces of P and E."""
    P = np.stack([s.P for s in samples])
    E = np.stack([s.E for s in samples])
    traces = np.concatenate([P.reshape(len(samples), -1), E.reshape(len(samples), -1)], axis=1)
    vals = [ess(traces[:, j]) for j in range(traces.shape[1]) if np.ptp(traces[:, j]) > 0]
    if not vals:
        warnings.warn("no varying traces; ESS summary undefined")
        return float("nan"), float("nan")
    return float(np.median(vals)), float(np.min(vals))


def evaluate(M, truth, summary, runtime=float("nan"), acceptance=None, samples=None):
    """Compare a posterior summary against the generating truth (a SimDataset)."""
    from .model import kl_divergence, rmse
    Mhat = summary.Mhat
    if summary.rank == 0:
        raise ContractError("summary has no included factors")
    agr = paired_model_agreement((truth.P, truth.E), (summary.P, summary.E))
    sens, prec = sensitivity_precision(truth.P, summary.P)
    acc = acceptance or (float("nan"), float("nan"))
    e_med, e_min = ess_summary(samples) if samples else (float("nan"), float("nan"))
    return EvalReport(rmse=rmse(M, Mhat), kl=kl_divergence(M, Mhat), min_cos_P=agr.min_cos_P,
                      min_cos_E=agr.min_cos_E, sensitivity=sens, precision=prec,
                      rank_bias=int(summary.rank - truth.P.shape[1]), runtime=float(runtime),
                      acceptance_P=float(acc[0]), acceptance_E=float(acc[1]),
                      ess_median=e_med, ess_min=e_min)
