"""Posterior summaries, reference alignment, label traces and CI-width comparison."""

from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .model import ContractError

CI_LEVELS = (2.5, 97.5)


def normalize_sample(P, E):
    """Rescale so columns of P sum to one, leaving PE unchanged."""
    P = np.asarray(P, dtype=float)
    E = np.asarray(E, dtype=float)
    tot = P.sum(axis=0)
    zero = np.flatnonzero(~(tot > 0))
    if zero.size:
        raise ContractError(f"cannot normalize: column(s) {zero.tolist()} of P sum to zero")
    return P / tot[None, :], E * tot[:, None]


@dataclass
class PosteriorSummary:
    P: np.ndarray            # K x N' column-normalized means
    E: np.ndarray            # N' x G
    P_lower: np.ndarray
    P_upper: np.ndarray
    E_lower: np.ndarray
    E_upper: np.ndarray
    A: np.ndarray            # MAP inclusion vector over all N factors
    n_used: int
    n_total: int
    converged: bool = True

    @property
    def factors(self):
        """Indices (into the full N) of the included factors."""
        return np.flatnonzero(self.A)

    @property
    def rank(self):
        return int(self.A.sum())

    @property
    def Mhat(self):
        return self.P @ self.E


def map_inclusion(A_samples):
    """Modal inclusion vector; ties go to the larger rank, then lexicographically."""
    counts = Counter(tuple(int(a) for a in A) for A in A_samples)
    if not counts:
        raise ContractError("no samples to summarize")
    best = max(counts.items(), key=lambda kv: (kv[1], sum(kv[0]), kv[0]))
    return np.array(best[0], dtype=float)


def summarize(samples, converged=True, intervals=True):
    """Summarize inference samples (objects with ``P``, ``E``, ``A`` attributes).

    Samples are restricted to those matching the MAP inclusion vector, each is
    normalized, and element-wise means and 2.5/97.5 percentiles are taken over
    the included factors.
    """
    samples = list(samples)
    if not samples:
        raise ContractError("summary needs at least one inference sample")
    A_all = np.array([s.A for s in samples])
    A_map = map_inclusion(A_all)
    match = (A_all == A_map).all(axis=1)
    if not match.any():
        raise ContractError("no sample matches the MAP inclusion vector")
    idx = np.flatnonzero(A_map)
    keep = [s for s, m in zip(samples, match) if m]
    Ps = np.array([s.P[:, idx] for s in keep])
    Es = np.array([s.E[idx] for s in keep])
    tot = Ps.sum(axis=1)                     # samples x N'
    bad = ~(tot > 0)
    if bad.any():
        i, n = np.argwhere(bad)[0]
        raise ContractError(f"cannot normalize: column {int(idx[n])} of P sums to zero "
                            f"in sample {i} (included factors {idx.tolist()})")
    Ps = Ps / tot[:, None, :]
    Es = Es * tot[:, :, None]
    if intervals:
        pl, pu = np.percentile(Ps, CI_LEVELS, axis=0)
        el, eu = np.percentile(Es, CI_LEVELS, axis=0)
    else:
        pl = pu = el = eu = None
    return PosteriorSummary(P=Ps.mean(axis=0), E=Es.mean(axis=0), P_lower=pl, P_upper=pu,
                            E_lower=el, E_upper=eu, A=A_map, n_used=len(keep),
                            n_total=len(samples), converged=converged)


def normalized_included(samples, A_map):
    """Normalized included-factor P matrices of the MAP-matching samples."""
    idx = np.flatnonzero(A_map)
    return [normalize_sample(s.P[:, idx], s.E[idx])[0]
            for s in samples if np.array_equal(s.A, A_map)]


# ---------------------------------------------------------------------------
# alignment


def cosine_similarity_matrix(reference, estimated):
    """Cosine similarity between every reference column and every estimated column."""
    X = np.asarray(reference, dtype=float)
    Y = np.asarray(estimated, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] != Y.shape[0]:
        raise ContractError(f"row mismatch: {X.shape[0]} vs {Y.shape[0]}")
    nx = np.linalg.norm(X, axis=0)
    ny = np.linalg.norm(Y, axis=0)
    if (nx == 0).any() or (ny == 0).any():
        raise ContractError("cosine similarity undefined for a zero column")
    return (X.T @ Y) / np.outer(nx, ny)


def hungarian_assign(S):
    """Row/column matching maximizing total similarity.

    Returns a list of (row, column) pairs, min(rows, cols) of them.
    """
    S = np.asarray(S, dtype=float)
    if not np.isfinite(S).all():
        raise ContractError("similarity matrix must be finite")
    rows, cols = linear_sum_assignment(-S)
    return list(zip(rows.tolist(), cols.tolist()))


@dataclass
class AlignmentResult:
    S: np.ndarray                 # reference x estimated, on the summary P
    votes: np.ndarray             # cosine-weighted votes, reference x estimated
    counts: np.ndarray            # raw vote counts, reference x estimated
    assignments: list             # per inference sample, list of (ref, est) pairs
    mapping: dict = field(default_factory=dict)   # est -> ref
    reference_names: list = None

    def vote_fraction(self, est):
        tot = self.votes[:, est].sum()
        ref = self.mapping.get(est)
        if ref is None or tot == 0:
            return 0.0
        return float(self.votes[ref, est] / tot)

    def mean_cosine(self, ref, est):
        c = self.counts[ref, est]
        return float(self.votes[ref, est] / c) if c else 0.0


def resolve_votes(votes, counts):
    """Greedy injective mapping from weighted votes.

    Estimates are processed in descending order of their top vote weight; each
    takes its most-voted unclaimed reference (ties: higher mean cosine).
    """
    votes = np.asarray(votes, dtype=float)
    counts = np.asarray(counts, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_cos = np.where(counts > 0, votes / np.where(counts > 0, counts, 1), 0.0)
    order = sorted(range(votes.shape[1]), key=lambda j: (-votes[:, j].max(initial=0), j))
    claimed, mapping = set(), {}
    for j in order:
        cands = [r for r in range(votes.shape[0]) if votes[r, j] > 0 and r not in claimed]
        if not cands:
            continue
        r = max(cands, key=lambda r: (votes[r, j], mean_cos[r, j], -r))
        mapping[j] = r
        claimed.add(r)
    return mapping


def ensemble_align(P_samples, reference, reference_names=None, summary_P=None):
    """Per-sample Hungarian alignment combined by cosine-weighted voting.

    Args:
        P_samples: iterable of K x N' normalized signature matrices (same N').
        reference: K x R reference catalog.
        summary_P: optional point estimate used for the reported similarity
            matrix; defaults to the mean of ``P_samples``.
    """
    reference = np.asarray(reference, dtype=float)
    if reference.ndim != 2 or reference.shape[1] == 0:
        raise ContractError("reference catalog is empty")
    P_samples = [np.asarray(p, dtype=float) for p in P_samples]
    if not P_samples:
        raise ContractError("no inference samples to align")
    n_est = P_samples[0].shape[1]
    votes = np.zeros((reference.shape[1], n_est))
    counts = np.zeros_like(votes)
    assignments = []
    for p in P_samples:
        S = cosine_similarity_matrix(reference, p)
        pairs = hungarian_assign(S)
        for r, j in pairs:
            votes[r, j] += S[r, j]
            counts[r, j] += 1
        assignments.append(pairs)
    if summary_P is None:
        summary_P = np.mean(P_samples, axis=0)
    mapping = resolve_votes(votes, counts)
    assert len(set(mapping.values())) == len(mapping)
    return AlignmentResult(S=cosine_similarity_matrix(reference, summary_P), votes=votes,
                           counts=counts, assignments=assignments, mapping=mapping,
                           reference_names=reference_names)


def label_trace(samples, reference):
    """Closest reference factor for every factor of every stored sample.

    Returns a list of tidy rows ``(iteration, factor, ref_index, cosine, included)``;
    excluded factors get ``ref_index = -1`` and ``cosine = nan``.
    """
    reference = np.asarray(reference, dtype=float)
    rows = []
    for s in samples:
        it = getattr(s, "iteration", None)
        for n in range(s.P.shape[1]):
            if s.A[n] == 0 or not s.P[:, n].any():
                rows.append((it, n, -1, float("nan"), False))
                continue
            cos = cosine_similarity_matrix(reference, s.P[:, n])[:, 0]
            r = int(np.argmax(cos))
            rows.append((it, n, r, float(cos[r]), True))
    return rows


def align_summaries(ref_P, other_P):
    """Hungarian match of ``other_P`` columns onto ``ref_P`` columns by cosine."""
    S = cosine_similarity_matrix(ref_P, other_P)
    return hungarian_assign(S), S


def ci_width_comparison(summary_S, summary_Q, order=None):
    """10th/90th percentiles of element-wise CI-width differences (S minus Q).

    ``order`` optionally permutes Q's factors onto S's (list of Q indices).
    Returns ``{"P": (p10, p90), "E": (p10, p90)}``.
    """
    out = {}
    for name in ("P", "E"):
        lS, uS = getattr(summary_S, f"{name}_lower"), getattr(summary_S, f"{name}_upper")
        lQ, uQ = getattr(summary_Q, f"{name}_lower"), getattr(summary_Q, f"{name}_upper")
        wS, wQ = uS - lS, uQ - lQ
        if order is not None:
            wQ = wQ[:, order] if name == "P" else wQ[order]
        if wS.shape != wQ.shape:
            raise ContractError(f"{name} width shapes differ: {wS.shape} vs {wQ.shape}")
        d = (wS - wQ).ravel()
        out[name] = tuple(float(v) for v in np.percentile(d, [10, 90]))
    return out
