"""Synthetic count matrices drawn from a reference signature catalog."""

from dataclasses import dataclass, asdict

import numpy as np

from .model import ContractError

DISTINCT_THRESHOLD = 0.8


@dataclass(frozen=True)
class SimConfig:
    N: int
    G: int
    r: float = 111.11
    p: float = 0.1
    max_cosine: float = DISTINCT_THRESHOLD
    seed: int = 0
    max_retries: int = 10000

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ContractError(f"N must be a positive integer, got {self.N}")
        if int(self.G) != self.G or self.G < 1:
            raise ContractError(f"G must be a positive integer, got {self.G}")
        if not 0 < self.p < 1:
            raise ContractError(f"p must lie in (0, 1), got {self.p}")
        if not self.r > 0:
            raise ContractError(f"r must be positive, got {self.r}")

    @property
    def mean_total(self):
        """Expected mutations per sample, r N (1 - p) / p."""
        return self.r * self.N * (1 - self.p) / self.p

    def to_dict(self):
        return asdict(self)


@dataclass
class SimDataset:
    M: np.ndarray       # K x G integer counts
    P: np.ndarray       # K x N, columns sum to 1
    E: np.ndarray       # N x G integer exposures
    names: list         # chosen catalog columns
    labels: list = None
    config: SimConfig = None

    @property
    def totals(self):
        return self.E.sum(axis=0)


def _max_offdiag_cosine(X):
    X = X / np.linalg.norm(X, axis=0)
    C = X.T @ X
    np.fill_diagonal(C, -np.inf)
    return C.max() if C.size > 1 else -np.inf


def choose_signatures(rng, catalog, N, max_cosine=DISTINCT_THRESHOLD, max_retries=10000):
    """Rejection-sample N catalog columns with every pairwise cosine below ``max_cosine``."""
    cat = np.asarray(catalog, dtype=float)
    if cat.shape[1] < N:
        raise ContractError(f"catalog has {cat.shape[1]} signatures, need N={N}")
    for _ in range(max_retries):
        idx = np.sort(rng.choice(cat.shape[1], size=N, replace=False))
        if _max_offdiag_cosine(cat[:, idx]) < max_cosine:
            return idx
    raise ContractError(
        f"no subset of {N} signatures with all pairwise cosine similarity < {max_cosine} "
        f"found in {max_retries} draws (distinctness constraint)")


def simulate(config, catalog, rng=None):
    """Draw a dataset: exposures from a negative-binomial / multinomial scheme, counts Poisson.

    ``catalog`` is a DataFrame (labels x signatures) or a plain array.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    names = list(getattr(catalog, "columns", range(np.shape(catalog)[1])))
    labels = list(getattr(catalog, "index", [])) or None
    cat = np.asarray(catalog, dtype=float)
    idx = choose_signatures(rng, cat, config.N, config.max_cosine, config.max_retries)
    P = cat[:, idx] / cat[:, idx].sum(axis=0)
    # numpy's negative_binomial(n, p) counts failures: mean n (1 - p) / p
    m = rng.negative_binomial(config.r * config.N, config.p, size=config.G)
    w = rng.dirichlet(np.ones(config.N), size=config.G)
    E = np.stack([rng.multinomial(m[g], w[g]) for g in range(config.G)], axis=1)
    M = rng.poisson(P @ E)
    return SimDataset(M=M.astype(np.int64), P=P, E=E.astype(np.int64),
                      names=[str(names[i]) for i in idx], labels=labels, config=config)
