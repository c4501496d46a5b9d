"""Reference catalogs: the 96-channel SBS alphabet, TSV loading, bundled synthetic set."""

import itertools
from importlib import resources

import numpy as np
import pandas as pd

from .model import ContractError

BASES = "ACGT"
SUBSTITUTIONS = ("C>A", "C>G", "C>T", "T>A", "T>C", "T>G")


def sbs96_labels():
    """Mutation types in the usual substitution-major order, e.g. ``A[C>A]A``."""
    return [f"{l}[{sub}]{r}" for sub in SUBSTITUTIONS
            for l, r in itertools.product(BASES, BASES)]


def load_catalog(path):
    """Read a tab-separated catalog: first column labels, one column per factor.

    Returns a DataFrame indexed by label; every column must have a positive sum.
    """
    try:
        df = pd.read_csv(path, sep="\t", index_col=0)
    except Exception as exc:
        raise ContractError(f"cannot parse catalog {path}: {exc}") from None
    if df.shape[1] == 0:
        raise ContractError(f"catalog {path} has no factor columns")
    bad = [c for c in df.columns if not np.issubdtype(df[c].dtype, np.number)]
    if bad:
        raise ContractError(f"catalog {path}: non-numeric column(s) {bad}")
    vals = df.to_numpy(dtype=float)
    if (vals < 0).any() or np.isnan(vals).any():
        raise ContractError(f"catalog {path}: entries must be nonnegative numbers")
    zero = [c for c, s in zip(df.columns, vals.sum(axis=0)) if not s > 0]
    if zero:
        raise ContractError(f"catalog {path}: column(s) with zero sum: {zero}")
    if df.index.has_duplicates:
        raise ContractError(f"catalog {path}: duplicated row labels")
    return df


def make_synthetic_catalog(n_peaked=24, n_flat=6, seed=20240601):
    """Synthetic SBS-like signatures: mostly peaked, a few flat ones."""
    rng = np.random.default_rng(seed)
    K = 96
    cols = {}
    for i in range(n_peaked):
        cols[f"SYN{i + 1}"] = rng.dirichlet(np.full(K, rng.uniform(0.1, 0.5)))
    for i in range(n_flat):
        cols[f"SYN{n_peaked + i + 1}"] = rng.dirichlet(np.full(K, rng.uniform(1.0, 3.0)))
    df = pd.DataFrame(cols, index=sbs96_labels())
    df.index.name = "Type"
    return df


def bundled_catalog():
    """The synthetic 96 x 30 catalog shipped with the package."""
    with resources.as_file(resources.files("mhnmf") / "data" / "synthetic_sbs96.tsv") as p:
        return load_catalog(p)
