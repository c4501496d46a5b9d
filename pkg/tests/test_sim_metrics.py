import numpy as np
import pytest
from hypothesis import given, strategies as st

from mhnmf.catalog import load_catalog, make_synthetic_catalog, sbs96_labels
from mhnmf.metrics import autocorrelation, ess, evaluate, paired_model_agreement, sensitivity_precision
from mhnmf.model import ContractError
from mhnmf.simulate import SimConfig, choose_signatures, simulate


# -- catalog -----------------------------------------------------------------

def test_catalog_shape_and_labels(catalog):
    assert catalog.shape == (96, 30)
    assert list(catalog.index) == sbs96_labels()
    assert sbs96_labels()[0] == "A[C>A]A"
    assert np.allclose(catalog.sum(axis=0), 1.0, atol=1e-9)
    assert np.allclose(catalog.values, make_synthetic_catalog().values, atol=1e-11)


def test_catalog_loader_validation(tmp_path):
    p = tmp_path / "cat.tsv"
    p.write_text("Type\tS1\tS2\nA\t0.5\t0\nB\t0.5\t0\n")
    with pytest.raises(ContractError, match="sum"):
        load_catalog(p)
    p.write_text("Type\tS1\nA\t-0.5\nB\t0.5\n")
    with pytest.raises(ContractError):
        load_catalog(p)


# -- simulation --------------------------------------------------------------

def test_simconfig_validation():
    for bad in (dict(N=0, G=3), dict(N=1, G=0), dict(N=1, G=3, p=1.0), dict(N=1, G=3, r=0)):
        with pytest.raises(ContractError):
            SimConfig(**bad)
    assert SimConfig(N=3, G=5).mean_total == pytest.approx(3000, rel=1e-4)


def test_totals_mean_n1(catalog):
    d = simulate(SimConfig(N=1, G=10000, seed=0), catalog)
    m = d.totals
    assert abs(m.mean() - 111.11 * 9) < 3 * m.std() / np.sqrt(m.size)


def test_simulation_structure(catalog):
    d = simulate(SimConfig(N=3, G=50, seed=1), catalog)
    assert d.M.shape == (96, 50) and d.M.dtype == np.int64 and (d.M >= 0).all()
    assert np.allclose(d.P.sum(axis=0), 1)
    assert len(d.names) == 3 and set(d.names) <= set(catalog.columns)
    S = d.P / np.linalg.norm(d.P, axis=0)
    C = S.T @ S
    assert (C[~np.eye(3, dtype=bool)] < 0.8).all()


def test_poisson_layer_moment(catalog):
    # columns of P sum to one, so sum_k M_kg ~ Poisson(m_g) given the exposures
    d = simulate(SimConfig(N=2, G=20000, seed=2), catalog)
    diff = d.M.sum(axis=0) - d.totals
    se = np.sqrt(d.totals.mean() / diff.size)
    assert abs(diff.mean()) < 3 * se


def test_simulate_reproducible(catalog):
    a = simulate(SimConfig(N=2, G=16, seed=7), catalog)
    b = simulate(SimConfig(N=2, G=16, seed=7), catalog)
    assert a.M.tobytes() == b.M.tobytes() and a.names == b.names
    c = simulate(SimConfig(N=2, G=16, seed=8), catalog)
    assert a.M.tobytes() != c.M.tobytes()


def test_distinctness_exhausted():
    cat = np.ones((5, 4)) + np.eye(5, 4) * 0.01
    with pytest.raises(ContractError, match="distinctness"):
        choose_signatures(np.random.default_rng(0), cat, 2, max_retries=50)


# -- sensitivity / precision ---------------------------------------------------

def test_sensitivity_precision_examples(catalog, rng):
    P = simulate(SimConfig(N=4, G=2, seed=3), catalog).P
    assert sensitivity_precision(P, P) == (1.0, 1.0)
    noise = np.column_stack([P, np.full(96, 1 / 96)])
    assert sensitivity_precision(P, noise) == (1.0, 4 / 5)
    assert sensitivity_precision(P, P[:, :3]) == (3 / 4, 1.0)
    perm = P[:, rng.permutation(4)]
    assert sensitivity_precision(P, perm) == (1.0, 1.0)


@given(st.integers(0, 2 ** 31))
def test_sensitivity_precision_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    T, E = r.random((12, 4)), r.random((12, 5))
    perm = r.permutation(5)
    assert sensitivity_precision(T, E) == sensitivity_precision(T, E[:, perm])


# -- agreement ---------------------------------------------------------------

def test_agreement_identity_and_symmetry(rng):
    P, E = rng.random((10, 3)), rng.random((3, 8))
    a = paired_model_agreement((P, E), (P, E))
    assert a.min_cos_P == pytest.approx(1) and a.min_cos_E == pytest.approx(1)
    perm, scale = [2, 0, 1], np.array([3.0, 0.5, 7.0])
    b = paired_model_agreement((P, E), (P[:, perm] * scale, E[perm] / scale[:, None]))
    assert b.min_cos_P == pytest.approx(1) and b.min_cos_E == pytest.approx(1)
    c = paired_model_agreement((P, E), (P[:, :2], E[:2]))
    assert len(c.pairs) == 2 and c.surplus_A == [2] and c.surplus_B == []


# -- ESS ---------------------------------------------------------------------

def test_ess_white_noise():
    vals = [ess(np.random.default_rng(s).normal(size=1000)) for s in range(20)]
    assert all(abs(v - 1000) / 1000 < 0.15 for v in vals)


def _ar1(n, phi, seed):
    r = np.random.default_rng(seed)
    x = np.empty(n)
    x[0] = r.normal() / np.sqrt(1 - phi ** 2)
    eps = r.normal(size=n)
    for i in range(1, n):
        x[i] = phi * x[i - 1] + eps[i]
    return x


def test_ess_ar1():
    x = _ar1(100000, 0.5, 0)
    assert abs(ess(x) / x.size - 1 / 3) / (1 / 3) < 0.15


def test_ess_alternating_clamped():
    x = np.tile([1.0, -1.0], 500)
    assert autocorrelation(x, 1)[1] == pytest.approx(-0.999, abs=1e-3)
    assert ess(x) == 1000.0


def test_ess_errors():
    with pytest.raises(ContractError):
        ess(np.ones(10))
    with pytest.raises(ContractError):
        ess([1.0, 2.0])
    with pytest.raises(ContractError):
        ess([1.0, np.nan, 2.0])


def test_ess_subsampling_halves():
    r = np.random.default_rng(5)
    a, b = [], []
    for _ in range(20):
        x = r.normal(size=4000)
        a.append(ess(x))
        b.append(ess(x[::2]))
    assert abs(np.mean(b) / np.mean(a) - 0.5) < 0.1


@given(st.integers(0, 2 ** 31), st.integers(3, 300))
def test_ess_in_range(seed, n):
    x = np.random.default_rng(seed).normal(size=n).cumsum()
    e = ess(x)
    assert 0 < e <= n


def test_evaluate_against_truth(catalog):
    d = simulate(SimConfig(N=2, G=16, seed=1), catalog)

    class Summ:
        P, E, rank = d.P, d.E.astype(float), 2
        Mhat = d.P @ d.E
    rep = evaluate(d.M, d, Summ())
    assert rep.sensitivity == 1 and rep.precision == 1 and rep.rank_bias == 0
    assert rep.min_cos_P == pytest.approx(1) and rep.min_cos_E == pytest.approx(1)
