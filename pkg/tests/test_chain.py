import numpy as np
import pytest

from mhnmf.chain import (
    LOG_HEADER, CheckRecord, ConvergenceControls, ModelConfig, Sample, check_convergence,
    parse_log, run_chain, window_metrics,
)
from mhnmf.inference import normalize_sample
from mhnmf.model import ContractError, kl_divergence, rmse
from mhnmf.simulate import SimConfig, simulate


def _history(steps, start=1000.0):
    vals = [start]
    for r in steps:
        vals.append(vals[-1] * (1 + r))
    return vals


def test_nochange_rule_example():
    ctrl = ConvergenceControls()
    steps = (0.0005, 0.0009, 0.0004, 0.0008, 0.0006)
    vals = _history(steps)
    # each check after the first carries one relative step; the fifth step triggers
    for i in range(1, 5):
        assert check_convergence(vals[:i + 1], ctrl) is None
    assert check_convergence(vals, ctrl) == "nochange"
    assert check_convergence(_history((0.0005, 0.002, 0.0004, 0.0008, 0.0006)), ctrl) is None


def test_constant_history_converges():
    ctrl = ConvergenceControls()
    assert check_convergence([5.0] * 6, ctrl) == "nochange"


def test_improving_history_never_converges():
    ctrl = ConvergenceControls(tol=1e-6)
    vals = list(np.cumsum(np.ones(60)) * 10 + 1000)   # log posterior rising
    for i in range(1, 61):
        assert check_convergence(vals[:i], ctrl) is None


def test_nobest_rule_direction():
    ctrl = ConvergenceControls(metric="kl", tol=1e-12)
    # best (lowest) KL at the start, then 10 worse checks
    vals = [1.0] + [2.0 + 0.1 * i for i in range(10)]
    assert check_convergence(vals, ctrl) == "nobest"
    assert check_convergence(vals[:-1], ctrl) is None


def test_controls_validation():
    with pytest.raises(ContractError):
        ConvergenceControls(metric="aic")
    with pytest.raises(ContractError):
        ConvergenceControls(MAP_over=10, MAP_every=20)
    with pytest.raises(ContractError):
        ConvergenceControls(tol=0)
    assert ConvergenceControls().miniters == 2000


def _sample(P, E, A, ll, it=1, gamma=1.0):
    return Sample(iteration=it, P=P, E=E, A=A, gamma=gamma, warmup=False, loglik=ll,
                  log_posterior=ll - 1, bic=-2 * ll, ratio_P=np.nan, ratio_E=np.nan)


def test_window_metrics_degenerate_and_mean(rng):
    M = rng.integers(0, 9, (5, 4)).astype(float)
    P, E, A = rng.random((5, 2)), rng.random((2, 4)) * 5, np.ones(2)
    one = window_metrics(M, [_sample(P, E, A, -3.0)])
    many = window_metrics(M, [_sample(P, E, A, -3.0)] * 4)
    assert many["rmse"] == pytest.approx(one["rmse"]) == pytest.approx(rmse(M, P @ E))
    two = window_metrics(M, [_sample(P, E, A, -3.0), _sample(P, E, A, -5.0)])
    assert two["log_likelihood"] == pytest.approx(-4.0)
    assert two["bic"] == pytest.approx(8.0)
    with pytest.raises(ContractError):
        window_metrics(M, [_sample(P, E, A, -3.0, gamma=0.5)])


def test_log_line_round_trip():
    rec = CheckRecord(1200, 0.25, "log_posterior", -12345.678901234567, 1.2345e-4, "warmup")
    assert CheckRecord.parse(rec.line()) == rec
    with pytest.raises(ValueError):
        parse_log("bad header\n")


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory, catalog):
    d = simulate(SimConfig(N=2, G=16, seed=5), catalog)
    ctrl = ConvergenceControls(MAP_over=100, MAP_every=20, miniters=200, maxiters=3000,
                               mh_iters=200, n_inference=100)
    cfg = ModelConfig(likelihood="poisson", prior="truncnormal", mh=True, rank=2, seed=1,
                      controls=ctrl)
    log_path = tmp_path_factory.mktemp("chain") / "convergence.log"
    return d, run_chain(d.M, cfg, log_path=log_path), log_path


def test_log_file_round_trip(toy_run):
    _, res, log_path = toy_run
    text = log_path.read_text()
    assert text.splitlines()[0] == LOG_HEADER
    parsed = parse_log(text)
    assert len(parsed) == len(res.status.history)
    for a, b in zip(parsed, res.status.history):
        assert (a.iteration, a.gamma, a.metric, a.value, a.status) == \
            (b.iteration, b.gamma, b.metric, b.value, b.status)
        assert a.rel_change == b.rel_change or (np.isnan(a.rel_change) and np.isnan(b.rel_change))
    assert text == res.log_text


def test_mh_schedule_and_eligibility(toy_run):
    _, res, _ = toy_run
    st = res.status
    assert st.converged and st.reason in ("nochange", "nobest")
    assert st.iterations - st.switch_iteration == res.config.controls.mh_iters
    assert len(res.inference) == res.config.controls.n_inference
    assert all(s.eligible and s.iteration > st.switch_iteration for s in res.inference)
    # nothing before the switch was accepted unconditionally in the kept window
    assert all(np.isfinite(s.ratio_P) for s in res.inference)


def test_window_replay_oracle(toy_run):
    d, res, _ = toy_run
    window = res.store.last(100)
    rec = [r for r in res.status.history if r.iteration == window[-1].iteration]
    assert rec and rec[0].metric == "log_posterior"
    assert rec[0].value == pytest.approx(np.mean([s.log_posterior for s in window]), rel=1e-12)
    # independent reconstruction from the normalized window mean
    Ps, Es = zip(*(normalize_sample(s.P, s.E) for s in window))
    Mhat = np.mean(Ps, axis=0) @ np.mean(Es, axis=0)
    got = window_metrics(d.M, window)
    assert got["rmse"] == pytest.approx(rmse(d.M, Mhat), rel=1e-10)
    assert got["kl"] == pytest.approx(kl_divergence(d.M, Mhat), rel=1e-10)


def test_capped_run_flags_summary(sim2):
    ctrl = ConvergenceControls(MAP_over=50, MAP_every=10, miniters=60, maxiters=60,
                               mh_iters=20, n_inference=20)
    cfg = ModelConfig(likelihood="poisson", prior="exponential", mh=True, rank=2, seed=0,
                      controls=ctrl)
    res = run_chain(sim2.M, cfg)
    assert res.status.reason == "maxiters" and not res.status.converged
    assert res.status.iterations == 60
    assert res.summary is not None and not res.summary.converged


def test_tempered_samples_never_used(sim2):
    ctrl = ConvergenceControls(MAP_over=50, MAP_every=10, miniters=100, maxiters=1000,
                               mh_iters=100, n_inference=50)
    cfg = ModelConfig(likelihood="poisson", prior="truncnormal", mh=True, rank=(1, 3),
                      rank_method="sbfi", seed=2, controls=ctrl)
    res = run_chain(sim2.M, cfg)
    assert all(s.gamma == 1.0 and not s.warmup for s in res.inference)
    assert all(s.iteration >= 200 for s in res.inference)       # ramp: ceil(0.2 * 1000)
    assert all(res.summary.rank == int(a.sum()) for a in [res.summary.A])


def test_non_mh_chain_stops_at_convergence(sim2, fast_controls):
    cfg = ModelConfig(likelihood="poisson", prior="gamma", mh=False, rank=2, seed=4,
                      controls=fast_controls)
    res = run_chain(sim2.M, cfg)
    assert res.status.switch_iteration is None
    assert res.status.iterations == res.status.history[-1].iteration
    assert len(res.inference) == fast_controls.n_inference


def test_mh_rmse_matches_standard_sampler(catalog):
    d = simulate(SimConfig(N=2, G=16, seed=21), catalog)
    r_mh = run_chain(d.M, ModelConfig(likelihood="poisson", prior="truncnormal", mh=True,
                                      rank=2, seed=21))
    r_std = run_chain(d.M, ModelConfig(likelihood="poisson", prior="gamma", mh=False,
                                       rank=2, seed=21))
    a, b = rmse(d.M, r_mh.summary.Mhat), rmse(d.M, r_std.summary.Mhat)
    assert abs(a - b) <= 0.1 * b


def _switch_windows(d, seed, prior="truncnormal"):
    res = run_chain(d.M, ModelConfig(likelihood="poisson", prior=prior, mh=True, rank=2,
                                     seed=seed))
    samples = list(res.store.samples)
    sw = res.status.switch_iteration
    before = [s for s in samples if sw - 1000 < s.iteration <= sw]
    return window_metrics(d.M, before), window_metrics(d.M, samples[-1000:])


def test_post_switch_window_matches_exact_sampler(catalog):
    # after the switch the chain targets the exact posterior, so its window
    # metrics agree with the augmented Gibbs sampler under the same prior
    d = simulate(SimConfig(N=2, G=16, seed=100), catalog)
    _, after = _switch_windows(d, 0, prior="exponential")
    res = run_chain(d.M, ModelConfig(likelihood="poisson", prior="exponential", mh=False,
                                     rank=2, seed=0))
    ref = window_metrics(d.M, list(res.store.samples)[-1000:])
    assert after["kl"] == pytest.approx(ref["kl"], rel=0.01)
    assert after["log_likelihood"] == pytest.approx(ref["log_likelihood"], rel=0.01)


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason=(
    "not reproduced: the accept-all warm-up chain sits about 1% lower in window KL "
    "than the exact posterior, so KL rises slightly at the switch"))
def test_kl_does_not_rise_after_switch(catalog):
    ok = 0
    for seed in range(10):
        d = simulate(SimConfig(N=2, G=16, seed=100 + seed), catalog)
        before, after = _switch_windows(d, seed)
        ok += after["kl"] <= before["kl"]
    assert ok >= 8
