"""Running a chain: warm-up, windowed convergence checks, MH switch, retention, logging."""

import logging
import time
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .inference import summarize
from .model import ContractError, SamplerKind, bic_from_loglik, kl_divergence, rmse
from .rank import temper_gamma
from .samplers import Sampler

log = logging.getLogger(__name__)

METRICS = ("log_posterior", "bic", "log_likelihood", "rmse", "kl")
HIGHER_IS_BETTER = {"log_posterior": True, "log_likelihood": True,
                    "bic": False, "rmse": False, "kl": False}
LOG_HEADER = "iteration\tgamma\tmetric\tvalue\trel_change\tstatus"


@dataclass
class ConvergenceControls:
    metric: str = "log_posterior"
    MAP_over: int = 1000        # window length
    MAP_every: int = 100        # checks every this many iterations
    tol: float = 0.001
    Ninarow_nochange: int = 5
    Ninarow_nobest: int = 10
    miniters: Optional[int] = None
    maxiters: int = 50000
    mh_iters: int = 2000        # true-MH iterations after warm-up
    n_inference: int = 1000

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ContractError(f"unknown convergence metric {self.metric!r}; use one of {METRICS}")
        if self.miniters is None:
            self.miniters = self.MAP_over + 1000
        if not self.MAP_over >= self.MAP_every >= 1:
            raise ContractError("need MAP_over >= MAP_every >= 1")
        if not self.tol > 0:
            raise ContractError("tol must be positive")
        for name in ("Ninarow_nochange", "Ninarow_nobest", "maxiters", "n_inference"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.miniters < 0 or self.mh_iters < 0:
            raise ContractError("miniters and mh_iters must be >= 0")


@dataclass
class ModelConfig:
    likelihood: str = "poisson"
    prior: str = "truncnormal"
    mh: bool = True
    rank: object = 5                # int, or (lo, hi) inclusive range
    rank_method: str = "sbfi"       # used only for a range: bfi, sbfi, min_bic
    hyperparams: dict = field(default_factory=dict)
    controls: ConvergenceControls = field(default_factory=ConvergenceControls)
    seed: Optional[int] = None
    mh_ratio: str = "exact"

    def __post_init__(self):
        self.kind  # validates the combination
        if self.fixed_rank is not None and self.fixed_rank < 1:
            raise ContractError("fixed rank must be >= 1")
        if self.fixed_rank is None:
            lo, hi = self.rank_range
            if not 1 <= lo <= hi:
                raise ContractError(f"rank range must be nonempty and ascending, got {self.rank}")
            if self.rank_method not in ("bfi", "sbfi", "min_bic"):
                raise ContractError(f"unknown rank method {self.rank_method!r}")

    @property
    def kind(self):
        return SamplerKind(self.likelihood, self.prior, bool(self.mh))

    @property
    def fixed_rank(self):
        if isinstance(self.rank, (int, np.integer)):
            return int(self.rank)
        return None

    @property
    def rank_range(self):
        if self.fixed_rank is not None:
            return self.fixed_rank, self.fixed_rank
        lo, hi = self.rank
        return int(lo), int(hi)

    def with_rank(self, r):
        return replace(self, rank=int(r))

    def to_dict(self):
        d = asdict(self)
        d["rank"] = self.rank if self.fixed_rank is not None else list(self.rank_range)
        return d


@dataclass
class Sample:
    iteration: int
    P: np.ndarray
    E: np.ndarray
    A: np.ndarray
    gamma: float
    warmup: bool
    loglik: float
    log_posterior: float
    bic: float
    ratio_P: float
    ratio_E: float

    @property
    def tempered(self):
        return self.gamma < 1.0

    @property
    def eligible(self):
        return not self.tempered and not self.warmup


class ChainStore:
    """Bounded store of recent samples plus a full per-iteration scalar trace."""

    def __init__(self, capacity):
        self.capacity = capacity
        self.samples = deque(maxlen=capacity)
        self.trace = {k: [] for k in ("iteration", "gamma", "warmup", "rank", "loglik",
                                      "log_posterior", "bic", "ratio_P", "ratio_E")}

    def add(self, s):
        self.samples.append(s)
        for k in self.trace:
            self.trace[k].append(s.A.sum() if k == "rank" else getattr(s, k))

    def last(self, n):
        n = min(n, len(self.samples))
        return list(self.samples)[len(self.samples) - n:]

    def inference_samples(self, n):
        eligible = [s for s in self.samples if s.eligible]
        return eligible[-n:]


@dataclass
class CheckRecord:
    iteration: int
    gamma: float
    metric: str
    value: float
    rel_change: float
    status: str

    def line(self):
        return "\t".join([str(self.iteration), repr(float(self.gamma)), self.metric,
                          repr(float(self.value)), repr(float(self.rel_change)), self.status])

    @classmethod
    def parse(cls, line):
        it, g, m, v, r, st = line.rstrip("\n").split("\t")
        return cls(int(it), float(g), m, float(v), float(r), st)


def parse_log(text):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != LOG_HEADER:
        raise ValueError("not a convergence log (bad header)")
    return [CheckRecord.parse(ln) for ln in lines[1:]]


@dataclass
class RunStatus:
    converged: bool = False
    reason: Optional[str] = None        # nochange, nobest, maxiters
    iterations: int = 0
    switch_iteration: Optional[int] = None
    history: list = field(default_factory=list)

    def to_dict(self):
        return {"converged": self.converged, "reason": self.reason,
                "iterations": self.iterations, "switch_iteration": self.switch_iteration}


def window_metrics(M, samples):
    """Window-level metrics over a list of samples.

    RMSE and KL use the reconstruction from the window's normalized posterior
    mean; log likelihood, BIC and log posterior are per-sample averages.
    """
    if not samples:
        raise ContractError("empty window")
    if any(s.tempered for s in samples):
        raise ContractError("window contains tempered samples")
    summ = summarize(samples, intervals=False)
    Mhat = summ.Mhat
    return {
        "rmse": rmse(M, Mhat),
        "kl": kl_divergence(M, np.maximum(Mhat, 0.0)),
        "log_likelihood": float(np.mean([s.loglik for s in samples])),
        "bic": float(np.mean([s.bic for s in samples])),
        "log_posterior": float(np.mean([s.log_posterior for s in samples])),
    }


def relative_change(new, old):
    if old is None or not np.isfinite(old) or old == 0:
        return float("nan")
    return abs(new - old) / abs(old)


def check_convergence(values, controls):
    """Apply the stopping rules to the metric values of all checks so far.

    Returns ``"nochange"`` if each of the last ``Ninarow_nochange`` checks moved
    less than ``tol`` relative to its predecessor, ``"nobest"`` if the last
    ``Ninarow_nobest`` checks failed to beat the running best, else ``None``.
    """
    values = [float(v) for v in values]
    n = controls.Ninarow_nochange
    if len(values) > n:
        recent = [relative_change(values[i], values[i - 1]) for i in range(len(values) - n, len(values))]
        if all(r < controls.tol for r in recent):
            return "nochange"
    up = HIGHER_IS_BETTER[controls.metric]
    best_at = 0
    for i, v in enumerate(values):
        if (v > values[best_at]) if up else (v < values[best_at]):
            best_at = i
    if len(values) - 1 - best_at >= controls.Ninarow_nobest:
        return "nobest"
    return None


@dataclass
class ChainResult:
    config: ModelConfig
    store: ChainStore
    status: RunStatus
    summary: object
    inference: list
    timings: dict
    log_lines: list

    def inference_bic(self):
        if not self.inference:
            return float("nan")
        return float(np.mean([s.bic for s in self.inference]))

    def acceptance(self):
        """Mean acceptance ratio for P and E over the inference samples."""
        rp = [s.ratio_P for s in self.inference if np.isfinite(s.ratio_P)]
        re = [s.ratio_E for s in self.inference if np.isfinite(s.ratio_E)]
        return (float(np.mean(rp)) if rp else float("nan"),
                float(np.mean(re)) if re else float("nan"))

    @property
    def log_text(self):
        return "\n".join([LOG_HEADER] + self.log_lines) + "\n"


def run_chain(M, config, rng=None, log_path=None, sampler=None):
    """Run one chain to convergence and summarize its final inference window.

    Args:
        M: K x G data matrix.
        config: ``ModelConfig`` with a fixed rank or a bfi/sbfi rank range.
        rng: ``numpy.random.Generator`` (default: seeded from ``config.seed``).
        log_path: optional path; one tab-separated line is appended per check.
    """
    if config.fixed_rank is None and config.rank_method == "min_bic":
        raise ContractError("use run_min_bic for min_bic rank selection")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    ctrl = config.controls
    learn = config.fixed_rank is None
    N = config.rank_range[1]
    if sampler is None:
        sampler = Sampler(M, config.kind, N, rng,
                          rank_method=config.rank_method if learn else "fixed",
                          hyper_overrides=config.hyperparams, mh_ratio=config.mh_ratio)
    M = sampler.M
    K, G = M.shape
    mh = config.kind.mh
    store = ChainStore(ctrl.MAP_over + max(ctrl.mh_iters, ctrl.n_inference) + ctrl.MAP_every)
    status = RunStatus()
    values, lines = [], []
    logf = open(log_path, "w") if log_path else None
    if logf:
        logf.write(LOG_HEADER + "\n")

    def emit(rec):
        status.history.append(rec)
        lines.append(rec.line())
        if logf:
            logf.write(rec.line() + "\n")
            logf.flush()
        log.info("iter %d %s=%.6g (rel %.3g) %s", rec.iteration, rec.metric, rec.value,
                 rec.rel_change, rec.status)

    def check(it, gamma, phase):
        window = store.last(ctrl.MAP_over)
        if len(window) < ctrl.MAP_over or any(s.tempered for s in window):
            return None
        val = window_metrics(M, window)[ctrl.metric]
        rel = relative_change(val, values[-1] if values else None)
        values.append(val)
        reason = check_convergence(values, ctrl) if phase == "warmup" else None
        emit(CheckRecord(it, gamma, ctrl.metric, val, rel,
                         f"converged:{reason}" if reason else phase))
        return reason

    t0 = time.perf_counter()
    budget = ctrl.maxiters - ctrl.mh_iters if mh else ctrl.maxiters
    phase = "warmup"
    it = 0
    switch_at = None

    def switch():
        nonlocal phase, switch_at
        sampler.warmup = False
        phase = "mh"
        switch_at = it

    if mh and budget <= 0:
        status.reason = "maxiters"
        switch()
    t_switch = None
    try:
        while it < ctrl.maxiters:
            gamma = temper_gamma(it, ctrl.maxiters, learn)
            sampler.state.gamma = gamma
            stats = sampler.step()
            it += 1
            ll = sampler.loglik()
            s = sampler.state
            store.add(Sample(
                iteration=it, P=s.P.copy(), E=s.E.copy(), A=s.A.copy(), gamma=gamma,
                warmup=sampler.warmup if mh else False, loglik=ll,
                log_posterior=sampler.log_posterior(ll),
                bic=bic_from_loglik(ll, K, G, s.rank),
                ratio_P=stats.ratio_P, ratio_E=stats.ratio_E))
            on_stride = it % ctrl.MAP_every == 0
            if phase == "mh":
                if on_stride:
                    check(it, gamma, "mh")
                if it - switch_at >= ctrl.mh_iters:
                    break
                continue
            reason = None
            if on_stride and it >= ctrl.miniters:
                reason = check(it, gamma, "warmup")
            if reason is not None or it >= budget:
                status.converged = reason is not None
                status.reason = reason or "maxiters"
                if not mh or ctrl.mh_iters == 0:
                    break
                t_switch = time.perf_counter()
                switch()
    finally:
        if logf:
            logf.close()
    t1 = time.perf_counter()
    status.iterations = it
    status.switch_iteration = switch_at
    inference = store.inference_samples(ctrl.n_inference)
    for smp in inference:
        assert smp.eligible
    summary = summarize(inference, converged=status.converged) if inference else None
    if summary is None:
        log.warning("no eligible inference samples after %d iterations", it)
    timings = {"total": t1 - t0,
               "warmup": (t_switch if t_switch is not None else t1) - t0,
               "mh": (t1 - t_switch) if t_switch is not None else 0.0}
    return ChainResult(config=config, store=store, status=status, summary=summary,
                       inference=inference, timings=timings, log_lines=lines)
