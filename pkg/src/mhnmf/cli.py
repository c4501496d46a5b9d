"""Command-line front end: fit, simulate, align, compare, report.

Exit codes: 0 success, 2 usage error, 3 data error, 4 chain stopped at maxiters.
"""

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import __version__
from .catalog import bundled_catalog, load_catalog
from .chain import ConvergenceControls, ModelConfig, run_chain
from .hypermut import hypermutation_filter
from .inference import (
    ci_width_comparison, ensemble_align, label_trace, normalized_included,
)
from .io import (
    DataError, SUMMARY_HEADER_E, SUMMARY_HEADER_P, atomic_write, load_manifest, read_matrix,
    read_samples, read_summary, read_table, summary_tables, write_manifest, write_matrix,
    write_samples, write_table,
)
from .metrics import ess_summary, evaluate, paired_model_agreement
from .model import ContractError, kl_divergence, rmse
from .rank import run_min_bic
from .simulate import SimConfig, simulate

log = logging.getLogger("mhnmf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CAPPED = 0, 2, 3, 4

MODEL_DEFAULTS = {"likelihood": "poisson", "prior": "truncnormal", "mh": True, "rank": 5,
                  "rank_method": "sbfi", "seed": 0, "mh_ratio": "exact", "jobs": 1,
                  "hyperparams": {}, "controls": {}}
CONTROL_FIELDS = [f.name for f in fields(ConvergenceControls)]


class UsageError(Exception):
    pass


def parse_rank(text):
    """``"5"`` -> 5; ``"1:10"`` -> (1, 10)."""
    if isinstance(text, (int, list, tuple)):
        return tuple(text) if isinstance(text, list) else text
    try:
        if ":" in text:
            lo, hi = text.split(":")
            return int(lo), int(hi)
        return int(text)
    except ValueError:
        raise UsageError(f"--rank must be an integer or lo:hi, got {text!r}") from None


# ---------------------------------------------------------------------------
# config resolution: flags > config file > defaults


def resolve_model_config(args):
    cfg = json.loads(json.dumps(MODEL_DEFAULTS))
    if args.config:
        try:
            user = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from None
        unknown = set(user) - set(MODEL_DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        for k, v in user.items():
            if k in ("controls", "hyperparams"):
                cfg[k].update(v)
            else:
                cfg[k] = v
    for k in ("likelihood", "prior", "mh", "rank", "rank_method", "seed", "mh_ratio", "jobs"):
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    for k in CONTROL_FIELDS:
        v = getattr(args, k, None)
        if v is not None:
            cfg["controls"][k] = v
    bad = set(cfg["controls"]) - set(CONTROL_FIELDS)
    if bad:
        raise UsageError(f"unknown convergence controls: {sorted(bad)}")
    cfg["rank"] = parse_rank(cfg["rank"])
    return cfg


def build_model_config(cfg):
    try:
        controls = ConvergenceControls(**cfg["controls"])
        return ModelConfig(likelihood=cfg["likelihood"], prior=cfg["prior"], mh=bool(cfg["mh"]),
                           rank=cfg["rank"], rank_method=cfg["rank_method"],
                           hyperparams=cfg["hyperparams"], controls=controls,
                           seed=int(cfg["seed"]), mh_ratio=cfg["mh_ratio"])
    except ContractError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# fit


def write_fit_outputs(out, result, labels, samples_ids):
    out = Path(out)
    if result.summary is not None:
        p_rows, e_rows = summary_tables(result.summary, labels, samples_ids)
        write_table(out / "summary_P.tsv", SUMMARY_HEADER_P, p_rows)
        write_table(out / "summary_E.tsv", SUMMARY_HEADER_E, e_rows)
        write_table(out / "inclusion.tsv", ["factor", "included"],
                    [(n, bool(a)) for n, a in enumerate(result.summary.A)])
        write_samples(out / "samples.npz", result.inference)
    tr = result.store.trace
    keys = list(tr)
    write_table(out / "trace.tsv", keys, zip(*[tr[k] for k in keys]))
    atomic_write(out / "convergence.log", result.log_text)


def cmd_fit(args):
    cfg = resolve_model_config(args)
    config = build_model_config(cfg)
    M, labels, samples_ids = read_matrix(args.input, integer=config.likelihood == "poisson")
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    extra = {"data": {"rows": len(labels), "columns": len(samples_ids)}}
    if args.filter_hypermutated:
        filt = hypermutation_filter(M.sum(axis=0))
        write_table(out / "hypermutation.tsv", ["sample", "total", "component", "kept"],
                    [(s, int(t), int(c), bool(k)) for s, t, c, k in
                     zip(samples_ids, M.sum(axis=0), filt.assignment, filt.keep)])
        M = M[:, filt.keep]
        samples_ids = [s for s, k in zip(samples_ids, filt.keep) if k]
        extra["hypermutation"] = {"components": filt.C, "flagged": int((~filt.keep).sum()),
                                  "warnings": filt.warnings}
    t0 = time.perf_counter()
    if config.fixed_rank is None and config.rank_method == "min_bic":
        lo, hi = config.rank_range
        result, table = run_min_bic(M, config, range(lo, hi + 1), jobs=int(cfg["jobs"]))
        write_table(out / "rank_bic.tsv", ["rank", "bic", "converged", "error"],
                    [(r["rank"], r["bic"], r["converged"], r["error"] or "") for r in table])
        extra["selected_rank"] = result.config.fixed_rank
    else:
        result = run_chain(M, config)
    wall = time.perf_counter() - t0
    write_fit_outputs(out, result, labels, samples_ids)
    timings = dict(result.timings, wall=wall)
    status = result.status.to_dict()
    write_manifest(out, "fit", cfg, inputs={"matrix": args.input}, timings=timings,
                   status=status, extra=extra)
    print(f"fit: {status['reason']} after {status['iterations']} iterations; "
          f"rank {result.summary.rank if result.summary is not None else 'NA'}; "
          f"outputs in {out}")
    if result.summary is None or not result.status.converged:
        log.warning("chain did not converge (%s)", status["reason"])
        return EXIT_CAPPED
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate


def _catalog(path):
    return bundled_catalog() if path is None else load_catalog(path)


def _simulate_one(task):
    conf, catalog_path, out = task
    catalog = _catalog(catalog_path)
    d = simulate(conf, catalog)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    sample_ids = [f"S{g + 1}" for g in range(conf.G)]
    write_matrix(out / "counts.tsv", d.M, d.labels, sample_ids, integer=True)
    write_matrix(out / "true_P.tsv", d.P, d.labels, d.names)
    write_matrix(out / "true_E.tsv", d.E, d.names, sample_ids, corner="signature", integer=True)
    inputs = {"catalog": catalog_path} if catalog_path else {}
    write_manifest(out, "simulate", conf.to_dict(), inputs=inputs,
                   extra={"signatures": d.names, "catalog": catalog_path or "bundled"})
    return str(out)


def cmd_simulate(args):
    try:
        confs = [SimConfig(N=args.N, G=args.G, r=args.r, p=args.p, seed=args.seed + i)
                 for i in range(args.replicates)]
    except ContractError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.output)
    if args.replicates == 1:
        tasks = [(confs[0], args.catalog, out)]
    else:
        tasks = [(c, args.catalog, out / f"rep{i:03d}") for i, c in enumerate(confs)]
    if args.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            done = list(pool.map(_simulate_one, tasks))
    else:
        done = [_simulate_one(t) for t in tasks]
    for d in done:
        print(f"simulate: wrote {d}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# align


def _load_fit(fit_dir):
    fit_dir = Path(fit_dir)
    man = load_manifest(fit_dir)
    if man.get("command") != "fit":
        raise DataError(f"{fit_dir} is not a fit output directory")
    if not (fit_dir / "summary_P.tsv").exists():
        raise DataError(f"{fit_dir} has no posterior summary (chain produced no inference samples)")
    P, E, factors, labels, sample_ids, bounds = read_summary(fit_dir)
    incl = read_table(fit_dir / "inclusion.tsv")
    A = np.array([1.0 if r["included"] else 0.0 for r in incl])
    return SimpleNamespace(dir=fit_dir, manifest=man, P=P, E=E, factors=factors, labels=labels,
                           sample_ids=sample_ids, A=A, **bounds)


def cmd_align(args):
    fit = _load_fit(args.fit)
    ref = _catalog(args.reference)
    ref_labels = [str(x) for x in ref.index]
    if set(ref_labels) != set(fit.labels):
        diff = sorted(set(ref_labels) ^ set(fit.labels))
        raise DataError(f"row labels differ between fit and reference; symmetric difference: {diff}")
    R = ref.loc[fit.labels].to_numpy(dtype=float)
    names = [str(c) for c in ref.columns]
    samples = read_samples(fit.dir / "samples.npz")
    P_samples = normalized_included(samples, fit.A)
    res = ensemble_align(P_samples, R, names, summary_P=fit.P)
    out = Path(args.output)
    fac = fit.factors
    write_table(out / "similarity.tsv", ["reference", "factor", "cosine"],
                [(names[r], fac[j], res.S[r, j]) for r in range(len(names)) for j in range(len(fac))])
    rows, contrib = [], []
    for j in range(len(fac)):
        r = res.mapping.get(j)
        name = names[r] if r is not None else "NA"
        rows.append((fac[j], name, res.S[r, j] if r is not None else float("nan"),
                     res.vote_fraction(j), res.mean_cosine(r, j) if r is not None else float("nan")))
        contrib.append((fac[j], name, float(np.median(fit.E[j])), float(fit.E[j].sum())))
    write_table(out / "assignment.tsv",
                ["factor", "reference", "cosine", "vote_fraction", "mean_sample_cosine"], rows)
    write_table(out / "contribution.tsv",
                ["factor", "reference", "median_mutations", "total_mutations"], contrib)
    # label trace over the stored samples, factors in the sampler's own indexing
    trace = label_trace(samples, R)
    write_table(out / "label_trace.tsv", ["iteration", "factor", "reference", "cosine", "included"],
                [(it, n, names[r] if r >= 0 else "NA", c, inc) for it, n, r, c, inc in trace])
    inputs = {"reference": args.reference} if args.reference else {}
    write_manifest(out, "align", {"fit": str(fit.dir), "reference": args.reference or "bundled"},
                   inputs=inputs, extra={"fit_manifest": fit.manifest.get("inputs", {})})
    for row in rows:
        print(f"factor {row[0]} -> {row[1]} (cosine {row[2]:.3f}, votes {row[3]:.2f})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare


def compare_fits(a, b):
    """Agreement, runtime ratio and CI-width percentiles of fit ``a`` against fit ``b``."""
    agr = paired_model_agreement(a, b)
    ia = [i for i, _ in agr.pairs]
    ib = [j for _, j in agr.pairs]
    sub = lambda f, idx: SimpleNamespace(   # noqa: E731
        P_lower=f.P_lower[:, idx], P_upper=f.P_upper[:, idx],
        E_lower=f.E_lower[idx], E_upper=f.E_upper[idx])
    widths = ci_width_comparison(sub(a, ia), sub(b, ib))
    ta = a.manifest.get("timings", {}).get("total")
    tb = b.manifest.get("timings", {}).get("total")
    ratio = ta / tb if ta and tb else float("nan")
    return [("min_cosine_P", agr.min_cos_P), ("min_cosine_E", agr.min_cos_E),
            ("runtime_ratio", ratio),
            ("width_diff_P_p10", widths["P"][0]), ("width_diff_P_p90", widths["P"][1]),
            ("width_diff_E_p10", widths["E"][0]), ("width_diff_E_p90", widths["E"][1]),
            ("surplus_factors_A", len(agr.surplus_A)), ("surplus_factors_B", len(agr.surplus_B))]


def cmd_compare(args):
    a, b = _load_fit(args.fit_a), _load_fit(args.fit_b)
    da = a.manifest["inputs"].get("matrix", {}).get("sha256")
    db = b.manifest["inputs"].get("matrix", {}).get("sha256")
    if da is None or da != db:
        raise DataError("fits were made on different input data (matrix digests differ)")
    rows = compare_fits(a, b)
    out = Path(args.output)
    write_table(out / "compare.tsv", ["quantity", "value"], rows)
    write_manifest(out, "compare", {"fit_a": str(a.dir), "fit_b": str(b.dir)},
                   extra={"matrix_sha256": da})
    for k, v in rows:
        print(f"{k}\t{v:.6g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report


def cmd_report(args):
    fit = _load_fit(args.fit)
    mpath = fit.manifest["inputs"]["matrix"]["path"]
    M, labels, sample_ids = read_matrix(mpath, integer=False)
    if fit.manifest.get("hypermutation"):
        kept = set(fit.sample_ids)
        keep = [s in kept for s in sample_ids]
        M = M[:, keep]
    idx = [labels.index(l) for l in fit.labels]
    M = M[idx]
    samples = read_samples(fit.dir / "samples.npz")
    incl = [s for s in samples if np.array_equal(s.A, fit.A)]
    trace = read_table(fit.dir / "trace.tsv")
    ctrl = fit.manifest["config"]["controls"]
    n_inf = ctrl.get("n_inference", ConvergenceControls().n_inference)
    elig = [r for r in trace if not r["warmup"] and r["gamma"] >= 1.0][-n_inf:]
    acc = (float(np.nanmean([r["ratio_P"] for r in elig])) if elig else float("nan"),
           float(np.nanmean([r["ratio_E"] for r in elig])) if elig else float("nan"))
    runtime = fit.manifest.get("timings", {}).get("total", float("nan"))
    if args.truth:
        man = load_manifest(args.truth)
        tP, p_labels, _ = read_matrix(Path(args.truth) / "true_P.tsv", integer=False)
        tE, _, _ = read_matrix(Path(args.truth) / "true_E.tsv", integer=False)
        order = [p_labels.index(l) for l in fit.labels]
        truth = SimpleNamespace(P=tP[order], E=tE)
        summ = SimpleNamespace(P=fit.P, E=fit.E, rank=fit.P.shape[1], Mhat=fit.P @ fit.E)
        rep = evaluate(M, truth, summ, runtime=runtime, acceptance=acc, samples=incl).to_dict()
        rep["truth_seed"] = man["config"].get("seed")
    else:
        Mhat = fit.P @ fit.E
        e_med, e_min = ess_summary(incl) if len(incl) >= 3 else (float("nan"),) * 2
        rep = {"rank": fit.P.shape[1], "rmse": rmse(M, Mhat), "kl": kl_divergence(M, Mhat),
               "runtime": runtime, "acceptance_P": acc[0], "acceptance_E": acc[1],
               "ess_median": e_med, "ess_min": e_min}
    rep["converged"] = bool(fit.manifest["status"].get("converged"))
    out = Path(args.output)
    write_table(out / "report.tsv", ["metric", "value"], list(rep.items()))
    write_manifest(out, "report", {"fit": str(fit.dir), "truth": args.truth})
    for k, v in rep.items():
        print(f"{k}\t{v}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def _bool_flag(p, name, help):
    g = p.add_mutually_exclusive_group()
    g.add_argument(f"--{name}", dest=name.replace("-", "_"), action="store_const", const=True,
                   default=None, help=help)
    g.add_argument(f"--no-{name}", dest=name.replace("-", "_"), action="store_const",
                   const=False, help=f"disable --{name}")


def build_parser():
    ap = argparse.ArgumentParser(prog="mhnmf", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a model to a count matrix")
    f.add_argument("input", help="tab-separated matrix: labels x samples")
    f.add_argument("-o", "--output", required=True, help="output directory")
    f.add_argument("--likelihood", choices=["poisson", "normal"])
    f.add_argument("--prior", choices=["truncnormal", "exponential", "gamma"])
    _bool_flag(f, "mh", "use Metropolis-Hastings steps (Poisson likelihood)")
    f.add_argument("--rank", help="fixed rank N, or a range lo:hi")
    f.add_argument("--rank-method", dest="rank_method", choices=["bfi", "sbfi", "min_bic"])
    f.add_argument("--seed", type=int)
    f.add_argument("--config", help="JSON file with defaults (flags take precedence)")
    f.add_argument("--jobs", type=int, help="workers for min_bic candidates")
    f.add_argument("--mh-ratio", dest="mh_ratio", choices=["exact", "paper"])
    f.add_argument("--filter-hypermutated", action="store_true",
                   help="drop samples flagged by the negative-binomial mixture screen")
    ctl = f.add_argument_group("convergence controls")
    ctl.add_argument("--metric", choices=["log_posterior", "log_likelihood", "bic", "rmse", "kl"])
    for name in CONTROL_FIELDS:
        if name == "metric":
            continue
        typ = float if name == "tol" else int
        ctl.add_argument(f"--{name}", type=typ)
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="simulate count data from a signature catalog")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--N", type=int, required=True, help="number of signatures")
    s.add_argument("--G", type=int, required=True, help="number of samples")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--r", type=float, default=111.11)
    s.add_argument("--p", type=float, default=0.1)
    s.add_argument("--catalog", help="catalog TSV (default: bundled synthetic catalog)")
    s.add_argument("--replicates", type=int, default=1)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("align", help="align a fit to a reference catalog")
    a.add_argument("fit")
    a.add_argument("--reference", help="catalog TSV (default: bundled synthetic catalog)")
    a.add_argument("-o", "--output", required=True)
    a.set_defaults(func=cmd_align)

    c = sub.add_parser("compare", help="compare two fits on the same data")
    c.add_argument("fit_a")
    c.add_argument("fit_b")
    c.add_argument("-o", "--output", required=True)
    c.set_defaults(func=cmd_compare)

    r = sub.add_parser("report", help="metrics for a fit, optionally against simulated truth")
    r.add_argument("fit")
    r.add_argument("--truth", help="simulate output directory")
    r.add_argument("-o", "--output", required=True)
    r.set_defaults(func=cmd_report)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mhnmf {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ContractError, FileNotFoundError) as exc:
        print(f"mhnmf {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
