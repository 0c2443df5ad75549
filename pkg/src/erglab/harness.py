"""Pipelines behind the command line: run experiments, write CSVs and a summary.

Every CSV starts with a comment line ``# erglab <version> config_sha256=<hash>``
followed by a header row.  Floats are written with 17 significant digits.
Outputs depend only on the config (including its master seed), never on the
worker count.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from erglab import __version__, _rng
from erglab import asip, mixing_time, skew_correlations
from erglab.certificate import (
    RateCertificate,
    block_product_moments,
    certify,
    empirical_kp,
    key_lemma_product_moment,
)
from erglab.config import ExperimentConfig
from erglab.env_process import sample_window, sample_windows
from erglab.equivariant import backward_distances, backward_limit, block_visit_counts, equivariance_residuals, visits_for_depths

log = logging.getLogger(__name__)

SUBCOMMANDS = ("certify", "equivariant", "kp", "asip", "correlations", "mixing-tail", "all")
LEMMA_P = (1.0, 2.0, 4.0)


@dataclass
class Check:
    name: str
    passed: bool
    margin: float
    detail: str = ""

    def as_record(self) -> dict:
        return {"name": self.name, "passed": self.passed, "margin": _clean(self.margin), "detail": self.detail}


@dataclass
class RunSummary:
    version: str
    config_sha256: str
    subcommand: str
    certificate: Optional[dict]
    checks: List[Check] = field(default_factory=list)
    files: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def as_record(self) -> dict:
        return {
            "version": self.version,
            "config_sha256": self.config_sha256,
            "subcommand": self.subcommand,
            "passed": self.passed,
            "certificate": None if self.certificate is None else {k: _clean(v) for k, v in self.certificate.items()},
            "checks": [c.as_record() for c in self.checks],
            "files": self.files,
        }


def _clean(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def _margin_le(values, limits) -> float:
    """min(limit - value); positive means every value is within its limit."""
    diff = np.asarray(limits, dtype=float) - np.asarray(values, dtype=float)
    return float(np.min(diff)) if diff.size else math.inf


class Run:
    """Shared state for one invocation: config, output directory, cached results."""

    def __init__(self, cfg: ExperimentConfig, out_dir: str, workers: int = 1):
        self.cfg = cfg
        self.out_dir = out_dir
        self.workers = max(int(workers), 1)
        self.summary = RunSummary(__version__, cfg.sha256, "", None)
        self._cert: Optional[RateCertificate] = None
        self._kp = None
        os.makedirs(out_dir, exist_ok=True)

    # -- helpers ------------------------------------------------------------

    def seed(self, tag: str) -> int:
        return _rng.derive(self.cfg.master_seed, tag)

    def write_csv(self, name: str, header: Sequence[str], rows) -> None:
        path = os.path.join(self.out_dir, name)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"# erglab {__version__} config_sha256={self.cfg.sha256}\n")
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(fmt(v) for v in row) + "\n")
        self.summary.files.append(name)

    def check(self, name: str, passed: bool, margin: float, detail: str = "") -> None:
        self.summary.checks.append(Check(name, bool(passed), float(margin), detail))
        log.info("%s %s (margin %.3g) %s", "PASS" if passed else "FAIL", name, margin, detail)

    @property
    def tol(self) -> float:
        return float(self.cfg.tolerances["mu_tol"])

    @property
    def mu_n_max(self) -> int:
        return int(self.cfg.tolerances["mu_n_max"])

    @property
    def cert(self) -> RateCertificate:
        if self._cert is None:
            c = self.cfg.certificate
            self._cert = certify(
                self.cfg.env,
                self.cfg.kernels,
                c["delta_grid"],
                c["M_grid"],
                float(c["p"]),
                int(c["mc_samples"]),
                self.seed("certificate"),
                self.workers,
            )
            self.summary.certificate = self._cert.as_record()
        return self._cert

    def kp(self, n_max: int):
        if self._kp is None or self._kp.remark.n_max < n_max:
            s = self.cfg.samples
            n = max(int(s["kp_n_max"]), n_max)
            self._kp = empirical_kp(
                self.cfg.env,
                self.cfg.kernels,
                self.cert.rho_step,
                self.cert.p,
                n,
                int(s["kp_windows"]),
                self.seed("kp"),
                r0=self.cert.r0,
                tol=self.tol,
                mu_n_max=self.mu_n_max,
                workers=self.workers,
            )
        return self._kp


# --- pipelines -------------------------------------------------------------


def run_certify(run: Run) -> None:
    c = run.cert
    rows = [(k, v) for k, v in c.as_record().items()]
    run.write_csv("certificate.csv", ("field", "value"), rows)
    prod = (1.0 + c.psi_r0) * c.p0
    run.check("certificate.contraction", prod < 1.0, 1.0 - prod, f"(1+psi(r0)) p0 = {prod:.6g}")
    run.check("certificate.finite_bounds", not c.vacuous, 1.0, f"remark {c.remark_moment_bound:.6g}, lemma {c.lemma_moment_bound:.6g}")


def run_equivariant(run: Run) -> None:
    cfg, s = run.cfg, run.cfg.samples
    env, ks = cfg.env, cfg.kernels
    count = int(s["equivariance_windows"])

    def block(rng, n, _off):
        w = sample_windows(env, run.mu_n_max, 1, n, rng)
        return equivariance_residuals(ks, w, run.tol, run.mu_n_max)

    res = np.concatenate(_rng.map_blocks(block, count, run.seed("equivariance"), "equivariance", run.workers))
    run.write_csv("equivariance.csv", ("window", "residual"), enumerate(res))
    limit = 2.0 * run.tol + 1e-10
    bad = int(np.isnan(res).sum())
    worst = float(np.nanmax(res)) if bad < res.size else math.nan
    run.check(
        "equivariant.residual",
        bad == 0 and worst <= limit,
        limit - worst if bad == 0 else -math.inf,
        f"max {worst:.3g} over {res.size} windows, {bad} unconverged",
    )

    # pathwise domination by 2 (1 - delta)^visits
    c = run.cert
    n_max = int(s["pathwise_n_max"])
    past = max(run.mu_n_max, n_max)
    depths = np.arange(1, n_max + 1)

    def pblock(rng, n, _off):
        w = sample_windows(env, past, 0, n, rng)
        recent = w.recent(past)
        mu, err, _, conv = backward_limit(ks, recent, run.tol, run.mu_n_max)
        dist, _ = backward_distances(ks, recent, mu, n_max)
        J = max(n_max // c.M - 1, 1)
        cum = block_visit_counts(ks, w, c.delta, c.M, J)
        v = visits_for_depths(cum, c.M, depths)
        bound = 2.0 * (1.0 - c.delta) ** v
        return dist[conv], bound[conv], err[conv], v[conv]

    parts = _rng.map_blocks(pblock, int(s["pathwise_windows"]), run.seed("pathwise"), "pathwise", run.workers)
    dist = np.concatenate([p[0] for p in parts])
    bound = np.concatenate([p[1] for p in parts])
    err = np.concatenate([p[2] for p in parts])
    visits = np.concatenate([p[3] for p in parts])
    slack = bound + err[:, None] + 1e-12 - dist
    viol = (slack < 0).sum(axis=0)
    rows = (
        (w, int(n), dist[w, j], bound[w, j], visits[w, j])
        for w in range(dist.shape[0])
        for j, n in enumerate(depths)
    )
    run.write_csv("pathwise.csv", ("window_id", "n", "actual_distance", "theoretical_bound", "visits"), rows)
    run.check(
        "equivariant.pathwise_domination",
        int(viol.sum()) == 0,
        float(slack.min()),
        f"{int(viol.sum())} violations over {dist.shape[0]} windows, n <= {n_max}",
    )


def run_kp(run: Run) -> None:
    c = run.cert
    rep = run.kp(int(run.cfg.samples["kp_n_max"]))
    entries = [
        (rep.remark, c.remark_moment_bound),
        (rep.lemma, c.lemma_moment_bound),
        (rep.forward, c.remark_moment_bound),
    ]
    rows = [
        (e.convention, e.p, e.sample_count, e.empirical_p_moment, e.stderr, e.upper, b, rep.skipped)
        for e, b in entries
    ]
    run.write_csv(
        "kp.csv",
        ("convention", "p", "samples", "empirical_p_moment", "stderr", "upper_3se", "analytic_bound", "skipped"),
        rows,
    )
    run.write_csv(
        "kp_samples.csv",
        ("window", "remark", "lemma", "forward"),
        zip(range(rep.remark.sample_count), rep.remark.samples, rep.lemma.samples, rep.forward.samples),
    )
    for e, b in entries[:2]:
        run.check(f"kp.{e.convention}", e.empirical_p_moment - 3.0 * e.stderr <= b, b - e.empirical_p_moment,
                  f"E[K^p] = {e.empirical_p_moment:.6g} +- {e.stderr:.3g}, bound {b:.6g}")

    # product-moment lemma
    s = run.cfg.samples
    n_max = int(s["lemma_n_max"])
    pm = block_product_moments(
        run.cfg.env, run.cfg.kernels, c.delta, c.M, n_max, LEMMA_P, int(s["lemma_samples"]),
        run.seed("lemma"), run.workers,
    )
    r = c.r0 + 1
    rows, worst, viol = [], math.inf, 0
    for i, p in enumerate(LEMMA_P):
        e_beta = (1.0 - c.delta) ** p * c.prob_A + 1.0 - c.prob_A
        for j, n in enumerate(pm.n):
            b = key_lemma_product_moment(run.cfg.env, e_beta, r, int(n))
            m, se = pm.mean[i, j], pm.stderr[i, j]
            slack = b + 3.0 * se - m
            worst = min(worst, slack)
            viol += slack < 0
            rows.append((int(n), p, m, se, b))
    run.write_csv("lemma.csv", ("n", "p", "mean", "stderr", "bound"), rows)
    run.check("kp.product_moment_lemma", viol == 0, worst, f"{viol} violations, r = {r}")


def run_asip(run: Run) -> None:
    cfg, s = run.cfg, run.cfg.samples
    env, ks = cfg.env, cfg.kernels
    c = run.cert
    trunc = float(cfg.tolerances["truncation_tol"])
    cw = sample_windows(env, run.mu_n_max, 0, 512, _rng.stream(run.seed("center"), "center", 0))
    obs = asip.center_observable(ks, env, cfg.f, cw, cfg.q, run.tol, run.mu_n_max)
    tm = asip.TailModel.from_certificate(c)
    S = tm.depth(2.0 * obs.sup, trunc)

    # exact martingale residuals
    n_res = int(s["residual_n"])
    rng = _rng.stream(run.seed("asip"), "window", 0)
    window = sample_window(env, run.mu_n_max, n_res + S + 2, rng)
    resid = asip.martingale_residuals(ks, window, obs, n_res, S, run.tol, run.mu_n_max)
    run.write_csv("residuals.csv", ("n", "residual"), zip(range(1, n_res + 1), resid))
    run.check("asip.martingale_residual", resid.max() <= 2.0 * trunc, 2.0 * trunc - resid.max(),
              f"max {resid.max():.3g}, chi depth S = {S}")

    chain = asip.simulate_chain(ks, window, n_res, rng, tol=run.tol, n_max=run.mu_n_max)
    trace = asip.martingale_increments(ks, window, obs, chain[:n_res], S, tm, run.tol, run.mu_n_max)
    gap = np.abs(trace.partial_sums_f - trace.partial_sums_M)
    lim = 2.0 * trace.chi_sup + 2.0 * np.arange(1, n_res + 1) * trunc
    run.check("asip.telescoping", bool(np.all(gap <= lim)), _margin_le(gap, lim))

    # variances
    gap_n = sorted(int(x) for x in s["gap_n"])
    res = asip.sigma2(env, ks, obs, gap_n, int(s["sigma2_replicas"]), run.seed("sigma2"),
                      int(s["sigma2_env_samples"]), tm, trunc, run.tol, run.mu_n_max)
    rows = []
    for rid in range(res.sums_f.shape[0]):
        for j, n in enumerate(res.n):
            rows.append((rid, int(n), res.sums_f[rid, j], res.sums_M[rid, j], res.sums_f[rid, j] ** 2 / n))
    run.write_csv("sigma2_replicas.csv", ("replica_id", "n", "S_n_f", "S_n_M", "sigma2_local"), rows)
    run.write_csv(
        "sigma2.csv",
        ("n", "sigma2_f", "se_f", "sigma2_M", "se_M", "gap"),
        zip(res.n, res.sigma2_f, res.se_f, res.sigma2_M, res.se_M, res.gap),
    )
    if res.degenerate:
        run.check("asip.sigma2_degenerate", True, 0.0, "sigma2 below threshold; CLT checks skipped")
    else:
        d = abs(res.sigma2_f[-1] - res.sigma2_M[-1])
        run.check("asip.sigma2_f_vs_M", d <= 3.0 * res.se_f[-1], 3.0 * res.se_f[-1] - d)
        pos = res.gap > 0
        if pos.sum() >= 2:
            slope = float(np.polyfit(np.log(res.n[pos]), np.log(res.gap[pos]), 1)[0])
            run.check("asip.variance_gap_slope", slope < 0, -slope, f"log-log slope {slope:.3g}")
        if env.alphabet_size == 1:
            P = ks.kernels[0]
            fb = obs.values[0] - env_stationary(P) @ obs.values[0]
            gk = asip.green_kubo(P, env_stationary(P), fb)
            diff = abs(res.sigma2_f[-1] - gk)
            run.check("asip.sigma2_green_kubo", diff <= 3.0 * res.se_f[-1], 3.0 * res.se_f[-1] - diff, f"oracle {gk:.6g}")

    clt = asip.clt_check(env, ks, obs, int(s["clt_n"]), int(s["clt_replicas"]), run.seed("clt"), run.tol, run.mu_n_max)
    run.write_csv("clt.csv", ("n", "replicas", "ks", "sigma2_hat", "sigma2_se", "null_q99", "skipped"),
                  [(clt.n, clt.replicas, clt.ks, clt.sigma2_hat, clt.sigma2_se, clt.null_q99, clt.skipped)])
    if not clt.skipped:
        ks_max = float(cfg.checks["ks_max"])
        run.check("asip.clt_ks", clt.ks < ks_max, ks_max - clt.ks, f"KS {clt.ks:.4g} (null 99% quantile {clt.null_q99:.4g})")

    # visiting times
    try:
        L = int(s["visit_L"]) or asip.smallest_L(env, ks)
        vt = asip.visiting_time_tail(env, ks, L, int(s["visit_j_max"]), int(s["visit_samples"]),
                                     run.seed("visits"), cfg.q, run.workers)
    except ValueError as exc:
        run.check("asip.visiting_tail", False, -math.inf, str(exc))
    else:
        run.write_csv("visits.csv", ("j", "empirical", "stderr", "analytic", "partial_sum"),
                      zip(vt.j, vt.empirical, vt.stderr, vt.analytic, vt.partial_sums))
        run.check("asip.visiting_tail", bool(np.all(vt.empirical <= vt.analytic + 3 * vt.stderr)),
                  _margin_le(vt.empirical, vt.analytic + 3 * vt.stderr), f"L = {L}, P(Q_L) = {vt.prob_Q:.6g}, r = {vt.r}")

    # hat-M lag profile
    k_star = int(math.ceil(5.0 * c.p / math.log(1.0 / c.rho_step)))
    m0 = int(s["hatm_offset"])
    length = m0 + k_star + 1
    hrng = _rng.stream(run.seed("hatm"), "hatm", 0)
    hwin = sample_window(env, run.mu_n_max, length + S + 2, hrng)
    inc = asip.increment_ensemble(ks, hwin, obs, length, int(s["hatm_replicas"]), hrng, S, run.tol, run.mu_n_max)
    prof = [asip.hatM_autocovariance(inc, m0, k) for k in range(k_star + 1)]
    run.write_csv("hatm.csv", ("k", "cov", "stderr"), [(k, cv, se) for k, (cv, se) in enumerate(prof)])
    cv, se = prof[-1]
    run.check("asip.hatM_decay", abs(cv) <= 3.0 * se or se == 0.0 and cv == 0.0, 3.0 * se - abs(cv), f"lag {k_star}")


def env_stationary(P: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eig(P.T)
    pi = np.real(v[:, np.argmin(np.abs(w - 1.0))])
    return pi / pi.sum()


def run_correlations(run: Run) -> None:
    cfg, s = run.cfg, run.cfg.samples
    env, ks = cfg.env, cfg.kernels
    pair = skew_correlations.SkewObservablePair(cfg.f, cfg.g, cfg.q)
    prof = skew_correlations.covariance_profile(env, ks, pair, int(s["corr_n_max"]), int(s["corr_samples"]),
                                                run.seed("correlations"), run.tol, run.mu_n_max, run.workers)
    fit = skew_correlations.fit_profile(prof)
    rho_corr = skew_correlations.corr_rate_bound(run.cert.rho_step, skew_correlations.env_rho_rate(env))
    nf = skew_correlations.lq_norm(cfg.f, env, cfg.q)
    ng = skew_correlations.lq_norm(cfg.g, env, cfg.q)
    env_chk = skew_correlations.envelope_check(prof, rho_corr, nf, ng, int(s["corr_n_max"]))
    run.write_csv("correlations.csv", ("n", "cov", "stderr", "bound"), zip(prof.n, prof.cov, prof.stderr, env_chk.bound))
    run.write_csv("correlations_fit.csv", ("fitted_rate", "lags_used", "inconclusive", "rho_corr", "envelope_constant"),
                  [(fit.rate, fit.lags.size, fit.inconclusive, rho_corr, env_chk.constant)])
    slack = float(cfg.checks["corr_slack"])
    if fit.inconclusive:
        run.check("correlations.decay_rate", True, math.inf, "inconclusive: too few informative lags")
    else:
        run.check("correlations.decay_rate", fit.rate <= rho_corr + slack, rho_corr + slack - fit.rate,
                  f"fitted {fit.rate:.6g}, rho_corr {rho_corr:.6g}")
    run.check("correlations.envelope", env_chk.violations == 0, env_chk.margin, f"C = {env_chk.constant:.4g}")


def run_mixing_tail(run: Run) -> None:
    cfg, s = run.cfg, run.cfg.samples
    c = run.cert
    eps = float(s["mixing_epsilon"])
    N_max = int(s["mixing_N_max"])
    n_prof = max(N_max, int(s["schedule_N_max"]))
    kp = run.kp(n_prof)
    tol = min(run.tol, mixing_time.mu_tolerance(eps))
    prof = mixing_time.sample_profiles(cfg.env, cfg.kernels, n_prof, int(s["mixing_samples"]),
                                       run.seed("mixing"), tol, run.mu_n_max, run.workers)
    rep = mixing_time.tail_experiment(cfg.env, cfg.kernels, c, kp.forward.empirical_p_moment, eps, N_max,
                                      int(s["mixing_samples"]), profile=prof)
    run.write_csv(
        "mixing_tail.csv",
        ("N", "empirical_tail", "bound_empirical_moment", "bound_analytic_moment", "stderr"),
        zip(rep.N_values, rep.empirical_tail, rep.bound_empirical_moment, rep.bound_analytic_moment, rep.stderr),
    )
    lim = rep.bound_empirical_moment + 3.0 * rep.stderr
    run.check("mixing.tail_bound", bool(np.all(rep.empirical_tail <= lim)), _margin_le(rep.empirical_tail, lim),
              f"eps {eps}, {rep.ambiguous} ambiguous, {rep.not_found} unresolved, {rep.skipped} skipped")
    env_s = mixing_time.schedule_envelope(prof, c.rho_step, c.p, int(s["schedule_N_max"]))
    run.write_csv("schedule.csv", ("N", "eps", "empirical_tail", "scaled"),
                  zip(env_s.N_values, env_s.eps, env_s.empirical_tail, env_s.scaled))
    run.check("mixing.schedule_envelope", env_s.passed, 10.0 * env_s.fitted_constant - env_s.max_scaled,
              f"fitted constant {env_s.fitted_constant:.4g}")


PIPELINES: Dict[str, Callable[[Run], None]] = {
    "certify": run_certify,
    "equivariant": run_equivariant,
    "kp": run_kp,
    "asip": run_asip,
    "correlations": run_correlations,
    "mixing-tail": run_mixing_tail,
}


def run(cfg: ExperimentConfig, subcommand: str, out_dir: Optional[str] = None, workers: int = 1) -> RunSummary:
    """Execute one pipeline (or all of them) and write ``summary.json`` last."""
    if subcommand not in SUBCOMMANDS:
        raise ValueError(f"unknown subcommand {subcommand!r}; choose from {', '.join(SUBCOMMANDS)}")
    r = Run(cfg, out_dir or cfg.output_dir, workers)
    r.summary.subcommand = subcommand
    names = [k for k in PIPELINES] if subcommand == "all" else [subcommand]
    if "certify" not in names:
        names.insert(0, "certify")
    for name in names:
        PIPELINES[name](r)
    with open(os.path.join(r.out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(r.summary.as_record(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return r.summary
