"""Experiment configuration files.

Configs are TOML documents.  Every section and key is optional except
``[env]`` and ``[kernels]``; unknown keys are rejected.  Validation collects
every violation before raising, so one run reports all problems at once.

    master_seed = 0                 # unsigned 64-bit
    output_dir = "out"

    [env]
    kind = "iid"                    # or "markov"
    marginal = [0.5, 0.5]           # iid only
    transition = [[0.9, 0.1], ...]  # markov only

    [kernels]                       # one row-stochastic matrix per symbol
    "0" = [[1.0, 0.0], [0.0, 1.0]]
    "1" = [[0.5, 0.5], [0.5, 0.5]]

    [observables]                   # tables indexed [symbol][state]
    f = [[1.0, 0.0], [1.0, 0.0]]
    g = [[1.0, 0.0], [1.0, 0.0]]    # defaults to f
    q = 8.0

    [certificate]
    delta_grid = [0.1, ..., 1.0]
    M_grid = [1, 2, 3, 4]
    p = 2.0
    mc_samples = 20000

    [tolerances]
    mu_tol = 1e-10
    truncation_tol = 1e-8
    mu_n_max = 512

    [samples]                       # see SAMPLE_DEFAULTS

    [checks]
    ks_max = 0.02
    corr_slack = 0.05
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from erglab.env_process import EnvModel, build_iid_env, build_markov_env
from erglab.kernel_cocycle import KernelSet, build_kernel_set
from erglab.models import DELTA_GRID, M_GRID

U64_MAX = (1 << 64) - 1

CERT_DEFAULTS = {"delta_grid": list(DELTA_GRID), "M_grid": list(M_GRID), "p": 2.0, "mc_samples": 20_000}
TOL_DEFAULTS = {"mu_tol": 1e-10, "truncation_tol": 1e-8, "mu_n_max": 512}
CHECK_DEFAULTS = {"ks_max": 0.02, "corr_slack": 0.05}
SAMPLE_DEFAULTS = {
    "equivariance_windows": 1000,
    "pathwise_windows": 1000,
    "pathwise_n_max": 60,
    "kp_windows": 10_000,
    "kp_n_max": 60,
    "lemma_samples": 20_000,
    "lemma_n_max": 64,
    "residual_n": 200,
    "clt_n": 5000,
    "clt_replicas": 2000,
    "sigma2_replicas": 400,
    "sigma2_env_samples": 1,
    "gap_n": [256, 512, 1024, 2048, 4096, 8192],
    "hatm_replicas": 2000,
    "hatm_offset": 10,
    "visit_L": 0,  # 0 picks the smallest L with P(Q_L) > 0
    "visit_j_max": 10,
    "visit_samples": 100_000,
    "corr_n_max": 30,
    "corr_samples": 20_000,
    "mixing_epsilon": 0.5,
    "mixing_N_max": 10,
    "mixing_samples": 100_000,
    "schedule_N_max": 20,
}
TOP_KEYS = {"master_seed", "output_dir", "env", "kernels", "observables", "certificate", "tolerances", "samples", "checks"}
ENV_KEYS = {"kind", "marginal", "transition"}
OBS_KEYS = {"f", "g", "q"}


class ConfigError(ValueError):
    """One or more config violations; ``errors`` lists them all."""

    def __init__(self, errors: List[str]):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))


@dataclass(frozen=True)
class ExperimentConfig:
    master_seed: int
    output_dir: str
    env: EnvModel
    kernels: KernelSet
    f: np.ndarray = field(repr=False)
    g: np.ndarray = field(repr=False)
    q: float
    certificate: Dict[str, Any]
    tolerances: Dict[str, Any]
    samples: Dict[str, Any]
    checks: Dict[str, Any]
    normalized: Dict[str, Any] = field(repr=False)

    @property
    def sha256(self) -> str:
        text = json.dumps(self.normalized, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        if not 0 <= seed <= U64_MAX:
            raise ConfigError([f"master_seed {seed} is not an unsigned 64-bit integer"])
        norm = dict(self.normalized, master_seed=seed)
        return ExperimentConfig(**{**self.__dict__, "master_seed": seed, "normalized": norm})


def _unknown(section: Dict[str, Any], allowed, where: str, errors: List[str]) -> None:
    for k in sorted(set(section) - set(allowed)):
        errors.append(f"unknown key {where}{k!r}")


def _matrix(value, where: str, errors: List[str]) -> Optional[np.ndarray]:
    try:
        a = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        errors.append(f"{where} is not a numeric table")
        return None
    if a.ndim != 2:
        errors.append(f"{where} must be a 2-D table, got {a.ndim} dimension(s)")
        return None
    return a


def _stochastic(a: np.ndarray, where: str, errors: List[str]) -> bool:
    ok = True
    if a.shape[0] != a.shape[1]:
        errors.append(f"{where} must be square, got shape {a.shape}")
        return False
    if (a < 0).any():
        errors.append(f"{where} has negative entries")
        ok = False
    for i, s in enumerate(a.sum(axis=1)):
        if abs(s - 1.0) > 1e-12:
            errors.append(f"{where} row {i} sums to {s:.12g}, not 1")
            ok = False
    return ok


def _merge(section: Dict[str, Any], defaults: Dict[str, Any], name: str, errors: List[str]) -> Dict[str, Any]:
    _unknown(section, defaults, f"{name}.", errors)
    out = dict(defaults)
    out.update({k: v for k, v in section.items() if k in defaults})
    return out


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a TOML config; raises ConfigError listing every violation."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"not valid TOML: {exc}"]) from None
    errors: List[str] = []
    _unknown(raw, TOP_KEYS, "", errors)
    for sec in ("env", "kernels", "observables", "certificate", "tolerances", "samples", "checks"):
        if sec in raw and not isinstance(raw[sec], dict):
            errors.append(f"{sec} must be a table")
            raw[sec] = {}

    seed = raw.get("master_seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed <= U64_MAX:
        errors.append("master_seed must be an unsigned 64-bit integer")
        seed = 0
    output_dir = raw.get("output_dir", "out")
    if not isinstance(output_dir, str):
        errors.append("output_dir must be a string")
        output_dir = "out"

    # environment
    env_sec = raw.get("env")
    env = None
    k = None
    if env_sec is None:
        errors.append("missing [env] section")
    else:
        _unknown(env_sec, ENV_KEYS, "env.", errors)
        kind = env_sec.get("kind")
        if kind == "iid":
            if "transition" in env_sec:
                errors.append("env.transition is only valid for kind = 'markov'")
            m = env_sec.get("marginal")
            if m is None:
                errors.append("env.marginal is required for kind = 'iid'")
            else:
                try:
                    env = build_iid_env(len(m), m)
                except (TypeError, ValueError) as exc:
                    errors.append(f"env.marginal: {exc}")
        elif kind == "markov":
            if "marginal" in env_sec:
                errors.append("env.marginal is derived from env.transition for kind = 'markov'")
            Q = _matrix(env_sec.get("transition"), "env.transition", errors) if "transition" in env_sec else None
            if "transition" not in env_sec:
                errors.append("env.transition is required for kind = 'markov'")
            elif Q is not None and _stochastic(Q, "env.transition", errors):
                try:
                    env = build_markov_env(Q)
                except ValueError as exc:
                    errors.append(f"env.transition: {exc}")
        else:
            errors.append(f"env.kind must be 'iid' or 'markov', got {kind!r}")
        if env is not None:
            k = env.alphabet_size

    # kernels
    ks_sec = raw.get("kernels")
    kernel_set = None
    d = None
    if ks_sec is None:
        errors.append("missing [kernels] section")
    else:
        mats = {}
        for key, val in ks_sec.items():
            if not (isinstance(key, str) and key.isdigit()):
                errors.append(f"unknown key kernels.{key!r}: kernel keys are symbol indices")
                continue
            sym = int(key)
            if k is not None and sym >= k:
                errors.append(f"kernels.{key}: symbol {sym} outside alphabet of size {k}")
                continue
            a = _matrix(val, f"kernels.{key}", errors)
            if a is not None and _stochastic(a, f"kernels.{key}", errors):
                mats[sym] = a
        if k is not None:
            missing = [s for s in range(k) if str(s) not in ks_sec]
            if missing:
                errors.append(f"kernels: no matrix for symbol(s) {missing}")
        shapes = {m.shape for m in mats.values()}
        if len(shapes) > 1:
            errors.append(f"kernels: matrices have different shapes {sorted(shapes)}")
        elif k is not None and len(mats) == k:
            kernel_set = build_kernel_set([mats[s] for s in range(k)])
            d = kernel_set.state_size

    # observables
    obs = raw.get("observables", {})
    _unknown(obs, OBS_KEYS, "observables.", errors)
    tables = {}
    for name in ("f", "g"):
        if name not in obs:
            continue
        a = _matrix(obs[name], f"observables.{name}", errors)
        if a is None:
            continue
        if not np.all(np.isfinite(a)):
            errors.append(f"observables.{name} has non-finite entries")
        if k is not None and d is not None and a.shape != (k, d):
            errors.append(f"observables.{name} has shape {a.shape}, expected (symbols, states) = {(k, d)}")
        tables[name] = a
    q = obs.get("q", 8.0)
    if not isinstance(q, (int, float)) or isinstance(q, bool) or not q > 2:
        errors.append("observables.q must be a number > 2")

    cert = _merge(raw.get("certificate", {}), CERT_DEFAULTS, "certificate", errors)
    dg = cert["delta_grid"]
    if not isinstance(dg, list) or not dg or not all(isinstance(x, (int, float)) and 0 < x <= 1 for x in dg):
        errors.append("certificate.delta_grid must be a nonempty list of numbers in (0, 1]")
    mg = cert["M_grid"]
    if not isinstance(mg, list) or not mg or not all(isinstance(x, int) and x >= 1 for x in mg):
        errors.append("certificate.M_grid must be a nonempty list of positive integers")
    if not isinstance(cert["p"], (int, float)) or cert["p"] < 1:
        errors.append("certificate.p must be a number >= 1")
    if not isinstance(cert["mc_samples"], int) or cert["mc_samples"] < 1:
        errors.append("certificate.mc_samples must be a positive integer")

    tol = _merge(raw.get("tolerances", {}), TOL_DEFAULTS, "tolerances", errors)
    for key in ("mu_tol", "truncation_tol"):
        v = tol[key]
        if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
            errors.append(f"tolerances.{key} must be > 0, got {v!r}")
    if not isinstance(tol["mu_n_max"], int) or tol["mu_n_max"] < 1:
        errors.append("tolerances.mu_n_max must be a positive integer")

    samples = _merge(raw.get("samples", {}), SAMPLE_DEFAULTS, "samples", errors)
    for key, v in samples.items():
        if key == "gap_n":
            if not isinstance(v, list) or len(v) < 2 or not all(isinstance(x, int) and x >= 1 for x in v):
                errors.append("samples.gap_n must list at least two positive integers")
        elif key == "visit_L":
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                errors.append("samples.visit_L must be a nonnegative integer")
        elif key == "mixing_epsilon":
            if not isinstance(v, (int, float)) or not v > 0:
                errors.append("samples.mixing_epsilon must be > 0")
        elif not isinstance(v, int) or isinstance(v, bool) or v < 1:
            errors.append(f"samples.{key} must be a positive integer, got {v!r}")

    checks = _merge(raw.get("checks", {}), CHECK_DEFAULTS, "checks", errors)
    for key, v in checks.items():
        if not isinstance(v, (int, float)) or not v > 0:
            errors.append(f"checks.{key} must be > 0")

    if errors:
        raise ConfigError(errors)

    f = tables.get("f")
    if f is None:
        f = np.zeros((k, d))
        f[:, 0] = 1.0
    g = tables.get("g", f)
    normalized = {
        "master_seed": seed,
        "env": {"kind": env.kind, "marginal": env.marginal.tolist(),
                "transition": None if env.transition is None else env.transition.tolist()},
        "kernels": kernel_set.kernels.tolist(),
        "observables": {"f": f.tolist(), "g": g.tolist(), "q": float(q)},
        "certificate": cert,
        "tolerances": tol,
        "samples": samples,
        "checks": checks,
    }
    return ExperimentConfig(
        master_seed=seed,
        output_dir=output_dir,
        env=env,
        kernels=kernel_set,
        f=f,
        g=g,
        q=float(q),
        certificate=cert,
        tolerances=tol,
        samples=samples,
        checks=checks,
        normalized=normalized,
    )


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
