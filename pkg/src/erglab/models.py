"""Reference models used by the tests, the example configs and the CLI defaults."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from erglab.env_process import EnvModel, build_iid_env, build_markov_env
from erglab.kernel_cocycle import KernelSet, build_kernel_set

HOMOGENEOUS_P = [[0.7, 0.3], [0.9, 0.1]]
MARKOV_Q = [[0.9, 0.1], [0.1, 0.9]]

DELTA_GRID = tuple(round(0.1 * k, 10) for k in range(1, 11))
M_GRID = (1, 2, 3, 4)


@dataclass(frozen=True)
class ReferenceModel:
    name: str
    env: EnvModel
    kernels: KernelSet
    # default observable: indicator of state 0 on every symbol
    f: np.ndarray = field(repr=False)


def _indicator(symbols: int, states: int = 2) -> np.ndarray:
    f = np.zeros((symbols, states))
    f[:, 0] = 1.0
    return f


def homogeneous() -> ReferenceModel:
    """One-symbol environment: an ordinary Markov chain with kernel P."""
    return ReferenceModel(
        "homogeneous", build_iid_env(1, [1.0]), build_kernel_set([HOMOGENEOUS_P]), _indicator(1)
    )


def identity_uniform() -> ReferenceModel:
    """i.i.d. fair symbols; R_0 = I, R_1 = uniform.  One symbol-1 step mixes completely."""
    ks = build_kernel_set([np.eye(2), [[0.5, 0.5], [0.5, 0.5]]])
    return ReferenceModel("identity_uniform", build_iid_env(2, [0.5, 0.5]), ks, _indicator(2))


def markov_random() -> ReferenceModel:
    """Sticky two-symbol Markov environment with two strictly positive kernels."""
    ks = build_kernel_set([[[0.9, 0.1], [0.2, 0.8]], [[0.4, 0.6], [0.6, 0.4]]])
    return ReferenceModel("markov_random", build_markov_env(MARKOV_Q), ks, _indicator(2))


def reference_models() -> Dict[str, ReferenceModel]:
    return {m.name: m for m in (homogeneous(), identity_uniform(), markov_random())}
