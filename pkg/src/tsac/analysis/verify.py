"""Closed form vs. oracle over a parameter grid."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import formulas as F
from . import oracles as O

GRID_N = (1, 2, 3, 4, 5, 6, 7, 8, 100)
GRID_GAMMA = (0.5, 0.9, 0.99, 1.0)
GRID_CORR = (0.0, 0.3, 0.7, 0.999)
N_SIGMA = 4.0


@dataclass
class Check:
    name: str
    params: dict
    formula: float
    oracle: float
    stderr: float
    exact: bool
    rel_tol: float = 0.0

    @property
    def discrepancy(self) -> float:
        return abs(self.formula - self.oracle)

    @property
    def z(self) -> float:
        scale = max(abs(self.formula), abs(self.oracle), 1e-300)
        excess = max(self.discrepancy - 1e-12 * scale, 0.0)
        if self.stderr == 0:
            return 0.0 if excess == 0 else float("inf")
        return excess / self.stderr

    @property
    def passed(self) -> bool:
        scale = max(abs(self.formula), abs(self.oracle), 1e-300)
        if self.exact:
            return self.discrepancy <= self.rel_tol * scale
        if self.stderr == 0:
            return self.discrepancy <= 1e-12 * scale
        return self.discrepancy <= N_SIGMA * self.stderr + 1e-12 * scale


def variance_checks(trials: int = 100_000, seed: int = 0, Ns=GRID_N, gammas=GRID_GAMMA,
                    corrs=GRID_CORR) -> list[Check]:
    out = []
    for i, (N, g, c) in enumerate(itertools.product(Ns, gammas, corrs)):
        m = F.VarianceModel(N, g, rho=c, kappa=c)
        rng = np.random.default_rng([seed, 1, i])
        est, se = O.mc_reward_ratio(N, g, c, trials, rng)
        out.append(Check("reward_ratio", dict(N=N, gamma=g, rho=c), F.reward_ratio(m), est, se, False))
        est, se = O.mc_bootstrap_ratio(N, g, c, trials, rng)
        out.append(Check("bootstrap_ratio", dict(N=N, gamma=g, kappa=c), F.bootstrap_ratio(m), est, se,
                         False))
    return out


def geometric_checks(Ns=GRID_N, gammas=GRID_GAMMA) -> list[Check]:
    out = []
    names = ("S0", "T0", "S1", "C")
    for N, g in itertools.product(Ns, gammas):
        closed = F.geometric_sums(N, g)
        direct = O.direct_geometric_sums(N, g)
        for name, a, b in zip(names, closed, direct):
            # closed form vs. direct summation agree to rounding, not bitwise
            out.append(Check(f"geometric_{name}", dict(N=N, gamma=g), a, b, 0.0, True, rel_tol=1e-12))
    return out


def gradient_checks(trials: int = 100_000, seed: int = 0, ns=(1, 2, 4, 8, 16),
                    rhos=(0.0, 0.3, 0.5, 0.7, 0.9)) -> list[Check]:
    out = []
    for i, (n, r) in enumerate(itertools.product(ns, rhos)):
        rng = np.random.default_rng([seed, 2, i])
        est, se = O.mc_averaged_grad_variance(n, r, trials, rng)
        out.append(Check("averaged_grad_variance", dict(n=n, rho_w=r), F.averaged_grad_variance(n, r),
                         est, se, False))
    return out


def window_checks(max_N: int = 8) -> list[Check]:
    out = []
    for N in range(1, max_N + 1):
        for lo in range(1, N + 1):
            for hi in range(lo, N + 1):
                wm = F.WindowModel(N, lo, hi)
                p = dict(N=N, l_min=lo, l_max=hi)
                for j in range(1, N + 1):
                    out.append(Check("expected_reuse", {**p, "j": j}, F.expected_reuse(j, wm),
                                     float(O.enum_reuse(j, wm)), 0.0, True))
                    out.append(Check("coverage_probability", {**p, "j": j}, F.coverage_probability(j, wm),
                                     float(O.enum_coverage(j, wm)), 0.0, True))
                    if lo == 1:
                        out.append(Check("coverage_probability_lmin1", {**p, "j": j},
                                         F.coverage_probability_lmin1(j, N, hi),
                                         float(O.enum_coverage(j, wm)), 0.0, True))
                out.append(Check("reward_bearing_updates", p, F.reward_bearing_updates(wm),
                                 float(O.enum_reward_updates(wm)), 0.0, True))
                out.append(Check("mean_reuse", p, F.mean_reuse(wm),
                                 float(O.enum_updates_per_window(wm) / N), 0.0, True))
                if lo == 1:
                    out.append(Check("reuse_last_lmin1", p, F.reuse_last_lmin1(N, hi),
                                     float(O.enum_reuse(N, wm)), 0.0, True))
    return out


def run_all(trials: int = 100_000, seed: int = 0) -> list[Check]:
    return (geometric_checks() + window_checks() + variance_checks(trials, seed)
            + gradient_checks(trials, seed))


def summarize(checks: list[Check]) -> dict:
    by_name: dict[str, dict] = {}
    for c in checks:
        row = by_name.setdefault(c.name, {"count": 0, "failed": 0, "max_discrepancy": 0.0, "max_z": 0.0})
        row["count"] += 1
        row["failed"] += 0 if c.passed else 1
        row["max_discrepancy"] = max(row["max_discrepancy"], c.discrepancy)
        if not c.exact:
            row["max_z"] = max(row["max_z"], c.z)
    return by_name
