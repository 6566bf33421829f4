"""Brute-force references for the closed forms.

Window quantities are enumerated exactly over all ``(p, L)`` pairs.
Variance quantities are simulated with the shared-factor construction
``X_k = sqrt(rho) Z + sqrt(1 - rho) E_k`` and reported with a delta-method
standard error.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from .formulas import WindowModel

CHUNK = 20_000


# enumeration ---------------------------------------------------------------

def enumerate_windows(wm: WindowModel):
    """Yield ``(p, L, q)`` for every equally likely draw; weight is ``1/(N*Delta)``."""
    for p in range(1, wm.N + 1):
        for L in range(wm.l_min, wm.l_max + 1):
            yield p, L, min(p + L - 1, wm.N)


def _weight(wm: WindowModel) -> Fraction:
    return Fraction(1, wm.N * wm.delta)


def enum_reuse(j: int, wm: WindowModel) -> Fraction:
    return _weight(wm) * sum(q - p for p, _, q in enumerate_windows(wm) if q == j)


def enum_coverage(j: int, wm: WindowModel) -> Fraction:
    return _weight(wm) * sum(1 for p, _, q in enumerate_windows(wm) if p <= j <= q)


def enum_reward_updates(wm: WindowModel) -> Fraction:
    """Updates ``i in p..q-1`` whose reward sum reaches the last transition."""
    count = 0
    for p, _, q in enumerate_windows(wm):
        count += sum(1 for i in range(p, q) if q == wm.N)
    return _weight(wm) * count


def enum_updates_per_window(wm: WindowModel) -> Fraction:
    return _weight(wm) * sum(q - p for p, _, q in enumerate_windows(wm))


def direct_geometric_sums(N: int, gamma: float) -> tuple[float, float, float, float]:
    g = [gamma ** k for k in range(N + 1)]
    S0 = sum(g[k] ** 2 for k in range(N))
    T0 = sum(g[k] for k in range(N))
    S1 = sum(g[i] ** 2 for i in range(1, N + 1))
    C = sum(g[i] for i in range(1, N + 1))
    return S0, T0, S1, C


# Monte Carlo ---------------------------------------------------------------

def equicorrelated(rng: np.random.Generator, trials: int, n: int, corr: float,
                   var: float = 1.0) -> np.ndarray:
    z = rng.standard_normal((trials, 1))
    e = rng.standard_normal((trials, n))
    return np.sqrt(var) * (np.sqrt(corr) * z + np.sqrt(1.0 - corr) * e)


def _chunks(trials: int):
    done = 0
    while done < trials:
        k = min(CHUNK, trials - done)
        yield k
        done += k


def _variance_ratio(xs: np.ndarray, ys: np.ndarray) -> tuple[float, float]:
    """``Var[x]/Var[y]`` and its delta-method standard error."""
    n = xs.size
    dx, dy = xs - xs.mean(), ys - ys.mean()
    vx, vy = np.mean(dx * dx), np.mean(dy * dy)
    ratio = vx / vy
    infl = (dx * dx - vx) / vy - vx * (dy * dy - vy) / vy ** 2
    return float(ratio), float(np.std(infl) / np.sqrt(n))


def _variance(xs: np.ndarray) -> tuple[float, float]:
    d = xs - xs.mean()
    v = np.mean(d * d)
    return float(v), float(np.std(d * d - v) / np.sqrt(xs.size))


def mc_reward_ratio(N, gamma, rho, trials, rng, sigma2=1.0):
    flat = gamma ** np.arange(N)
    xs, ys = [], []
    for m in _chunks(trials):
        r = equicorrelated(rng, m, N, rho, sigma2)
        disc = r * flat
        partial = np.cumsum(disc, axis=1)  # G^(i) reward parts, i = 1..N
        xs.append(partial[:, -1])
        ys.append(partial.mean(axis=1))
    return _variance_ratio(np.concatenate(xs), np.concatenate(ys))


def mc_bootstrap_ratio(N, gamma, kappa, trials, rng, tau2=1.0):
    disc = gamma ** np.arange(1, N + 1)
    xs, ys = [], []
    for m in _chunks(trials):
        z = equicorrelated(rng, m, N, kappa, tau2)
        xs.append(disc[-1] * z[:, -1])
        ys.append((z * disc).mean(axis=1))
    return _variance_ratio(np.concatenate(xs), np.concatenate(ys))


def mc_averaged_grad_variance(n, rho_w, trials, rng, sigma2_w=1.0):
    means = [equicorrelated(rng, m, n, rho_w, sigma2_w).mean(axis=1) for m in _chunks(trials)]
    return _variance(np.concatenate(means))


def mc_effective_sample_size(n, rho_w, trials, rng):
    v, se = mc_averaged_grad_variance(n, rho_w, trials, rng)
    # delta method for 1/v
    return 1.0 / v, se / v ** 2


def mc_window_draws(wm: WindowModel, trials, rng):
    """Simulated ``(p, q)`` draws with the same law as :func:`enumerate_windows`."""
    p = rng.integers(1, wm.N + 1, size=trials)
    L = rng.integers(wm.l_min, wm.l_max + 1, size=trials)
    return p, np.minimum(p + L - 1, wm.N)


def _mean_se(x):
    x = np.asarray(x, dtype=np.float64)
    return float(x.mean()), float(x.std() / np.sqrt(x.size))


FORMULA_IDS = (
    "reward_ratio", "bootstrap_ratio", "averaged_grad_variance", "effective_sample_size",
    "expected_reuse", "coverage_probability", "reward_bearing_updates",
)


def mc_oracle(formula_id: str, params: dict, trials: int, rng, mode: str = "auto"):
    """Reference value ``(estimate, stderr)`` for a named closed form.

    Window quantities use exact enumeration (stderr 0) unless
    ``mode="sample"``; variance quantities are always simulated.
    """
    if trials < 1000:
        raise ValueError("trials must be >= 1000")
    rng = np.random.default_rng(rng)
    p = dict(params)
    if formula_id == "reward_ratio":
        return mc_reward_ratio(p["N"], p["gamma"], p["rho"], trials, rng, p.get("sigma2", 1.0))
    if formula_id == "bootstrap_ratio":
        return mc_bootstrap_ratio(p["N"], p["gamma"], p["kappa"], trials, rng, p.get("tau2", 1.0))
    if formula_id == "averaged_grad_variance":
        return mc_averaged_grad_variance(p["n"], p["rho_w"], trials, rng, p.get("sigma2_w", 1.0))
    if formula_id == "effective_sample_size":
        return mc_effective_sample_size(p["n"], p["rho_w"], trials, rng)
    if formula_id in ("expected_reuse", "coverage_probability", "reward_bearing_updates"):
        wm = WindowModel(p["N"], p["l_min"], p["l_max"])
        if mode != "sample":
            if formula_id == "expected_reuse":
                return float(enum_reuse(p["j"], wm)), 0.0
            if formula_id == "coverage_probability":
                return float(enum_coverage(p["j"], wm)), 0.0
            return float(enum_reward_updates(wm)), 0.0
        ps, qs = mc_window_draws(wm, trials, rng)
        if formula_id == "expected_reuse":
            return _mean_se(np.where(qs == p["j"], qs - ps, 0))
        if formula_id == "coverage_probability":
            return _mean_se((ps <= p["j"]) & (p["j"] <= qs))
        return _mean_se(np.where(qs == wm.N, qs - ps, 0))
    raise ValueError(f"unknown formula id {formula_id!r}; expected one of {FORMULA_IDS}")
