"""Closed-form variance, reuse and coverage results.

Target-side variance under the equicorrelation model (single N-step sum vs.
its triangular average), gradient-averaging variance, and the reuse,
coverage and sparse-reward counts for windows drawn from a segment. State
indices in the window model run ``1..N``.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np


@dataclass(frozen=True)
class VarianceModel:
    N: int
    gamma: float
    rho: float = 0.0
    kappa: float = 0.0
    sigma2: float = 1.0
    tau2: float = 1.0

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError("kappa must lie in [0, 1]")
        if self.sigma2 <= 0 or self.tau2 <= 0:
            raise ValueError("variances must be positive")


@dataclass(frozen=True)
class WindowModel:
    N: int
    l_min: int
    l_max: int

    def __post_init__(self):
        if not 1 <= self.l_min <= self.l_max <= self.N:
            raise ValueError(f"need 1 <= l_min <= l_max <= N, got {self}")

    @property
    def delta(self) -> int:
        return self.l_max - self.l_min + 1

    @property
    def mean_length(self) -> float:
        return (self.l_min + self.l_max) / 2


# target-side variance -------------------------------------------------------

def geometric_sums(N: int, gamma: float) -> tuple[float, float, float, float]:
    """``(S0, T0, S1, C)``; the gamma = 1 limits are used exactly."""
    if gamma == 1.0:
        return float(N), float(N), float(N), float(N)
    g2 = gamma * gamma
    S0 = (1 - g2 ** N) / (1 - g2)
    T0 = (1 - gamma ** N) / (1 - gamma)
    S1 = g2 * (1 - g2 ** N) / (1 - g2)
    C = gamma * (1 - gamma ** N) / (1 - gamma)
    return S0, T0, S1, C


def triangular_weights(N: int, gamma: float) -> tuple[np.ndarray, float, float]:
    """Weights ``w_k = ((N-k)/N) gamma^k`` of the averaged reward sum, and ``A``, ``B``."""
    k = np.arange(N)
    w = (N - k) / N * gamma ** k
    A = float(np.sum(w * w))
    B = float(np.sum(w) ** 2 - A)
    return w, A, max(B, 0.0)


def reward_variances(m: VarianceModel) -> tuple[float, float]:
    """Variance of the single N-step reward sum and of its triangular average."""
    S0, T0, _, _ = geometric_sums(m.N, m.gamma)
    _, A, B = triangular_weights(m.N, m.gamma)
    return m.sigma2 * (S0 + m.rho * (T0 * T0 - S0)), m.sigma2 * (A + m.rho * B)


def reward_ratio(m: VarianceModel) -> float:
    single, avg = reward_variances(m)
    return single / avg


def bootstrap_variances(m: VarianceModel) -> tuple[float, float]:
    _, _, S1, C = geometric_sums(m.N, m.gamma)
    single = m.tau2 * m.gamma ** (2 * m.N)
    avg = m.tau2 / m.N ** 2 * (S1 + m.kappa * (C * C - S1))
    return single, avg


def bootstrap_ratio(m: VarianceModel) -> float:
    _, _, S1, C = geometric_sums(m.N, m.gamma)
    return m.N ** 2 * m.gamma ** (2 * m.N) / (S1 + m.kappa * (C * C - S1))


def bootstrap_ratio_bounds(N: int, gamma: float) -> tuple[float, float]:
    """``(R_B at kappa=1, R_B at kappa=0)``."""
    _, _, S1, C = geometric_sums(N, gamma)
    top = N ** 2 * gamma ** (2 * N)
    return top / (C * C), top / S1


def kappa_star(N: int, gamma: float) -> float | None:
    """Largest bootstrap correlation at which averaging still helps; ``None`` when N = 1."""
    if N == 1:
        return None
    _, _, S1, C = geometric_sums(N, gamma)
    return (N ** 2 * gamma ** (2 * N) - S1) / (C * C - S1)


def total_ratio(m: VarianceModel) -> float:
    """Variance ratio of the full target (rewards independent of bootstrap values)."""
    rs, ra = reward_variances(m)
    bs, ba = bootstrap_variances(m)
    return (rs + bs) / (ra + ba)


# gradient averaging ---------------------------------------------------------

def _check_rho_w(rho_w):
    if not 0.0 <= rho_w < 1.0:
        raise ValueError("rho_w must lie in [0, 1)")


def effective_sample_size(n: int, rho_w: float) -> float:
    _check_rho_w(rho_w)
    if n < 1:
        raise ValueError("n must be >= 1")
    return n / (1 + (n - 1) * rho_w)


def averaged_grad_variance(n: int, rho_w: float, sigma2_w: float = 1.0) -> float:
    return sigma2_w / effective_sample_size(n, rho_w)


def exchangeable_cov(n: int, rho_w: float, sigma2_w: float = 1.0) -> np.ndarray:
    return sigma2_w * ((1 - rho_w) * np.eye(n) + rho_w * np.ones((n, n)))


def combination_variance(alpha, rho_w: float, sigma2_w: float = 1.0) -> float:
    """``alpha^T Sigma alpha`` for the exchangeable covariance."""
    alpha = np.asarray(alpha, dtype=np.float64)
    return float(alpha @ exchangeable_cov(alpha.size, rho_w, sigma2_w) @ alpha)


@dataclass
class UniformOptimalityReport:
    n: int
    rho_w: float
    uniform_variance: float
    min_random_variance: float
    trials: int
    violations: int

    @property
    def ok(self) -> bool:
        return self.violations == 0 and self.min_random_variance >= self.uniform_variance


def uniform_weights_optimal(n: int, rho_w: float, trials: int = 1000, rng=None,
                            sigma2_w: float = 1.0) -> UniformOptimalityReport:
    """Compare uniform weights against random unbiased combinations (sum to one)."""
    _check_rho_w(rho_w)
    rng = np.random.default_rng(rng)
    base = combination_variance(np.full(n, 1.0 / n), rho_w, sigma2_w)
    alphas = rng.normal(size=(trials, n))
    alphas = alphas - alphas.mean(axis=1, keepdims=True) + 1.0 / n
    cov = exchangeable_cov(n, rho_w, sigma2_w)
    v = np.einsum("ti,ij,tj->t", alphas, cov, alphas)
    # strictly worse unless the draw is numerically uniform
    tol = 1e-12 * max(base, 1.0)
    off_uniform = np.abs(alphas - 1.0 / n).max(axis=1) > 1e-9
    violations = int(np.sum(off_uniform & (v <= base + tol)) if n > 1 else 0)
    return UniformOptimalityReport(n, rho_w, base, float(v.min()) if trials else base, trials, violations)


# window reuse / coverage ----------------------------------------------------

def expected_reuse(j: int, wm: WindowModel) -> float:
    """Expected number of updates per window that bootstrap at state ``j``."""
    return float(_expected_reuse(j, wm))


def _expected_reuse(j: int, wm: WindowModel) -> Fraction:
    N, lo, hi = wm.N, wm.l_min, wm.l_max
    if not 1 <= j <= N:
        raise ValueError(f"j must lie in 1..{N}")
    if j == N:
        return _reuse_last(wm)
    if j < lo:
        return Fraction(0)
    if j < hi:
        return Fraction((j - lo + 1) * (j + lo - 2), 2 * N * wm.delta)
    return Fraction(lo + hi - 2, 2 * N)


def reuse_last(wm: WindowModel) -> float:
    return float(_reuse_last(wm))


def _reuse_last(wm: WindowModel) -> Fraction:
    N, lo, hi = wm.N, wm.l_min, wm.l_max
    head = Fraction(sum(h - 1 for h in range(1, lo + 1)), N)
    tail = Fraction(sum((h - 1) * (hi - h + 1) for h in range(lo + 1, hi + 1)), N * wm.delta)
    return head + tail


def reuse_last_lmin1(N: int, l_max: int) -> float:
    return float(Fraction(l_max ** 2 - 1, 6 * N))


def mean_reuse(wm: WindowModel) -> float:
    """``(1/N) sum_j E[reuse_j]`` from the piecewise formulas."""
    return float(sum(_expected_reuse(j, wm) for j in range(1, wm.N + 1)) / wm.N)


def mean_reuse_untruncated(wm: WindowModel) -> float:
    """``(E[L] - 1) / N``: the mean reuse if windows were never cut at the segment end.

    Truncation only shortens windows, so this is an upper bound on
    :func:`mean_reuse`.
    """
    return float(Fraction(wm.l_min + wm.l_max - 2, 2 * wm.N))


def coverage_probability(j: int, wm: WindowModel) -> float:
    N, lo, hi = wm.N, wm.l_min, wm.l_max
    if not 1 <= j <= N:
        raise ValueError(f"j must lie in 1..{N}")
    total = sum(max(hi - max(lo, j - p + 1) + 1, 0) for p in range(1, j + 1))
    return float(Fraction(total, N * wm.delta))


def coverage_probability_lmin1(j: int, N: int, m: int) -> float:
    """Ramp-then-plateau coverage for ``l_min = 1``, ``l_max = m``."""
    if j <= m:
        return float((j - Fraction(j * (j - 1), 2 * m)) / N)
    return float(Fraction(m + 1, 2 * N))


def reward_bearing_updates(wm: WindowModel) -> float:
    """Expected updates per window whose target contains the terminal reward."""
    return reuse_last(wm)


def sparse_amplification(wm: WindowModel) -> float:
    """Reward-bearing updates per window relative to 1-step TD's ``1/N``."""
    return float(_reuse_last(wm) * wm.N)
