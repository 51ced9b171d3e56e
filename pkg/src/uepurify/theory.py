"""Gaussian-mixture analysis of why rate-constrained encoders suppress shortcuts.

Everything here is float64 numpy/scipy and side-effect free. The binary
problems always have equal class priors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import logsumexp


class DegenerateSpecError(ValueError):
    """Class means coincide, so the separating normal is the zero vector."""


class NotSPDError(ValueError):
    pass


class QuadratureError(RuntimeError):
    pass


@dataclass(frozen=True)
class GaussianSpec:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=np.float64)))
        object.__setattr__(self, "cov", np.atleast_2d(np.asarray(self.cov, dtype=np.float64)))
        _check_cov(self.cov, self.mean.shape[0])


@dataclass(frozen=True)
class BinaryGaussianSpec:
    """Two equally likely classes sharing one covariance."""

    mean0: np.ndarray
    mean1: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        m0 = np.atleast_1d(np.asarray(self.mean0, dtype=np.float64))
        m1 = np.atleast_1d(np.asarray(self.mean1, dtype=np.float64))
        if m0.shape != m1.shape or m0.ndim != 1:
            raise ValueError(f"class means must be equal-length vectors, got {m0.shape} and {m1.shape}")
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        _check_cov(cov, m0.shape[0])
        object.__setattr__(self, "mean0", m0)
        object.__setattr__(self, "mean1", m1)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean0.shape[0]


@dataclass(frozen=True)
class Hyperplane:
    normal: np.ndarray
    anchor: np.ndarray

    def __post_init__(self):
        if not np.any(self.normal):
            raise DegenerateSpecError("hyperplane normal is the zero vector")


@dataclass(frozen=True)
class ScalarMixtureSpec:
    mu0: float
    mu1: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class QuadratureConfig:
    lo: float = -12.0
    hi: float = 12.0
    tol: float = 1e-6


def _check_cov(cov: np.ndarray, dim: int) -> None:
    if cov.shape != (dim, dim):
        raise ValueError(f"covariance must be {dim}x{dim}, got {cov.shape}")
    if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
        raise NotSPDError("covariance is not symmetric")


def _cholesky(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as e:
        raise NotSPDError("covariance is not positive definite") from e


def _solve_spd(cov: np.ndarray, b: np.ndarray) -> np.ndarray:
    L = _cholesky(cov)
    y = np.linalg.solve(L, b)
    return np.linalg.solve(L.T, y)


def bayes_hyperplane(spec: BinaryGaussianSpec) -> Hyperplane:
    """MAP boundary ``w^T (v - (mu0 + mu1)/2) = 0`` with ``w = cov^-1 (mu0 - mu1)``."""
    diff = spec.mean0 - spec.mean1
    if not np.any(diff):
        raise DegenerateSpecError("mean0 == mean1: no separating hyperplane")
    w = _solve_spd(spec.cov, diff)
    return Hyperplane(normal=w, anchor=(spec.mean0 + spec.mean1) / 2)


def bayes_decision(v, plane: Hyperplane):
    """Label 0 on the strictly positive side, 1 otherwise.

    Accepts a single vector or an (n, D) batch.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != plane.normal.shape[0]:
        raise ValueError(f"dimension mismatch: {v.shape[-1]} vs {plane.normal.shape[0]}")
    score = (v - plane.anchor) @ plane.normal
    out = np.where(score > 0, 0, 1)
    return int(out) if out.ndim == 0 else out


def hyperplane_shift_distance(clean: BinaryGaussianSpec, poison: BinaryGaussianSpec, eval_point) -> float:
    """Displacement of the clean-feature decision boundary once the injected
    block ``poison`` becomes predictive, evaluated at ``v_s = eval_point``."""
    diff_c = clean.mean0 - clean.mean1
    if not np.any(diff_c):
        raise DegenerateSpecError("clean block has no separating direction; distance undefined")
    w_c = _solve_spd(clean.cov, diff_c)
    w_s = _solve_spd(poison.cov, poison.mean0 - poison.mean1)
    mid_s = (poison.mean0 + poison.mean1) / 2
    e = np.atleast_1d(np.asarray(eval_point, dtype=np.float64))
    return float(abs(w_s @ (e - mid_s)) / np.linalg.norm(w_c))


def normalize_mixture(spec: ScalarMixtureSpec) -> tuple[float, float, float]:
    """Return ``(delta_hat, sigma_hat, r)`` for the zero-mean unit-variance rescaling."""
    delta = abs(spec.mu0 - spec.mu1) / 2
    scale = math.hypot(spec.sigma, delta)
    return delta / scale, spec.sigma / scale, delta / spec.sigma


def _log_norm(v, mean, std):
    return -0.5 * ((v - mean) / std) ** 2 - math.log(std) - 0.5 * math.log(2 * math.pi)


def mixture_kld_to_standard_normal(r: float, quadrature: QuadratureConfig | None = None) -> float:
    """KL(p_z || N(0,1)) in nats, where p_z is the normalized two-component
    mixture with separation ratio ``r = delta / sigma``."""
    if r < 0:
        raise ValueError(f"r must be nonnegative, got {r}")
    q = quadrature or QuadratureConfig()
    d_hat, s_hat, _ = normalize_mixture(ScalarMixtureSpec(r, -r, 1.0))

    def integrand(v):
        logp = logsumexp([_log_norm(v, -d_hat, s_hat), _log_norm(v, d_hat, s_hat)]) - math.log(2)
        return math.exp(logp) * (logp - _log_norm(v, 0.0, 1.0))

    def panels(breaks, tol):
        pts = sorted({q.lo, q.hi, *(min(max(b, q.lo), q.hi) for b in breaks)})
        return sum(
            integrate.quad(integrand, a, b, epsabs=tol, epsrel=0, limit=200)[0]
            for a, b in zip(pts[:-1], pts[1:])
        )

    # components can be much narrower than the interval, so always split at their means
    coarse = panels([-d_hat, 0.0, d_hat], q.tol / 10)
    fine = panels([c + k * s_hat for c in (-d_hat, d_hat) for k in (-6, -2, 0, 2, 6)] + [0.0], q.tol / 100)
    if abs(fine - coarse) > q.tol:
        raise QuadratureError(f"quadrature did not converge at r={r}: {coarse} vs {fine}")
    return max(fine, 0.0)


def kld_bounds(r: float) -> tuple[float, float]:
    hi = 0.5 * math.log1p(r * r)
    return hi - math.log(2), hi


def mixture_conditional_entropy(spec: BinaryGaussianSpec) -> float:
    """Differential entropy (nats) of one class component: ``D/2 (1 + ln 2pi) + 1/2 ln|cov|``."""
    L = _cholesky(spec.cov)
    half_logdet = float(np.sum(np.log(np.diag(L))))
    return spec.dim / 2 * (1 + math.log(2 * math.pi)) + half_logdet


def sample_binary(spec: BinaryGaussianSpec, n: int, rng: np.random.Generator):
    """Draw ``n`` points from each class; returns ``(v, y)`` with v of shape (2n, D)."""
    L = _cholesky(spec.cov)
    noise = rng.standard_normal((2, n, spec.dim)) @ L.T
    v = np.concatenate([spec.mean0 + noise[0], spec.mean1 + noise[1]])
    y = np.repeat([0, 1], n)
    return v, y


def monte_carlo_bayes_error(spec: BinaryGaussianSpec, n: int, seed: int) -> float:
    if n < 10_000:
        raise ValueError("need at least 1e4 samples per class")
    v, y = sample_binary(spec, n, np.random.default_rng(seed))
    pred = bayes_decision(v, bayes_hyperplane(spec))
    return float(np.mean(pred != y))
