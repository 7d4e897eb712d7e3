"""Aggregation variance: the empirical estimator and a Monte-Carlo check of the
claim that adding cross-reconstructed (latent) clients never raises it."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError

DEFAULT_REPEATS = 10


def _flatten(model) -> np.ndarray:
    if isinstance(model, dict):
        return np.concatenate([np.ravel(model[k]) for k in sorted(model)])
    if isinstance(model, (list, tuple)):
        return np.concatenate([np.ravel(v) for v in model])
    return np.ravel(np.asarray(model, dtype=np.float64))


def variance_estimate(models) -> float:
    """Mean squared distance of each parameter bundle from the elementwise mean.

    ``models`` holds N_c >= 2 bundles (arrays, lists of arrays, or dicts of
    arrays); they are flattened in a fixed order before comparison.
    """
    flat = [_flatten(m) for m in models]
    if len(flat) < 2:
        raise ContractError("variance needs at least two models")
    if any(f.shape != flat[0].shape for f in flat):
        raise ContractError("all models must have the same parameter count")
    stack = np.stack(flat)
    dev = stack - stack.mean(axis=0)
    return float(np.mean(np.sum(dev * dev, axis=1)))


@dataclass(frozen=True)
class GaussianSpec:
    """IID Gaussian draws shared by every client and latent client."""
    shape: tuple = (3, 3)
    mean: float = 0.0
    std: float = 1.0

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def total_variance(self) -> float:
        # E||theta||^2 - ||E theta||^2
        return self.size * self.std ** 2


@dataclass
class VarianceReport:
    trials: int
    weights: list
    var_plain: float
    var_decomposed: float
    empirical_gap: float
    analytic_gap: float
    stderr_plain: float
    stderr_decomposed: float
    degenerate: bool = False
    notes: list = field(default_factory=list)

    @property
    def relative_error(self) -> float:
        if self.analytic_gap == 0.0:
            return 0.0 if self.empirical_gap == 0.0 else float("inf")
        return abs(self.empirical_gap - self.analytic_gap) / abs(self.analytic_gap)

    @property
    def reduction_holds(self) -> bool:
        """Empirical var(theta') <= var(theta) up to three Monte-Carlo standard errors."""
        slack = 3.0 * float(np.hypot(self.stderr_plain, self.stderr_decomposed))
        return self.var_decomposed <= self.var_plain + slack

    def to_dict(self) -> dict:
        return {
            "trials": self.trials, "weights": list(self.weights),
            "var_plain": self.var_plain, "var_decomposed": self.var_decomposed,
            "empirical_gap": self.empirical_gap, "analytic_gap": self.analytic_gap,
            "relative_error": self.relative_error, "reduction_holds": self.reduction_holds,
            "degenerate": self.degenerate, "notes": list(self.notes),
        }


def analytic_gap(weights, total_variance: float) -> float:
    """var(theta') - var(theta) = -(1 - sum p^2) (sum p^2) (E||theta||^2 - ||E theta||^2)."""
    s = float(np.sum(np.square(weights)))
    return -(1.0 - s) * s * total_variance


def _total_var(samples: np.ndarray):
    # unbiased per-coordinate variance summed over coordinates, plus its standard error
    centered = samples - samples.mean(axis=0)
    sq = np.sum(centered * centered, axis=1)
    n = len(samples)
    var = float(sq.sum() / (n - 1))
    return var, float(np.std(sq, ddof=1) / np.sqrt(n))


def variance_reduction_check(weights, spec: GaussianSpec | None = None, trials: int = 10_000,
                             rng: np.random.Generator | None = None, chunk: int = 1000) -> VarianceReport:
    """Monte-Carlo comparison of plain averaging vs the expanded (latent-client) sum.

    Every client model and every latent model is an independent draw from
    ``spec``. ``theta = sum p_k theta_k`` and ``theta' = sum p_k^2 theta_k +
    sum_{i != j} p_i p_j theta_ij``.
    """
    spec = spec or GaussianSpec()
    p = np.asarray(weights, dtype=np.float64)
    if p.ndim != 1 or p.size < 1 or np.any(p <= 0):
        raise ContractError("weights must be a non-empty vector of positive numbers")
    if abs(p.sum() - 1.0) > 1e-12:
        raise ContractError(f"weights sum to {p.sum()!r}, not 1")
    if trials < 1000:
        raise ContractError("at least 1000 trials are required")
    rng = rng if rng is not None else np.random.default_rng(0)
    m, d = p.size, spec.size
    off = ~np.eye(m, dtype=bool)
    cross = np.outer(p, p)[off]  # m^2 - m latent weights

    plain = np.empty((trials, d))
    expanded = np.empty((trials, d))
    for start in range(0, trials, chunk):
        n = min(chunk, trials - start)
        own = spec.mean + spec.std * rng.standard_normal((n, m, d))
        plain[start:start + n] = np.einsum("k,nkd->nd", p, own)
        if m > 1:
            latent = spec.mean + spec.std * rng.standard_normal((n, m * m - m, d))
            expanded[start:start + n] = np.einsum("k,nkd->nd", p * p, own) + np.einsum("l,nld->nd", cross, latent)
        else:
            expanded[start:start + n] = plain[start:start + n]

    var_p, se_p = _total_var(plain)
    var_d, se_d = _total_var(expanded)
    report = VarianceReport(trials, p.tolist(), var_p, var_d, var_d - var_p,
                            analytic_gap(p, spec.total_variance), se_p, se_d)
    if spec.std == 0.0:
        report.degenerate = True
        report.notes.append("zero-variance distribution: both variances are 0")
    return report
