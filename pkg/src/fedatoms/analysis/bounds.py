"""Convergence-bound constants for strongly convex, smooth local objectives.

bound(T) = (2 / mu^2) * L / (gamma + T) * (B + D + mu^2 / 4 * dist0)

    B     = 8 (E - 1)^2 G^2 + 6 L Gamma
    D     = 4 c(m, M) (E - 1)^2 G^2
    gamma = max(8 L / mu, E)

where the client-sampling coefficient c(m, M) is (M - m) / (m (M - 1)) for
plain averaging and (M^2 - m^2) / (m^2 M^2 (M^2 - 1)) once latent clients
are counted.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from fractions import Fraction

from ..errors import ContractError


@dataclass(frozen=True)
class BoundInputs:
    L: float
    mu: float
    G: float
    Gamma: float
    E: int
    M: int
    m: int
    dist0: float = 1.0  # E||w^1 - w*||^2

    def __post_init__(self):
        if not (self.mu > 0 and self.L >= self.mu):
            raise ContractError(f"need L >= mu > 0, got L={self.L}, mu={self.mu}")
        if self.G < 0 or self.Gamma < 0 or self.dist0 < 0:
            raise ContractError("G, Gamma and dist0 must be non-negative")
        if self.E < 1:
            raise ContractError("E must be >= 1")
        if not 1 <= self.m <= self.M:
            raise ContractError(f"need 1 <= m <= M, got m={self.m}, M={self.M}")


def sampling_coefficient(m: int, M: int, decomposed: bool):
    """Client-sampling factor of the D term, exact as a ``Fraction``."""
    m, M = int(m), int(M)
    if decomposed:
        if M < 2:
            raise ContractError("the decomposed coefficient needs M >= 2")
        return Fraction(M * M - m * m, m * m * M * M * (M * M - 1))
    if M == 1:
        return Fraction(0)
    return Fraction(M - m, m * (M - 1))


def remark3_violations(max_clients: int = 200) -> list:
    """All (m, M) with 2 <= m < M <= max_clients where the decomposed factor is
    not strictly smaller than the plain one. Exact rational arithmetic."""
    bad = []
    for M in range(3, max_clients + 1):
        for m in range(2, M):
            if not sampling_coefficient(m, M, True) < sampling_coefficient(m, M, False):
                bad.append((m, M))
    return bad


@dataclass(frozen=True)
class ConvergenceBound:
    inputs: BoundInputs
    decomposed: bool
    B: float
    D_term: float
    gamma: float
    coefficient: float
    beta: float = 1.0

    @property
    def numerator(self) -> float:
        bi = self.inputs
        return self.B + self.D_term + bi.mu ** 2 / 4.0 * bi.dist0

    def bound(self, T: float) -> float:
        bi = self.inputs
        return 2.0 / bi.mu ** 2 * bi.L / (self.gamma + T) * self.numerator

    def eta(self, t: float) -> float:
        """Step size 2 / (mu (gamma + t))."""
        return 2.0 / (self.inputs.mu * (self.gamma + t))

    def t_min(self, eps: float) -> int:
        """Smallest integer T >= 0 with bound(T) <= eps."""
        if eps <= 0:
            raise ContractError("eps must be positive")
        bi = self.inputs
        T = max(math.ceil(2.0 * bi.L * self.numerator / (bi.mu ** 2 * eps) - self.gamma), 0)
        # guard against rounding in the closed form
        while self.bound(T) > eps:
            T += 1
        while T > 0 and self.bound(T - 1) <= eps:
            T -= 1
        return T

    def to_dict(self, T: int | None = None, eps: float | None = None) -> dict:
        out = {"decomposed": self.decomposed, "beta": self.beta, "B": self.B, "D_term": self.D_term,
               "gamma": self.gamma, "coefficient": self.coefficient, "inputs": asdict(self.inputs)}
        if T is not None:
            out["T"] = T
            out["bound"] = self.bound(T)
        if eps is not None:
            out["eps"] = eps
            out["T_min"] = self.t_min(eps)
        return out


def _build(bi: BoundInputs, decomposed: bool, local_steps: float, beta: float) -> ConvergenceBound:
    coef = sampling_coefficient(bi.m, bi.M, decomposed)
    drift = (bi.E - 1) ** 2 * bi.G ** 2
    B = 8.0 * (local_steps - 1) ** 2 * bi.G ** 2 + 6.0 * bi.L * bi.Gamma
    D = 4.0 * float(coef) * drift
    gamma = max(8.0 * bi.L / bi.mu, float(bi.E))
    return ConvergenceBound(bi, decomposed, B, D, gamma, float(coef), beta)


def convergence_bound(bi: BoundInputs, decomposed: bool = True) -> ConvergenceBound:
    return _build(bi, decomposed, bi.E, 1.0)


def fast_slow_bound(bi: BoundInputs, beta: float, decomposed: bool = True) -> ConvergenceBound:
    """Same bound with E / beta local steps between full synchronizations in B.

    The sampling term D and gamma keep the per-round E, so ``beta = 1``
    reproduces ``convergence_bound`` exactly.
    """
    if not 0 < beta <= 1:
        raise ContractError(f"beta must lie in (0, 1], got {beta}")
    return _build(bi, decomposed, bi.E / beta, beta)
