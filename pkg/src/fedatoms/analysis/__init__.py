"""Verifiers and calculators: aggregation variance, convergence bounds,
communication cost, and the 2-D loss landscape."""

from .bounds import BoundInputs, ConvergenceBound, convergence_bound, fast_slow_bound, remark3_violations, sampling_coefficient
from .comm import CommLedger, comm_cost, parameter_groups, reduction_rate
from .variance import GaussianSpec, VarianceReport, analytic_gap, variance_estimate, variance_reduction_check
