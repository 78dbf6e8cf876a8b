"""Finite-data accounting: from accumulated log factors to min-entropy bits.

Converts a protocol's accumulated log estimation factor into a smooth
min-entropy certificate, provides the closed-form minimum trial counts for
factor-based and reference entropy-accumulation analyses, and generates the
rate-versus-log-error curves used to compare the two.

Rates and penalties are in nats unless a name says bits.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from scipy.optimize import brentq

from .estimators import _A, iota0

_LOG2 = math.log(2.0)
_LOG2_E = 1.0 / _LOG2


@dataclass(frozen=True)
class ErrorBudget:
    """Target error ``epsilon`` and completeness deficit ``kappa`` of the run.

    ``kappa`` is the probability that the accepted event has been truncated
    away; it only weakens the certificate through ``log(kappa)`` terms.
    """

    epsilon: float
    kappa: float = 1.0

    def __post_init__(self) -> None:
        if not (0.0 < self.epsilon < 1.0):
            raise ValueError("epsilon must lie in (0, 1)")
        if not (0.0 < self.kappa <= 1.0):
            raise ValueError("kappa must lie in (0, 1]")


@dataclass(frozen=True)
class EntropyCertificate:
    """Smooth min-entropy statement extracted from an accumulated factor."""

    bits: float
    minus_log2_prob: float
    smoothness: float
    delta: float
    beta: float


def minentropy_bound(
    log_qef: float, beta: float, budget: ErrorBudget
) -> EntropyCertificate:
    """Certificate from an accumulated log factor (nats).

    The conditional probability of the outcome sequence, on the accepted
    event, exceeds ``p`` with probability at most ``delta = epsilon**2 / 2``
    where ``-log(p) = (log_qef + log(delta)) / beta``; smoothing at
    ``sqrt(2 delta) = epsilon`` turns this into min-entropy bits, with a
    ``(alpha/beta) log2(kappa)`` penalty for conditioning on acceptance.
    """
    if beta <= 0.0:
        raise ValueError("beta must be positive")
    delta = budget.epsilon**2 / 2.0
    minus_log_p = (log_qef + math.log(delta)) / beta
    minus_log2_p = minus_log_p * _LOG2_E
    alpha = 1.0 + beta
    bits = minus_log2_p + alpha / beta * math.log2(budget.kappa)
    return EntropyCertificate(
        bits=bits,
        minus_log2_prob=minus_log2_p,
        smoothness=math.sqrt(2.0 * delta),
        delta=delta,
        beta=beta,
    )


def net_logprob(
    g: float, n: int, beta: float, budget: ErrorBudget, kappa_bar: float = 1.0
) -> float:
    """Expected certified ``-log p`` (nats) after ``n`` trials at rate ``g``.

    ``kappa_bar`` is the acceptance probability actually attained; it enters
    only for powers above 1, and a warning flags the regime where acceptance
    is rarer than the error target (the certificate is then vacuous).
    """
    if kappa_bar < budget.epsilon:
        warnings.warn(
            "acceptance probability below the error target", RuntimeWarning
        )
    exponent = beta - 1.0 if beta > 1.0 else 0.0
    penalty = math.log(budget.epsilon**2 * kappa_bar**exponent / 2.0) / beta
    return n * g + penalty


def n_min_qef(g_bits: float, beta: float, budget: ErrorBudget) -> float:
    """Trials needed before the factor-based certificate goes positive."""
    if g_bits <= 0.0 or beta <= 0.0:
        raise ValueError("rate and power must be positive")
    alpha = 1.0 + beta
    off = abs(math.log2(budget.epsilon**2 * budget.kappa**alpha / 2.0))
    return off / (g_bits * beta)


def n_min_eat_from_ee(
    g_bits: float, k_inf_bits: float, n_outcomes: int, budget: ErrorBudget
) -> float:
    """Trials needed by the reference accumulation analysis.

    Uses the published second-order constant with the estimator's range
    ceiling ``k_inf_bits`` (bits per trial).
    """
    if g_bits <= 0.0:
        raise ValueError("rate must be positive")
    width = math.log2(1.0 + 2.0 * n_outcomes) + math.ceil(k_inf_bits)
    off = 1.0 - 2.0 * math.log2(budget.epsilon * budget.kappa)
    return 4.0 / g_bits**2 * width**2 * off


def eat_reference_bound(
    h_nats: float,
    k_inf_bits: float,
    n_outcomes: int,
    n: int,
    budget: ErrorBudget,
) -> float:
    """Reference accumulation bound (nats) after ``n`` trials at rate ``h_nats``."""
    big_l = abs(math.log(budget.epsilon**2 * budget.kappa**2 / 2.0))
    width = math.log(1.0 + 2.0 * n_outcomes) + math.ceil(k_inf_bits)
    return h_nats * n - 2.0 * math.sqrt(_LOG2_E) * width * math.sqrt(big_l) * math.sqrt(n)


def c_tilde(beta: float, n_outcomes: int, k_inf: float) -> float:
    """Worst-case second-order constant given only a range bound ``k_inf`` (nats)."""
    if not (0.0 <= beta < 1.0):
        raise ValueError("beta must lie in [0, 1)")
    spread = math.log(n_outcomes) + k_inf
    w0 = spread + _LOG2
    wb = (1.0 - beta) * spread + _LOG2
    return (
        2.0 * _A(w0) + math.exp(k_inf * beta) / (1.0 - beta) ** 2 * _A(wb)
    ) / 3.0


def eat_from_qef_bound(
    h_nats: float,
    tilde_c: Callable[[float], float],
    n: int,
    budget: ErrorBudget,
    beta_max: float = 0.4999,
) -> float:
    """Accumulation-style bound (nats) derived from the factor machinery.

    Optimizes the power at ``beta = sqrt(2 L / (n c(0)))`` and evaluates the
    second-order constant there; the choice must stay below ``beta_max``.
    """
    big_l = abs(math.log(budget.epsilon**2 * budget.kappa**2 / 2.0))
    beta_bar = math.sqrt(2.0 * big_l / (n * tilde_c(0.0)))
    if beta_bar > beta_max:
        raise ValueError(
            f"optimal power {beta_bar:.4f} exceeds {beta_max}; need more trials"
        )
    penalty = math.sqrt(2.0) * math.sqrt(tilde_c(beta_bar)) * math.sqrt(big_l) * math.sqrt(n)
    return h_nats * n - penalty


# -- rate/penalty curves ------------------------------------------------------


def eat_penalty(r: float, n_outcomes: int, k_inf: float) -> float:
    """Reference per-trial penalty (nats) at log-error ratio ``r = L/n``."""
    width = math.log(1.0 + 2.0 * n_outcomes) + k_inf
    return math.sqrt(4.0 * _LOG2_E * width**2 * r)


def qef_penalty(r: float, n_outcomes: int, k_inf: float) -> float:
    """Factor-based per-trial penalty (nats) at log-error ratio ``r = L/n``.

    Chooses the power ``sqrt(2 r / c(0))`` and pays ``sqrt(2 c(beta) r)``;
    defined only while that power stays below 1.
    """
    c0 = c_tilde(0.0, n_outcomes, k_inf)
    beta_bar = math.sqrt(2.0 * r / c0)
    if beta_bar >= 1.0:
        raise ValueError("log-error ratio too large for the factor analysis")
    return math.sqrt(2.0 * c_tilde(beta_bar, n_outcomes, k_inf) * r)


def r_max_eat(h_nats: float, n_outcomes: int, k_inf: float) -> float:
    """Largest ``L/n`` with a nonnegative reference bound at rate ``h_nats``."""
    width = math.log(1.0 + 2.0 * n_outcomes) + k_inf
    return h_nats**2 / (4.0 * _LOG2_E * width**2)


def r_max_qef(h_nats: float, n_outcomes: int, k_inf: float) -> float:
    """Largest ``L/n`` with a nonnegative factor-based bound at rate ``h_nats``."""
    if h_nats <= 0.0:
        raise ValueError("rate must be positive")
    c0 = c_tilde(0.0, n_outcomes, k_inf)
    hi = c0 / 2.0 * (1.0 - 1e-12)
    lo = 1e-300

    def gap(r: float) -> float:
        return qef_penalty(r, n_outcomes, k_inf) - h_nats

    # The penalty runs from 0 to infinity over (0, c0/2), so a root exists.
    return float(brentq(gap, lo, hi, xtol=1e-15, rtol=8.9e-16))


def write_rmax_csv(
    path: str,
    n_outcomes: int,
    k_inf: float,
    h_start: float = 0.01,
    h_step: float = 0.05,
) -> int:
    """Write ``h_nats,r_eat,r_qef`` rows for rates up to ``log(n_outcomes)``."""
    h_max = math.log(n_outcomes)
    rows = []
    h = h_start
    while h <= h_max + 1e-12:
        rows.append(
            (
                h,
                r_max_eat(h, n_outcomes, k_inf),
                r_max_qef(h, n_outcomes, k_inf),
            )
        )
        h += h_step
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["h_nats", "r_eat", "r_qef"])
        for h, r_e, r_q in rows:
            writer.writerow([f"{h:.6f}", f"{r_e:.12g}", f"{r_q:.12g}"])
    return len(rows)


# -- minimum-trials comparison across a model family --------------------------


@dataclass(frozen=True)
class MinTrialsRow:
    """One family point: best factor-based count against the reference."""

    param: float
    i_hat: float
    beta: float
    g_bits: float
    k_inf_bits: float
    n_qef: float
    n_eat: float

    @property
    def ratio(self) -> float:
        return self.n_eat / self.n_qef


def min_trials_row(
    nu,
    param: float,
    beta_grid: Sequence[float],
    budget: ErrorBudget,
    vertices=None,
) -> MinTrialsRow:
    """Optimize the factor power over a grid and compare trial counts.

    The reference count reuses the optimal factor's estimator, whose range
    ceiling is ``max |log2 F| / beta``.
    """
    from .models import chsh_value
    from .pef_opt import optimize_pef_polytope

    best = None
    for beta in beta_grid:
        F, rate = optimize_pef_polytope(nu, beta, vertices=vertices)
        if rate <= 0.0:
            continue
        g_bits = rate * _LOG2_E
        n_qef = n_min_qef(g_bits, beta, budget)
        if best is None or n_qef < best[0]:
            best = (n_qef, beta, g_bits, F)
    if best is None:
        raise ValueError("no positive rate on the power grid")
    n_qef, beta, g_bits, F = best
    k_inf_bits = F.max_abs_log() * _LOG2_E / beta
    n_outcomes = len({k[0] for k in F.keys()})
    n_eat = n_min_eat_from_ee(g_bits, k_inf_bits, n_outcomes, budget)
    return MinTrialsRow(
        param=param,
        i_hat=chsh_value(nu),
        beta=beta,
        g_bits=g_bits,
        k_inf_bits=k_inf_bits,
        n_qef=n_qef,
        n_eat=n_eat,
    )


def min_trials_table(
    family: str,
    params: Iterable[float],
    beta_grid: Sequence[float],
    budget: ErrorBudget,
    seed: int = 0,
) -> list[MinTrialsRow]:
    from .models import family_distribution

    rows = []
    for param in params:
        nu = family_distribution(family, param, seed=seed)
        try:
            rows.append(min_trials_row(nu, param, beta_grid, budget))
        except ValueError as exc:
            warnings.warn(
                f"{family} param {param:g} skipped: {exc}", RuntimeWarning
            )
    return rows


def write_mintrials_csv(path: str, rows: Sequence[MinTrialsRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["family_param", "I_hat", "n_qef", "n_eat_F", "ratio"])
        for row in rows:
            writer.writerow(
                [
                    f"{row.param:.6f}",
                    f"{row.i_hat:.6f}",
                    f"{row.n_qef:.6g}",
                    f"{row.n_eat:.6g}",
                    f"{row.ratio:.6g}",
                ]
            )
