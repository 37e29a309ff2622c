"""Closed-form robust/clean training-error accounting for learning a second feature.

A model has already learned feature ``v_{y,j}`` of each class and is about to
learn ``v_{y,3-j}``.  Only the strongest wrong class ``l_max`` is modelled, so
every output reduces to a two-way softmax between the correct-class evidence
(``theta`` per learned feature present) and the perturbation-driven
``l_max`` logit (``k1 * s_mix`` or ``k2 * s_mix``).  Sample counts enter as
fractions of N, so N cancels.
"""

from __future__ import annotations

import csv
import io
import math
import random
from dataclasses import dataclass, fields, replace

from .errors import InvalidParameterError

CSV_HEADER = [
    "param", "a", "b", "c", "r_robust_1", "r_robust_2", "r_clean_1", "r_clean_2",
    "delta_robust", "delta_clean", "incentive_gap", "learns_feature",
]
SWEEPABLE = ("mu", "k1", "k2", "theta", "s_mix")


@dataclass(frozen=True)
class ErrorModelParams:
    mu: float = 0.4
    k1: float = 0.3
    k2: float = 0.8
    theta: float = 1.0
    s_mix: float = 3.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v):
                raise InvalidParameterError(f"{f.name} must be finite, got {v}")
        for name in ("mu", "k1", "k2"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidParameterError(f"{name}={v} outside [0, 1]")
        if self.theta <= 0:
            raise InvalidParameterError(f"theta={self.theta} must be positive")
        if self.s_mix < 0:
            raise InvalidParameterError(f"s_mix={self.s_mix} must be non-negative")


@dataclass(frozen=True)
class ErrorReport:
    a: float
    b: float
    c: float
    r_robust_1: float
    r_robust_2: float
    r_clean_1: float
    r_clean_2: float
    delta_robust: float
    delta_clean: float
    incentive_gap: float
    learns_feature: bool

    @property
    def verdict(self) -> str:
        return "learns feature" if self.learns_feature else "no incentive"


def _two_way(evidence: float, rival: float) -> float:
    # e^u / (e^u + e^v), written as a logistic to avoid overflow
    return 1.0 / (1.0 + math.exp(rival - evidence))


def logistic_terms(p: ErrorModelParams) -> tuple:
    a = _two_way(p.theta, p.k1 * p.s_mix)
    b = _two_way(p.theta, p.k2 * p.s_mix)
    c = _two_way(2.0 * p.theta, (p.k1 + p.k2) * p.s_mix)
    return a, b, c


def robust_errors(p: ErrorModelParams) -> tuple:
    """Robust training error before (phase 1) and after (phase 2) learning v_{y,3-j}."""
    a, b, c = logistic_terms(p)
    r1 = 0.5 * p.mu * (2.0 - a) + (1.0 - p.mu) * (1.0 - a)
    r2 = 0.5 * p.mu * (1.0 - b) + 0.5 * p.mu * (1.0 - a) + (1.0 - p.mu) * (1.0 - c)
    return r1, r2


def clean_errors(p: ErrorModelParams) -> tuple:
    return 0.5 * p.mu, 0.0


def incentive_gap(p: ErrorModelParams) -> float:
    """(1-mu)(a-c) - mu*b/2; non-negative means no incentive to learn the new feature."""
    a, b, c = logistic_terms(p)
    return (1.0 - p.mu) * (a - c) - 0.5 * p.mu * b


def delta_clean(p: ErrorModelParams) -> float:
    return -0.5 * p.mu


def report(p: ErrorModelParams) -> ErrorReport:
    a, b, c = logistic_terms(p)
    r1, r2 = robust_errors(p)
    c1, c2 = clean_errors(p)
    gap = incentive_gap(p)
    return ErrorReport(
        a=a, b=b, c=c,
        r_robust_1=r1, r_robust_2=r2, r_clean_1=c1, r_clean_2=c2,
        delta_robust=r2 - r1, delta_clean=c2 - c1,
        incentive_gap=gap, learns_feature=gap < 0,
    )


def mu_root(p: ErrorModelParams) -> float | None:
    """The single-view fraction at which the gap changes sign, if it lies in (0, 1)."""
    a, b, c = logistic_terms(p)
    denom = (a - c) + 0.5 * b
    if denom <= 0:
        return None
    root = (a - c) / denom
    return root if 0.0 < root < 1.0 else None


def sweep(p: ErrorModelParams, param_name: str, lo: float, hi: float, steps: int) -> list:
    """Evaluate :func:`report` on an inclusive linear grid over one parameter.

    Returns ``(value, ErrorReport)`` pairs.
    """
    if param_name not in SWEEPABLE:
        raise InvalidParameterError(f"cannot sweep {param_name!r}; choose one of {SWEEPABLE}")
    if not lo < hi:
        raise InvalidParameterError(f"sweep needs lo < hi, got [{lo}, {hi}]")
    if steps < 2:
        raise InvalidParameterError(f"sweep needs steps >= 2, got {steps}")
    rows = []
    for i in range(steps):
        value = hi if i == steps - 1 else lo + (hi - lo) * i / (steps - 1)
        rows.append((value, report(replace(p, **{param_name: value}))))
    return rows


def _row(value, r: ErrorReport) -> list:
    return [
        repr(float(value)), repr(r.a), repr(r.b), repr(r.c), repr(r.r_robust_1), repr(r.r_robust_2),
        repr(r.r_clean_1), repr(r.r_clean_2), repr(r.delta_robust), repr(r.delta_clean),
        repr(r.incentive_gap), str(r.learns_feature).lower(),
    ]


def sweep_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for value, r in rows:
        w.writerow(_row(value, r))
    return buf.getvalue()


@dataclass(frozen=True)
class FiniteNResult:
    r_robust_1: float
    r_robust_2: float
    r_clean_1: float
    r_clean_2: float
    composition: tuple  # (#single-view v_{y,j}, #single-view v_{y,3-j}, #multi-view)
    rounded: bool


def finite_n_composition(mu: float, N: int) -> tuple:
    """Counts of each sample category, rounded to integers; flags inexact splits."""
    half = 0.5 * mu * N
    multi = (1.0 - mu) * N
    n_half = int(round(half))
    n_multi = N - 2 * n_half
    rounded = abs(half - n_half) > 1e-9 or abs(multi - n_multi) > 1e-9
    return (n_half, n_half, n_multi), rounded


def finite_n_oracle(p: ErrorModelParams, N: int, seed: int | None = None) -> FiniteNResult:
    """Brute-force version of the closed forms over an explicit N-sample set.

    Each sample is a category (which class features it carries) and each
    phase a set of learned features.  Per-sample logits are built explicitly
    and ``1 - prob_correct`` is averaged.  ``seed`` only shuffles enumeration
    order, which must not change the result beyond rounding.
    """
    if N < 1:
        raise InvalidParameterError("N must be >= 1")
    (n_j, n_other, n_multi), rounded = finite_n_composition(p.mu, N)
    samples = [("j",)] * n_j + [("other",)] * n_other + [("j", "other")] * n_multi
    if seed is not None:
        random.Random(seed).shuffle(samples)

    response = {"j": p.k1 * p.s_mix, "other": p.k2 * p.s_mix}

    def robust_prob(features, learned):
        usable = [f for f in features if f in learned]
        if not usable:
            return 0.0  # the model cannot judge a sample none of whose features it knows
        logit_y = p.theta * len(usable)
        logit_lmax = sum(response[f] for f in usable)
        m = max(logit_y, logit_lmax)
        ey, el = math.exp(logit_y - m), math.exp(logit_lmax - m)
        return ey / (ey + el)

    def clean_prob(features, learned):
        return 1.0 if any(f in learned for f in features) else 0.0

    phase1, phase2 = {"j"}, {"j", "other"}
    rr1 = math.fsum(1.0 - robust_prob(s, phase1) for s in samples) / N
    rr2 = math.fsum(1.0 - robust_prob(s, phase2) for s in samples) / N
    rc1 = math.fsum(1.0 - clean_prob(s, phase1) for s in samples) / N
    rc2 = math.fsum(1.0 - clean_prob(s, phase2) for s in samples) / N
    return FiniteNResult(rr1, rr2, rc1, rc2, (n_j, n_other, n_multi), rounded)
