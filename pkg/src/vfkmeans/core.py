"""Shared domain types, privacy-budget accounting and the error taxonomy.

Every stochastic operation in this package takes an explicit Seed; identical
seeds and identical inputs give identical outputs, including across the two
sketch-kernel backends.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

BUDGET_TOL = 1e-9

# Opaque user identifier, identical across all parties' views of a user.
UserId = bytes


class VfkmError(Exception):
    """Base class for all package errors."""


class InvalidParameter(VfkmError):
    pass


class IncompatibleSketches(VfkmError):
    pass


class IdMismatch(VfkmError):
    pass


class ConfigInvalid(VfkmError):
    pass


class DataFormatError(VfkmError):
    """CSV parse errors, missing columns, malformed dataset files."""


class SplitSpecInvalid(VfkmError):
    pass


class LengthMismatch(VfkmError):
    pass


class SingularTransition(VfkmError):
    pass


class DimMismatch(VfkmError):
    pass


@dataclass(frozen=True)
class PrivacyBudget:
    """Total (epsilon, delta) budget for one end-to-end run."""

    epsilon: float
    delta: float

    def __post_init__(self):
        if not (self.epsilon > 0):
            raise InvalidParameter(f"epsilon must be positive, got {self.epsilon}")
        if not (0 < self.delta < 1):
            raise InvalidParameter(f"delta must be in (0,1), got {self.delta}")


@dataclass(frozen=True)
class BudgetSplit:
    """Partition of the total budget across the protocol phases.

    eps_count pays for the single noisy user-count query, eps_cluster for each
    party's local clustering, eps_encode (with delta_encode) for each party's
    membership encoding. frac is the fraction of epsilon given to the per-party
    work; frac = 1 leaves nothing for the count query.
    """

    eps_count: float
    eps_cluster: float
    eps_encode: float
    delta_encode: float
    frac: float
    parties: int

    def __post_init__(self):
        if self.eps_count < 0 or self.eps_cluster <= 0 or self.eps_encode <= 0:
            raise InvalidParameter("budget split has non-positive components")
        if not (0 < self.delta_encode < 1):
            raise InvalidParameter("delta_encode must be in (0,1)")

    @property
    def total_epsilon(self) -> float:
        return self.eps_count + self.parties * (self.eps_cluster + self.eps_encode)

    @property
    def total_delta(self) -> float:
        return self.parties * self.delta_encode


def split_budget(budget: PrivacyBudget, parties: int, frac: float = 0.98) -> BudgetSplit:
    """Split (epsilon, delta) into count / cluster / encode shares.

    The count query gets (1 - frac) * epsilon; every party gets
    frac * epsilon / (2 * parties) for clustering and the same for encoding;
    delta is split evenly across parties.
    """
    if parties < 2:
        raise InvalidParameter(f"need at least 2 parties, got {parties}")
    if not (0 < frac <= 1):
        raise InvalidParameter(f"frac must be in (0,1], got {frac}")
    eps_count = (1.0 - frac) * budget.epsilon
    per_party = frac * budget.epsilon / (2 * parties)
    split = BudgetSplit(
        eps_count=eps_count,
        eps_cluster=per_party,
        eps_encode=per_party,
        delta_encode=budget.delta / parties,
        frac=frac,
        parties=parties,
    )
    if split.total_epsilon > budget.epsilon + BUDGET_TOL:
        raise InvalidParameter("budget split exceeds the total budget")
    return split


@dataclass(frozen=True)
class Seed:
    """64-bit seed; the root of all randomness in a run."""

    value: int

    def __post_init__(self):
        if not (0 <= self.value < 2**64):
            raise InvalidParameter("seed must fit in 64 bits")


@dataclass
class BudgetLedger:
    """Record of every privacy spend in a run.

    Spends compose sequentially: all parties hold the same users, so the
    total consumed is the plain sum over entries.
    """

    entries: list = field(default_factory=list)

    def spend(self, party: int | None, label: str, eps: float, delta: float = 0.0):
        self.entries.append({"party": party, "label": label, "eps": eps, "delta": delta})

    def total(self) -> tuple[float, float]:
        eps = sum(e["eps"] for e in self.entries)
        delta = sum(e["delta"] for e in self.entries)
        return eps, delta

    def assert_within(self, budget: PrivacyBudget):
        eps, delta = self.total()
        if eps > budget.epsilon + BUDGET_TOL or delta > budget.delta + BUDGET_TOL:
            raise InvalidParameter(
                f"ledger total ({eps}, {delta}) exceeds budget "
                f"({budget.epsilon}, {budget.delta})")


def laplace_sample(scale: float, seed: Seed) -> float:
    """One draw from a zero-mean Laplace distribution with the given scale."""
    if not (scale > 0):
        raise InvalidParameter(f"scale must be positive, got {scale}")
    from .rng import StreamKey  # local import to keep core dependency-free

    return float(StreamKey.from_seed(seed, b"core.laplace").laplace(scale, 0))


def laplace_scale_std(scale: float) -> float:
    """Standard deviation of Laplace(scale); used by noise-budget heuristics."""
    return math.sqrt(2.0) * scale
