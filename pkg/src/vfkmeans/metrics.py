"""Run metrics and the per-run report record."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .core import DimMismatch, InvalidParameter
from .weights import WeightGrid


def normalized_loss(points: np.ndarray, centers: np.ndarray) -> float:
    """Mean squared distance from each row to its nearest center."""
    if centers.size == 0:
        raise InvalidParameter("centers must be non-empty")
    return float(cdist(points, centers, "sqeuclidean").min(axis=1).mean())


def rel_intersection_error(estimated: WeightGrid, truth: WeightGrid) -> float:
    """L1 distance between weight grids, as a fraction of the true total."""
    if estimated.dims != truth.dims:
        raise DimMismatch(
            f"grid dims differ: {estimated.dims} vs {truth.dims}")
    return float(np.abs(estimated.weights - truth.weights).sum() / truth.total)


@dataclass(frozen=True)
class RunReport:
    """Everything one protocol run produced, minus the raw data.

    canonical_bytes leaves out wall_time_sec so determinism checks can compare
    reports byte for byte; to_json keeps it for the human record.
    """

    normalized_loss: float
    vscore: float | None
    rel_intersection_error: float | None
    bytes_per_party: tuple
    wall_time_sec: float
    config: dict
    seed: int

    def __post_init__(self):
        if self.normalized_loss < 0:
            raise InvalidParameter("normalized_loss must be nonnegative")
        if self.vscore is not None and not (0.0 <= self.vscore <= 1.0):
            raise InvalidParameter("vscore must be in [0, 1]")

    def to_dict(self, include_timing: bool = True) -> dict:
        obj = {
            "normalized_loss": self.normalized_loss,
            "vscore": self.vscore,
            "rel_intersection_error": self.rel_intersection_error,
            "bytes_per_party": list(self.bytes_per_party),
            "config": self.config,
            "seed": self.seed,
        }
        if include_timing:
            obj["wall_time_sec"] = self.wall_time_sec
        return obj

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def canonical_bytes(self) -> bytes:
        return json.dumps(self.to_dict(include_timing=False),
                          sort_keys=True).encode()

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        obj = json.loads(text)
        return cls(
            normalized_loss=obj["normalized_loss"],
            vscore=obj["vscore"],
            rel_intersection_error=obj["rel_intersection_error"],
            bytes_per_party=tuple(obj["bytes_per_party"]),
            wall_time_sec=obj.get("wall_time_sec", float("nan")),
            config=obj["config"],
            seed=obj["seed"],
        )
