"""Two-stage Bernoulli sampling: clusters first, then units within drawn clusters."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._seeding import child
from .geometry import Population

__all__ = [
    "SamplingDesign",
    "SampleSelection",
    "DegenerateSampleError",
    "draw_sample",
    "draw_sample_with_redraws",
    "sample_size_ratio",
    "append_selection_csv",
]


class DegenerateSampleError(RuntimeError):
    """Realized sample has fewer usable units than the configured minimum."""

    def __init__(self, sample_size: int, minimum: int):
        super().__init__(f"sample of {sample_size} units is below the minimum of {minimum}")
        self.sample_size = sample_size
        self.minimum = minimum


@dataclass(frozen=True)
class SamplingDesign:
    rho_c: float = 1.0
    rho_u: float = 1.0

    def __post_init__(self):
        for name in ("rho_c", "rho_u"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ValueError(f"{name} must lie in (0, 1], got {v}")

    @property
    def rho(self) -> float:
        return self.rho_c * self.rho_u

    @property
    def is_census(self) -> bool:
        return self.rho_c == 1.0 and self.rho_u == 1.0


@dataclass(frozen=True)
class SampleSelection:
    indicators: np.ndarray
    clusters_drawn: np.ndarray

    @property
    def sample_size(self) -> int:
        return int(self.indicators.sum())

    @property
    def index(self) -> np.ndarray:
        return np.flatnonzero(self.indicators)


def draw_sample(
    pop: Population, design: SamplingDesign, seed, min_units: int = 10
) -> SampleSelection:
    """Draw sampling indicators ``R_i = (cluster drawn) * (unit drawn)``.

    The cluster stage and the unit stage use separate child streams of
    ``seed``, and the unit stage draws a uniform for every unit, so changing
    ``rho_u`` never perturbs which clusters were drawn (and vice versa).

    Raises :class:`DegenerateSampleError` when fewer than ``min_units`` units
    are drawn.
    """
    cl_draw = np.random.default_rng(child(seed, 0)).random(pop.num_clusters) < design.rho_c
    unit_draw = np.random.default_rng(child(seed, 1)).random(pop.size) < design.rho_u
    R = (cl_draw[pop.cluster_index] & unit_draw).astype(np.int8)
    sel = SampleSelection(R, cl_draw)
    if sel.sample_size < min_units:
        raise DegenerateSampleError(sel.sample_size, min_units)
    return sel


def draw_sample_with_redraws(
    pop: Population,
    design: SamplingDesign,
    seed,
    min_units: int = 10,
    max_redraws: int = 100,
) -> tuple[SampleSelection, int]:
    """Redraw under fresh sub-seeds until the sample is usable.

    Returns the selection and the number of redraws performed.  Attempt
    ``k`` uses the child stream ``k`` of ``seed``.
    """
    for k in range(max_redraws + 1):
        try:
            return draw_sample(pop, design, child(seed, 2, k), min_units), k
        except DegenerateSampleError as err:
            last = err
    raise last


def sample_size_ratio(sel: SampleSelection | np.ndarray, design: SamplingDesign, M: int) -> float:
    """``N / (M * rho_u * rho_c)``."""
    n = sel.sample_size if isinstance(sel, SampleSelection) else int(np.sum(sel))
    return n / (M * design.rho_u * design.rho_c)


def append_selection_csv(src, dst, sel: SampleSelection, column: str = "sampled") -> None:
    """Copy a population CSV adding a 0/1 indicator column keyed by unit_id."""
    with Path(src).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = list(reader.fieldnames) + [column]
        rows = list(reader)
    with Path(dst).open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            r[column] = int(sel.indicators[int(r["unit_id"])])
            w.writerow(r)
