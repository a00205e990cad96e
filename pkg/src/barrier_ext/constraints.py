"""Declarative inequality constraints on softmax maps and their evaluation.

A constraint spec is canonicalized into scalar tape expressions f_i with the
convention "satisfied iff f_i <= 0". Region size is the column sum of the
softmax map; the centroid is the softmax-weighted coordinate mean (a
fractional, still differentiable term).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from barrier_ext.autodiff import Var, index_select


class DegenerateRegionError(RuntimeError):
    """Predicted mass of the class vanished; the centroid is meaningless."""


# Fraction of |Omega| below which the centroid denominator is considered zero.
CENTROID_MASS_GUARD = 1e-6


@dataclass(frozen=True)
class SizeBox:
    """lower <= sum_p s_p^k <= upper, as two scalar inequalities."""

    class_index: int
    lower: float
    upper: float

    def __post_init__(self) -> None:
        if self.lower > self.upper:
            raise ValueError(f"size bounds inverted: [{self.lower}, {self.upper}]")

    @property
    def n_scalars(self) -> int:
        return 2


@dataclass(frozen=True)
class CentroidBox:
    """Centroid of class k constrained to a pixel-coordinate box, 4 scalars."""

    class_index: int
    x_lo: float
    x_hi: float
    y_lo: float
    y_hi: float

    def __post_init__(self) -> None:
        if self.x_lo > self.x_hi or self.y_lo > self.y_hi:
            raise ValueError("centroid box bounds inverted")

    @property
    def n_scalars(self) -> int:
        return 4


@dataclass(frozen=True)
class Presence:
    """Class k must be present: 1 - sum_p s_p^k <= 0, one scalar."""

    class_index: int

    @property
    def n_scalars(self) -> int:
        return 1


ConstraintSpec = SizeBox | CentroidBox | Presence


class ConstraintSetting(enum.Enum):
    """Which constraint family an experiment derives from ground truth."""

    SIZE_ONLY = "size_only"
    CENTROID_ONLY = "centroid_only"
    SIZE_AND_CENTROID = "size_and_centroid"


@dataclass(frozen=True)
class CoordGrid:
    """Row-major pixel grid; coordinates are 0-based (column, row) pairs."""

    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"grid sides must be positive, got {self.width}x{self.height}")

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-pixel (x, y) coordinate columns, each shaped (n_pixels, 1)."""
        return _grid_coords(self.width, self.height)


@lru_cache(maxsize=16)
def _grid_coords(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.divmod(np.arange(width * height, dtype=np.float64), width)
    return xs.reshape(-1, 1), ys.reshape(-1, 1)


def _class_column(s: Var, k: int) -> Var:
    n_classes = s.shape[1]
    if not 0 <= k < n_classes:
        raise IndexError(f"class index {k} out of range for {n_classes} classes")
    return index_select(s, axis=1, indices=(k,))


def region_size(s: Var, k: int, normalize: bool = False) -> Var:
    """Soft size of class k: the column-k sum of the softmax map (n x K)."""
    v = _class_column(s, k).sum()
    if normalize:
        v = v / float(s.shape[0])
    return v


def region_centroid(s: Var, k: int, grid: CoordGrid) -> tuple[Var, Var]:
    """Mass-weighted mean coordinate of class k, as (cx, cy) tape scalars.

    Raises DegenerateRegionError when the class mass has collapsed below the
    guard threshold; propagating a near-0/0 quotient would produce garbage
    gradients instead of a diagnosable failure.
    """
    if s.shape[0] != grid.n_pixels:
        raise ValueError(f"softmax map has {s.shape[0]} rows but grid has {grid.n_pixels} pixels")
    col = _class_column(s, k)
    mass = col.sum()
    if float(mass.value) <= CENTROID_MASS_GUARD * grid.n_pixels:
        raise DegenerateRegionError(
            f"class {k} mass {float(mass.value):.3e} below guard; centroid undefined"
        )
    xs, ys = grid.coords()
    tape = s.tape
    cx = (col * tape.constant(xs)).sum() / mass
    cy = (col * tape.constant(ys)).sum() / mass
    return cx, cy


def canonicalize(
    spec: ConstraintSpec, s: Var, grid: CoordGrid, normalize_size: bool = False
) -> list[Var]:
    """Express one spec as scalar tape values f_i with f_i <= 0 iff satisfied."""
    if isinstance(spec, SizeBox):
        v = region_size(s, spec.class_index, normalize=normalize_size)
        return [spec.lower - v, v - spec.upper]
    if isinstance(spec, CentroidBox):
        cx, cy = region_centroid(s, spec.class_index, grid)
        return [spec.x_lo - cx, cx - spec.x_hi, spec.y_lo - cy, cy - spec.y_hi]
    if isinstance(spec, Presence):
        return [1.0 - region_size(s, spec.class_index, normalize=normalize_size)]
    raise TypeError(f"unknown constraint spec {spec!r}")


def scalar_count(specs: list[ConstraintSpec]) -> int:
    """Total N of scalar inequalities; the N that enters the N/t gap bound."""
    return sum(spec.n_scalars for spec in specs)


def mask_size_and_centroid(mask: np.ndarray) -> tuple[int, float, float]:
    """Foreground pixel count and centroid (cx, cy) of a binary (h, w) mask."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    fg = np.argwhere(mask != 0)
    count = fg.shape[0]
    if count == 0:
        return 0, float("nan"), float("nan")
    cy, cx = fg.mean(axis=0)
    return count, float(cx), float(cy)


def bounds_from_gt(
    mask: np.ndarray,
    grid: CoordGrid,
    setting: ConstraintSetting,
    class_index: int = 1,
    size_factors: tuple[float, float] = (0.9, 1.1),
    centroid_margin: float = 20.0,
    normalize_size: bool = False,
) -> list[ConstraintSpec]:
    """Derive per-image constraint specs from the image's own ground truth.

    Size bounds are size_factors times the foreground pixel count; the
    centroid box is the ground-truth centroid plus/minus centroid_margin
    pixels per axis.
    """
    if mask.shape != (grid.height, grid.width):
        raise ValueError(f"mask shape {mask.shape} does not match grid {grid.height}x{grid.width}")
    count, cx, cy = mask_size_and_centroid(mask)
    specs: list[ConstraintSpec] = []
    if setting in (ConstraintSetting.SIZE_ONLY, ConstraintSetting.SIZE_AND_CENTROID):
        tau = count / grid.n_pixels if normalize_size else float(count)
        specs.append(
            SizeBox(class_index, lower=size_factors[0] * tau, upper=size_factors[1] * tau)
        )
    if setting in (ConstraintSetting.CENTROID_ONLY, ConstraintSetting.SIZE_AND_CENTROID):
        if count == 0:
            raise ValueError("empty mask: centroid box requested but ground truth has no foreground")
        specs.append(
            CentroidBox(
                class_index,
                x_lo=cx - centroid_margin,
                x_hi=cx + centroid_margin,
                y_lo=cy - centroid_margin,
                y_hi=cy + centroid_margin,
            )
        )
    return specs


def spec_to_dict(spec: ConstraintSpec) -> dict:
    if isinstance(spec, SizeBox):
        return {
            "kind": "size_box",
            "class_index": spec.class_index,
            "lower": spec.lower,
            "upper": spec.upper,
        }
    if isinstance(spec, CentroidBox):
        return {
            "kind": "centroid_box",
            "class_index": spec.class_index,
            "x_lo": spec.x_lo,
            "x_hi": spec.x_hi,
            "y_lo": spec.y_lo,
            "y_hi": spec.y_hi,
        }
    if isinstance(spec, Presence):
        return {"kind": "presence", "class_index": spec.class_index}
    raise TypeError(f"unknown constraint spec {spec!r}")


def spec_from_dict(d: dict) -> ConstraintSpec:
    kind = d.get("kind")
    fields = {k: v for k, v in d.items() if k != "kind"}
    if kind == "size_box":
        return SizeBox(**fields)
    if kind == "centroid_box":
        return CentroidBox(**fields)
    if kind == "presence":
        return Presence(**fields)
    raise ValueError(f"unknown constraint kind {kind!r}")
