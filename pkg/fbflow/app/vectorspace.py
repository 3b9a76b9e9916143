"""Finite-dimensional Euclidean state space.

The duality map is the identity here and the constant of the duality
inequality is kappa = 1; bound formulas elsewhere still take kappa as an
argument so that the general case stays visible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import numpy.typing as npt

from .errors import InvalidInput

Vector = npt.NDArray[np.float64]


@dataclass(frozen=True)
class SpaceConstants:
    kappa: float = 1.0

    def __post_init__(self) -> None:
        if not math.isfinite(self.kappa) or self.kappa < 1.0:
            raise InvalidInput(f"kappa must be a finite real >= 1, got {self.kappa}")


EUCLIDEAN = SpaceConstants(kappa=1.0)


def as_vector(values: Iterable[float] | float | npt.ArrayLike) -> Vector:
    """Validate and freeze a point of the state space."""
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidInput(f"a vector must be a non-empty flat list of reals, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"vector has non-finite coordinates: {arr.tolist()}")
    arr.setflags(write=False)
    return arr


def zeros(dim: int) -> Vector:
    if dim < 1:
        raise InvalidInput(f"dimension must be positive, got {dim}")
    return as_vector(np.zeros(dim))


def same_dim(u: Vector, v: Vector) -> int:
    if u.shape != v.shape:
        raise InvalidInput(f"dimension mismatch: {u.shape[0]} vs {v.shape[0]}")
    return int(u.shape[0])


def inner(u: Vector, v: Vector) -> float:
    same_dim(u, v)
    return float(np.dot(u, v))


def norm(u: Vector) -> float:
    return float(np.linalg.norm(u))


def distance(u: Vector, v: Vector) -> float:
    same_dim(u, v)
    return float(np.linalg.norm(u - v))


def check_kappa_inequality(u: Vector, v: Vector, kappa: float) -> float:
    """Slack of ||u+v||^2 <= ||u||^2 + 2<j(u), v> + kappa ||v||^2."""
    same_dim(u, v)
    if kappa < 1.0:
        raise InvalidInput(f"kappa must be >= 1, got {kappa}")
    uv = u + v
    return float(np.dot(u, u) + 2.0 * np.dot(u, v) + kappa * np.dot(v, v) - np.dot(uv, uv))


def format_vector(u: Sequence[float] | Vector, digits: int = 17) -> str:
    return ",".join(format(float(c), f".{digits}g") for c in u)


def parse_vector(text: str) -> Vector:
    parts = [p for p in text.replace(";", ",").split(",") if p.strip()]
    try:
        return as_vector([float(p) for p in parts])
    except ValueError as exc:
        raise InvalidInput(f"cannot parse vector from {text!r}") from exc
