"""Structured lattices carrying chart coordinates and quadrature weights."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

PERIODIC = "periodic"
ANALYTIC = "analytic-interior"


def fejer_weights(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Fejér's first rule on [-1, 1].

    Returns ``(theta, w)`` with nodes ``cos(theta)``; the rule integrates
    polynomials of degree ``n - 1`` exactly and is spectrally accurate for
    smooth integrands.
    """
    theta = (np.arange(n) + 0.5) * math.pi / n
    k = np.arange(1, n // 2 + 1)
    s = np.cos(2.0 * np.outer(theta, k)) / (4.0 * k**2 - 1.0)
    w = (2.0 / n) * (1.0 - 2.0 * s.sum(axis=1))
    return theta, w


@dataclass(frozen=True)
class Axis:
    """One lattice direction.

    ``nodes`` are parameter values along the axis and ``weights`` the 1-D
    quadrature weights attached to them.  ``spacing`` is the nominal step used
    by lattice-mode stencils.
    """

    extent: float
    sites: int
    boundary: str = PERIODIC
    origin: float = 0.0
    nodes: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]
    weights: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        if self.sites < 1 or not self.extent > 0:
            raise ValueError("axis needs positive extent and sites")
        if self.boundary not in (PERIODIC, ANALYTIC):
            raise ValueError(f"unknown boundary {self.boundary!r}")
        if self.nodes is None:
            h = self.spacing
            off = 0.0 if self.boundary == PERIODIC else 0.5
            object.__setattr__(self, "nodes", self.origin + (np.arange(self.sites) + off) * h)
        if self.weights is None:
            object.__setattr__(self, "weights", np.full(self.sites, self.spacing))

    @property
    def spacing(self) -> float:
        return self.extent / self.sites

    @property
    def periodic(self) -> bool:
        return self.boundary == PERIODIC

    def describe(self) -> dict:
        return {"extent": self.extent, "sites": self.sites, "spacing": self.spacing,
                "boundary": self.boundary}


class ChartLattice:
    """Tensor-product lattice of four axes, optionally mapped into a chart.

    ``to_chart`` maps parameter tuples (one per axis) to chart coordinates;
    when absent the parameters are the chart coordinates.  ``weight_factor``
    lets a model convert product weights of an intrinsic rule into coordinate
    weights (the volume element is supplied at integration time).
    """

    def __init__(self, axes: Sequence[Axis],
                 to_chart: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                 weight_factor: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                 name: str = ""):
        if len(axes) != 4:
            raise ValueError("a chart lattice has exactly four axes")
        self.axes = tuple(axes)
        self.name = name
        self._to_chart = to_chart
        self._weight_factor = weight_factor
        self._points = None
        self._weights = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(a.sites for a in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def spacing(self) -> np.ndarray:
        return np.array([a.spacing for a in self.axes])

    @property
    def periodic(self) -> np.ndarray:
        return np.array([a.periodic for a in self.axes])

    @property
    def mapped(self) -> bool:
        return self._to_chart is not None

    def params(self) -> np.ndarray:
        grids = np.meshgrid(*[a.nodes for a in self.axes], indexing="ij")
        return np.stack(grids, axis=-1).reshape(-1, 4)

    @property
    def points(self) -> np.ndarray:
        """Chart coordinates of every site, shape (size, 4), C order."""
        if self._points is None:
            p = self.params()
            self._points = p if self._to_chart is None else self._to_chart(p)
        return self._points

    @property
    def weights(self) -> np.ndarray:
        """Coordinate quadrature weight per site (multiply by sqrt(det g))."""
        if self._weights is None:
            w = self.axes[0].weights
            for a in self.axes[1:]:
                w = np.multiply.outer(w, a.weights)
            w = w.reshape(-1)
            if self._weight_factor is not None:
                w = w * self._weight_factor(self.points)
            self._weights = w
        return self._weights

    def site_index(self, flat: int) -> tuple[int, ...]:
        return tuple(int(i) for i in np.unravel_index(flat, self.shape))

    def sample(self, count: int, seed: int) -> np.ndarray:
        """Deterministic subset of flat site indices."""
        rng = np.random.default_rng(seed)
        count = min(count, self.size)
        return np.sort(rng.choice(self.size, size=count, replace=False))

    def interior_mask(self, margin: int) -> np.ndarray:
        """Sites at least ``margin`` sites away from every analytic boundary."""
        idx = np.indices(self.shape).reshape(4, -1)
        ok = np.ones(self.size, dtype=bool)
        for a, ax in enumerate(self.axes):
            if not ax.periodic:
                ok &= (idx[a] >= margin) & (idx[a] <= ax.sites - 1 - margin)
        return ok

    def integrate(self, values: np.ndarray, vol: np.ndarray) -> float:
        """Quadrature of a scalar field given per-site volume density."""
        terms = np.asarray(values, dtype=float) * vol * self.weights
        if not np.all(np.isfinite(terms)):
            bad = int(np.flatnonzero(~np.isfinite(terms))[0])
            raise FloatingPointError(f"non-finite integrand at site {self.site_index(bad)}")
        return math.fsum(terms.tolist())

    def chunks(self, size: int = 4096):
        """Yield (start, stop) slices over the flattened site list."""
        for s in range(0, self.size, size):
            yield s, min(s + size, self.size)

    def describe(self) -> dict:
        return {"name": self.name, "shape": list(self.shape),
                "axes": [a.describe() for a in self.axes]}
