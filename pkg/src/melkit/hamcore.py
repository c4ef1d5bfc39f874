"""Core phase-space types and Hamiltonian field operations.

Charts use interleaved canonical ordering: coordinate 2*i is the i-th
configuration variable, coordinate 2*i + 1 its conjugate momentum.  Angle
coordinates carry a period and are reduced into [0, period) only when a
PhasePoint is produced through SystemDef.point / Trajectory.state; raw
integration state is never reduced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "EvaluationError",
    "PhasePoint",
    "VectorFieldHandle",
    "ScalarFieldHandle",
    "SystemDef",
    "Transversal",
    "canonical_field",
    "melnikov_integrand",
    "integral_drift",
]


class EvaluationError(RuntimeError):
    """A field evaluation failed; message carries the offending point."""


@dataclass(frozen=True)
class PhasePoint:
    """Point of a phase space, tagged with the chart it lives in."""

    coords: tuple
    chart_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "coords", tuple(float(c) for c in self.coords))

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.coords, dtype=float)

    def __len__(self) -> int:
        return len(self.coords)

    def __getitem__(self, i: int) -> float:
        return self.coords[i]


class VectorFieldHandle:
    """Time-dependent vector field on a chart.

    `evaluator(point, t) -> sequence` is the public contract; `raw(t, y) ->
    ndarray` is an optional allocation-free path used by the integrator.  If
    only one of the two is supplied the other is synthesized from it.
    """

    def __init__(
        self,
        evaluator: Optional[Callable[[PhasePoint, float], Sequence[float]]] = None,
        *,
        raw: Optional[Callable[[float, np.ndarray], np.ndarray]] = None,
        autonomous_flag: bool = True,
        chart_id: str = "",
    ):
        if evaluator is None and raw is None:
            raise ValueError("need evaluator or raw")
        self.autonomous_flag = autonomous_flag
        self.chart_id = chart_id
        if raw is None:
            def raw(t, y, _ev=evaluator, _cid=chart_id):
                return np.asarray(_ev(PhasePoint(tuple(y), _cid), t), dtype=y.dtype)
        self.raw = raw
        if evaluator is None:
            def evaluator(p, t, _raw=raw):
                return _raw(t, p.array)
        self._evaluator = evaluator

    def __call__(self, p: PhasePoint, t: float = 0.0) -> np.ndarray:
        try:
            v = np.asarray(self._evaluator(p, t), dtype=float)
        except Exception as exc:  # annotate with position context
            raise EvaluationError(
                f"vector field evaluation failed at {p.coords}, t={t}"
            ) from exc
        if not np.all(np.isfinite(v)):
            raise EvaluationError(
                f"vector field non-finite at {p.coords}, t={t}"
            )
        return v


class ScalarFieldHandle:
    """Scalar field with a gradient, closed-form if available, else central
    finite differences with per-coordinate step 1e-6 * (1 + |coord|)."""

    FD_SCALE = 1e-6

    def __init__(
        self,
        evaluator: Callable[[PhasePoint], float],
        gradient: Optional[Callable[[PhasePoint], Sequence[float]]] = None,
        *,
        raw_value: Optional[Callable[[np.ndarray], float]] = None,
        name: str = "",
    ):
        self._evaluator = evaluator
        self._gradient = gradient
        self.raw_value = raw_value
        self.name = name

    def __call__(self, p: PhasePoint) -> float:
        try:
            return float(self._evaluator(p))
        except Exception as exc:
            raise EvaluationError(
                f"scalar field {self.name or '?'} failed at {p.coords}"
            ) from exc

    def value(self, p: PhasePoint) -> float:
        return self(p)

    def gradient_at(self, p: PhasePoint) -> np.ndarray:
        if self._gradient is not None:
            g = np.asarray(self._gradient(p), dtype=float)
            if g.shape != (len(p),):
                raise EvaluationError(
                    f"gradient of {self.name or '?'} has shape {g.shape}, "
                    f"expected ({len(p)},)"
                )
            return g
        x = p.array
        g = np.empty(len(x))
        for i in range(len(x)):
            h = self.FD_SCALE * (1.0 + abs(x[i]))
            xp = x.copy(); xp[i] += h
            xm = x.copy(); xm[i] -= h
            g[i] = (self(PhasePoint(tuple(xp), p.chart_id))
                    - self(PhasePoint(tuple(xm), p.chart_id))) / (2.0 * h)
        return g


@dataclass
class SystemDef:
    """One perturbed system: unperturbed field X0, perturbation field Y,
    conserved quantities H0 (energy) and F (the measured first integral),
    plus chart metadata.

    Y may be None when the chart is not symplectic and the perturbation only
    enters through `integrand_override`, which then supplies the Melnikov
    integrand (point, t) -> float directly.
    """

    name: str
    dimension: int
    X0: VectorFieldHandle
    H0: ScalarFieldHandle
    F: ScalarFieldHandle
    Y: Optional[VectorFieldHandle] = None
    H1: Optional[ScalarFieldHandle] = None
    symplectic_chart_flag: bool = True
    coord_names: tuple = ()
    periods: tuple = ()           # per-coordinate period, None = unbounded
    integrand_override: Optional[Callable[[PhasePoint, float], float]] = None
    params: dict = field(default_factory=dict)
    bounding_box: tuple = ()      # ((lo, hi), ...) sampling box for checks
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.coord_names:
            self.coord_names = tuple(f"x{i}" for i in range(self.dimension))
        if not self.periods:
            self.periods = (None,) * self.dimension
        if len(self.periods) != self.dimension:
            raise ValueError("periods length does not match dimension")

    def reduce_coords(self, y: Sequence[float]) -> tuple:
        out = []
        for yi, per in zip(y, self.periods):
            yi = float(yi)
            if per is not None:
                yi = yi % per
            out.append(yi)
        return tuple(out)

    def point(self, coords: Sequence[float]) -> PhasePoint:
        if len(coords) != self.dimension:
            raise ValueError(
                f"{self.name}: got {len(coords)} coordinates, "
                f"dimension is {self.dimension}"
            )
        return PhasePoint(self.reduce_coords(coords), chart_id=self.name)


@dataclass
class Transversal:
    """Section through a point, spanned by explicit directions.

    If `orbit_tangents` are supplied, the spanning directions must additionally
    be transverse to them: the assembled matrix must have full rank.
    """

    base_point: PhasePoint
    spanning_directions: tuple
    orbit_tangents: tuple = ()

    def __post_init__(self):
        dirs = np.asarray([np.asarray(d, float) for d in self.spanning_directions])
        if dirs.ndim != 2 or dirs.shape[1] != len(self.base_point):
            raise ValueError("spanning directions have wrong shape")
        if np.linalg.matrix_rank(dirs, tol=1e-10) < dirs.shape[0]:
            raise ValueError("spanning directions are linearly dependent")
        if self.orbit_tangents:
            tang = np.asarray([np.asarray(d, float) for d in self.orbit_tangents])
            both = np.vstack([dirs, tang])
            if np.linalg.matrix_rank(both, tol=1e-10) < both.shape[0]:
                raise ValueError("section is not transverse to the orbit")

    @property
    def codimension(self) -> int:
        return len(self.base_point) - len(self.spanning_directions)

    def matrix(self) -> np.ndarray:
        return np.asarray([np.asarray(d, float) for d in self.spanning_directions])


def canonical_field(H: ScalarFieldHandle, dimension: int,
                    chart_id: str = "") -> VectorFieldHandle:
    """Hamiltonian vector field of H on an interleaved (q, p) chart:
    dq_i/dt = dH/dp_i, dp_i/dt = -dH/dq_i."""
    if dimension % 2 != 0:
        raise ValueError("canonical field needs even dimension")

    def evaluator(p: PhasePoint, t: float) -> np.ndarray:
        g = H.gradient_at(p)
        v = np.empty_like(g)
        v[0::2] = g[1::2]
        v[1::2] = -g[0::2]
        return v

    return VectorFieldHandle(evaluator, chart_id=chart_id)


def melnikov_integrand(sys: SystemDef, p: PhasePoint, t: float = 0.0) -> float:
    """Pointwise integrand DF(p) . Y(p, t), or the system's override."""
    if sys.integrand_override is not None:
        try:
            return float(sys.integrand_override(p, t))
        except EvaluationError:
            raise
        except Exception as exc:
            raise EvaluationError(
                f"{sys.name}: integrand override failed at {p.coords}, t={t}"
            ) from exc
    if sys.Y is None:
        raise EvaluationError(
            f"{sys.name}: no perturbation field and no integrand override"
        )
    g = sys.F.gradient_at(p)
    y = sys.Y(p, t)
    return float(g @ y)


def integral_drift(sys: SystemDef, traj, which: str = "H0") -> float:
    """Max deviation of a conserved quantity along a stored trajectory."""
    fieldh = {"H0": sys.H0, "F": sys.F}[which]
    pts = traj.states
    if not pts:
        raise ValueError("empty trajectory")
    vals = np.asarray([fieldh(p) for p in pts])
    return float(np.max(np.abs(vals - vals[0])))
