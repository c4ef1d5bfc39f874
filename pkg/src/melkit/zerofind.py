"""Phase scans, zero finding, and transversality certificates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dfield
from typing import List, Optional, Tuple

import numpy as np

from .hamcore import SystemDef
from .melnikov import (DerivativeRefused, MelnikovEvaluation, PhaseAngle,
                       TruncationPolicy, as_phase, melnikov_autonomous,
                       melnikov_derivative)

__all__ = [
    "ScanPoint", "ScanResult", "scan", "ZeroInfo", "find_zeros",
    "ZeroCertificate", "certify_zero", "MarginReport", "margin_report",
]

TWO_PI = 2.0 * math.pi


@dataclass
class ScanPoint:
    phase: PhaseAngle
    value: float
    error: float
    converged: bool
    reason: str
    t_plus: float
    t_minus: float


@dataclass
class ScanResult:
    system: str
    points: List[ScanPoint]
    tol: float
    mode: str

    @property
    def phases(self) -> np.ndarray:
        return np.array([p.phase.value for p in self.points])

    @property
    def values(self) -> np.ndarray:
        return np.array([p.value for p in self.points])

    @property
    def errors(self) -> np.ndarray:
        return np.array([p.error for p in self.points])

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))


def _family(sys: SystemDef):
    fam = sys.extras.get("orbit_family")
    if fam is None:
        raise ValueError(f"system {sys.name!r} has no phase-indexed orbit "
                         "family to scan")
    return fam


def _eval_at(sys: SystemDef, phase, tol, policy) -> MelnikovEvaluation:
    orbit = _family(sys)(phase)
    return melnikov_autonomous(sys, orbit, tol=tol, policy=policy)


def scan(sys: SystemDef, n: int = 64, *, tol: float = 1e-9,
         policy: Optional[TruncationPolicy] = None) -> ScanResult:
    """Evaluate the Melnikov function on n equispaced phases over one period.

    Grid nodes are represented with exactly evaluated trigonometric values so
    symmetry-forced zeros come out exact rather than at roundoff scale.
    """
    if n < 8:
        raise ValueError("need at least 8 scan nodes")
    pts = []
    for k in range(n):
        ph = PhaseAngle.from_turns(k, n)
        ev = _eval_at(sys, ph, tol, policy)
        pts.append(ScanPoint(phase=ph, value=ev.value, error=ev.error,
                             converged=ev.converged,
                             reason=ev.convergence.reason,
                             t_plus=ev.t_plus, t_minus=ev.t_minus))
    return ScanResult(system=sys.name, points=pts, tol=tol,
                      mode=pts[0].t_plus == pts[0].t_minus and "symmetric"
                      or "matched")


@dataclass
class ZeroInfo:
    phase: float
    value: float
    value_error: float
    bracket: Tuple[float, float]
    method: str
    note: str = ""


def _refine(sys, lo, hi, flo, fhi, tol, policy, use_newton, max_iter=80):
    """Safeguarded root refinement inside a sign-change bracket.

    Newton steps (from the phase derivative) or secant steps are accepted
    only while they stay inside the current bracket; otherwise bisection.
    """
    best = None
    for _ in range(max_iter):
        if hi - lo <= 1e-10 * (1.0 + abs(lo)):
            break
        mid = 0.5 * (lo + hi)
        step_from = mid
        cand = None
        if use_newton and best is not None:
            ph0, f0 = best
            try:
                dv = melnikov_derivative(sys, _family(sys)(ph0), tol=tol * 10)
                if (np.isfinite(dv.value) and dv.value != 0.0
                        and dv.error <= 0.5 * abs(dv.value)):
                    cand = ph0 - f0 / dv.value
            except DerivativeRefused:
                use_newton = False
        if cand is None and best is not None:
            # secant against the closer bracket endpoint
            ph0, f0 = best
            ph1, f1 = (lo, flo) if abs(ph0 - hi) < abs(ph0 - lo) else (hi, fhi)
            if f1 != f0:
                cand = ph0 - f0 * (ph1 - ph0) / (f1 - f0)
        if cand is not None and lo + 1e-14 < cand < hi - 1e-14:
            step_from = cand
        ev = _eval_at(sys, step_from, tol, policy)
        f = ev.value
        best = (step_from, f)
        if f == 0.0:
            lo = hi = step_from
            break
        if flo * f < 0.0:
            hi, fhi = step_from, f
        else:
            lo, flo = step_from, f
    phase = best[0] if best is not None else 0.5 * (lo + hi)
    ev = _eval_at(sys, phase, tol, policy)
    return phase, ev


def find_zeros(sys: SystemDef, result: Optional[ScanResult] = None, *,
               n: int = 64, tol: float = 1e-9,
               policy: Optional[TruncationPolicy] = None) -> List[ZeroInfo]:
    """Locate zeros of the Melnikov function over one phase period.

    Wraparound sign changes of the scan values bracket the zeros; each
    bracket is refined by safeguarded Newton (absolutely convergent
    integrals) or safeguarded secant (matched ladders).  Grid nodes where
    the value is exactly zero are reported as zeros directly.  Nodes whose
    value is within its own error bar without an adjacent sign change are
    flagged as possible tangencies.
    """
    if result is None:
        result = scan(sys, n, tol=tol, policy=policy)
    pts = result.points
    m = len(pts)
    cc = sys.extras.get("_conv_class")
    use_newton = bool(cc is not None and cc.absolute)
    zeros: List[ZeroInfo] = []

    for i, p in enumerate(pts):
        if p.value == 0.0 and p.converged:
            zeros.append(ZeroInfo(phase=p.phase.value, value=0.0,
                                  value_error=p.error,
                                  bracket=(p.phase.value, p.phase.value),
                                  method="grid-node"))

    for i in range(m):
        j = (i + 1) % m
        a, b = pts[i], pts[j]
        if not (a.converged and b.converged):
            continue
        if a.value == 0.0 or b.value == 0.0:
            continue
        if a.value * b.value < 0.0:
            lo = a.phase.value
            hi = b.phase.value if j != 0 else b.phase.value + TWO_PI
            phase, ev = _refine(sys, lo, hi, a.value, b.value, tol, policy,
                                use_newton)
            zeros.append(ZeroInfo(
                phase=phase % TWO_PI, value=ev.value, value_error=ev.error,
                bracket=(lo, hi),
                method="bisection+newton" if use_newton
                else "bisection+secant"))

    # tangency candidates: small value, no sign change on either side
    for i in range(m):
        p = pts[i]
        if p.value == 0.0 or not p.converged:
            continue
        if abs(p.value) > 3.0 * p.error:
            continue
        left = pts[(i - 1) % m].value
        right = pts[(i + 1) % m].value
        if left * p.value > 0.0 and right * p.value > 0.0:
            zeros.append(ZeroInfo(
                phase=p.phase.value, value=p.value, value_error=p.error,
                bracket=(pts[(i - 1) % m].phase.value,
                         pts[(i + 1) % m].phase.value),
                method="scan", note="possible tangency"))

    zeros.sort(key=lambda z: z.phase)
    dedup: List[ZeroInfo] = []
    for z in zeros:
        if dedup and abs(z.phase - dedup[-1].phase) <= 1e-8 * (1.0 + TWO_PI):
            if z.method == "grid-node":
                dedup[-1] = z
            continue
        dedup.append(z)
    # wraparound duplicate: a zero at ~0 and another at ~2 pi are the same
    if len(dedup) >= 2 and abs((dedup[-1].phase - TWO_PI) - dedup[0].phase) \
            <= 1e-8 * (1.0 + TWO_PI):
        dedup.pop()
    return dedup


@dataclass
class ZeroCertificate:
    phase: float
    value: float
    value_error: float
    slope: float
    slope_error: float
    margin: float
    issued: bool
    method: str
    note: str = ""


def _exactish_phase(phase: float):
    """Recover an exact-trig node when the phase sits on a simple fraction
    of the circle; quadrant-symmetric zeros are evaluated exactly there."""
    for n in (2, 4, 8, 16, 32, 64):
        k = round(phase / (TWO_PI / n))
        if abs(phase - k * (TWO_PI / n)) <= 1e-12:
            return PhaseAngle.from_turns(int(k) % n, n)
    return as_phase(phase)


def certify_zero(sys: SystemDef, zero: ZeroInfo, *, tol: float = 1e-9,
                 policy: Optional[TruncationPolicy] = None,
                 fd_step: Optional[float] = None) -> ZeroCertificate:
    """Issue a transversality certificate for a located zero.

    The slope comes from the phase derivative when that evaluation is
    admissible and self-consistent; otherwise from a symmetric difference of
    the Melnikov values across the zero.  The certificate is issued when
    |slope| - 3 * (value error + slope error) is positive.
    """
    ph = _exactish_phase(zero.phase)
    ev = _eval_at(sys, ph, tol, policy)
    slope = None
    serr = math.inf
    method = "derivative"
    note = ""
    try:
        dv = melnikov_derivative(sys, _family(sys)(ph), tol=tol)
        if np.isfinite(dv.value) and dv.error <= 0.5 * abs(dv.value):
            slope, serr = dv.value, dv.error
        else:
            note = "derivative evaluation did not settle"
    except DerivativeRefused as exc:
        note = str(exc)
    if slope is None:
        method = "fd-slope"
        h = fd_step if fd_step is not None else max(
            1e-3, 0.25 * (zero.bracket[1] - zero.bracket[0]))
        evp = _eval_at(sys, zero.phase + h, tol, policy)
        evm = _eval_at(sys, zero.phase - h, tol, policy)
        slope = (evp.value - evm.value) / (2.0 * h)
        # second difference bounds the curvature contribution
        curv = abs(evp.value + evm.value - 2.0 * ev.value) / (2.0 * h)
        serr = (evp.error + evm.error) / (2.0 * h) + curv
    margin = abs(slope) - 3.0 * (ev.error + serr)
    return ZeroCertificate(
        phase=zero.phase, value=ev.value, value_error=ev.error,
        slope=float(slope), slope_error=float(serr), margin=float(margin),
        issued=bool(margin > 0.0), method=method, note=note)


@dataclass
class MarginReport:
    system: str
    scan_result: ScanResult
    zeros: List[ZeroInfo]
    certificates: List[ZeroCertificate]
    max_abs: float
    min_abs_away: float
    all_issued: bool
    notes: List[str] = dfield(default_factory=list)


def margin_report(sys: SystemDef, *, n: int = 64, tol: float = 1e-9,
                  policy: Optional[TruncationPolicy] = None) -> MarginReport:
    """Scan, locate zeros, and certify each one.

    min_abs_away is the smallest |M| over scan nodes farther than one grid
    step from every located zero; with certified slopes it separates the
    zero set from the rest of the circle.
    """
    res = scan(sys, n, tol=tol, policy=policy)
    zeros = find_zeros(sys, res, tol=tol, policy=policy)
    certs = [certify_zero(sys, z, tol=tol, policy=policy) for z in zeros
             if z.note != "possible tangency"]
    step = TWO_PI / n
    away = []
    for p in res.points:
        d = min((abs((p.phase.value - z.phase + math.pi) % TWO_PI - math.pi)
                 for z in zeros), default=math.inf)
        if d > step * 1.5:
            away.append(abs(p.value))
    notes = [f"phase {z.phase:.6f}: {z.note}" for z in zeros if z.note]
    unconv = [p for p in res.points if not p.converged]
    if unconv:
        notes.append(f"{len(unconv)} scan nodes did not converge")
    return MarginReport(
        system=sys.name, scan_result=res, zeros=zeros, certificates=certs,
        max_abs=res.max_abs(),
        min_abs_away=float(min(away)) if away else math.nan,
        all_issued=bool(certs) and all(c.issued for c in certs),
        notes=notes)
