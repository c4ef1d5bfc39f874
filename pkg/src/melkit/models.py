"""Built-in example systems.

Each builder returns a SystemDef whose extras carry the model-specific
evaluation machinery: a phase-indexed orbit family, closed-form gradients,
and (where applicable) the integrand hooks that make the improper integrals
cheap and stable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .hamcore import PhasePoint, ScalarFieldHandle, SystemDef, VectorFieldHandle
from .melnikov import as_phase
from .odeint import EventSpec
from .orbits import (HomoclinicOrbit, LimitOrbitDesc, OrbitFamily,
                     closed_form_homoclinic, find_saddle,
                     parabolic_orbit_rtbp, shoot_homoclinic)

__all__ = [
    "ModelConfig",
    "build_model",
    "make_duffing_oscillator",
    "make_holmes_marsden",
    "make_rtbp",
    "make_forced_duffing",
]


@dataclass
class ModelConfig:
    name: str
    params: dict

    def __post_init__(self):
        for k, v in self.params.items():
            if not isinstance(v, (int, float)):
                raise ValueError(f"parameter {k} must be numeric, got {v!r}")


def build_model(cfg: ModelConfig) -> SystemDef:
    try:
        builder = _REGISTRY[cfg.name]
    except KeyError:
        raise ValueError(
            f"unknown model {cfg.name!r}; available: {sorted(_REGISTRY)}")
    try:
        return builder(**cfg.params)
    except TypeError as exc:
        raise ValueError(f"bad parameters for {cfg.name!r}: {exc}") from exc


def make_duffing_oscillator(alpha: float = 1.0, g0: float = 0.5) -> SystemDef:
    """Planar cubic saddle-loop system crossed with a harmonic oscillator
    fiber, coupled through the product of the two position coordinates.

    Coordinates (z1, z2, w1, w2); the measured integral F is the planar
    energy, which is zero on the loop and whose gradient vanishes at the
    saddle, so the Melnikov integral converges absolutely.
    """
    alpha = float(alpha)
    g0 = float(g0)
    if alpha <= 0.0:
        raise ValueError("alpha must be positive")
    if g0 < 0.0:
        raise ValueError("g0 must be nonnegative")
    amp = math.sqrt(2.0 * g0 / alpha)
    cid = "duffing-oscillator"

    def x0_raw(t, y):
        out = np.empty(4, dtype=y.dtype)
        out[0] = y[1]
        out[1] = y[0] - y[0] * y[0]
        out[2] = alpha * y[3]
        out[3] = -alpha * y[2]
        return out

    X0 = VectorFieldHandle(raw=x0_raw, chart_id=cid)

    def h0_val(p):
        z1, z2, w1, w2 = p.coords
        return (0.5 * z2 * z2 - 0.5 * z1 * z1 + z1 ** 3 / 3.0
                + 0.5 * alpha * (w1 * w1 + w2 * w2))

    def h0_grad(p):
        z1, z2, w1, w2 = p.coords
        return (-z1 + z1 * z1, z2, alpha * w1, alpha * w2)

    def f_val(p):
        z1, z2 = p.coords[0], p.coords[1]
        return 0.5 * z2 * z2 - 0.5 * z1 * z1 + z1 ** 3 / 3.0

    def f_grad(p):
        z1, z2 = p.coords[0], p.coords[1]
        return (-z1 + z1 * z1, z2, 0.0, 0.0)

    def h1_val(p):
        return p.coords[0] * p.coords[2]

    def h1_grad(p):
        z1, w1 = p.coords[0], p.coords[2]
        return (w1, 0.0, z1, 0.0)

    def y_raw(t, y):
        out = np.zeros(4, dtype=y.dtype)
        out[1] = -y[2]
        out[3] = -y[0]
        return out

    family = OrbitFamily(
        builder=lambda th: closed_form_homoclinic(
            "duffing-oscillator",
            {"alpha": alpha, "g0": g0, "theta0": float(th)}),
        omega=alpha, lam=1.0, period=2.0 * math.pi / alpha)

    def fiber_energy(p):
        return 0.5 * alpha * (p.coords[2] ** 2 + p.coords[3] ** 2)

    def integrand_batch(orbit, ts):
        cs = orbit.coords_batch(ts)
        return -cs[:, 1] * cs[:, 2]

    continuation = {
        "section_index": 3,
        "section_direction": -1,
        "unknown_indices": (0, 1, 2),
        "period_guess": 2.0 * math.pi / alpha,
        "lam_estimate": 1.0,
        "fiber_slice": (2, 4),
        "coupling": h1_val,
        "seed": lambda eps: np.array(
            [eps * amp / (1.0 + alpha * alpha), 0.0, amp, 0.0]),
        "loop_anchor": lambda th: np.array(
            [1.5, 0.0, amp * math.cos(th), -amp * math.sin(th)]),
        "loop_scale": 1.5,
    }

    return SystemDef(
        name=cid, dimension=4, X0=X0,
        H0=ScalarFieldHandle(h0_val, h0_grad, name="H0"),
        F=ScalarFieldHandle(f_val, f_grad, name="F"),
        Y=VectorFieldHandle(raw=y_raw, chart_id=cid),
        H1=ScalarFieldHandle(h1_val, h1_grad, name="H1"),
        symplectic_chart_flag=True,
        coord_names=("z1", "z2", "w1", "w2"),
        params={"alpha": alpha, "g0": g0, "amp": amp},
        bounding_box=((-0.8, 1.8), (-1.2, 1.2),
                      (-1.5 * amp - 0.1, 1.5 * amp + 0.1),
                      (-1.5 * amp - 0.1, 1.5 * amp + 0.1)),
        extras={"orbit_family": family, "continuation": continuation,
                "integrand_batch": integrand_batch,
                "fiber_energy": ScalarFieldHandle(fiber_energy,
                                                  name="fiber-energy")})


def make_holmes_marsden(I0: float = 0.1, qstar: float = 3.0) -> SystemDef:
    """Radial cubic potential with an angular fiber (q, p, theta, I); the
    perturbation is the lift of sin(theta), the measured integral is the
    action I.  Neither the action gradient nor the perturbation vanishes on
    the limit circle, so the Melnikov integral is conditionally convergent
    and only matched truncations define it.
    """
    I0 = float(I0)
    qstar = float(qstar)
    if I0 < 0.0:
        raise ValueError("I0 must be nonnegative")
    if qstar < 1.0:
        raise ValueError("qstar must be at least 1")
    cid = "holmes-marsden"

    def uprime(q):
        d = q - qstar
        return -d + d * d

    def upot(q):
        d = q - qstar
        return -0.5 * d * d + d ** 3 / 3.0

    def veff(q):
        return upot(q) + 0.5 * I0 * I0 / (q * q)

    def veffprime(q):
        return uprime(q) - I0 * I0 / q ** 3

    def veffsecond(q):
        d = q - qstar
        return -1.0 + 2.0 * d + 3.0 * I0 * I0 / q ** 4

    # effective-potential saddle
    qs = qstar
    for _ in range(60):
        step = veffprime(qs) / veffsecond(qs)
        qs -= step
        if abs(step) <= 1e-15 * qs:
            break
    if veffsecond(qs) >= 0.0:
        raise ValueError("no hilltop in the effective potential for these "
                         "parameters")
    lam = math.sqrt(-veffsecond(qs))
    omega = I0 / (qs * qs)
    h0 = veff(qs)

    # reduced core: (q, p, sigma) with sigma the fiber phase defect
    def red_raw(t, u):
        out = np.empty(3, dtype=u.dtype)
        out[0] = u[1]
        out[1] = -veffprime(u[0])
        out[2] = I0 / (u[0] * u[0]) - omega
        return out

    red = VectorFieldHandle(raw=red_raw, chart_id=cid + "-reduced")
    sad = find_saddle(red, PhasePoint((qs, 0.0, 0.0), cid + "-reduced"))
    udir = sad.unstable_dir
    if udir[0] < 0.0:
        udir = -udir
    shot = shoot_homoclinic(
        red, sad, udir,
        EventSpec(lambda p: p[1], -1, name="loop-top"),
        delta=1e-8, t_cap=80.0, tol=(1e-13, 1e-13),
        drift_check=lambda c: 0.5 * c[1] * c[1] + veff(c[0]),
        drift_tol=1e-8)
    t_half = shot.t_section
    sec = shot.section_coords
    sg_sec = float(sec[2])
    cp, cm = sg_sec, -sg_sec
    traj = shot.traj
    dq0, dp0 = shot.launch[0] - qs, shot.launch[1]
    q_top = float(sec[0])

    def red_batch(ts):
        """(q, p, dev) over orbit time, section at t = 0."""
        ts = np.asarray(ts, dtype=float)
        q = np.empty_like(ts)
        p = np.empty_like(ts)
        dev = np.empty_like(ts)
        at = np.abs(ts)
        core = at <= t_half
        if np.any(core):
            cs = traj.coords_batch(t_half - at[core])
            q[core] = cs[:, 0]
            p[core] = cs[:, 1]
            dev[core] = cs[:, 2] - sg_sec
        far = ~core
        if np.any(far):
            decay = np.exp(lam * (t_half - at[far]))
            q[far] = qs + dq0 * decay
            p[far] = dp0 * decay
            dev[far] = -sg_sec
        # unflipped branch is orbit time t <= 0 (rise to the top); mirror it
        pos = ts > 0.0
        p[pos] = -p[pos]
        dev[pos] = -dev[pos]
        return q, p, dev

    def make_orbit(th0: float) -> HomoclinicOrbit:
        th0 = float(th0)

        def batch(ts):
            ts = np.asarray(ts, dtype=float)
            q, p, dev = red_batch(ts)
            th = th0 + omega * ts + dev
            return np.stack([q, p, th, np.full_like(ts, I0)], axis=1)

        def dev_batch(ts):
            return red_batch(ts)[2]

        return HomoclinicOrbit(
            kind="saddle-loop", dimension=4, coords_batch=batch,
            limit=LimitOrbitDesc(kind="periodic" if I0 > 0 else "fixed-point",
                                 omega=omega, energy=h0),
            energy=h0, omega=omega, phase_offset=th0,
            phase_constants=(cm, cp), phase_dev_batch=dev_batch,
            lam=lam, tail_coeff=q_top - qs + 1.0, t_core=t_half,
            chart_id=cid, anchor_phase_index=2,
            meta={"I0": I0, "qstar": qstar, "q_saddle": qs,
                  "q_top": q_top, "t_half": t_half})

    family = OrbitFamily(builder=make_orbit, omega=omega, lam=lam,
                         period=(2.0 * math.pi / omega if omega > 0
                                 else math.inf))

    def x0_raw(t, y):
        out = np.empty(4, dtype=y.dtype)
        q, p, I = y[0], y[1], y[3]
        out[0] = p
        out[1] = -uprime(q) + I * I / q ** 3
        out[2] = I / (q * q)
        out[3] = 0.0
        return out

    def h0_val(pt):
        q, p, _, I = pt.coords
        return 0.5 * p * p + upot(q) + 0.5 * I * I / (q * q)

    def h0_grad(pt):
        q, p, _, I = pt.coords
        return (uprime(q) - I * I / q ** 3, p, 0.0, I / (q * q))

    def y_raw(t, y):
        out = np.zeros(4, dtype=y.dtype)
        out[3] = -math.cos(y[2])
        return out

    continuation = {
        "section_index": 1,
        "section_direction": -1,
        "unknown_indices": (0, 2, 3),
        "period_guess": (2.0 * math.pi / omega if omega > 0 else math.inf),
        "lam_estimate": lam,
        "fiber_slice": (2, 4),
        "coupling": lambda pt: math.sin(pt.coords[2]),
        "seed": lambda eps: np.array([q_top, 0.0, 0.0, I0]),
        "loop_anchor": lambda th: np.array([q_top, 0.0, th, I0]),
        "loop_scale": q_top - qs,
    }

    return SystemDef(
        name=cid, dimension=4, X0=VectorFieldHandle(raw=x0_raw, chart_id=cid),
        H0=ScalarFieldHandle(h0_val, h0_grad, name="H0"),
        F=ScalarFieldHandle(lambda pt: pt.coords[3],
                            lambda pt: (0.0, 0.0, 0.0, 1.0), name="F"),
        Y=VectorFieldHandle(raw=y_raw, chart_id=cid),
        H1=ScalarFieldHandle(lambda pt: math.sin(pt.coords[2]),
                             lambda pt: (0.0, 0.0, math.cos(pt.coords[2]),
                                         0.0), name="H1"),
        symplectic_chart_flag=True,
        coord_names=("q", "p", "theta", "I"),
        periods=(None, None, 2.0 * math.pi, None),
        params={"I0": I0, "qstar": qstar},
        bounding_box=((qs - 0.5, q_top + 0.5), (-1.2, 1.2),
                      (0.0, 2.0 * math.pi), (max(0.0, I0 - 0.1), I0 + 0.1)),
        extras={"orbit_family": family, "continuation": continuation,
                "fiber_wave": (-1.0, 0.0),
                "saddle_reduced": sad,
                "frozen": {"q_saddle": qs, "lam": lam, "omega": omega,
                           "t_half": t_half, "phase_constant": sg_sec,
                           "q_top": q_top}})


def make_rtbp(rho0: float = 3.0) -> SystemDef:
    """Zero-mass-ratio restricted three-body escape chart (x, y, rho, s):
    x^2 is twice the reciprocal orbital radius, s the synodic angle phase,
    rho the angular-momentum-like parameter measured by F.

    The unperturbed escape orbit is doubly asymptotic to a degenerate circle
    at infinity (power-law approach, no exponential rate); the integrand
    decays like 1/t^2 so the integral converges absolutely even though the
    gradient of F does not vanish on the limit set.
    """
    rho0 = float(rho0)
    if rho0 < 2.0:
        raise ValueError("rho0 must be at least 2 for a zero-energy escape "
                         "orbit")
    cid = "rtbp"

    def x0_raw(t, y):
        x, yy, rho = y[0], y[1], y[2]
        x3 = x * x * x
        x4 = x3 * x
        out = np.empty(4, dtype=y.dtype)
        out[0] = -0.5 * x3 * yy
        out[1] = -x4 + 0.5 * x4 * x * x * rho * rho
        out[2] = 0.0
        out[3] = 1.0 - x4 * rho
        return out

    def h0_val(p):
        x, y, rho, _ = p.coords
        return 0.5 * y * y + 0.25 * x ** 4 * rho * rho - x * x

    def h0_grad(p):
        x, y, rho, _ = p.coords
        return (x ** 3 * rho * rho - 2.0 * x, y, 0.5 * x ** 4 * rho, 0.0)

    def integrand(p, t):
        x, _, rho, s = p.coords
        xi2 = 0.5 * rho * x * x
        # floored away from the collision set so the value stays finite
        B = max((1.0 - xi2) ** 2 + 2.0 * xi2 * (1.0 + math.cos(s)), 1e-180)
        return xi2 * xi2 * math.sin(s) * (1.0 - B ** -1.5)

    core = parabolic_orbit_rtbp(rho0)
    traj = core["traj"]
    t_end = core["t_end"]
    xT = core["x_end"]
    sgT = core["sigma_end"]
    sg_inf = core["sigma_infinity"]
    tail_rate = 1.5 * math.sqrt(2.0) * xT ** 3

    def red_batch(ts):
        """(x, y, sigma) for all real t by parity and the power-law tail."""
        ts = np.asarray(ts, dtype=float)
        at = np.abs(ts)
        x = np.empty_like(ts)
        y = np.empty_like(ts)
        sg = np.empty_like(ts)
        inside = at <= t_end
        if np.any(inside):
            cs = traj.coords_batch(at[inside])
            x[inside] = cs[:, 0]
            y[inside] = cs[:, 1]
            sg[inside] = cs[:, 2]
        out = ~inside
        if np.any(out):
            u = 1.0 + tail_rate * (at[out] - t_end)
            ucbrt = u ** (-1.0 / 3.0)
            x[out] = xT * ucbrt
            y[out] = math.sqrt(2.0) * x[out] * np.sqrt(
                np.maximum(1.0 - 0.25 * rho0 * rho0 * x[out] ** 2, 0.0))
            sg[out] = sgT - math.sqrt(2.0) * rho0 * xT * (1.0 - ucbrt)
        neg = ts < 0.0
        y[neg] = -y[neg]
        sg[neg] = -sg[neg]
        return x, y, sg

    def make_orbit(phase) -> HomoclinicOrbit:
        ph = as_phase(phase)

        def batch(ts):
            ts = np.asarray(ts, dtype=float)
            x, y, sg = red_batch(ts)
            s = ph.value + ts + sg
            return np.stack([x, y, np.full_like(ts, rho0), s], axis=1)

        def dev_batch(ts):
            return red_batch(ts)[2]

        return HomoclinicOrbit(
            kind="parabolic", dimension=4, coords_batch=batch,
            limit=LimitOrbitDesc(kind="degenerate-circle", omega=1.0,
                                 energy=0.0,
                                 note="power-law approach, no exponential "
                                      "rate"),
            energy=0.0, omega=1.0, phase_offset=ph.value,
            phase_constants=(-sg_inf, sg_inf), phase_dev_batch=dev_batch,
            lam=None, t_core=t_end, chart_id=cid,
            anchor_phase_index=3,
            meta={"rho0": rho0, "s0_sin": ph.sin, "s0_cos": ph.cos})

    family = OrbitFamily(builder=make_orbit, omega=1.0, lam=None,
                         period=2.0 * math.pi, kind="parabolic")

    # keeps B**-2.5 below the overflow threshold near the collision set
    B_FLOOR = 1e-120

    def _pair_pieces(orbit, ts):
        ts = np.asarray(ts, dtype=float)
        x, _, sg = red_batch(ts)
        s0s = orbit.meta.get("s0_sin")
        s0c = orbit.meta.get("s0_cos")
        if s0s is None:
            s0s = math.sin(orbit.phase_offset)
            s0c = math.cos(orbit.phase_offset)
        u = ts + sg
        cu = np.cos(u)
        su = np.sin(u)
        xi2 = 0.5 * rho0 * x * x
        base = (1.0 - xi2) ** 2
        cpp = s0c * cu - s0s * su          # cos(psi+)
        cpm = s0c * cu + s0s * su          # cos(psi-)
        spp = s0s * cu + s0c * su          # sin(psi+)
        spm = s0s * cu - s0c * su          # sin(psi-)
        Bp = np.maximum(base + 2.0 * xi2 * (1.0 + cpp), B_FLOOR)
        Bm = np.maximum(base + 2.0 * xi2 * (1.0 + cpm), B_FLOOR)
        return xi2, (s0s, s0c), cu, su, spp, spm, cpp, cpm, Bp, Bm

    def pair_batch(orbit, ts):
        xi2, (s0s, s0c), cu, su, spp, spm, _, _, Bp, Bm = \
            _pair_pieces(orbit, ts)
        Qp = Bp ** -1.5
        Qm = Bm ** -1.5
        # split form: exact zero when sin(s0) is exactly zero
        xi4 = xi2 * xi2
        return xi4 * (s0s * cu * (2.0 - Qp - Qm) + s0c * su * (Qm - Qp))

    def deriv_pair_batch(orbit, ts):
        xi2, (s0s, s0c), cu, su, spp, spm, cpp, cpm, Bp, Bm = \
            _pair_pieces(orbit, ts)
        xi4 = xi2 * xi2
        Sp = 1.0 - Bp ** -1.5
        Sm = 1.0 - Bm ** -1.5
        return xi4 * (cpp * Sp + cpm * Sm
                      - 3.0 * xi2 * (spp * spp * Bp ** -2.5
                                     + spm * spm * Bm ** -2.5))

    def _tail_state(orbit):
        s0s = orbit.meta.get("s0_sin", math.sin(orbit.phase_offset))
        s0c = orbit.meta.get("s0_cos", math.cos(orbit.phase_offset))
        xi2T = 0.5 * rho0 * xT * xT
        uT = t_end + sgT
        dpsi = 1.0 - xT ** 4 * rho0
        return s0s, s0c, xi2T, uT, dpsi

    def tail(orbit, T):
        s0s, s0c, xi2T, uT, dpsi = _tail_state(orbit)
        xi6 = xi2T ** 3
        sin2s0 = 2.0 * s0s * s0c
        corr = 0.75 * xi6 * (-2.0 * sin2s0 * math.sin(2.0 * uT)) / dpsi
        bound = (0.75 * 3.0 * math.sqrt(2.0) * (0.5 * rho0) ** 3 * xT ** 8
                 + 9.0 * xi2T ** 4)
        return corr, bound

    def deriv_tail(orbit, T):
        s0s, s0c, xi2T, uT, dpsi = _tail_state(orbit)
        xi6 = xi2T ** 3
        cos2s0 = s0c * s0c - s0s * s0s
        corr = -3.0 * xi6 * cos2s0 * math.sin(2.0 * uT) / dpsi
        bound = (1.5 * 3.0 * math.sqrt(2.0) * (0.5 * rho0) ** 3 * xT ** 8
                 + 12.0 * xi2T ** 4)
        return corr, bound

    return SystemDef(
        name=cid, dimension=4, X0=VectorFieldHandle(raw=x0_raw, chart_id=cid),
        H0=ScalarFieldHandle(h0_val, h0_grad, name="H0"),
        F=ScalarFieldHandle(lambda p: p.coords[2],
                            lambda p: (0.0, 0.0, 1.0, 0.0), name="F"),
        Y=None,
        symplectic_chart_flag=False,
        coord_names=("x", "y", "rho", "s"),
        periods=(None, None, None, 2.0 * math.pi),
        integrand_override=integrand,
        params={"rho0": rho0},
        bounding_box=((0.05, 2.0 / rho0 + 0.2), (-1.5, 1.5),
                      (rho0 - 0.5, rho0 + 0.5), (0.0, 2.0 * math.pi)),
        extras={"orbit_family": family,
                "eval_hooks": {"pair_batch": pair_batch,
                               "deriv_pair_batch": deriv_pair_batch,
                               "tail": tail, "deriv_tail": deriv_tail,
                               "panel": 2.0},
                "frozen": {"t_end": t_end, "x_end": xT,
                           "sigma_infinity": sg_inf}})


def make_forced_duffing(omega_f: float = 1.0) -> SystemDef:
    """Planar cubic saddle-loop with a time-periodic momentum kick; the
    classic single-degree-of-freedom testbed for the section-map form
    comparisons."""
    omega_f = float(omega_f)
    if omega_f <= 0.0:
        raise ValueError("omega_f must be positive")
    cid = "forced-duffing"

    def x0_raw(t, y):
        out = np.empty(2, dtype=y.dtype)
        out[0] = y[1]
        out[1] = y[0] - y[0] * y[0]
        return out

    def h0_val(p):
        z1, z2 = p.coords
        return 0.5 * z2 * z2 - 0.5 * z1 * z1 + z1 ** 3 / 3.0

    def h0_grad(p):
        z1, z2 = p.coords
        return (-z1 + z1 * z1, z2)

    def y_raw(t, y):
        out = np.zeros(2, dtype=y.dtype)
        out[1] = math.cos(omega_f * t)
        return out

    H0 = ScalarFieldHandle(h0_val, h0_grad, name="H0")
    loop = closed_form_homoclinic("duffing-planar", {})
    return SystemDef(
        name=cid, dimension=2,
        X0=VectorFieldHandle(raw=x0_raw, chart_id=cid),
        H0=H0, F=H0,
        Y=VectorFieldHandle(raw=y_raw, autonomous_flag=False, chart_id=cid),
        symplectic_chart_flag=True,
        coord_names=("z1", "z2"),
        params={"omega_f": omega_f},
        bounding_box=((-0.8, 1.8), (-1.2, 1.2)),
        extras={"loop": loop, "forcing_period": 2.0 * math.pi / omega_f})


_REGISTRY = {
    "duffing-oscillator": make_duffing_oscillator,
    "holmes-marsden": make_holmes_marsden,
    "rtbp": make_rtbp,
    "forced-duffing": make_forced_duffing,
}
