"""Coupled alkali / noble-gas Bloch equations and their time integration."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .model import CellConfig, POL_EPS, slowing_down_factor, vec3

__all__ = [
    "SpinState",
    "DriveTerm",
    "DriveTimeline",
    "Trajectory",
    "IntegrationError",
    "bloch_rhs",
    "integrate",
    "apply_magnetic_pulse",
    "rotate_z",
    "write_trajectory_csv",
]

DEFAULT_RTOL = 1e-9
DEFAULT_ATOL = 1e-12


class IntegrationError(RuntimeError):
    def __init__(self, msg: str, t: float, state: np.ndarray):
        super().__init__(f"{msg} at t={t:.9g} s, state={np.array2string(state, precision=6)}")
        self.t = t
        self.state = state


@dataclass(frozen=True)
class SpinState:
    Pe: np.ndarray
    Pn: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "Pe", vec3(self.Pe))
        object.__setattr__(self, "Pn", vec3(self.Pn))

    @classmethod
    def from_vector(cls, y: np.ndarray, t: float) -> "SpinState":
        return cls(np.array(y[:3]), np.array(y[3:6]), t)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.Pe, self.Pn])

    def check(self, eps: float = POL_EPS) -> None:
        for name, v in (("Pe", self.Pe), ("Pn", self.Pn)):
            if np.linalg.norm(v) > 1.0 + eps:
                raise ValueError(f"|{name}| = {np.linalg.norm(v)} exceeds 1")


# ---------------------------------------------------------------------------
# drives

_TARGETS = {"B": 0, "Omega": 1}
_KINDS = {"constant": 0, "step": 1, "square": 2, "sinusoid": 3}


@dataclass(frozen=True)
class DriveTerm:
    """One additive primitive of a field (tesla) or rotation (rad/s) program.

    ``p1``/``p2`` are kind dependent: step (t0, -), square (period, phase),
    sinusoid (frequency, phase). Phases are in radians.
    """

    target: str
    kind: str
    axis: tuple[float, float, float]
    amplitude: float
    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self):
        if self.target not in _TARGETS:
            raise ValueError(f"drive target must be 'B' or 'Omega', got {self.target!r}")
        if self.kind not in _KINDS:
            raise ValueError(f"unknown drive kind {self.kind!r}")
        if self.kind == "square" and not self.p1 > 0:
            raise ValueError("square-wave period must be positive")
        object.__setattr__(self, "axis", tuple(float(a) for a in vec3(self.axis)))

    def row(self) -> list[float]:
        return [_TARGETS[self.target], _KINDS[self.kind], *self.axis, self.amplitude, self.p1, self.p2]

    def value(self, t: float) -> float:
        a = self.amplitude
        if self.kind == "constant":
            return a
        if self.kind == "step":
            return a if t >= self.p1 else 0.0
        if self.kind == "square":
            x = t / self.p1 + self.p2 / (2 * math.pi)
            return a if x - math.floor(x) < 0.5 else -a
        return a * math.sin(2 * math.pi * self.p1 * t + self.p2)

    def discontinuities(self, t0: float, t1: float) -> list[float]:
        if self.amplitude == 0:
            return []
        if self.kind == "step":
            return [self.p1] if t0 < self.p1 < t1 else []
        if self.kind == "square":
            # edges where t/period + phase/2pi is a multiple of 1/2
            off = self.p2 / (2 * math.pi)
            k0 = math.floor(2 * (t0 / self.p1 + off))
            out = []
            k = k0
            while True:
                te = (k / 2 - off) * self.p1
                if te >= t1:
                    break
                if te > t0:
                    out.append(te)
                k += 1
            return out
        return []


_X = (1.0, 0.0, 0.0)
_Y = (0.0, 1.0, 0.0)
_AXES = {"x": _X, "y": _Y, "z": (0.0, 0.0, 1.0)}


def _axis(a) -> tuple[float, float, float]:
    return _AXES[a] if isinstance(a, str) else tuple(a)


@dataclass(frozen=True)
class DriveTimeline:
    """Sum of drive primitives for the applied field and rotation rate."""

    terms: tuple[DriveTerm, ...] = ()

    def __add__(self, other: "DriveTimeline") -> "DriveTimeline":
        return DriveTimeline(self.terms + other.terms)

    def _with(self, term: DriveTerm) -> "DriveTimeline":
        return DriveTimeline(self.terms + (term,))

    def constant(self, target, axis, amplitude) -> "DriveTimeline":
        return self._with(DriveTerm(target, "constant", _axis(axis), amplitude))

    def step(self, target, axis, amplitude, t0) -> "DriveTimeline":
        return self._with(DriveTerm(target, "step", _axis(axis), amplitude, t0))

    def square(self, target, axis, amplitude, period, phase=0.0) -> "DriveTimeline":
        return self._with(DriveTerm(target, "square", _axis(axis), amplitude, period, phase))

    def sinusoid(self, target, axis, amplitude, frequency, phase=0.0) -> "DriveTimeline":
        return self._with(DriveTerm(target, "sinusoid", _axis(axis), amplitude, frequency, phase))

    def B(self, t: float) -> np.ndarray:
        return self._eval(t, "B")

    def Omega(self, t: float) -> np.ndarray:
        return self._eval(t, "Omega")

    def _eval(self, t, target):
        out = np.zeros(3)
        for term in self.terms:
            if term.target == target:
                out += term.value(t) * np.asarray(term.axis)
        return out

    def discontinuities(self, t0: float, t1: float) -> list[float]:
        pts = set()
        for term in self.terms:
            pts.update(term.discontinuities(t0, t1))
        return sorted(pts)

    def table(self) -> np.ndarray:
        if not self.terms:
            return np.zeros((0, 8))
        return np.array([t.row() for t in self.terms], dtype=float)

    def scaled(self, factor: float) -> "DriveTimeline":
        return DriveTimeline(tuple(
            DriveTerm(t.target, t.kind, t.axis, t.amplitude * factor, t.p1, t.p2) for t in self.terms
        ))

    def to_dict(self) -> list[dict]:
        return [
            {"target": t.target, "kind": t.kind, "axis": list(t.axis), "amplitude": t.amplitude,
             "p1": t.p1, "p2": t.p2}
            for t in self.terms
        ]

    @classmethod
    def from_dict(cls, rows: list[dict]) -> "DriveTimeline":
        return cls(tuple(DriveTerm(r["target"], r["kind"], tuple(r["axis"]), float(r["amplitude"]),
                                   float(r.get("p1", 0.0)), float(r.get("p2", 0.0))) for r in rows))


# ---------------------------------------------------------------------------
# right-hand side

def bloch_rhs(s: SpinState, drive: DriveTimeline, cfg: CellConfig, pump_on: bool,
              R_p: float | None = None, extra_bz: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Time derivatives (dPe/dt, dPn/dt) of the coupled Bloch equations."""
    Pe, Pn = s.Pe, s.Pn
    zhat = np.array([0.0, 0.0, 1.0])
    B = drive.B(s.t) + (cfg.bias_z + extra_bz) * zhat
    W = cfg.rotation_sign * drive.Omega(s.t)
    q = slowing_down_factor(Pe, cfg.q_model)
    Rp = (cfg.R_p_on if R_p is None else R_p) if pump_on else 0.0
    s_hat = np.asarray(cfg.pump_axis)
    a, n = cfg.alkali, cfg.noble
    Be = B + n.lambda_M * Pn
    Bn = B + a.lambda_M * Pe
    dPe = (a.gamma * np.cross(Be, Pe) + cfg.R_se_ne * Pn + Rp * (s_hat - Pe)
           - (a.R_sd + cfg.R_se_en) * Pe) / q + np.cross(W, Pe)
    dPn = n.gamma * np.cross(Bn, Pn) + np.cross(W, Pn) + cfg.R_se_en * Pe - (cfg.R_se_ne + n.R_sd) * Pn
    assert np.all(np.isfinite(dPe)) and np.all(np.isfinite(dPn)), "non-finite Bloch derivative"
    return dPe, dPn


# parameter vector layout for the compiled kernel
_P_GE, _P_GN, _P_LME, _P_LMN, _P_RSDE, _P_RSDN, _P_RSEEN, _P_RSENE, _P_RP = range(9)
_P_SX, _P_SY, _P_SZ, _P_BIAS, _P_QMODE, _P_Q0, _P_ROT, _P_EXTRA, _P_PIN = range(9, 18)


def pack_params(cfg: CellConfig, R_p: float = 0.0, pin_pe: bool = False,
                extra_bz: float = 0.0) -> np.ndarray:
    a, n = cfg.alkali, cfg.noble
    return np.array([
        a.gamma, n.gamma, a.lambda_M, n.lambda_M, a.R_sd, n.R_sd, cfg.R_se_en, cfg.R_se_ne, R_p,
        *cfg.pump_axis, cfg.bias_z, cfg.q_model.code, cfg.q_model.q0, cfg.rotation_sign,
        extra_bz, 1.0 if pin_pe else 0.0,
    ], dtype=float)


@njit(cache=True)
def _rhs(t, y, par, terms, tmid, out):
    bx = 0.0
    by = 0.0
    bz = 0.0
    wx = 0.0
    wy = 0.0
    wz = 0.0
    for i in range(terms.shape[0]):
        kind = int(terms[i, 1])
        amp = terms[i, 5]
        if kind == 0:
            v = amp
        elif kind == 1:
            # discontinuous terms are evaluated at the segment midpoint so both
            # segment ends see the same side of the jump
            v = amp if tmid >= terms[i, 6] else 0.0
        elif kind == 2:
            x = tmid / terms[i, 6] + terms[i, 7] / (2.0 * np.pi)
            v = amp if x - np.floor(x) < 0.5 else -amp
        else:
            v = amp * np.sin(2.0 * np.pi * terms[i, 6] * t + terms[i, 7])
        if terms[i, 0] == 0.0:
            bx += v * terms[i, 2]
            by += v * terms[i, 3]
            bz += v * terms[i, 4]
        else:
            wx += v * terms[i, 2]
            wy += v * terms[i, 3]
            wz += v * terms[i, 4]
    rot = par[15]
    wx *= rot
    wy *= rot
    wz *= rot
    bz += par[12] + par[16]
    ex, ey, ez = y[0], y[1], y[2]
    nx, ny, nz = y[3], y[4], y[5]
    lme = par[2]
    lmn = par[3]
    # noble
    Bx = bx + lme * ex
    By = by + lme * ey
    Bz = bz + lme * ez
    gn = par[1]
    rn = par[7] + par[5]
    ren = par[6]
    out[3] = gn * (By * nz - Bz * ny) + (wy * nz - wz * ny) + ren * ex - rn * nx
    out[4] = gn * (Bz * nx - Bx * nz) + (wz * nx - wx * nz) + ren * ey - rn * ny
    out[5] = gn * (Bx * ny - By * nx) + (wx * ny - wy * nx) + ren * ez - rn * nz
    if par[17] != 0.0:
        out[0] = 0.0
        out[1] = 0.0
        out[2] = 0.0
        return
    if par[13] == 0.0:
        p2 = ex * ex + ey * ey + ez * ez
        if p2 > 1.0:
            p2 = 1.0
        q = 4.0 / (2.0 - 4.0 / (3.0 + p2))
    else:
        q = par[14]
    Bx = bx + lmn * nx
    By = by + lmn * ny
    Bz = bz + lmn * nz
    ge = par[0]
    rp = par[8]
    re = par[4] + ren
    rne = par[7]
    iq = 1.0 / q
    out[0] = iq * (ge * (By * ez - Bz * ey) + rne * nx + rp * (par[9] - ex) - re * ex) + (wy * ez - wz * ey)
    out[1] = iq * (ge * (Bz * ex - Bx * ez) + rne * ny + rp * (par[10] - ey) - re * ey) + (wz * ex - wx * ez)
    out[2] = iq * (ge * (Bx * ey - By * ex) + rne * nz + rp * (par[11] - ez) - re * ez) + (wx * ey - wy * ex)


# Dormand-Prince 5(4) tableau with Shampine's 4th-order dense output
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_A = np.array([
    [0, 0, 0, 0, 0],
    [1 / 5, 0, 0, 0, 0],
    [3 / 40, 9 / 40, 0, 0, 0],
    [44 / 45, -56 / 15, 32 / 9, 0, 0],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
])
_B = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
_E = np.array([-71 / 57600, 0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
_PD = np.array([
    [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0, 0, 0, 0],
    [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

# kernel status codes
_OK, _UNDERFLOW, _NONFINITE, _MAXSTEPS = 0, 1, 2, 3


@njit(cache=True)
def _errnorm(e, y, yn, rtol, atol):
    s = 0.0
    for i in range(6):
        sc = atol + rtol * max(abs(y[i]), abs(yn[i]))
        s += (e[i] / sc) ** 2
    return np.sqrt(s / 6.0)


@njit(cache=True)
def _segment(y0, t0, t1, rtol, atol, par, terms, ts, out, C, A, Bw, E, PD, max_steps):
    """Adaptive DOPRI5 over [t0, t1] (no discontinuity inside).

    Samples the dense output at times ``ts`` (all within [t0, t1]) into ``out``.
    Returns (y1, status, t_fail, nsteps).
    """
    n = 6
    tmid = 0.5 * (t0 + t1)
    y = y0.copy()
    K = np.zeros((7, n))
    ytmp = np.zeros(n)
    ynew = np.zeros(n)
    err = np.zeros(n)
    _rhs(t0, y, par, terms, tmid, K[0])
    nts = ts.shape[0]
    isamp = 0
    while isamp < nts and ts[isamp] <= t0:
        for j in range(n):
            out[isamp, j] = y[j]
        isamp += 1
    span = t1 - t0
    if span <= 0.0:
        return y, _OK, t0, 0
    # initial step (Hairer's heuristic): deterministic given the state
    d0 = 0.0
    d1 = 0.0
    for j in range(n):
        sc = atol + rtol * abs(y[j])
        d0 += (y[j] / sc) ** 2
        d1 += (K[0, j] / sc) ** 2
    d0 = np.sqrt(d0 / n)
    d1 = np.sqrt(d1 / n)
    if d0 < 1e-5 or d1 < 1e-5:
        h = 1e-6
    else:
        h = 0.01 * d0 / d1
    h = min(h, span)
    t = t0
    rejected = False
    nsteps = 0
    while t < t1:
        last = False
        if t + h >= t1 or (t1 - (t + h)) < 1e-12 * span:
            h = t1 - t
            last = True
        for s in range(1, 6):
            for j in range(n):
                acc = 0.0
                for m in range(s):
                    acc += A[s, m] * K[m, j]
                ytmp[j] = y[j] + h * acc
            _rhs(t + C[s] * h, ytmp, par, terms, tmid, K[s])
        for j in range(n):
            acc = 0.0
            for m in range(6):
                acc += Bw[m] * K[m, j]
            ynew[j] = y[j] + h * acc
        _rhs(t + h, ynew, par, terms, tmid, K[6])
        for j in range(n):
            acc = 0.0
            for m in range(7):
                acc += E[m] * K[m, j]
            err[j] = h * acc
        en = _errnorm(err, y, ynew, rtol, atol)
        if not np.isfinite(en):
            return y, _NONFINITE, t, nsteps
        if en <= 1.0:
            tn = t1 if last else t + h
            while isamp < nts and ts[isamp] <= tn:
                th = (ts[isamp] - t) / h
                for j in range(n):
                    acc = 0.0
                    for m in range(7):
                        q = PD[m, 0] * th + PD[m, 1] * th ** 2 + PD[m, 2] * th ** 3 + PD[m, 3] * th ** 4
                        acc += K[m, j] * q
                    out[isamp, j] = y[j] + h * acc
                isamp += 1
            t = tn
            for j in range(n):
                y[j] = ynew[j]
                K[0, j] = K[6, j]
            nsteps += 1
            if nsteps > max_steps:
                return y, _MAXSTEPS, t, nsteps
            if en == 0.0:
                fac = 10.0
            else:
                fac = min(10.0, 0.9 * en ** -0.2)
            if rejected:
                fac = min(1.0, fac)
            rejected = False
            h *= fac
        else:
            h *= max(0.2, 0.9 * en ** -0.2)
            rejected = True
        if h < 1e-14 * max(1.0, abs(t)):
            return y, _UNDERFLOW, t, nsteps
    return y, _OK, t, nsteps


def integrate_vector(y0: np.ndarray, t0: float, t1: float, par: np.ndarray, terms: np.ndarray,
                     breakpoints=(), sample_times: np.ndarray | None = None,
                     rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL,
                     max_steps: int = 10_000_000):
    """Low-level integration of the packed state over [t0, t1].

    Returns (y1, samples) where samples has shape (len(sample_times), 6).
    """
    ts = np.empty(0) if sample_times is None else np.asarray(sample_times, dtype=float)
    out = np.empty((ts.shape[0], 6))
    # breakpoints closer than rounding to a segment end would create
    # zero-length segments; the jump then lands on that end instead
    eps = 1e-12 * max(1.0, abs(t0), abs(t1))
    edges = [t0] + [b for b in breakpoints if t0 + eps < b < t1 - eps] + [t1]
    y = np.asarray(y0, dtype=float)
    lo = 0
    for k in range(len(edges) - 1):
        a, b = edges[k], edges[k + 1]
        if k == len(edges) - 2:
            hi = ts.shape[0]
        else:
            hi = int(np.searchsorted(ts, b, side="left"))
        y, status, tf, _ = _segment(y, a, b, rtol, atol, par, terms, ts[lo:hi], out[lo:hi],
                                    _C, _A, _B, _E, _PD, max_steps)
        if status == _UNDERFLOW:
            raise IntegrationError("step-size underflow", tf, y)
        if status == _NONFINITE:
            raise IntegrationError("non-finite state", tf, y)
        if status == _MAXSTEPS:
            raise IntegrationError("step budget exhausted", tf, y)
        lo = hi
    return y, out


@dataclass
class Trajectory:
    t: np.ndarray
    Pe: np.ndarray
    Pn: np.ndarray
    final: SpinState = field(repr=False)


def integrate(s0: SpinState, drive: DriveTimeline, cfg: CellConfig, t1: float,
              rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL,
              sample_times=None, pump_on: bool = False, R_p: float | None = None,
              pin_pe: bool = False, extra_bz: float = 0.0) -> Trajectory:
    """Integrate from ``s0`` to ``t1``; steps never cross drive discontinuities."""
    if not t1 > s0.t:
        raise ValueError("t1 must be after the initial time")
    if not (rtol > 0 and atol > 0):
        raise ValueError("tolerances must be positive")
    rp = (cfg.R_p_on if R_p is None else R_p) if pump_on else 0.0
    par = pack_params(cfg, rp, pin_pe, extra_bz)
    ts = np.empty(0) if sample_times is None else np.asarray(sample_times, dtype=float)
    if ts.size and (ts[0] < s0.t or ts[-1] > t1 or np.any(np.diff(ts) < 0)):
        raise ValueError("sample times must be sorted and inside the integration span")
    y, out = integrate_vector(s0.as_vector(), s0.t, t1, par, drive.table(),
                              drive.discontinuities(s0.t, t1), ts, rtol, atol)
    return Trajectory(ts, out[:, :3], out[:, 3:], SpinState.from_vector(y, t1))


def rotate_z(v: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]])


def apply_magnetic_pulse(s: SpinState, area: float, cfg: CellConfig, mode: str = "impulse",
                         duration: float | None = None, p_sat: float = 0.99,
                         drive: DriveTimeline | None = None,
                         rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL) -> SpinState:
    """z-axis magnetic pulse rotating the noble-gas polarisation by ``area``.

    Impulse mode rotates P^n instantly and pins P^e to ``p_sat`` along the pump
    axis. Finite mode integrates the full dynamics with the pump on and a z
    field of area / (gamma_n * duration).
    """
    if abs(area) > math.pi + 1e-12:
        raise ValueError("pulse area must satisfy |area| <= pi")
    if mode == "impulse":
        return SpinState(p_sat * np.asarray(cfg.pump_axis), rotate_z(s.Pn, area), s.t)
    if mode != "finite":
        raise ValueError(f"unknown pulse mode {mode!r}")
    if duration is None or duration <= 0:
        raise ValueError("finite pulse needs a positive duration")
    b_pulse = area / (cfg.noble.gamma * duration)
    traj = integrate(s, drive or DriveTimeline(), cfg, s.t + duration, rtol, atol,
                     pump_on=True, extra_bz=b_pulse)
    return traj.final


def write_trajectory_csv(path, traj: Trajectory) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "Pe_x", "Pe_y", "Pe_z", "Pn_x", "Pn_y", "Pn_z"])
        for i in range(traj.t.shape[0]):
            w.writerow([repr(float(traj.t[i]))] + [repr(float(v)) for v in traj.Pe[i]]
                       + [repr(float(v)) for v in traj.Pn[i]])
