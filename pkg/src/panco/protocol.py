"""The pulsed measurement cycle, steady-state settling, signatures and the
continuous-wave reference magnetometers."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.optimize import brentq

from .dynamics import (
    DEFAULT_ATOL,
    DEFAULT_RTOL,
    DriveTimeline,
    SpinState,
    integrate_vector,
    pack_params,
    rotate_z,
)
from .model import CellConfig, SpeciesParams, hz_to_rad

__all__ = [
    "PulseSchedule",
    "MeasuredCycle",
    "SignatureSet",
    "ProtocolRun",
    "DCResponse",
    "SettleError",
    "LinearityError",
    "DegenerateSignaturesError",
    "ScheduleError",
    "iter_cycles",
    "run_protocol",
    "settle",
    "generate_signatures",
    "symmetry_map",
    "gram_condition",
    "run_cw_scc",
    "run_serf_reference",
    "mean_alkali_polarisation",
    "calibrate_alkali_relaxation",
    "balance_spin_exchange",
    "transient_decay_rate",
    "khe_schedule",
    "rbxe_fig2_schedule",
    "rbxe_experiment_schedule",
]

DEGENERACY_THRESHOLD = 1e8
DEFAULT_EPS_B = 1e-13                # 1e-4 nT
DEFAULT_EPS_OM = hz_to_rad(1e-4)     # 1e-4 Hz


class SettleError(RuntimeError):
    pass


class LinearityError(RuntimeError):
    pass


class ScheduleError(ValueError):
    pass


class DegenerateSignaturesError(RuntimeError):
    def __init__(self, msg: str, condition: float, signatures: "SignatureSet | None" = None):
        super().__init__(msg)
        self.condition = condition
        self.signatures = signatures


@dataclass(frozen=True)
class PulseSchedule:
    """Timing of the pump / magnetic-pulse cycle.

    Each pump interval ``tau`` starts with a magnetic pulse of alternating sign
    applied while the pump is on, followed by a dark window in which P^e_x is
    sampled. ``pump_mode`` 'pinned' holds P^e at ``p_sat`` along the pump axis
    for the whole pump phase; 'finite' integrates the pump rate R_p_on.
    """

    tau: float = 20e-3
    pump_duration: float = 1e-3
    pulse_area: float = math.pi / 2
    pulse_mode: str = "impulse"
    pulse_duration: float = 0.0
    pump_mode: str = "pinned"
    p_sat: float = 0.99
    sample_rate: float = 125e3
    measure_axis: str = "x"
    guard_pre: float = 0.0
    guard_post: float = 0.0
    settle_time: float = 40.0

    def __post_init__(self):
        if not (0 < self.pump_duration < self.tau):
            raise ScheduleError("pump_duration must lie in (0, tau)")
        if abs(self.pulse_area) > math.pi:
            raise ScheduleError("|pulse_area| must be <= pi")
        if self.pulse_mode not in ("impulse", "finite"):
            raise ScheduleError(f"unknown pulse_mode {self.pulse_mode!r}")
        if self.pump_mode not in ("pinned", "finite"):
            raise ScheduleError(f"unknown pump_mode {self.pump_mode!r}")
        if self.pulse_mode == "finite" and not (0 < self.pulse_duration <= self.pump_duration):
            raise ScheduleError("finite pulses need 0 < pulse_duration <= pump_duration")
        if self.measure_axis != "x":
            raise ScheduleError("only the x probe axis is supported")
        if not (0 < self.p_sat <= 1):
            raise ScheduleError("p_sat must lie in (0, 1]")
        if self.guard_pre < 0 or self.guard_post < 0:
            raise ScheduleError("guard delays must be >= 0")
        if self.samples_per_window < 16:
            raise ScheduleError("fewer than 16 samples per window")

    @property
    def window_length(self) -> float:
        return self.tau - self.pump_duration - self.guard_pre - self.guard_post

    @property
    def samples_per_window(self) -> int:
        return int(math.floor(self.window_length * self.sample_rate + 1e-9))

    @property
    def cycle_length(self) -> float:
        return 2 * self.tau

    @property
    def samples_per_cycle(self) -> int:
        return 2 * self.samples_per_window

    def window_offsets(self) -> np.ndarray:
        """Sample times within one pump interval, measured from its start."""
        n = self.samples_per_window
        return self.pump_duration + self.guard_pre + (np.arange(n) + 0.5) / self.sample_rate

    def cycle_offsets(self) -> np.ndarray:
        w = self.window_offsets()
        return np.concatenate([w, w + self.tau])

    def to_dict(self) -> dict:
        return asdict(self)


def khe_schedule(**kw) -> PulseSchedule:
    return PulseSchedule(**kw)


def rbxe_fig2_schedule(**kw) -> PulseSchedule:
    base = dict(tau=10e-3, pump_duration=0.3e-3, pulse_mode="finite", pulse_duration=0.3e-3,
                pump_mode="finite", settle_time=60.0)
    base.update(kw)
    return PulseSchedule(**base)


def rbxe_experiment_schedule(**kw) -> PulseSchedule:
    base = dict(tau=2e-3, pump_duration=0.3e-3, pulse_mode="impulse", pump_mode="pinned",
                settle_time=60.0)
    base.update(kw)
    return PulseSchedule(**base)


@dataclass
class MeasuredCycle:
    """One measurement cycle: the [-pulse, +pulse] window pair."""

    index: int
    t: np.ndarray              # absolute sample times
    samples: np.ndarray        # noisy P^e_x
    truth: np.ndarray          # noiseless P^e_x
    truth_y: np.ndarray        # noiseless P^e_y (for the symmetry map)
    noise_sigma: float
    rng_seed: int | None
    start: SpinState = field(repr=False)
    pn_after_pulse: np.ndarray = field(default=None, repr=False)  # (2, 3)
    pn_before_pulse: np.ndarray = field(default=None, repr=False)  # (2, 3)
    states: np.ndarray | None = field(default=None, repr=False)    # (n, 6) if kept
    end: SpinState | None = field(default=None, repr=False)

    @property
    def window_boundaries(self) -> tuple[int, int, int]:
        n = self.samples.shape[0] // 2
        return (0, n, 2 * n)


@dataclass
class ProtocolRun:
    cycles: list[MeasuredCycle]
    final: SpinState
    trajectory: np.ndarray | None = None   # (n, 7): t, Pe, Pn at the sample grid


class _Runner:
    """Pre-packed parameters for fast repeated cycles."""

    def __init__(self, cfg: CellConfig, sched: PulseSchedule, drive: DriveTimeline,
                 rtol: float, atol: float):
        self.cfg, self.sched, self.drive = cfg, sched, drive
        self.rtol, self.atol = rtol, atol
        self.terms = drive.table()
        pinned = sched.pump_mode == "pinned"
        rp = 0.0 if pinned else cfg.R_p_on
        if not pinned and cfg.R_p_on * sched.pump_duration < 3.0:
            raise ScheduleError("R_p_on * pump_duration < 3: pump cannot saturate the alkali")
        self.par_free = pack_params(cfg)
        self.par_pump = pack_params(cfg, rp, pinned)
        self.pinned = pinned
        self.offsets = sched.window_offsets()
        self.s_hat = np.asarray(cfg.pump_axis)
        if sched.pulse_mode == "finite":
            self.b_pulse = sched.pulse_area / (cfg.noble.gamma * sched.pulse_duration)

    def _seg(self, y, a, b, par, ts=None):
        return integrate_vector(y, a, b, par, self.terms, self.drive.discontinuities(a, b),
                                ts, self.rtol, self.atol)

    def window(self, y: np.ndarray, t0: float, sign: int):
        """One pump interval starting at t0. Returns (y_end, samples (n, 6), Pn before/after pulse)."""
        sc = self.sched
        pn_before = y[3:6].copy()
        y = y.copy()
        tp = t0 + sc.pump_duration
        if sc.pulse_mode == "impulse":
            y[3:6] = rotate_z(y[3:6], sign * sc.pulse_area)
            y[0:3] = sc.p_sat * self.s_hat
            t_after = t0
        else:
            if self.pinned:
                y[0:3] = sc.p_sat * self.s_hat
            area = sign * self.b_pulse
            par = self.par_pump.copy()
            par[16] = area
            t_after = t0 + sc.pulse_duration
            y, _ = self._seg(y, t0, t_after, par)
        pn_after = y[3:6].copy()
        if self.pinned:
            y[0:3] = sc.p_sat * self.s_hat
        if tp > t_after:
            y, _ = self._seg(y, t_after, tp, self.par_pump)
        if self.pinned:
            y[0:3] = sc.p_sat * self.s_hat
        ts = t0 + self.offsets
        y, out = self._seg(y, tp, t0 + sc.tau, self.par_free, ts)
        return y, out, pn_before, pn_after

    def cycle(self, y: np.ndarray, t0: float):
        y1, o1, b1, a1 = self.window(y, t0, -1)
        y2, o2, b2, a2 = self.window(y1, t0 + self.sched.tau, +1)
        return y2, np.vstack([o1, o2]), np.array([b1, b2]), np.array([a1, a2])


def iter_cycles(cfg: CellConfig, schedule: PulseSchedule, drive: DriveTimeline | None = None,
                n_cycles: int | None = None, s0: SpinState | None = None,
                noise_sigma: float = 0.0, seed: int | None = None, keep_states: bool = False,
                rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL) -> Iterator[MeasuredCycle]:
    """Generate measurement cycles one by one (endless if ``n_cycles`` is None).

    Noise for all cycles comes from one generator seeded with ``seed``.
    """
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    if noise_sigma > 0 and seed is None:
        raise ValueError("a seed is required for noisy runs")
    drive = drive or DriveTimeline()
    run = _Runner(cfg, schedule, drive, rtol, atol)
    s0 = s0 or SpinState(schedule.p_sat * np.asarray(cfg.pump_axis), (0, 0, 1), 0.0)
    y = s0.as_vector()
    rng = np.random.default_rng(seed)
    offs = schedule.cycle_offsets()
    k = 0
    while n_cycles is None or k < n_cycles:
        # absolute times from the cycle count, so edges of drives defined on
        # round times do not drift against the cycle grid
        t = s0.t + k * schedule.cycle_length
        start = SpinState.from_vector(y, t)
        y, out, pb, pa = run.cycle(y, t)
        truth = out[:, 0].copy()
        noise = rng.normal(0.0, noise_sigma, truth.shape) if noise_sigma > 0 else 0.0
        yield MeasuredCycle(k, t + offs, truth + noise, truth, out[:, 1].copy(), noise_sigma, seed,
                            start, pa, pb, out if keep_states else None,
                            SpinState.from_vector(y, t + schedule.cycle_length))
        k += 1


def run_protocol(cfg: CellConfig, schedule: PulseSchedule, drive: DriveTimeline | None = None,
                 duration: float | None = None, noise_sigma: float = 0.0, seed: int | None = None,
                 s0: SpinState | None = None, keep_trajectory: bool = False,
                 rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL) -> ProtocolRun:
    """Run whole cycles covering ``duration`` seconds."""
    duration = schedule.cycle_length if duration is None else duration
    if duration < schedule.cycle_length - 1e-12:
        raise ScheduleError("duration must cover at least one cycle (2 tau)")
    n = int(math.floor(duration / schedule.cycle_length + 1e-9))
    s0 = s0 or SpinState(schedule.p_sat * np.asarray(cfg.pump_axis), (0, 0, 1), 0.0)
    cycles = list(iter_cycles(cfg, schedule, drive, n, s0, noise_sigma, seed, keep_trajectory,
                              rtol, atol))
    final = cycles[-1].end
    traj = None
    if keep_trajectory:
        traj = np.vstack([np.column_stack([c.t, c.states]) for c in cycles])
        for c in cycles:
            c.states = None
    return ProtocolRun(cycles, final, traj)


# ---------------------------------------------------------------------------
# steady state

def _cycle_rms_diff(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    return float(np.sqrt(np.mean((a - b) ** 2))), float(np.sqrt(np.mean(b ** 2)))


@dataclass
class SettleResult:
    state: SpinState
    last: MeasuredCycle
    previous: MeasuredCycle
    settle_time: float
    method: str
    periodicity: float     # consecutive-cycle RMS difference / cycle RMS

    def __iter__(self):
        # allows ``state, last = settle(...)[:2]`` style unpacking
        return iter((self.state, self.last))


def _is_static(drive: DriveTimeline) -> bool:
    return all(t.kind == "constant" for t in drive.terms)


def settle(cfg: CellConfig, schedule: PulseSchedule, drive: DriveTimeline | None = None,
           settle_time: float | None = None, method: str = "run", threshold: float = 1e-8,
           floor: float = 1e-15, s0: SpinState | None = None,
           rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL) -> SettleResult:
    """Bring the cycle to its periodic steady state.

    ``method='run'`` simply runs the protocol for ``settle_time``. ``'shoot'``
    solves cycle(y) = y by Newton iteration on the cycle-boundary state (only
    for time-invariant drives) and is equivalent to an infinitely long run.
    Either way the last two cycles must agree to ``threshold`` relative RMS.
    """
    drive = drive or DriveTimeline()
    settle_time = schedule.settle_time if settle_time is None else settle_time
    run = _Runner(cfg, schedule, drive, rtol, atol)
    s0 = s0 or SpinState(schedule.p_sat * np.asarray(cfg.pump_axis), (0, 0, 1), 0.0)
    y, t = s0.as_vector(), s0.t
    L = schedule.cycle_length
    if method == "run":
        n = max(2, int(math.ceil(settle_time / L - 1e-9)))
        for _ in range(n - 2):
            y, _, _, _ = run.cycle(y, t)
            t += L
    elif method == "shoot":
        if not _is_static(drive):
            raise ValueError("shooting requires a time-invariant drive")
        y = _shoot(run, y, t)
        settle_time = 0.0
    else:
        raise ValueError(f"unknown settle method {method!r}")
    cycles = []
    for _ in range(2):
        start = SpinState.from_vector(y, t)
        y, out, pb, pa = run.cycle(y, t)
        cycles.append(MeasuredCycle(0, t + schedule.cycle_offsets(), out[:, 0].copy(),
                                    out[:, 0].copy(), out[:, 1].copy(), 0.0, None, start, pa, pb))
        t += L
    prev, last = cycles
    a = np.concatenate([prev.truth, prev.truth_y])
    b = np.concatenate([last.truth, last.truth_y])
    d, r = _cycle_rms_diff(a, b)
    rel = d / r if r > 0 else 0.0
    if d > threshold * r + floor:
        raise SettleError(f"cycles not periodic after settling: rms diff {d:.3e} vs cycle rms {r:.3e}")
    return SettleResult(last.start, last, prev, settle_time, method, rel)


def _shoot(run: _Runner, y: np.ndarray, t: float, iters: int = 8, h: float = 1e-7) -> np.ndarray:
    # Newton on G(y) = cycle(y) - y with a forward-difference Jacobian. The
    # least-squares (minimum-norm) step copes with the directions the cycle map
    # ignores. Without noble-gas relaxation or exchange |P^n| is conserved, so
    # it is restored after every step instead of being left to drift.
    cfg = run.cfg
    keep_norm = cfg.noble.R_sd == 0 and cfg.R_se_en == 0 and cfg.R_se_ne == 0
    pn_norm = float(np.linalg.norm(y[3:6]))
    for _ in range(iters):
        y1 = run.cycle(y, t)[0]
        g = y1 - y
        if np.max(np.abs(g)) < 1e-15:
            break
        J = np.empty((6, 6))
        for j in range(6):
            yp = y.copy()
            yp[j] += h
            J[:, j] = (run.cycle(yp, t)[0] - y1) / h
        step = np.linalg.lstsq(J - np.eye(6), -g, rcond=1e-8)[0]
        y = y + step
        if keep_norm:
            y[3:6] *= pn_norm / np.linalg.norm(y[3:6])
        if np.max(np.abs(step)) < 1e-14:
            break
    return y


# ---------------------------------------------------------------------------
# signatures

def symmetry_map(x_drive_y_trace) -> np.ndarray:
    """y-drive signature from the P^e_y trace of the matching x-drive run.

    Rotating the drive by +90 degrees about z rotates the response the same
    way, so P^e_x under a y drive equals -P^e_y under the x drive.
    """
    trace = getattr(x_drive_y_trace, "truth_y", x_drive_y_trace)
    return -np.asarray(trace, dtype=float)


def gram_condition(columns: np.ndarray) -> float:
    """Condition number of the Gram matrix of column-normalised signatures."""
    G = np.asarray(columns, dtype=float)
    norms = np.linalg.norm(G, axis=0)
    if np.any(norms == 0):
        return math.inf
    Gn = G / norms
    ev = np.linalg.eigvalsh(Gn.T @ Gn)
    if ev[0] <= 0:
        return math.inf
    return float(ev[-1] / ev[0])


@dataclass
class SignatureSet:
    """Unit-drive P^e_x responses over one cycle (per tesla / per rad/s)."""

    t: np.ndarray
    S_Bx: np.ndarray
    S_By: np.ndarray
    S_Omx: np.ndarray
    S_Omy: np.ndarray
    meta: dict = field(default_factory=dict)

    NAMES = ("S_Bx", "S_By", "S_Omx", "S_Omy")

    def __post_init__(self):
        n = len(self.t)
        for name in self.NAMES:
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n,):
                raise ValueError(f"{name} has shape {arr.shape}, expected ({n},)")
            setattr(self, name, arr)

    def matrix(self) -> np.ndarray:
        return np.column_stack([self.S_Bx, self.S_By, self.S_Omx, self.S_Omy])

    @property
    def n(self) -> int:
        return len(self.t)

    def condition(self) -> float:
        return gram_condition(self.matrix())

    def to_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", *self.NAMES])
            for i in range(self.n):
                w.writerow([f"{self.t[i]:.17g}"] + [f"{getattr(self, k)[i]:.17g}" for k in self.NAMES])
        path.with_suffix(".json").write_text(json.dumps(self.meta, indent=2, sort_keys=True))

    @classmethod
    def from_csv(cls, path) -> "SignatureSet":
        path = Path(path)
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        meta_path = path.with_suffix(".json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        return cls(data[:, 0], data[:, 1], data[:, 2], data[:, 3], data[:, 4], meta)


def _settled_cycle(cfg, schedule, drive, settle_kw):
    return settle(cfg, schedule, drive, **settle_kw).last


def generate_signatures(cfg: CellConfig, schedule: PulseSchedule, eps_B: float = DEFAULT_EPS_B,
                        eps_Om: float = DEFAULT_EPS_OM, check_linearity: bool = True,
                        check_degeneracy: bool = True, linearity_tol: float = 0.01,
                        degeneracy_threshold: float = DEGENERACY_THRESHOLD,
                        **settle_kw) -> SignatureSet:
    """Four unit-drive signatures from a B_x run and an Omega_x run.

    The y-drive signatures come from the same runs via :func:`symmetry_map`.
    """
    if not (eps_B > 0 and eps_Om > 0):
        raise ValueError("signature drives must be positive")
    if not np.allclose(cfg.pump_axis, (0, 0, 1)):
        raise ValueError("the symmetry map needs the pump axis along z")

    def pair(eb, eo):
        cb = _settled_cycle(cfg, schedule, DriveTimeline().constant("B", "x", eb), settle_kw)
        co = _settled_cycle(cfg, schedule, DriveTimeline().constant("Omega", "x", eo), settle_kw)
        return (cb.truth / eb, symmetry_map(cb) / eb, co.truth / eo, symmetry_map(co) / eo)

    cols = pair(eps_B, eps_Om)
    lin_dev = None
    if check_linearity:
        half = pair(eps_B / 2, eps_Om / 2)
        lin_dev = 0.0
        for a, b in zip(cols, half):
            scale = np.max(np.abs(a))
            if scale > 0:
                lin_dev = max(lin_dev, float(np.max(np.abs(a - b)) / scale))
        if lin_dev > linearity_tol:
            raise LinearityError(f"signatures change by {lin_dev:.2%} when the drive is halved")
    meta = {
        "cfg_hash": cfg.fingerprint(),
        "bias_z_nT": cfg.bias_z / 1e-9,
        "eps_B_T": eps_B,
        "eps_Om_rad_s": eps_Om,
        "settle_time_s": settle_kw.get("settle_time", schedule.settle_time),
        "settle_method": settle_kw.get("method", "run"),
        "schedule": schedule.to_dict(),
        "linearity_deviation": lin_dev,
    }
    sig = SignatureSet(schedule.cycle_offsets(), *cols, meta=meta)
    cond = sig.condition()
    sig.meta["gram_condition"] = cond
    if check_degeneracy and not cond < degeneracy_threshold:
        raise DegenerateSignaturesError(
            f"signatures are nearly degenerate (Gram condition {cond:.3e})", cond, sig)
    return sig


# ---------------------------------------------------------------------------
# continuous-wave references

@dataclass(frozen=True)
class DCResponse:
    """Steady transverse alkali polarisation per unit drive."""

    pe_x: float
    pe_y: float
    state: np.ndarray

    @property
    def magnitude(self) -> float:
        return math.hypot(self.pe_x, self.pe_y)


def _steady_state(cfg: CellConfig, drive: DriveTimeline, R_p: float, y0: np.ndarray,
                  iters: int = 4) -> np.ndarray:
    """Steady state for a small transverse drive.

    ``y0`` must be the undriven fixed point (longitudinal only). The drive
    perturbs the longitudinal components at second order only, so Newton
    iterations are done on the four transverse components.
    """
    from .dynamics import bloch_rhs

    pump = R_p > 0
    idx = np.array([0, 1, 3, 4])

    def f(y):
        a, b = bloch_rhs(SpinState(y[:3], y[3:], 0.0), drive, cfg, pump, R_p=R_p)
        return np.concatenate([a, b])[idx]

    y = y0.astype(float).copy()
    J = np.empty((4, 4))
    h = 1e-6
    for j, k in enumerate(idx):
        yp, ym = y.copy(), y.copy()
        yp[k] += h
        ym[k] -= h
        J[:, j] = (f(yp) - f(ym)) / (2 * h)
    rs = np.max(np.abs(J), axis=1)
    rs[rs == 0] = 1.0
    Js = J / rs[:, None]
    if np.linalg.cond(Js) > 1e14:
        raise SettleError("continuous-wave steady state is not unique")
    for _ in range(iters):
        g = f(y)
        step = np.linalg.solve(Js, -g / rs)
        y[idx] += step
        if np.max(np.abs(step)) <= 1e-14 * max(1e-300, np.max(np.abs(y[idx]))):
            break
    return y


def _cw_start(cfg: CellConfig, R_p: float, Pn_z: float) -> np.ndarray:
    """Undriven continuous-pumping fixed point (pump along z)."""
    if not np.allclose(cfg.pump_axis, (0, 0, 1)):
        raise ValueError("continuous-wave references assume the pump along z")
    a = R_p + cfg.alkali.R_sd + cfg.R_se_en
    rn = cfg.R_se_ne + cfg.noble.R_sd
    if rn > 0:
        # 0 = R_p + R_se_ne Pn - a Pe ;  0 = R_se_en Pe - rn Pn
        pe = R_p / (a - cfg.R_se_ne * cfg.R_se_en / rn)
        pn = cfg.R_se_en * pe / rn
    else:
        # the noble polarisation is conserved; its length is an input
        pn = Pn_z
        pe = R_p / a if a > 0 else 0.0
    return np.array([0.0, 0.0, pe, 0.0, 0.0, pn])


def run_cw_scc(cfg: CellConfig, drive: DriveTimeline, R_p: float | None = None,
               Pn_z: float = 1.0) -> DCResponse:
    """Steady continuous-pumping response per unit drive amplitude.

    ``drive`` should hold a single small constant term; the returned
    components are P^e divided by that amplitude. With no noble relaxation
    the noble polarisation length is a free parameter, set by ``Pn_z``.
    """
    R_p = cfg.R_p_cw if R_p is None else R_p
    amps = [t.amplitude for t in drive.terms]
    scale = amps[0] if len(amps) == 1 and amps[0] != 0 else 1.0
    y = _steady_state(cfg, drive, R_p, _cw_start(cfg, R_p, Pn_z))
    return DCResponse(y[0] / scale, y[1] / scale, y)


def serf_config(cfg: CellConfig) -> CellConfig:
    """Alkali-only version of ``cfg``: no noble gas, no spin exchange, zero bias."""
    noble = SpeciesParams(cfg.noble.name, cfg.noble.gamma, 0.0, cfg.noble.R_sd)
    alkali = replace(cfg.alkali)
    return replace(cfg, alkali=alkali, noble=noble, R_se_en=0.0, R_se_ne=0.0, bias_z=0.0)


def run_serf_reference(cfg: CellConfig, eps_B: float = 1e-13, axis: str = "x",
                       R_p: float | None = None) -> DCResponse:
    """Alkali-only CW magnetometer response per tesla of transverse field."""
    c = serf_config(cfg)
    return run_cw_scc(c, DriveTimeline().constant("B", axis, eps_B), R_p=R_p)


def serf_closed_form(cfg: CellConfig, R_p: float | None = None) -> float:
    """|dP^e_perp / dB_perp| of the zero-field alkali-only CW magnetometer."""
    R_p = cfg.R_p_cw if R_p is None else R_p
    r = R_p + cfg.alkali.R_sd
    return cfg.alkali.gamma * (R_p / r) / r


# ---------------------------------------------------------------------------
# calibration helpers

def mean_alkali_polarisation(cfg: CellConfig, schedule: PulseSchedule,
                             rtol: float = 1e-10, atol: float = 1e-13) -> float:
    """Time average of P^e_z over one pump interval with no transverse drive."""
    run = _Runner(cfg, schedule, DriveTimeline(), rtol, atol)
    y = np.concatenate([schedule.p_sat * np.asarray(cfg.pump_axis), [0.0, 0.0, 1.0]])
    # two windows to forget the initial state in finite-pump mode
    y, _, _, _ = run.window(y, 0.0, +1)
    sc = schedule
    yy = y.copy()
    if sc.pulse_mode == "impulse" or run.pinned:
        yy[0:3] = sc.p_sat * run.s_hat
    n = 4000
    tp = sc.pump_duration
    if run.pinned:
        pump_mean = sc.p_sat * run.s_hat[2]
        y0 = yy
    else:
        ts = tp * (np.arange(n) + 0.5) / n
        y0, out = integrate_vector(yy, 0.0, tp, run.par_pump, run.terms, (), ts, rtol, atol)
        pump_mean = float(np.mean(out[:, 2]))
    if run.pinned:
        y0 = y0.copy()
        y0[0:3] = sc.p_sat * run.s_hat
    ts = tp + (sc.tau - tp) * (np.arange(n) + 0.5) / n
    _, out = integrate_vector(y0, tp, sc.tau, run.par_free, run.terms, (), ts, rtol, atol)
    free_mean = float(np.mean(out[:, 2]))
    return (pump_mean * tp + free_mean * (sc.tau - tp)) / sc.tau


def calibrate_alkali_relaxation(cfg: CellConfig, schedule: PulseSchedule, target: float,
                                bracket=(1.0, 5000.0)) -> float:
    """Alkali R_sd that gives the requested duty-cycle mean of P^e_z."""
    def g(r):
        c = replace(cfg, alkali=replace(cfg.alkali, R_sd=r))
        return mean_alkali_polarisation(c, schedule) - target
    return brentq(g, *bracket, xtol=1e-10, rtol=1e-12)


def balance_spin_exchange(cfg: CellConfig, schedule: PulseSchedule, Pn_z: float = 1.0) -> CellConfig:
    """Set R_se_en so that spin-exchange pumping holds the noble gas at ``Pn_z``.

    Balance: R_se_en * <P^e_z> = (R_se_ne + R_sd^n) * Pn_z.
    """
    c0 = replace(cfg, R_se_en=0.0)
    m = mean_alkali_polarisation(c0, schedule)
    r = (cfg.R_se_ne + cfg.noble.R_sd) * Pn_z / m
    # the extra alkali loss from R_se_en is tiny; iterate once for consistency
    m = mean_alkali_polarisation(replace(cfg, R_se_en=r), schedule)
    r = (cfg.R_se_ne + cfg.noble.R_sd) * Pn_z / m
    return replace(cfg, R_se_en=r)


def transient_decay_rate(cfg: CellConfig, schedule: PulseSchedule, s: SpinState | None = None,
                         h: float = 1e-7) -> float:
    """Slowest decay rate (1/s) of transverse noble-gas transients.

    Taken from the eigenvalues of the finite-difference Jacobian of the cycle
    map at the undriven steady state, restricted to eigenvectors dominated by
    the transverse noble components (among the noble entries; the alkali
    entries of an eigenvector can be large because P^e is slaved to P^n).
    """
    run = _Runner(cfg, schedule, DriveTimeline(), 1e-10, 1e-13)
    if s is None:
        s = settle(cfg, schedule, settle_time=min(schedule.settle_time, 10.0)).state
    y = s.as_vector()
    y1 = run.cycle(y, s.t)[0]
    J = np.empty((6, 6))
    for j in range(6):
        yp = y.copy()
        yp[j] += h
        J[:, j] = (run.cycle(yp, s.t)[0] - y1) / h
    ev, vec = np.linalg.eig(J)
    rates = []
    for k in range(6):
        v = np.abs(vec[:, k])
        if abs(ev[k]) > 1e-12 and v[3] ** 2 + v[4] ** 2 > 0.5 * np.sum(v[3:] ** 2):
            rates.append(-math.log(abs(ev[k])) / schedule.cycle_length)
    if not rates:
        raise SettleError("no transverse noble-gas mode found")
    return float(min(rates))
