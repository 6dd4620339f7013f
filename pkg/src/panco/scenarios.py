"""Pre-built emulations of the simulated figures and experimental procedures.

Every scenario is described by a plain JSON-able dict (display units) so a run
directory's ``config.json`` reproduces it exactly.
"""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .dynamics import DriveTimeline, SpinState
from .estimation import (
    bias_scan,
    crosstalk,
    fit_trace,
    suppression_factor,
)
from .model import (
    ConfigError,
    TWO_PI,
    config_from_display,
    config_to_display,
    k_he3_idealised,
    rb_xe_fig2,
)
from .protocol import (
    PulseSchedule,
    SignatureSet,
    balance_spin_exchange,
    generate_signatures,
    gram_condition,
    khe_schedule,
    rbxe_experiment_schedule,
    rbxe_fig2_schedule,
    run_protocol,
    settle,
    transient_decay_rate,
)

__all__ = [
    "SCENARIOS",
    "ScenarioResult",
    "default_spec",
    "validate_spec",
    "apply_override",
    "build_cell",
    "build_schedule",
    "run_scenario",
    "write_run_dir",
    "scenario_fig2",
    "scenario_fig7",
    "scenario_square_wave",
    "scenario_step_decomposition",
    "scenario_wobble",
]

PT = 1e-12
UHZ = TWO_PI * 1e-6   # rad/s per uHz

# schedule display fields: key -> (attribute, scale to SI)
_SCHEDULE_FIELDS = {
    "tau_ms": ("tau", 1e-3),
    "pump_duration_ms": ("pump_duration", 1e-3),
    "pulse_area_rad": ("pulse_area", 1.0),
    "pulse_mode": ("pulse_mode", None),
    "pulse_duration_ms": ("pulse_duration", 1e-3),
    "pump_mode": ("pump_mode", None),
    "p_sat": ("p_sat", 1.0),
    "sample_rate_kSps": ("sample_rate", 1e3),
    "measure_axis": ("measure_axis", None),
    "guard_pre_ms": ("guard_pre", 1e-3),
    "guard_post_ms": ("guard_post", 1e-3),
    "settle_time_s": ("settle_time", 1.0),
}


def schedule_to_display(s: PulseSchedule) -> dict:
    return {k: (getattr(s, a) if sc is None else getattr(s, a) / sc)
            for k, (a, sc) in _SCHEDULE_FIELDS.items()}


def build_schedule(d: dict, path: str = "schedule") -> PulseSchedule:
    kw = {}
    for k, v in d.items():
        if k not in _SCHEDULE_FIELDS:
            raise ConfigError(f"unknown key '{path}.{k}'")
        a, sc = _SCHEDULE_FIELDS[k]
        kw[a] = v if sc is None else float(v) * sc
    return PulseSchedule(**kw)


# scenario-specific drive / analysis defaults (display units: pT, uHz, s, Hz, nT)
_DRIVE_DEFAULTS: dict[str, dict[str, Any]] = {
    "fig2": {"B_x": 1.43, "B_y": 1.43, "Om_x": 269.0, "Om_y": 269.0},
    "fig7": {},
    "square_wave": {"amp_x": 70.0, "amp_y": 100.0, "period_x": 10.0, "period_y": 14.0},
    "step_decomposition": {"step_amp": 70.0, "n_steps": 70, "spacing": 2.0},
    "wobble": {"omega_peak": 100.0, "wobble_freq": 0.1, "B_drift": 25.0, "drift_freq": 1.0 / 60.0},
}

_ANALYSIS_DEFAULTS: dict[str, dict[str, Any]] = {
    "fig2": {"balance_spin_exchange": True},
    "fig7": {"bias_min_nT": 95.0, "bias_max_nT": 115.0, "n_points": 41, "crosstalk_nominal_nT": 106.3,
             "crosstalk_offset_nT": 0.2},
    "square_wave": {"balance_spin_exchange": True, "duration_s": 40.0, "suppression_window_s": 4.0},
    "step_decomposition": {"balance_spin_exchange": True},
    "wobble": {"balance_spin_exchange": True, "duration_s": 60.0, "sig_bias_offset_nT": 0.0},
}

_DRIVE_UNITS = {
    "B_x": "pT", "B_y": "pT", "Om_x": "uHz", "Om_y": "uHz",
    "amp_x": "pT", "amp_y": "pT", "period_x": "s", "period_y": "s",
    "step_amp": "pT", "n_steps": "count", "spacing": "s",
    "omega_peak": "uHz (about y)", "wobble_freq": "Hz", "B_drift": "pT (along x)", "drift_freq": "Hz",
}


def default_spec(name: str) -> dict:
    """Full default configuration for a registered scenario."""
    if name not in SCENARIOS:
        raise ConfigError(f"unknown scenario '{name}' (choose from {', '.join(sorted(SCENARIOS))})")
    if name == "fig7":
        cell, sched = k_he3_idealised(), khe_schedule()
    elif name == "fig2":
        cell, sched = rb_xe_fig2(), rbxe_fig2_schedule()
    else:
        cell, sched = rb_xe_fig2(), rbxe_experiment_schedule()
    return {
        "scenario": name,
        "cell": config_to_display(cell),
        "schedule": schedule_to_display(sched),
        "drive": dict(_DRIVE_DEFAULTS[name]),
        "analysis": dict(_ANALYSIS_DEFAULTS[name]),
        "noise_sigma": 0.0,
        "seed": 0,
    }


_TOP_KEYS = {"scenario", "cell", "schedule", "drive", "analysis", "noise_sigma", "seed", "rtol", "atol"}


def validate_spec(spec: dict) -> None:
    """Reject unknown keys anywhere in the spec (error names the dotted path)."""
    for k in spec:
        if k not in _TOP_KEYS:
            raise ConfigError(f"unknown key '{k}'")
    name = spec.get("scenario")
    if name not in SCENARIOS:
        raise ConfigError(f"unknown scenario '{name}'")
    for k in spec.get("drive", {}):
        if k not in _DRIVE_DEFAULTS[name]:
            raise ConfigError(f"unknown key 'drive.{k}'")
    for k in spec.get("analysis", {}):
        if k not in _ANALYSIS_DEFAULTS[name]:
            raise ConfigError(f"unknown key 'analysis.{k}'")
    build_cell(spec)
    build_schedule(spec.get("schedule", {}))
    if spec.get("noise_sigma", 0.0) > 0 and spec.get("seed") is None:
        raise ConfigError("a seed is required for noisy runs")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(spec: dict, assignment: str) -> dict:
    """Apply one ``dotted.key=value`` override; the key must already exist."""
    if "=" not in assignment:
        raise ConfigError(f"override '{assignment}' is not of the form key=value")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = spec
    for i, p in enumerate(parts[:-1]):
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown key '{'.'.join(parts[:i + 1])}'")
        node = node[p]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown key '{key.strip()}'")
    node[parts[-1]] = _parse_value(text)
    return spec


def build_cell(spec: dict):
    return config_from_display(spec["cell"], "cell")


@dataclass
class ScenarioResult:
    """Tabular outputs plus a JSON-able report."""

    traces: dict[str, np.ndarray] = field(default_factory=dict)
    channels: dict[str, np.ndarray] = field(default_factory=dict)
    report: dict = field(default_factory=dict)
    signatures: SignatureSet | None = None


def _tols(spec):
    return {"rtol": float(spec.get("rtol", 1e-9)), "atol": float(spec.get("atol", 1e-12))}


def _prepared(spec):
    cfg = build_cell(spec)
    sched = build_schedule(spec["schedule"])
    if spec["analysis"].get("balance_spin_exchange"):
        cfg = balance_spin_exchange(cfg, sched)
    return cfg, sched


def _cycle_starts(cycles) -> np.ndarray:
    return np.array([c.t[0] for c in cycles])


def _channels(t0: np.ndarray, fits) -> dict[str, np.ndarray]:
    return {
        "t": t0,
        "Bx_T": np.array([f.Bx for f in fits]),
        "By_T": np.array([f.By for f in fits]),
        "Om_x_Hz": np.array([f.Om_x_hz for f in fits]),
        "Om_y_Hz": np.array([f.Om_y_hz for f in fits]),
        "residual_rms": np.array([f.residual_rms for f in fits]),
    }


# ---------------------------------------------------------------------------
# Fig. 2: the four single-drive responses of the Rb-Xe cell

def _arc_error(cycle, area: float) -> float:
    """Largest |P^n_after - R_z(+-area) P^n_before| / |P^n_before| (transverse
    parts) over the two pulses of a cycle: how well each pulse arc subtends
    the nominal angle."""
    err = 0.0
    for k, sign in ((0, -1.0), (1, 1.0)):
        a = cycle.pn_before_pulse[k, 0] + 1j * cycle.pn_before_pulse[k, 1]
        b = cycle.pn_after_pulse[k, 0] + 1j * cycle.pn_after_pulse[k, 1]
        if a == 0:
            return math.nan
        err = max(err, abs(b - np.exp(1j * sign * area) * a) / abs(a))
    return float(err)


def _setpoint_angle(cycle) -> tuple[float, float]:
    """Angle and magnitude ratio between the transverse P^n set points of the
    two windows (taken right after each pulse)."""
    a = cycle.pn_after_pulse[0, 0] + 1j * cycle.pn_after_pulse[0, 1]
    b = cycle.pn_after_pulse[1, 0] + 1j * cycle.pn_after_pulse[1, 1]
    if a == 0 or b == 0:
        return math.nan, math.nan
    r = b / a
    return float(np.angle(r)), float(abs(r))


def scenario_fig2(spec: dict) -> ScenarioResult:
    cfg, sched = _prepared(spec)
    tol = _tols(spec)
    d = spec["drive"]
    cases = {
        "Bx": DriveTimeline().constant("B", "x", d["B_x"] * PT),
        "By": DriveTimeline().constant("B", "y", d["B_y"] * PT),
        "Omx": DriveTimeline().constant("Omega", "x", d["Om_x"] * UHZ),
        "Omy": DriveTimeline().constant("Omega", "y", d["Om_y"] * UHZ),
    }
    res = ScenarioResult()
    report: dict[str, Any] = {"R_se_en_per_s": cfg.R_se_en, "cases": {}}
    t = None
    for name, drive in cases.items():
        st = settle(cfg, sched, drive, **tol)
        last = st.last
        run = run_protocol(cfg, sched, drive, sched.cycle_length, s0=st.state, keep_trajectory=True, **tol)
        tr = run.trajectory
        if t is None:
            t = tr[:, 0] - tr[0, 0] + sched.window_offsets()[0]
            res.traces["t"] = t
        for j, comp in ((1, "Pe_x"), (2, "Pe_y"), (4, "Pn_x"), (5, "Pn_y")):
            res.traces[f"{name}_{comp}"] = tr[:, j]
        ang, mag = _setpoint_angle(last)
        pe_perp = np.hypot(tr[:, 1], tr[:, 2])
        report["cases"][name] = {
            "arc_error": _arc_error(last, sched.pulse_area),
            "setpoint_angle_rad": ang,
            "setpoint_magnitude_ratio": mag,
            "peak_Pe_perp": float(np.max(pe_perp)),
            "peak_abs_Pe_x": float(np.max(np.abs(tr[:, 1]))),
            "pn_after_pulse": last.pn_after_pulse.tolist(),
            "periodicity": st.periodicity,
        }
    sig = generate_signatures(cfg, sched, check_degeneracy=False, **tol)
    G = sig.matrix() / np.linalg.norm(sig.matrix(), axis=0)
    report["signature_gram_eigenvalues"] = np.linalg.eigvalsh(G.T @ G).tolist()
    report["signature_gram_condition"] = sig.meta["gram_condition"]
    for k in sig.NAMES:
        res.traces[k] = getattr(sig, k)
    res.signatures = sig
    res.report = report
    return res


# ---------------------------------------------------------------------------
# Fig. 7: bias scan of the idealised K-3He cell

def scenario_fig7(spec: dict, workers: int = 1) -> ScenarioResult:
    cfg = build_cell(spec)
    sched = build_schedule(spec["schedule"])
    tol = _tols(spec)
    a = spec["analysis"]
    lo, hi, n = float(a["bias_min_nT"]), float(a["bias_max_nT"]), int(a["n_points"])
    if lo > 95.0 or hi < 115.0:
        raise ConfigError("analysis: the bias grid must span at least [95, 115] nT")
    grid = np.linspace(lo, hi, n)
    scan = bias_scan(cfg, sched, -grid * 1e-9, workers=workers, **tol)
    arr = scan.arrays()
    cw_best = np.nanmin(arr["cw_rot"])
    res = ScenarioResult()
    res.traces = {
        "bias_nT": grid,
        "panco_rot_over_cw_best": arr["rot"] / cw_best,
        "panco_mag_over_serf": arr["mag"] / scan.serf_mag,
        "cw_rot_over_cw_best": arr["cw_rot"] / cw_best,
        "sens_Omx_Hz": np.array([r.sens_Om[0] / TWO_PI if r.sens_Om else math.inf for r in scan.reports]),
        "sens_Omy_Hz": np.array([r.sens_Om[1] / TWO_PI if r.sens_Om else math.inf for r in scan.reports]),
        "sens_Bx_T": np.array([r.sens_B[0] if r.sens_B else math.inf for r in scan.reports]),
        "sens_By_T": np.array([r.sens_B[1] if r.sens_B else math.inf for r in scan.reports]),
        "gram_condition": np.array([r.condition for r in scan.reports]),
    }
    report = scan.summary()
    # bias-drift cross-talk budget at the nominal operating point
    nom = float(a["crosstalk_nominal_nT"])
    off = float(a["crosstalk_offset_nT"])
    sig = generate_signatures(cfg.with_bias(-nom * 1e-9), sched, **tol)
    xt = crosstalk(cfg, sched, sig, -(nom + off) * 1e-9, **tol)
    report["crosstalk"] = xt.to_dict()
    report["crosstalk_offset_nT"] = off
    report["suppression_factor"] = suppression_factor(xt.norm, cfg.noble.gamma)
    res.report = report
    res.signatures = sig
    return res


# ---------------------------------------------------------------------------
# experiment-style emulations on the Rb-Xe cell

def _exact_signatures(cfg, sched, tol, bias_offset_nT: float = 0.0) -> SignatureSet:
    c = cfg.with_bias(cfg.bias_z + bias_offset_nT * 1e-9)
    return generate_signatures(c, sched, **tol)


def scenario_square_wave(spec: dict) -> ScenarioResult:
    cfg, sched = _prepared(spec)
    tol = _tols(spec)
    d, a = spec["drive"], spec["analysis"]
    sig = _exact_signatures(cfg, sched, tol)
    st = settle(cfg, sched, **tol)
    drive = DriveTimeline()
    if d["amp_x"]:
        drive = drive.square("B", "x", d["amp_x"] * PT, d["period_x"])
    if d["amp_y"]:
        drive = drive.square("B", "y", d["amp_y"] * PT, d["period_y"])
    duration = float(a["duration_s"])
    s0 = SpinState(st.state.Pe, st.state.Pn, 0.0)
    run = run_protocol(cfg, sched, drive, duration, spec["noise_sigma"], spec["seed"], s0=s0, **tol)
    samples = np.concatenate([c.samples for c in run.cycles])
    t_samples = np.concatenate([c.t for c in run.cycles])
    fits = fit_trace(samples, sig, noise_sigma=spec["noise_sigma"])
    t0 = _cycle_starts(run.cycles)
    ch = _channels(t0, fits)
    res = ScenarioResult(traces={"t": t_samples, "signal": samples}, channels=ch, signatures=sig)
    res.report = {
        "R_se_en_per_s": cfg.R_se_en,
        "fitted_amp_x_pT": _plateau_amplitude(t0, ch["Bx_T"], d["period_x"]) / PT if d["amp_x"] else 0.0,
        "fitted_amp_y_pT": _plateau_amplitude(t0, ch["By_T"], d["period_y"]) / PT if d["amp_y"] else 0.0,
        "step_suppression": _step_suppression(t0, ch, drive, duration, float(a["suppression_window_s"])),
        "max_abs_Om_Hz": float(np.max(np.abs(np.concatenate([ch["Om_x_Hz"], ch["Om_y_Hz"]])))),
    }
    return res


def _plateau_amplitude(t: np.ndarray, b: np.ndarray, period: float) -> float:
    """Half the difference between the late-plateau medians of the high and
    low half periods."""
    phase = (t / period) % 1.0
    hi = (phase > 0.3) & (phase < 0.5)
    lo = (phase > 0.8) & (phase < 1.0)
    if not hi.any() or not lo.any():
        raise ValueError("run too short to contain both plateaus")
    return 0.5 * float(np.median(b[hi]) - np.median(b[lo]))


def _step_suppression(t, ch, drive: DriveTimeline, duration: float, window: float) -> list[dict]:
    """For each field edge followed by ``window`` seconds without another edge,
    the rotation-channel magnitude ``window`` after the step relative to its
    post-step peak."""
    edges = sorted(set([0.0] + drive.discontinuities(0.0, duration)))
    om = np.hypot(ch["Om_x_Hz"], ch["Om_y_Hz"])
    out = []
    for i, te in enumerate(edges):
        nxt = edges[i + 1] if i + 1 < len(edges) else duration
        if nxt - te < window - 1e-9:
            continue
        after = (t >= te) & (t < te + window)
        if not after.any():
            continue
        peak = float(np.max(om[after]))
        # last cycle that finishes within the window
        k = int(np.nonzero(after)[0][-1])
        late = float(om[k])
        out.append({"t_step": te, "peak_Hz": peak, "at_window_Hz": late,
                    "ratio": late / peak if peak > 0 else 0.0, "t_eval": float(t[k] - te)})
    return out


def scenario_step_decomposition(spec: dict) -> ScenarioResult:
    """Calibration by repeated B_x steps.

    For each step the last cycle before it (``pre``), the first cycle after it
    (``first``) and the last cycle before the next step (``late``) are kept:
    S_B = (late - pre) / dB, S_B_direct = (first - pre) / dB and
    S_Bn = S_B - S_B_direct, each averaged over all steps.
    """
    cfg, sched = _prepared(spec)
    tol = _tols(spec)
    d = spec["drive"]
    amp = float(d["step_amp"]) * PT
    n_steps = int(d["n_steps"])
    spacing = float(d["spacing"])
    if n_steps < 1:
        raise ConfigError("drive.n_steps must be >= 1")
    rate = transient_decay_rate(cfg, sched)
    if spacing * rate < 5.0:
        raise ConfigError(f"drive.spacing = {spacing} s is too short: noble-gas transients decay at "
                          f"{rate:.3g}/s, need spacing >= {5.0 / rate:.3g} s")
    L = sched.cycle_length
    per = int(round(spacing / L))
    if abs(per * L - spacing) > 1e-9 * spacing:
        raise ConfigError("drive.spacing must be a whole number of cycles")
    # a square wave switching at each step, starting from the settled -amp state
    drive0 = DriveTimeline().constant("B", "x", -amp)
    st = settle(cfg, sched, drive0, **tol)
    s0 = SpinState(st.state.Pe, st.state.Pn, 0.0)
    # +amp for the first spacing, then alternating
    drive = DriveTimeline().square("B", "x", amp, 2 * spacing)
    total = per * n_steps
    run = run_protocol(cfg, sched, drive, total * L, spec["noise_sigma"], spec["seed"],
                       s0=s0, **tol)
    cyc = run.cycles
    noisy = np.array([c.samples for c in cyc])
    clean = np.array([c.truth for c in cyc])
    pre_clean = st.last.truth
    pre_noisy = pre_clean  # the settled reference cycle is taken noiseless
    out = {}
    for label, data, pre0 in (("clean", clean, pre_clean), ("noisy", noisy, pre_noisy)):
        sb, sd = [], []
        pre = pre0
        for k in range(n_steps):
            sign = 1.0 if k % 2 == 0 else -1.0
            first = data[k * per]
            late = data[(k + 1) * per - 1]
            # with no step there is nothing to normalise by; raw differences stay zero
            dB = 2 * amp * sign if amp else 1.0
            sb.append((late - pre) / dB)
            sd.append((first - pre) / dB)
            pre = late
        out[label] = (np.array(sb), np.array(sd))
    sb, sd = out["clean"]
    S_B, S_Bd = sb.mean(axis=0), sd.mean(axis=0)
    S_Bn = S_B - S_Bd
    sig = _exact_signatures(cfg, sched, tol)
    corr = {k: _scaled_correlation(S_Bn, getattr(sig, k)) for k in ("S_Omx", "S_Omy")}
    corr_best, axis_deg = _transverse_correlation(S_Bn, sig.S_Omx, sig.S_Omy)
    res = ScenarioResult(signatures=sig)
    res.traces = {"t": sched.cycle_offsets(), "S_B": S_B, "S_B_direct": S_Bd, "S_Bn": S_Bn,
                  "S_Omx": sig.S_Omx, "S_Omy": sig.S_Omy}
    report: dict[str, Any] = {
        "R_se_en_per_s": cfg.R_se_en,
        "transient_decay_rate_per_s": rate,
        "correlation": corr_best,
        "equivalent_rotation_axis_deg": axis_deg,
        "correlation_per_axis": corr,
        "n_steps": n_steps,
    }
    if spec["noise_sigma"] > 0:
        nb, nd = out["noisy"]
        noise_single = float(np.std((nb - nd)[0] - (sb - sd)[0]))
        noise_avg = float(np.std((nb - nd).mean(axis=0) - (sb - sd).mean(axis=0)))
        report["noise_std_single"] = noise_single
        report["noise_std_average"] = noise_avg
        report["noise_reduction"] = noise_single / noise_avg if noise_avg > 0 else math.inf
        res.traces["S_Bn_noisy"] = (nb - nd).mean(axis=0)
    res.report = report
    return res


def _transverse_correlation(a: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> tuple[float, float]:
    """Correlation of ``a`` with the best rotation signature in the xy plane.

    A rotation of magnitude w about the in-plane axis at angle phi has the
    signature w (cos(phi) S_Omx + sin(phi) S_Omy), so scaling a transverse
    drive means a gain and an axis angle. Returns (correlation, phi in deg).
    """
    A = np.column_stack([sx, sy])
    c, *_ = np.linalg.lstsq(A, a, rcond=None)
    fit = A @ c
    na = np.linalg.norm(a)
    if na == 0 or np.linalg.norm(fit) == 0:
        return 0.0, 0.0
    return float(abs(fit @ a) / (np.linalg.norm(fit) * na)), float(np.degrees(np.arctan2(c[1], c[0])))


def _scaled_correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation about zero (no mean removal): |<a,b>|/(|a||b|)."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(abs(a @ b) / (na * nb))


def scenario_wobble(spec: dict) -> ScenarioResult:
    """Sinusoidal Omega_y wobble plus a slow B_x drift, fitted cycle by cycle."""
    cfg, sched = _prepared(spec)
    tol = _tols(spec)
    d, a = spec["drive"], spec["analysis"]
    sig = _exact_signatures(cfg, sched, tol, float(a["sig_bias_offset_nT"]))
    st = settle(cfg, sched, **tol)
    s0 = SpinState(st.state.Pe, st.state.Pn, 0.0)
    w_amp = d["omega_peak"] * UHZ
    b_amp = d["B_drift"] * PT
    drive = DriveTimeline()
    if w_amp:
        drive = drive.sinusoid("Omega", "y", w_amp, d["wobble_freq"])
    if b_amp:
        drive = drive.sinusoid("B", "x", b_amp, d["drift_freq"])
    duration = float(a["duration_s"])
    run = run_protocol(cfg, sched, drive, duration, spec["noise_sigma"], spec["seed"], s0=s0, **tol)
    samples = np.concatenate([c.samples for c in run.cycles])
    fits = fit_trace(samples, sig, noise_sigma=spec["noise_sigma"])
    t0 = _cycle_starts(run.cycles)
    ch = _channels(t0, fits)
    # regress each rotation channel on the known drive waveforms (cycle averages)
    L = sched.cycle_length
    tm = t0 - sched.window_offsets()[0] + 0.5 * L
    X = np.column_stack([
        _cycle_avg_sin(tm, L, d["wobble_freq"], 0.0),
        _cycle_avg_sin(tm, L, d["wobble_freq"], math.pi / 2),
        b_amp * _cycle_avg_sin(tm, L, d["drift_freq"], 0.0),
        np.ones_like(tm),
    ])
    coef_x = np.linalg.lstsq(X, ch["Om_x_Hz"], rcond=None)[0]
    coef_y = np.linalg.lstsq(X, ch["Om_y_Hz"], rcond=None)[0]
    leak = math.hypot(coef_x[2], coef_y[2])   # Hz per tesla
    res = ScenarioResult(traces={"t": np.concatenate([c.t for c in run.cycles]), "signal": samples},
                         channels=ch, signatures=sig)
    res.report = {
        "R_se_en_per_s": cfg.R_se_en,
        "applied_Om_y_peak_uHz": d["omega_peak"],
        "recovered_Om_y_peak_uHz": math.hypot(coef_y[0], coef_y[1]) * 1e6,
        "drift_leakage_uHz_per_pT": leak * 1e-6,
        "drift_leakage_components_Hz_per_T": [coef_x[2], coef_y[2]],
        "sig_bias_offset_nT": a["sig_bias_offset_nT"],
    }
    return res


def _cycle_avg_sin(tm, L, f, phase):
    """Average of sin(2 pi f t + phase) over a cycle of length L centred at tm."""
    if f == 0:
        return np.full_like(tm, math.sin(phase))
    x = math.pi * f * L
    return np.sin(TWO_PI * f * tm + phase) * (math.sin(x) / x)


SCENARIOS: dict[str, Callable[..., ScenarioResult]] = {
    "fig2": scenario_fig2,
    "fig7": scenario_fig7,
    "square_wave": scenario_square_wave,
    "step_decomposition": scenario_step_decomposition,
    "wobble": scenario_wobble,
}


def run_scenario(spec: dict, workers: int = 1) -> ScenarioResult:
    validate_spec(spec)
    full = default_spec(spec["scenario"])
    for k in ("drive", "analysis"):
        full[k].update(spec.get(k, {}))
    for k in ("cell", "schedule", "noise_sigma", "seed", "rtol", "atol"):
        if k in spec:
            full[k] = spec[k]
    fn = SCENARIOS[full["scenario"]]
    if full["scenario"] == "fig7":
        return fn(full, workers=workers)
    return fn(full)


# ---------------------------------------------------------------------------
# run directories

def _fmt(v) -> str:
    return f"{float(v):.17g}"


def write_table(path, cols: dict[str, np.ndarray]) -> None:
    """CSV with one column per key; shorter columns are padded with blanks."""
    keys = list(cols)
    n = max((len(v) for v in cols.values()), default=0)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for i in range(n):
            w.writerow([_fmt(cols[k][i]) if i < len(cols[k]) else "" for k in keys])


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, np.integer):
        return int(x)
    return x


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def write_run_dir(out, spec: dict, result: ScenarioResult) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", spec)
    write_table(out / "traces.csv", result.traces)
    write_table(out / "channels.csv", result.channels)
    if result.signatures is not None:
        result.signatures.to_csv(out / "signatures.csv")
    report = dict(result.report)
    report.setdefault("status", "ok")
    write_json(out / "report.json", report)
    return out


def full_spec(spec: dict) -> dict:
    """Defaults merged with ``spec`` (what a run actually used)."""
    validate_spec(spec)
    full = copy.deepcopy(default_spec(spec["scenario"]))
    for k in ("drive", "analysis"):
        full[k].update(spec.get(k, {}))
    for k in ("cell", "schedule", "noise_sigma", "seed", "rtol", "atol"):
        if k in spec:
            full[k] = spec[k]
    return full
