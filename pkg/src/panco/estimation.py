"""Least-squares channel extraction, Fisher sensitivities, bias scans and
cross-talk."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import DriveTimeline
from .model import CellConfig, TWO_PI
from .protocol import (
    DEGENERACY_THRESHOLD,
    DEFAULT_EPS_OM,
    DegenerateSignaturesError,
    LinearityError,
    MeasuredCycle,
    PulseSchedule,
    SignatureSet,
    generate_signatures,
    gram_condition,
    run_cw_scc,
    run_serf_reference,
    settle,
)

__all__ = [
    "FitResult",
    "SensitivityReport",
    "BiasScan",
    "CrosstalkResult",
    "design_matrix",
    "fit_cycle",
    "fit_trace",
    "fisher_information",
    "sensitivities",
    "bias_scan",
    "crosstalk",
    "suppression_factor",
    "refine_minimum",
]


@dataclass
class FitResult:
    """Fitted drives of one cycle. Rotations are stored in rad/s."""

    Bx: float
    By: float
    Om_x: float
    Om_y: float
    residual_rms: float
    covariance: np.ndarray = field(repr=False)
    baseline: tuple[float, float] | None = None

    @property
    def Om_x_hz(self) -> float:
        return self.Om_x / TWO_PI

    @property
    def Om_y_hz(self) -> float:
        return self.Om_y / TWO_PI

    def coefficients(self) -> np.ndarray:
        return np.array([self.Bx, self.By, self.Om_x, self.Om_y])


def design_matrix(sig: SignatureSet, with_baseline: bool = False) -> np.ndarray:
    G = sig.matrix()
    if with_baseline:
        n = sig.n // 2
        w = np.zeros((sig.n, 2))
        w[:n, 0] = 1.0
        w[n:, 1] = 1.0
        G = np.hstack([G, w])
    return G


def _check_design(G: np.ndarray) -> float:
    cond = gram_condition(G)
    if not cond < DEGENERACY_THRESHOLD:
        raise DegenerateSignaturesError(f"design matrix is degenerate (Gram condition {cond:.3e})", cond)
    return cond


def _solve(G: np.ndarray, y: np.ndarray):
    # column scaling keeps the normal equations well conditioned even though
    # field and rotation signatures differ by ~10 orders of magnitude
    d = np.linalg.norm(G, axis=0)
    Gs = G / d
    coef, *_ = np.linalg.lstsq(Gs, y, rcond=None)
    inv = np.linalg.inv(Gs.T @ Gs) / np.outer(d, d)
    return (coef.T / d).T, inv


def fit_cycle(m, sig: SignatureSet, with_baseline: bool = False,
              noise_sigma: float | None = None) -> FitResult:
    """Ordinary least squares of one cycle's samples on the signatures."""
    samples = np.asarray(getattr(m, "samples", m), dtype=float)
    sigma = getattr(m, "noise_sigma", 0.0) if noise_sigma is None else noise_sigma
    if samples.shape != (sig.n,):
        raise ValueError(f"cycle has {samples.shape[0]} samples, signatures have {sig.n}")
    G = design_matrix(sig, with_baseline)
    _check_design(G)
    coef, inv = _solve(G, samples)
    resid = samples - G @ coef
    cov = sigma ** 2 * inv
    cov = 0.5 * (cov + cov.T)
    base = (float(coef[4]), float(coef[5])) if with_baseline else None
    return FitResult(float(coef[0]), float(coef[1]), float(coef[2]), float(coef[3]),
                     float(np.sqrt(np.mean(resid ** 2))), cov, base)


def fit_trace(samples: np.ndarray, sig: SignatureSet, with_baseline: bool = False,
              noise_sigma: float = 0.0) -> list[FitResult]:
    """Fit a concatenation of whole cycles, one FitResult per cycle."""
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise ValueError("empty trace")
    if samples.size % sig.n:
        raise ValueError(f"trace length {samples.size} is not a multiple of the cycle length {sig.n}")
    G = design_matrix(sig, with_baseline)
    _check_design(G)
    Y = samples.reshape(-1, sig.n).T
    coef, inv = _solve(G, Y)
    resid = Y - G @ coef
    rms = np.sqrt(np.mean(resid ** 2, axis=0))
    cov = noise_sigma ** 2 * inv
    out = []
    for k in range(Y.shape[1]):
        c = coef[:, k]
        base = (float(c[4]), float(c[5])) if with_baseline else None
        out.append(FitResult(float(c[0]), float(c[1]), float(c[2]), float(c[3]), float(rms[k]),
                             cov.copy(), base))
    return out


def write_fit_csv(path, t: np.ndarray, fits: list[FitResult]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "Bx_T", "By_T", "Om_x_Hz", "Om_y_Hz", "residual_rms"])
        for ti, f in zip(t, fits):
            w.writerow([f"{v:.17g}" for v in (ti, f.Bx, f.By, f.Om_x_hz, f.Om_y_hz, f.residual_rms)])


# ---------------------------------------------------------------------------
# Fisher information

def fisher_information(sig, noise_sigma: float) -> np.ndarray:
    """F_ij = sum_t S_i(t) S_j(t) / sigma^2."""
    if not noise_sigma > 0:
        raise ValueError("noise_sigma must be positive")
    S = sig.matrix() if isinstance(sig, SignatureSet) else np.asarray(sig, dtype=float)
    F = S.T @ S / noise_sigma ** 2
    return 0.5 * (F + F.T)


def sensitivities(F: np.ndarray, cycle_duration: float | None = None) -> np.ndarray:
    """sqrt(diag(F^-1)) per cycle, or per sqrt(Hz) if ``cycle_duration`` is given."""
    F = np.asarray(F, dtype=float)
    d = np.sqrt(np.diag(F))
    if np.any(d == 0):
        raise DegenerateSignaturesError("Fisher matrix has an empty channel", math.inf)
    C = F / np.outer(d, d)
    ev = np.linalg.eigvalsh(C)
    cond = ev[-1] / ev[0] if ev[0] > 0 else math.inf
    if not cond < DEGENERACY_THRESHOLD:
        raise DegenerateSignaturesError(f"Fisher matrix is singular (condition {cond:.3e})", cond)
    inv = np.linalg.inv(C) / np.outer(d, d)
    s = np.sqrt(np.diag(inv))
    if cycle_duration is not None:
        s = s * math.sqrt(cycle_duration)
    return s


def dc_sensitivity(response: float, n_samples: int, noise_sigma: float) -> float:
    """Sensitivity of a single DC signature observed over ``n_samples``."""
    if response == 0:
        return math.inf
    return noise_sigma / (abs(response) * math.sqrt(n_samples))


# ---------------------------------------------------------------------------
# bias scans

@dataclass
class SensitivityReport:
    """Per-bias sensitivities (per cycle, unit noise unless stated).

    ``sens_B`` is (B_x, B_y) in tesla, ``sens_Om`` is (Om_x, Om_y) in rad/s.
    """

    bias_z: float
    sens_B: tuple[float, float] | None
    sens_Om: tuple[float, float] | None
    cw_rot: float
    cw_mag: float
    condition: float
    degenerate: bool = False
    error: str | None = None

    @property
    def rot(self) -> float:
        """RMS of the two rotation-channel sensitivities."""
        if self.sens_Om is None:
            return math.inf
        return math.sqrt(0.5 * (self.sens_Om[0] ** 2 + self.sens_Om[1] ** 2))

    @property
    def mag(self) -> float:
        if self.sens_B is None:
            return math.inf
        return math.sqrt(0.5 * (self.sens_B[0] ** 2 + self.sens_B[1] ** 2))


def refine_minimum(x: np.ndarray, y: np.ndarray) -> float:
    """Vertex of the parabola through the grid minimum and its neighbours."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    i = int(np.nanargmin(y))
    if i == 0 or i == len(x) - 1 or not np.all(np.isfinite(y[i - 1:i + 2])):
        return float(x[i])
    a, b, _ = np.polyfit(x[i - 1:i + 2], y[i - 1:i + 2], 2)
    if a <= 0:
        return float(x[i])
    return float(-b / (2 * a))


@dataclass
class BiasScan:
    reports: list[SensitivityReport]
    serf_mag: float
    n_samples: int
    noise_sigma: float

    def arrays(self) -> dict[str, np.ndarray]:
        r = self.reports
        return {
            "bias_z": np.array([p.bias_z for p in r]),
            "rot": np.array([p.rot for p in r]),
            "mag": np.array([p.mag for p in r]),
            "cw_rot": np.array([p.cw_rot for p in r]),
        }

    def summary(self) -> dict:
        """Optima and the normalised figures of merit.

        Biases are reported as magnitudes |bias_z| in nT.
        """
        a = self.arrays()
        b = np.abs(a["bias_z"]) / 1e-9
        order = np.argsort(b)
        b, rot, mag, cw = b[order], a["rot"][order], a["mag"][order], a["cw_rot"][order]
        i_cw = int(np.nanargmin(cw))
        i_p = int(np.nanargmin(rot))
        return {
            "cw_optimum_nT": float(b[i_cw]),
            "cw_optimum_refined_nT": refine_minimum(b, cw),
            "cw_best_rot": float(cw[i_cw]),
            "panco_optimum_nT": float(b[i_p]),
            "panco_optimum_refined_nT": refine_minimum(b, rot),
            "panco_best_rot": float(rot[i_p]),
            "rot_ratio_to_cw": float(rot[i_p] / cw[i_cw]),
            "mag_ratio_to_serf": float(mag[i_p] / self.serf_mag),
            "serf_mag": self.serf_mag,
            "degenerate_points_nT": [float(x) for x, p in zip(b, np.array(self.reports)[order])
                                     if p.degenerate],
            "n_samples_per_cycle": self.n_samples,
        }

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bias_nT", "sens_Bx_T", "sens_By_T", "sens_Omx_Hz", "sens_Omy_Hz",
                        "cw_rot_Hz", "serf_mag_T", "rot_over_cw_best", "mag_over_serf", "condition"])
            cw_best = min(p.cw_rot for p in self.reports)
            for p in sorted(self.reports, key=lambda r: abs(r.bias_z)):
                sb = p.sens_B or (math.inf, math.inf)
                so = p.sens_Om or (math.inf, math.inf)
                row = [abs(p.bias_z) / 1e-9, sb[0], sb[1], so[0] / TWO_PI, so[1] / TWO_PI,
                       p.cw_rot / TWO_PI, self.serf_mag, p.rot / cw_best, p.mag / self.serf_mag,
                       p.condition]
                w.writerow([f"{v:.17g}" for v in row])


def _scan_point(args) -> SensitivityReport:
    cfg, schedule, bias_z, noise_sigma, sig_kw = args
    c = cfg.with_bias(bias_z)
    n = schedule.samples_per_cycle
    cw_om = run_cw_scc(c, DriveTimeline().constant("Omega", "x", DEFAULT_EPS_OM)).magnitude
    cw_b = run_cw_scc(c, DriveTimeline().constant("B", "x", 1e-13)).magnitude
    cw_rot = dc_sensitivity(cw_om, n, noise_sigma)
    cw_mag = dc_sensitivity(cw_b, n, noise_sigma)
    try:
        sig = generate_signatures(c, schedule, **sig_kw)
        s = sensitivities(fisher_information(sig, noise_sigma))
        return SensitivityReport(bias_z, (s[0], s[1]), (s[2], s[3]), cw_rot, cw_mag,
                                 sig.meta["gram_condition"])
    except DegenerateSignaturesError as exc:
        return SensitivityReport(bias_z, None, None, cw_rot, cw_mag, exc.condition, True, str(exc))


def bias_scan(cfg: CellConfig, schedule: PulseSchedule, bias_list, noise_sigma: float = 1.0,
              workers: int = 1, **sig_kw) -> BiasScan:
    """Fisher sensitivities over a list of signed bias_z values (tesla).

    CW self-compensated references use one DC signature over the same number
    of samples per cycle; the SERF reference is the alkali-only magnetometer.
    Degenerate points are marked rather than aborting the scan.
    """
    bias_list = [float(b) for b in bias_list]
    if not bias_list:
        raise ValueError("bias_list is empty")
    jobs = [(cfg, schedule, b, noise_sigma, sig_kw) for b in bias_list]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            reports = list(ex.map(_scan_point, jobs))
    else:
        reports = [_scan_point(j) for j in jobs]
    n = schedule.samples_per_cycle
    serf = dc_sensitivity(run_serf_reference(cfg).magnitude, n, noise_sigma)
    return BiasScan(reports, serf, n, noise_sigma)


# ---------------------------------------------------------------------------
# cross-talk

@dataclass(frozen=True)
class CrosstalkResult:
    """Apparent rotation per applied B_x, in Hz-equivalent per tesla."""

    om_x: float
    om_y: float
    bias_z: float
    B_probe: float

    @property
    def norm(self) -> float:
        return math.hypot(self.om_x, self.om_y)

    @property
    def uhz_per_pt(self) -> float:
        return self.norm * 1e-6

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(norm_hz_per_T=self.norm, uhz_per_pT=self.uhz_per_pt)
        return d


def _fitted_rotation(cfg, schedule, sig, B_probe, settle_kw):
    drive = DriveTimeline().constant("B", "x", B_probe)
    last = settle(cfg, schedule, drive, **settle_kw).last
    f = fit_cycle(last.truth, sig, noise_sigma=0.0)
    return np.array([f.Om_x_hz, f.Om_y_hz]) / B_probe


def crosstalk(cfg: CellConfig, schedule: PulseSchedule, sig_nominal: SignatureSet,
              bias_actual: float, B_probe: float = 1e-12, check_linearity: bool = True,
              linearity_tol: float = 0.01, **settle_kw) -> CrosstalkResult:
    """Rotation reading per unit DC B_x when the true bias differs from the
    one the signatures were generated at.

    The magnitude of the (Om_x, Om_y) pair is the headline figure.
    """
    c = cfg.with_bias(bias_actual)
    r = _fitted_rotation(c, schedule, sig_nominal, B_probe, settle_kw)
    if check_linearity:
        r2 = _fitted_rotation(c, schedule, sig_nominal, B_probe / 2, settle_kw)
        scale = np.max(np.abs(r))
        # absolute slack covers the numerical floor at zero offset
        if np.max(np.abs(r - r2)) > linearity_tol * scale + 1.0:
            raise LinearityError("cross-talk changes when the probe field is halved")
    return CrosstalkResult(float(r[0]), float(r[1]), bias_actual, B_probe)


def suppression_factor(crosstalk_hz_per_T: float, gamma_n: float) -> float:
    """(gamma_n / 2 pi) divided by the cross-talk."""
    if not crosstalk_hz_per_T > 0:
        raise ValueError("cross-talk must be positive")
    return abs(gamma_n) / TWO_PI / crosstalk_hz_per_T


def scan_summary_json(scan: BiasScan, path) -> None:
    Path(path).write_text(json.dumps(scan.summary(), indent=2, sort_keys=True))
