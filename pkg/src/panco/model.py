"""Physical parameters, unit conventions and closed-form quantities.

Everything is stored in strict SI (tesla, rad/s, seconds). Rotation rates are
reported as Hz-equivalent (omega / 2 pi). Display units used in config files
are nT, pT, uHz, ms and GHz/T or MHz/T for gyromagnetic ratios.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any

import numpy as np

TWO_PI = 2.0 * math.pi

NT = 1e-9
PT = 1e-12
MS = 1e-3
US = 1e-6

# Integration slack on |P| <= 1
POL_EPS = 1e-9


def nT(x: float) -> float:
    return x * NT


def to_nT(b: float) -> float:
    return b / NT


def pT(x: float) -> float:
    return x * PT


def to_pT(b: float) -> float:
    return b / PT


def hz_to_rad(f: float) -> float:
    """Hz-equivalent rotation rate to rad/s."""
    return TWO_PI * f


def rad_to_hz(w: float) -> float:
    return w / TWO_PI


def uhz(x: float) -> float:
    """Rotation rate given in uHz (Hz-equivalent) to rad/s."""
    return TWO_PI * x * 1e-6


def to_uhz(w: float) -> float:
    return w / TWO_PI * 1e6


def hz_per_tesla_to_uhz_per_pt(x: float) -> float:
    return x * 1e-6


def uhz_per_pt_to_hz_per_tesla(x: float) -> float:
    return x * 1e6


def vec3(x: Any) -> np.ndarray:
    v = np.asarray(x, dtype=float).reshape(3)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"non-finite vector {v}")
    return v


# Gyromagnetic ratios in rad/(s T)
GAMMA_E = TWO_PI * 28.0e9
GAMMA_XE129 = TWO_PI * 11.8e6
GAMMA_HE3 = TWO_PI * 32.43e6


@dataclass(frozen=True)
class SpeciesParams:
    """One spin species.

    ``lambda_M`` is the coupling-enhanced magnetisation, i.e. the field seen by
    the other species when this one is fully polarised.
    """

    name: str
    gamma: float
    lambda_M: float
    R_sd: float = 0.0

    def __post_init__(self):
        if self.gamma == 0 or not math.isfinite(self.gamma):
            raise ValueError(f"{self.name}: gamma must be finite and non-zero")
        if self.lambda_M < 0:
            raise ValueError(f"{self.name}: lambda_M must be >= 0")
        if self.R_sd < 0:
            raise ValueError(f"{self.name}: R_sd must be >= 0")


@dataclass(frozen=True)
class QModel:
    kind: str = "polarisation"
    q0: float = 4.0

    def __post_init__(self):
        if self.kind not in ("polarisation", "constant"):
            raise ValueError(f"unknown q model {self.kind!r}")
        if self.kind == "constant" and not (1.0 <= self.q0 <= 10.0):
            raise ValueError("constant q0 must lie in [1, 10]")

    @property
    def code(self) -> int:
        return 0 if self.kind == "polarisation" else 1


@dataclass(frozen=True)
class CellConfig:
    """Full parameter set of the alkali / noble-gas cell.

    ``bias_z`` is the signed applied field along z. Biases that oppose the
    (positive) species magnetisation are negative.
    """

    alkali: SpeciesParams
    noble: SpeciesParams
    R_se_en: float = 0.0
    R_se_ne: float = 0.0
    R_p_on: float = 0.0
    R_p_cw: float = 0.0
    pump_axis: tuple[float, float, float] = (0.0, 0.0, 1.0)
    q_model: QModel = field(default_factory=QModel)
    bias_z: float = 0.0
    rotation_sign: int = 1

    def __post_init__(self):
        for name in ("R_se_en", "R_se_ne", "R_p_on", "R_p_cw"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be finite and >= 0")
        ax = np.asarray(self.pump_axis, dtype=float)
        n = float(np.linalg.norm(ax))
        if n == 0:
            raise ValueError("pump_axis must be non-zero")
        if abs(n - 1.0) > 1e-12:
            object.__setattr__(self, "pump_axis", tuple(float(c) for c in ax / n))
        if self.rotation_sign not in (1, -1):
            raise ValueError("rotation_sign must be +1 or -1")
        if not math.isfinite(self.bias_z):
            raise ValueError("bias_z must be finite")

    def with_bias(self, bias_z: float) -> "CellConfig":
        return replace(self, bias_z=bias_z)

    def to_display(self) -> dict:
        return config_to_display(self)

    def fingerprint(self) -> str:
        blob = json.dumps(config_to_display(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def slowing_down_factor(Pe, q_model: QModel | None = None) -> float:
    """Nuclear slowing-down factor q for alkali polarisation ``Pe``.

    The polarisation-dependent model is q = 4 / (2 - 4 / (3 + |P|^2)), which
    runs from 6 at zero polarisation to 4 at full polarisation.
    """
    q_model = q_model or QModel()
    if q_model.kind == "constant":
        return q_model.q0
    p2 = float(np.dot(Pe, Pe))
    p2 = min(max(p2, 0.0), 1.0)
    return 4.0 / (2.0 - 4.0 / (3.0 + p2))


def compensation_point(cfg: CellConfig, mean_Pe_z: float, Pn_z: float) -> float:
    """Bias magnitude that cancels the combined species magnetisation (tesla)."""
    if not (math.isfinite(mean_Pe_z) and math.isfinite(Pn_z)):
        raise ValueError("polarisations must be finite")
    return cfg.noble.lambda_M * Pn_z + cfg.alkali.lambda_M * mean_Pe_z


# ---------------------------------------------------------------------------
# display-unit serialisation

_SPECIES_FIELDS = {
    "name": (None, "name"),
    "gamma_MHz_per_T": (TWO_PI * 1e6, "gamma"),
    "lambda_M_nT": (NT, "lambda_M"),
    "R_sd_per_s": (1.0, "R_sd"),
}

_CELL_FIELDS = {
    "R_se_en_per_s": (1.0, "R_se_en"),
    "R_se_ne_per_s": (1.0, "R_se_ne"),
    "R_p_on_per_s": (1.0, "R_p_on"),
    "R_p_cw_per_s": (1.0, "R_p_cw"),
    "pump_axis": (None, "pump_axis"),
    "bias_z_nT": (NT, "bias_z"),
    "rotation_sign": (None, "rotation_sign"),
}


class ConfigError(ValueError):
    """Raised for unknown or malformed configuration keys."""


def _species_to_display(sp: SpeciesParams) -> dict:
    out = {}
    for key, (scale, attr) in _SPECIES_FIELDS.items():
        v = getattr(sp, attr)
        out[key] = v if scale is None else v / scale
    return out


def _species_from_display(d: dict, path: str) -> SpeciesParams:
    kw = {}
    for key, v in d.items():
        if key not in _SPECIES_FIELDS:
            raise ConfigError(f"unknown key '{path}.{key}'")
        scale, attr = _SPECIES_FIELDS[key]
        kw[attr] = v if scale is None else float(v) * scale
    return SpeciesParams(**kw)


def config_to_display(cfg: CellConfig) -> dict:
    out: dict[str, Any] = {
        "alkali": _species_to_display(cfg.alkali),
        "noble": _species_to_display(cfg.noble),
    }
    for key, (scale, attr) in _CELL_FIELDS.items():
        v = getattr(cfg, attr)
        if attr == "pump_axis":
            v = list(v)
        out[key] = v if scale is None else v / scale
    out["q_model"] = asdict(cfg.q_model)
    return out


def config_from_display(d: dict, path: str = "cell") -> CellConfig:
    kw: dict[str, Any] = {}
    for key, v in d.items():
        if key in ("alkali", "noble"):
            kw[key] = _species_from_display(v, f"{path}.{key}")
        elif key == "q_model":
            unknown = set(v) - {"kind", "q0"}
            if unknown:
                raise ConfigError(f"unknown key '{path}.q_model.{sorted(unknown)[0]}'")
            kw[key] = QModel(**v)
        elif key in _CELL_FIELDS:
            scale, attr = _CELL_FIELDS[key]
            if attr == "pump_axis":
                kw[attr] = tuple(float(c) for c in v)
            elif attr == "rotation_sign":
                kw[attr] = int(v)
            else:
                kw[attr] = float(v) * scale
        else:
            raise ConfigError(f"unknown key '{path}.{key}'")
    return CellConfig(**kw)


# ---------------------------------------------------------------------------
# presets

# PANCo duty-cycle mean alkali polarisation quoted for the idealised K-3He study
KHE_TARGET_MEAN_PEZ = 0.66
# Relaxation rate giving that mean for tau=20 ms, 1 ms pinned pump at P=0.99 and
# the polarisation-dependent q; regenerate with protocol.calibrate_alkali_relaxation.
KHE_R_SD = 223.8129199161005


def k_he3_idealised(bias_nT: float = 106.3, R_sd: float = KHE_R_SD) -> CellConfig:
    """Idealised K-3He cell: lambda M_e = 9 nT, lambda M_n P_n = 100 nT, no
    spin exchange and no noble-gas relaxation."""
    return CellConfig(
        alkali=SpeciesParams("K", GAMMA_E, 9.0 * NT, R_sd),
        noble=SpeciesParams("3He", GAMMA_HE3, 100.0 * NT, 0.0),
        R_se_en=0.0,
        R_se_ne=0.0,
        R_p_on=0.0,
        R_p_cw=R_sd,
        bias_z=-bias_nT * NT,
    )


def rb_xe_fig2(bias_nT: float = -41.0) -> CellConfig:
    """87Rb-129Xe parameters of the response-signature simulation.

    Magnetisations are taken as effective fields (already multiplied by the
    coupling enhancement). Noble-gas decay time 10 s; the spin-exchange
    pumping rate is balanced separately (see protocol.balance_spin_exchange).
    """
    return CellConfig(
        alkali=SpeciesParams("87Rb", GAMMA_E, 54.0 * NT, 1.0 / 3.3e-3),
        noble=SpeciesParams("129Xe", GAMMA_XE129, 58.0 * NT, 0.1),
        R_se_en=0.0,
        R_se_ne=0.0,
        R_p_on=1.0e5,
        R_p_cw=1.0 / 3.3e-3,
        bias_z=bias_nT * NT,
    )
