"""Tests for parameters, units and closed-form quantities."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from panco import model
from panco.model import (
    CellConfig,
    ConfigError,
    QModel,
    SpeciesParams,
    compensation_point,
    config_from_display,
    config_to_display,
    k_he3_idealised,
    rb_xe_fig2,
    slowing_down_factor,
)


class TestSlowingDownFactor:
    def test_unpolarised(self):
        assert slowing_down_factor([0, 0, 0]) == pytest.approx(6.0, rel=1e-15)

    def test_fully_polarised(self):
        assert slowing_down_factor([0, 0, 1]) == pytest.approx(4.0, rel=1e-15)

    def test_half_polarised(self):
        # 4 / (2 - 4/3.25) evaluated by hand
        assert slowing_down_factor([0.5, 0, 0]) == pytest.approx(5.2, rel=1e-12)

    def test_overshoot_is_clamped(self):
        assert slowing_down_factor([0, 0, 1 + 1e-9]) == 4.0

    def test_constant_model(self):
        assert slowing_down_factor([0.3, 0, 0], QModel("constant", 4.0)) == 4.0

    @pytest.mark.parametrize("q0", [0.5, 11.0])
    def test_constant_model_range(self, q0):
        with pytest.raises(ValueError):
            QModel("constant", q0)

    def test_unknown_model(self):
        with pytest.raises(ValueError):
            QModel("magic")

    @given(st.floats(0, 1), st.floats(0, 1))
    def test_monotone_and_bounded(self, a, b):
        lo, hi = sorted((a, b))
        qa = slowing_down_factor([lo, 0, 0])
        qb = slowing_down_factor([hi, 0, 0])
        assert 4.0 <= qb <= qa <= 6.0


class TestCompensationPoint:
    def test_idealised_cell(self):
        cfg = k_he3_idealised()
        b = compensation_point(cfg, 0.5, 1.0)
        assert b / model.NT == pytest.approx(104.5, abs=1e-9)

    def test_single_species_limit(self):
        cfg = k_he3_idealised()
        cfg = CellConfig(alkali=SpeciesParams("K", model.GAMMA_E, 0.0), noble=cfg.noble)
        assert compensation_point(cfg, 0.8, 1.0) / model.NT == pytest.approx(100.0)

    def test_duty_cycle_mean(self):
        b = compensation_point(k_he3_idealised(), 0.66, 1.0) / model.NT
        assert b == pytest.approx(105.94, abs=1e-9)
        assert abs(b - 106.3) < 0.4

    def test_non_finite(self):
        with pytest.raises(ValueError):
            compensation_point(k_he3_idealised(), math.nan, 1.0)

    @given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.1, 3))
    def test_linear_in_each_argument(self, pe, pn, k):
        cfg = k_he3_idealised()
        base = compensation_point(cfg, 0.0, 0.0)
        assert base == 0.0
        a = compensation_point(cfg, k * pe, pn) - compensation_point(cfg, 0.0, pn)
        b = compensation_point(cfg, pe, pn) - compensation_point(cfg, 0.0, pn)
        assert a == pytest.approx(k * b, rel=1e-12, abs=1e-24)


class TestUnits:
    @given(st.floats(-1e6, 1e6, allow_nan=False))
    def test_round_trips(self, x):
        for f, g in ((model.nT, model.to_nT), (model.pT, model.to_pT), (model.uhz, model.to_uhz),
                     (model.hz_to_rad, model.rad_to_hz)):
            assert g(f(x)) == pytest.approx(x, rel=1e-12, abs=1e-300)

    def test_crosstalk_units(self):
        # 0.2 uHz/pT is 2e5 Hz/T
        assert model.uhz_per_pt_to_hz_per_tesla(0.2) == pytest.approx(2e5)
        assert model.hz_per_tesla_to_uhz_per_pt(2e5) == pytest.approx(0.2)

    def test_vec3_rejects_nan(self):
        with pytest.raises(ValueError):
            model.vec3([0, math.nan, 0])


class TestCellConfig:
    def test_pump_axis_normalised(self):
        c = k_he3_idealised()
        c = CellConfig(alkali=c.alkali, noble=c.noble, pump_axis=(0, 0, 2))
        assert c.pump_axis == (0.0, 0.0, 1.0)

    @pytest.mark.parametrize("kw", [dict(R_se_en=-1.0), dict(R_p_on=math.inf), dict(rotation_sign=2),
                                    dict(pump_axis=(0, 0, 0))])
    def test_invalid(self, kw):
        c = k_he3_idealised()
        with pytest.raises(ValueError):
            CellConfig(alkali=c.alkali, noble=c.noble, **kw)

    @pytest.mark.parametrize("kw", [dict(gamma=0.0), dict(lambda_M=-1.0), dict(R_sd=-1.0)])
    def test_invalid_species(self, kw):
        base = dict(name="x", gamma=1.0, lambda_M=0.0, R_sd=0.0)
        base.update(kw)
        with pytest.raises(ValueError):
            SpeciesParams(**base)

    def test_idealised_preset(self):
        c = k_he3_idealised(106.3)
        assert c.bias_z == pytest.approx(-106.3e-9)
        assert c.alkali.lambda_M == pytest.approx(9e-9)
        assert c.noble.lambda_M == pytest.approx(100e-9)
        assert c.noble.R_sd == 0 and c.R_se_en == 0 and c.R_se_ne == 0
        assert c.noble.gamma / (2 * math.pi) == pytest.approx(32.43e6)

    def test_fig2_preset(self):
        c = rb_xe_fig2()
        assert c.bias_z == pytest.approx(-41e-9)
        assert c.noble.gamma / (2 * math.pi) == pytest.approx(11.8e6)
        assert c.alkali.gamma / (2 * math.pi) == pytest.approx(28e9)
        assert 1 / c.alkali.R_sd == pytest.approx(3.3e-3)
        assert 1 / c.noble.R_sd == pytest.approx(10.0)

    @pytest.mark.parametrize("make", [k_he3_idealised, rb_xe_fig2])
    def test_display_round_trip(self, make):
        c = make()
        back = config_from_display(config_to_display(c))
        for a, b in ((c.alkali, back.alkali), (c.noble, back.noble)):
            for f in ("gamma", "lambda_M", "R_sd"):
                assert getattr(b, f) == pytest.approx(getattr(a, f), rel=1e-12)
        assert back.bias_z == pytest.approx(c.bias_z, rel=1e-12)
        assert back.fingerprint() == c.fingerprint()

    def test_unknown_display_key_names_path(self):
        d = config_to_display(k_he3_idealised())
        d["alkali"]["gama"] = 1.0
        with pytest.raises(ConfigError, match=r"cell\.alkali\.gama"):
            config_from_display(d)

    def test_with_bias(self):
        c = k_he3_idealised().with_bias(-1e-7)
        assert c.bias_z == -1e-7
        assert np.isfinite(c.alkali.gamma)
