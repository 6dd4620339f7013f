"""Tests for least-squares fits, Fisher analysis, scans and cross-talk."""

import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from panco.estimation import (
    BiasScan,
    FitResult,
    bias_scan,
    crosstalk,
    dc_sensitivity,
    design_matrix,
    fisher_information,
    fit_cycle,
    fit_trace,
    refine_minimum,
    sensitivities,
    suppression_factor,
    write_fit_csv,
)
from panco.model import GAMMA_HE3, k_he3_idealised
from panco.protocol import DegenerateSignaturesError, LinearityError, SignatureSet, khe_schedule

TRUE = np.array([2e-12, 0.0, 0.0, 2 * math.pi * 300e-6])


def synthetic_signatures(n=400, seed=0) -> SignatureSet:
    """Smooth, distinct, physically scaled columns (per tesla / per rad/s)."""
    t = np.linspace(0, 0.04, n, endpoint=False)
    w = 2 * math.pi / 0.02
    decay = np.exp(-t % 0.02 / 0.005)
    cols = [
        3e7 * decay * np.cos(w * t),
        3e7 * decay * np.sin(w * t) * np.sign(t - 0.02 + 1e-12),
        0.3 * decay * np.sin(2 * w * t),
        0.3 * (1 - decay) * np.cos(0.5 * w * t),
    ]
    return SignatureSet(t, *cols)


@pytest.fixture(scope="module")
def sig():
    return synthetic_signatures()


class TestFitCycle:
    def test_zero_signal(self, sig):
        f = fit_cycle(np.zeros(sig.n), sig)
        assert f.coefficients().tolist() == [0.0, 0.0, 0.0, 0.0]
        assert f.residual_rms == 0.0

    def test_recovers_constructed_drive(self, sig):
        m = sig.matrix() @ TRUE
        f = fit_cycle(m, sig)
        assert f.Bx == pytest.approx(2e-12, rel=1e-10)
        assert abs(f.By) < 1e-10 * 2e-12
        assert abs(f.Om_x) < 1e-10 * TRUE[3]
        assert f.Om_y_hz == pytest.approx(300e-6, rel=1e-10)

    def test_on_real_signatures(self, khe_sig):
        m = khe_sig.matrix() @ TRUE
        f = fit_cycle(m, khe_sig)
        assert f.Bx == pytest.approx(TRUE[0], rel=1e-10)
        assert f.Om_y == pytest.approx(TRUE[3], rel=1e-10)
        assert abs(f.By) < 1e-10 * TRUE[0] and abs(f.Om_x) < 1e-10 * TRUE[3]

    def test_with_baseline(self, sig):
        n = sig.n // 2
        m = sig.matrix() @ TRUE + np.r_[np.full(n, 1e-4), np.full(n, -2e-4)]
        f = fit_cycle(m, sig, with_baseline=True)
        assert f.baseline == pytest.approx((1e-4, -2e-4), rel=1e-9)
        assert f.Bx == pytest.approx(2e-12, rel=1e-9)
        assert f.covariance.shape == (6, 6)

    def test_covariance_is_symmetric_psd(self, sig):
        f = fit_cycle(np.zeros(sig.n), sig, noise_sigma=1e-3)
        c = f.covariance
        assert np.allclose(c, c.T, rtol=0, atol=1e-12 * np.abs(c).max())
        assert np.all(np.linalg.eigvalsh(c / np.sqrt(np.outer(np.diag(c), np.diag(c)))) > -1e-12)

    def test_grid_mismatch(self, sig):
        with pytest.raises(ValueError):
            fit_cycle(np.zeros(sig.n - 1), sig)

    def test_degenerate_design(self, sig):
        bad = SignatureSet(sig.t, sig.S_Bx, sig.S_Bx, sig.S_Omx, sig.S_Omy)
        with pytest.raises(DegenerateSignaturesError):
            fit_cycle(np.zeros(sig.n), bad)

    @given(st.integers(0, 2 ** 31 - 1))
    def test_monte_carlo_covariance(self, seed):
        sig = synthetic_signatures()
        sigma = 1e-4
        rng = np.random.default_rng(seed)
        m0 = sig.matrix() @ TRUE
        Y = m0 + sigma * rng.standard_normal((1000, sig.n))
        fits = fit_trace(Y.ravel(), sig, noise_sigma=sigma)
        est = np.array([f.coefficients() for f in fits])
        pred = fits[0].covariance
        emp = np.cov(est.T)
        assert np.all(np.abs(np.diag(emp) / np.diag(pred) - 1) < 0.15)
        sd = np.sqrt(np.diag(pred))
        assert np.all(np.abs(est.mean(axis=0) - TRUE) < 4 * sd / math.sqrt(1000))


class TestFitTrace:
    def test_matches_fit_cycle(self, sig):
        rng = np.random.default_rng(1)
        Y = sig.matrix() @ TRUE + 1e-4 * rng.standard_normal((3, sig.n))
        fits = fit_trace(Y.ravel(), sig)
        for y, f in zip(Y, fits):
            g = fit_cycle(y, sig, noise_sigma=1e-4)
            sd = np.sqrt(np.diag(g.covariance))
            assert np.all(np.abs(f.coefficients() - g.coefficients()) < 1e-9 * sd)

    def test_empty(self, sig):
        with pytest.raises(ValueError, match="empty"):
            fit_trace(np.array([]), sig)

    def test_partial_cycle(self, sig):
        with pytest.raises(ValueError, match="multiple"):
            fit_trace(np.zeros(sig.n + 3), sig)

    def test_csv(self, tmp_path, sig):
        fits = fit_trace(np.tile(sig.matrix() @ TRUE, 2), sig)
        p = tmp_path / "fit.csv"
        write_fit_csv(p, np.array([0.0, 0.04]), fits)
        rows = list(csv.reader(p.open()))
        assert rows[0] == ["t", "Bx_T", "By_T", "Om_x_Hz", "Om_y_Hz", "residual_rms"]
        assert float(rows[2][4]) == pytest.approx(300e-6, rel=1e-10)


class TestFisher:
    def test_orthogonal_equal_power(self):
        S = np.zeros((8, 4))
        for i in range(4):
            S[2 * i, i] = S[2 * i + 1, i] = 1.5
        F = fisher_information(S, 1.0)
        assert np.allclose(F, 4.5 * np.eye(4))

    def test_symmetric_and_psd(self, khe_sig):
        F = fisher_information(khe_sig, 1.0)
        assert np.array_equal(F, F.T)
        d = np.sqrt(np.diag(F))
        assert np.linalg.eigvalsh(F / np.outer(d, d)).min() >= -1e-12 * 4

    def test_identical_columns_are_singular(self, sig):
        S = np.column_stack([sig.S_Bx, sig.S_Bx, sig.S_Omx, sig.S_Omy])
        with pytest.raises(DegenerateSignaturesError):
            sensitivities(fisher_information(S, 1.0))

    def test_sigma_must_be_positive(self, sig):
        with pytest.raises(ValueError):
            fisher_information(sig, 0.0)

    def test_identity(self):
        assert np.allclose(sensitivities(np.eye(4)), 1.0)

    @given(st.floats(0.01, 100.0))
    def test_sigma_scaling(self, k):
        sig = synthetic_signatures()
        a = sensitivities(fisher_information(sig, 1.0))
        b = sensitivities(fisher_information(sig, k))
        assert np.allclose(b, k * a, rtol=1e-10)

    def test_per_root_hz(self, sig):
        F = fisher_information(sig, 1.0)
        assert np.allclose(sensitivities(F, 0.04), sensitivities(F) * math.sqrt(0.04))

    @pytest.mark.parametrize("n", [1, 4, 25])
    def test_averaging_cycles(self, sig, n):
        one = sensitivities(fisher_information(sig, 1.0))
        many = sensitivities(fisher_information(np.tile(sig.matrix(), (n, 1)), 1.0))
        assert np.allclose(many, one / math.sqrt(n), rtol=1e-10)

    def test_matches_monte_carlo(self, sig):
        sigma = 1e-4
        rng = np.random.default_rng(11)
        Y = sig.matrix() @ TRUE + sigma * rng.standard_normal((1000, sig.n))
        est = np.array([f.coefficients() for f in fit_trace(Y.ravel(), sig)])
        pred = sensitivities(fisher_information(sig, sigma))
        assert np.all(np.abs(est.std(axis=0, ddof=1) ** 2 / pred ** 2 - 1) < 0.15)

    def test_dc_sensitivity(self):
        assert dc_sensitivity(2.0, 100, 1.0) == pytest.approx(0.05)
        assert dc_sensitivity(0.0, 100, 1.0) == math.inf


class TestScan:
    @staticmethod
    @pytest.fixture(scope="class")
    def scans():
        cfg, sched = k_he3_idealised(), khe_schedule()
        grid = -np.array([104.0, 106.0, 108.0]) * 1e-9
        return bias_scan(cfg, sched, grid, noise_sigma=1.0), bias_scan(cfg, sched, grid, noise_sigma=3.0)

    def test_normalised_curves_independent_of_sigma(self, scans):
        a, b = scans
        ra, rb = a.arrays(), b.arrays()
        cw_a, cw_b = np.min(ra["cw_rot"]), np.min(rb["cw_rot"])
        assert np.allclose(ra["rot"] / cw_a, rb["rot"] / cw_b, rtol=1e-12)
        assert np.allclose(ra["mag"] / a.serf_mag, rb["mag"] / b.serf_mag, rtol=1e-12)
        assert np.argmin(ra["rot"]) == np.argmin(rb["rot"])
        assert np.allclose(rb["rot"], 3 * ra["rot"], rtol=1e-12)

    def test_summary_reports_magnitudes(self, scans):
        s = scans[0].summary()
        assert s["panco_optimum_nT"] in (104.0, 106.0, 108.0)
        assert s["n_samples_per_cycle"] == 4750
        assert s["degenerate_points_nT"] == []

    def test_csv(self, tmp_path, scans):
        p = tmp_path / "scan.csv"
        scans[0].to_csv(p)
        rows = list(csv.reader(p.open()))
        assert rows[0][0] == "bias_nT" and len(rows) == 4
        assert [float(r[0]) for r in rows[1:]] == [104.0, 106.0, 108.0]

    def test_degenerate_points_are_marked(self):
        cfg, sched = k_he3_idealised(), khe_schedule()
        scan = bias_scan(cfg, sched, [-100e-9, -106.3e-9], degeneracy_threshold=1e5,
                         check_linearity=False)
        s = scan.summary()
        assert s["degenerate_points_nT"] == [pytest.approx(100.0)]
        assert scan.reports[0].rot == math.inf
        assert s["panco_optimum_nT"] == pytest.approx(106.3)

    def test_workers_do_not_change_results(self):
        cfg, sched = k_he3_idealised(), khe_schedule()
        grid = [-105e-9, -107e-9]
        a = bias_scan(cfg, sched, grid, workers=1, check_linearity=False)
        b = bias_scan(cfg, sched, grid, workers=2, check_linearity=False)
        assert [r.sens_Om for r in a.reports] == [r.sens_Om for r in b.reports]

    def test_empty(self):
        with pytest.raises(ValueError):
            bias_scan(k_he3_idealised(), khe_schedule(), [])

    def test_refine_minimum(self):
        x = np.linspace(0, 10, 11)
        assert refine_minimum(x, (x - 4.3) ** 2) == pytest.approx(4.3)
        assert refine_minimum(x, x) == 0.0


class TestCrosstalk:
    def test_zero_offset_floor(self, khe_cell, khe_sched, khe_sig):
        xt = crosstalk(khe_cell, khe_sched, khe_sig, khe_cell.bias_z)
        assert xt.uhz_per_pt < 1e-3

    def test_local_linearity_in_bias_error(self, khe_cell, khe_sched, khe_sig):
        a = crosstalk(khe_cell, khe_sched, khe_sig, khe_cell.bias_z - 0.2e-9)
        b = crosstalk(khe_cell, khe_sched, khe_sig, khe_cell.bias_z - 0.1e-9)
        assert a.norm / b.norm == pytest.approx(2.0, rel=0.2)

    def test_probe_linearity_violation(self, khe_cell, khe_sched, khe_sig):
        with pytest.raises(LinearityError):
            crosstalk(khe_cell, khe_sched, khe_sig, khe_cell.bias_z - 0.2e-9, B_probe=5e-10)


class TestSuppression:
    def test_unit(self):
        assert suppression_factor(GAMMA_HE3 / (2 * math.pi), GAMMA_HE3) == pytest.approx(1.0)

    def test_reference_number(self):
        # 0.2 uHz/pT is 2e5 Hz/T; 32.43e6 / 2e5 = 162.15
        assert suppression_factor(2e5, GAMMA_HE3) == pytest.approx(162.15, rel=1e-12)

    @given(st.floats(1.0, 1e9))
    def test_inverse_proportional(self, x):
        assert suppression_factor(x / 2, GAMMA_HE3) == pytest.approx(2 * suppression_factor(x, GAMMA_HE3))

    @pytest.mark.parametrize("x", [0.0, -1.0])
    def test_non_positive(self, x):
        with pytest.raises(ValueError):
            suppression_factor(x, GAMMA_HE3)
