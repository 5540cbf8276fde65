"""
Tests for spectra, scans, fits and micromotion compensation (analysis.py).

Spectral and fit checks run on synthetic data with known answers. Scans and
compensation use the analytic trap model; the trajectory-based axial scan is
gated behind TAPEREDTRAP_SLOW_TESTS=1.
"""

import math
import os
from dataclasses import replace

import numpy as np
import pytest

from taperedtrap import constants as C
from taperedtrap.analysis import (
    BandError,
    FitError,
    ScanResult,
    SpectrumError,
    axis_rotation_scan,
    balanced_common_voltage,
    compensate,
    fit_eq1,
    fit_linear_epsilon,
    micromotion_metric,
    peak_frequency,
    power_spectrum,
    predicted_micromotion_velocity,
    scan_axial,
    signal_spectrum,
    solve_endcaps,
)
from taperedtrap.dynamics import IonState, micromotion_start, simulate
from taperedtrap.test_dynamics import HarmonicModel
from taperedtrap.trapmodel import (
    AnalyticFieldModel,
    DomainError,
    DriveConfig,
    IonSpecies,
    TrapGeometry,
    calibrate_axis_rotation,
    calibrate_drive,
    equilibrium_position,
    radial_freq_eq1,
    secular_frequencies,
)

TWO_PI = 2 * math.pi
P_TRUE = math.tan(C.TAPER_ANGLE) / C.R0

slow = pytest.mark.skipif(os.environ.get("TAPEREDTRAP_SLOW_TESTS") != "1",
                          reason="set TAPEREDTRAP_SLOW_TESTS=1 for long runs")


@pytest.fixture(scope="module")
def ion():
    return IonSpecies.calcium40()


@pytest.fixture(scope="module")
def rf_model():
    return AnalyticFieldModel(TrapGeometry(), DriveConfig.symmetric(95.0))


@pytest.fixture(scope="module")
def calibrated(ion):
    geom = TrapGeometry()
    drive = calibrate_drive(geom, ion, TWO_PI * 1.145e6, TWO_PI * C.AXIAL_FREQUENCY)
    return AnalyticFieldModel(geom, drive)


SCAN_Z = np.linspace(-50e-6, 100e-6, 7)
HESSIAN = "pseudopotential"


@pytest.fixture(scope="module")
def hessian_scan(calibrated, ion):
    return scan_axial(calibrated, ion, SCAN_Z, TWO_PI * C.AXIAL_FREQUENCY, method=HESSIAN)


def stray_model(ion, e_x):
    return AnalyticFieldModel(TrapGeometry(),
                              DriveConfig.symmetric(95.0, stray_field=(e_x, 0.0, 0.0)))


def synthetic_scan(z, nu_x, nu_y):
    return ScanResult(parameter="z_m", values=z,
                      columns={"nu_x_Hz": nu_x, "nu_y_Hz": nu_y})


# ---------------------------------------------------------------------------
# Spectra
# ---------------------------------------------------------------------------

class TestSpectrum:
    FS = 1.0e6
    N = 4096

    @property
    def df(self):
        return self.FS / self.N

    def tone(self, frequency, amplitude=1.0):
        t = np.arange(self.N) / self.FS
        return amplitude * np.sin(TWO_PI * frequency * t)

    def test_too_few_samples(self):
        with pytest.raises(SpectrumError, match="at least 1024"):
            signal_spectrum(np.zeros(1000), 1e-6)

    def test_sinusoid_dominant_bin(self):
        f0 = 123.4e3
        spectrum = signal_spectrum(self.tone(f0), 1 / self.FS)
        assert abs(spectrum.freq_axis[np.argmax(spectrum.power)] - f0) <= spectrum.resolution
        assert spectrum.window == "hann"
        assert np.all(np.diff(spectrum.freq_axis) > 0)
        assert np.all(spectrum.power >= 0)

    def test_parseval(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=self.N)
        spectrum = signal_spectrum(x, 1 / self.FS)
        w = np.hanning(self.N + 1)[:-1]
        expected = np.sum((x * w) ** 2) / np.sum(w * w)
        assert np.sum(spectrum.power) * spectrum.resolution == pytest.approx(expected, rel=1e-9)

    def test_dc_only(self):
        spectrum = signal_spectrum(np.full(self.N, 2.5), 1 / self.FS)
        assert np.argmax(spectrum.power) == 0
        # The Hann main lobe of DC reaches bin 1 and no further.
        assert np.all(spectrum.power[2:] < 1e-20 * spectrum.power[0])

    def test_two_tones_resolved(self):
        fs, duration = 4.0e6, 0.1
        t = np.arange(int(fs * duration)) / fs
        x = np.sin(TWO_PI * 1.14e6 * t) + np.sin(TWO_PI * 1.15e6 * t)
        spectrum = signal_spectrum(x, 1 / fs)
        assert spectrum.resolution == pytest.approx(10.0)
        low = peak_frequency(spectrum, (1.135e6, 1.145e6))
        high = peak_frequency(spectrum, (1.145e6, 1.155e6))
        assert low.frequency == pytest.approx(1.14e6, abs=1.0)
        assert high.frequency == pytest.approx(1.15e6, abs=1.0)
        assert not low.low_confidence and not high.low_confidence

    def test_power_spectrum_of_trajectory(self, ion):
        model = HarmonicModel(ion, (TWO_PI * 1e5, TWO_PI * 1.3e5, TWO_PI * 0.7e5))
        record = simulate(model, ion, IonState.at_rest((1e-6, 1e-6, 0.0)), 2e-3,
                          dt=2.5e-7, sample_stride=1)
        spectrum = power_spectrum(record, "x")
        peak = peak_frequency(spectrum, (0.8e5, 1.2e5))
        assert peak.frequency == pytest.approx(1e5, rel=5e-3)
        assert power_spectrum(record, 1).power.argmax() != spectrum.power.argmax()


class TestPeakFrequency:
    FS = 1.0e6
    N = 4096

    def spectrum(self, bins, amplitude=1.0):
        df = self.FS / self.N
        t = np.arange(self.N) / self.FS
        return signal_spectrum(amplitude * np.sin(TWO_PI * bins * df * t), 1 / self.FS), df

    def test_sub_bin_offset_recovered(self):
        spectrum, df = self.spectrum(1000.25)
        peak = peak_frequency(spectrum, (980 * df, 1020 * df))
        assert abs(peak.frequency - 1000.25 * df) < df / 20
        assert peak.uncertainty >= df / 10
        assert peak.bin_index == 1000

    def test_on_bin_gives_zero_shift(self):
        spectrum, df = self.spectrum(1000)
        peak = peak_frequency(spectrum, (980 * df, 1020 * df))
        assert abs(peak.frequency - 1000 * df) < 1e-9 * df
        assert peak.uncertainty == pytest.approx(df / 10)

    def test_amplitude_scaling_is_bit_identical(self):
        spectrum, df = self.spectrum(1000.37)
        scaled, _ = self.spectrum(1000.37, amplitude=4.0)
        band = (980 * df, 1020 * df)
        assert peak_frequency(spectrum, band).frequency == peak_frequency(scaled, band).frequency

    def test_white_noise_is_low_confidence(self):
        rng = np.random.default_rng(11)
        spectrum = signal_spectrum(rng.normal(size=8192), 1 / self.FS)
        peak = peak_frequency(spectrum, (1.25e5, 2.5e5))
        assert peak.low_confidence
        assert peak.prominence_db < 6.0

    def test_clean_tone_is_confident(self):
        spectrum, df = self.spectrum(1000.5)
        peak = peak_frequency(spectrum, (900 * df, 1100 * df))
        assert not peak.low_confidence

    def test_edge_peak_raises(self):
        spectrum, df = self.spectrum(1000)
        with pytest.raises(BandError, match="band too narrow"):
            peak_frequency(spectrum, (1000 * df, 1020 * df))

    def test_band_outside_axis(self):
        spectrum, _ = self.spectrum(1000)
        with pytest.raises(BandError, match="outside"):
            peak_frequency(spectrum, (1e5, 1e6))


# ---------------------------------------------------------------------------
# Fits
# ---------------------------------------------------------------------------

class TestFits:
    Z = np.linspace(-50e-6, 100e-6, 16)
    W0 = (TWO_PI * 1.14e6, TWO_PI * 1.15e6)

    def exact_scan(self, p=P_TRUE):
        nu = [radial_freq_eq1(self.Z, w0, math.atan(p), 1.0) / TWO_PI for w0 in self.W0]
        return synthetic_scan(self.Z, *nu)

    def test_exact_recovery(self):
        fit = fit_eq1(self.exact_scan())
        assert fit.converged
        assert fit.p == pytest.approx(P_TRUE, rel=1e-8)
        assert fit.omega0["nu_x_Hz"] == pytest.approx(self.W0[0], rel=1e-8)
        assert fit.omega0["nu_y_Hz"] == pytest.approx(self.W0[1], rel=1e-8)
        assert fit.epsilon == pytest.approx(2 * P_TRUE, rel=1e-8)
        assert fit.n_points == 32
        assert np.allclose(fit.predict("nu_x_Hz", self.Z), TWO_PI * self.exact_scan().column("nu_x_Hz"),
                           rtol=1e-8)

    def test_noisy_recovery_over_seeds(self):
        estimates = []
        for seed in range(20):
            rng = np.random.default_rng(seed)
            scan = self.exact_scan()
            noisy = synthetic_scan(
                self.Z,
                scan.column("nu_x_Hz") * (1 + 0.002 * rng.normal(size=len(self.Z))),
                scan.column("nu_y_Hz") * (1 + 0.002 * rng.normal(size=len(self.Z))))
            estimates.append(fit_eq1(noisy).p)
        assert np.mean(estimates) == pytest.approx(P_TRUE, rel=0.03)

    def test_constant_data_consistent_with_zero(self):
        rng = np.random.default_rng(5)
        flat = [np.full(len(self.Z), w0 / TWO_PI) * (1 + 1e-3 * rng.normal(size=len(self.Z)))
                for w0 in self.W0]
        fit = fit_eq1(synthetic_scan(self.Z, *flat))
        assert fit.p_sigma > 0
        assert abs(fit.p) < 3 * fit.p_sigma

    def test_too_few_points(self):
        z = self.Z[:3]
        with pytest.raises(FitError, match="at least 4"):
            fit_eq1(synthetic_scan(z, np.ones(3), np.ones(3)))

    def test_degenerate_data(self):
        z = np.zeros(6)
        with pytest.raises(FitError, match="degenerate data"):
            fit_eq1(synthetic_scan(z, np.full(6, 1e6), np.full(6, 1e6)))

    def test_linear_exact_recovery(self):
        eps = 552.0
        nu = [w0 * (1 + eps * self.Z) / TWO_PI for w0 in self.W0]
        fit = fit_linear_epsilon(synthetic_scan(self.Z, *nu))
        for name, w0 in zip(("nu_x_Hz", "nu_y_Hz"), self.W0):
            assert fit.epsilon[name] == pytest.approx(eps, rel=1e-10)
            assert fit.intercept[name] == pytest.approx(w0, rel=1e-12)
            assert fit.epsilon_sigma[name] < 1e-6
            assert fit.n_points[name] == len(self.Z)

    def test_nan_points_are_skipped(self):
        scan = self.exact_scan()
        nu_x = scan.column("nu_x_Hz").copy()
        nu_x[3] = math.nan
        fit = fit_eq1(synthetic_scan(self.Z, nu_x, scan.column("nu_y_Hz")))
        assert fit.n_points == 31
        assert fit.p == pytest.approx(P_TRUE, rel=1e-8)


# ---------------------------------------------------------------------------
# Axial scan
# ---------------------------------------------------------------------------

class TestAxialScan:
    Z = SCAN_Z

    def test_endcaps_hold_axial_frequency(self, calibrated, ion):
        moved = solve_endcaps(calibrated, ion, 80e-6, TWO_PI * C.AXIAL_FREQUENCY)
        secular = secular_frequencies(moved, ion, 80e-6)
        assert secular.omega_z == pytest.approx(TWO_PI * C.AXIAL_FREQUENCY, rel=1e-6)
        r_eq = equilibrium_position(moved, ion, (0.0, 0.0, 80e-6))
        assert r_eq[2] == pytest.approx(80e-6, abs=1e-9)

    def test_center_point_matches_operating_point(self, hessian_scan):
        i = int(np.argmin(np.abs(self.Z)))
        assert hessian_scan.column("nu_x_Hz")[i] == pytest.approx(1.14e6, rel=5e-3)
        assert hessian_scan.column("nu_y_Hz")[i] == pytest.approx(1.15e6, rel=5e-3)
        assert hessian_scan.column("nu_z_Hz")[i] == pytest.approx(C.AXIAL_FREQUENCY, rel=1e-6)

    def test_frequencies_rise_and_stay_ordered(self, hessian_scan):
        assert not hessian_scan.partial and not hessian_scan.errors
        assert np.all(np.diff(hessian_scan.column("nu_x_Hz")) > 0)
        assert np.all(np.diff(hessian_scan.column("nu_y_Hz")) > 0)
        assert np.all(hessian_scan.column("nu_x_Hz") < hessian_scan.column("nu_y_Hz"))

    def test_linear_epsilon(self, hessian_scan):
        fit = fit_linear_epsilon(hessian_scan)
        for name in ("nu_x_Hz", "nu_y_Hz"):
            assert fit.epsilon[name] == pytest.approx(C.EPSILON_MEASURED, rel=0.05)

    def test_taper_law_residuals(self, hessian_scan):
        fit = fit_eq1(hessian_scan)
        for name in ("nu_x_Hz", "nu_y_Hz"):
            measured = TWO_PI * hessian_scan.column(name)
            relative = np.abs(fit.predict(name, self.Z) - measured) / measured
            assert np.max(relative) < 5e-3

    def test_linear_and_taper_law_slopes_agree(self, calibrated, ion):
        z = np.linspace(-75e-6, 75e-6, 7)
        scan = scan_axial(calibrated, ion, z, TWO_PI * C.AXIAL_FREQUENCY, method=HESSIAN)
        curved = fit_eq1(scan)
        line = fit_linear_epsilon(scan)
        for name in ("nu_x_Hz", "nu_y_Hz"):
            assert line.epsilon[name] == pytest.approx(curved.epsilon, rel=0.02)

    def test_mirrored_taper_falls(self, calibrated, ion):
        mirrored = AnalyticFieldModel(TrapGeometry(taper_angle=-C.TAPER_ANGLE), calibrated.drive)
        scan = scan_axial(mirrored, ion, self.Z, TWO_PI * C.AXIAL_FREQUENCY, method=HESSIAN)
        assert np.all(np.diff(scan.column("nu_x_Hz")) < 0)
        assert np.all(np.diff(scan.column("nu_y_Hz")) < 0)

    def test_positions_beyond_range_rejected(self, calibrated, ion):
        with pytest.raises(DomainError, match="within"):
            scan_axial(calibrated, ion, [0.0, 0.6e-3])

    def test_unknown_method_rejected(self, calibrated, ion):
        with pytest.raises(ValueError, match="unknown scan method"):
            scan_axial(calibrated, ion, [0.0], method="hessian")

    def test_worker_pool_matches_serial(self, calibrated, ion, hessian_scan):
        pooled = scan_axial(calibrated, ion, self.Z[:3], TWO_PI * C.AXIAL_FREQUENCY,
                            method=HESSIAN, workers=2)
        assert np.allclose(pooled.column("nu_x_Hz"), hessian_scan.column("nu_x_Hz")[:3],
                           rtol=1e-12)
        assert np.allclose(pooled.column("v_d1_V"), hessian_scan.column("v_d1_V")[:3],
                           rtol=1e-12)

    def test_default_method_measures_trajectory_spectra(self, calibrated, ion, hessian_scan):
        i = int(np.argmin(np.abs(self.Z)))
        measured = scan_axial(calibrated, ion, [self.Z[i]], TWO_PI * C.AXIAL_FREQUENCY,
                              record_time=3e-5)
        assert not measured.errors
        for name in ("nu_x_Hz", "nu_y_Hz"):
            assert measured.uncertainties[name][0] > 0
            assert measured.column(name)[0] == pytest.approx(
                hessian_scan.column(name)[i], rel=0.05)
        assert np.all(hessian_scan.uncertainties["nu_x_Hz"] == 0)

    @slow
    def test_trajectory_method(self, calibrated, ion, hessian_scan):
        z = self.Z[[0, 3, 6]]
        measured = scan_axial(calibrated, ion, z, TWO_PI * C.AXIAL_FREQUENCY,
                              method="trajectory")
        assert not measured.errors
        for name in ("nu_x_Hz", "nu_y_Hz"):
            assert np.allclose(measured.column(name), hessian_scan.column(name)[[0, 3, 6]],
                               rtol=0.03)
            assert np.all(measured.uncertainties[name] > 0)
        assert np.all(np.diff(measured.column("nu_x_Hz")) > 0)


# ---------------------------------------------------------------------------
# Micromotion
# ---------------------------------------------------------------------------

class TestMicromotion:
    def record(self, model, ion, cycles=100):
        r_eq = equilibrium_position(model, ion)
        period = model.drive.rf_period
        return simulate(model, ion, micromotion_start(model, ion, r_eq), cycles * period,
                        period / 50, sample_stride=1), r_eq

    def displacement_field(self, rf_model, ion, distance):
        omega_x = secular_frequencies(rf_model, ion).omega_x
        return ion.mass * omega_x ** 2 * distance / ion.charge

    def test_null_has_no_micromotion(self, rf_model, ion):
        record, _ = self.record(rf_model, ion)
        thermal = math.sqrt(C.BOLTZMANN * 1e-3 / ion.mass)
        assert micromotion_metric(record, rf_model.omega_rf) < 1e-6 * thermal

    def test_offset_matches_first_order_prediction(self, rf_model, ion):
        model = stray_model(ion, self.displacement_field(rf_model, ion, 1e-6))
        record, r_eq = self.record(model, ion)
        assert r_eq[0] == pytest.approx(1e-6, rel=0.05)
        expected = predicted_micromotion_velocity(model, ion, r_eq)
        assert micromotion_metric(record, model.omega_rf) == pytest.approx(expected, rel=0.05)

    def test_even_under_velocity_reversal(self, rf_model, ion):
        model = stray_model(ion, self.displacement_field(rf_model, ion, 1e-6))
        record, _ = self.record(model, ion)
        reversed_record = replace(record, velocities=-record.velocities)
        assert (micromotion_metric(reversed_record, model.omega_rf)
                == pytest.approx(micromotion_metric(record, model.omega_rf), rel=1e-12))

    def test_linear_in_stray_field(self, rf_model, ion):
        e_x = self.displacement_field(rf_model, ion, 1e-6)
        single, _ = self.record(stray_model(ion, e_x), ion)
        double, _ = self.record(stray_model(ion, 2 * e_x), ion)
        omega = rf_model.omega_rf
        assert (micromotion_metric(double, omega)
                == pytest.approx(2 * micromotion_metric(single, omega), rel=0.02))

    def test_needs_a_hundred_cycles(self, rf_model, ion):
        record, _ = self.record(rf_model, ion, cycles=50)
        with pytest.raises(SpectrumError, match="100 RF cycles"):
            micromotion_metric(record, rf_model.omega_rf)

    def test_full_rf_secular_frequency_matches_hessian(self, ion):
        model = AnalyticFieldModel(TrapGeometry(), DriveConfig.symmetric(70.0))
        predicted = secular_frequencies(model, ion).omega_x / TWO_PI
        period = model.drive.rf_period
        record = simulate(model, ion, IonState.at_rest((1e-6, 0.0, 0.0)), 2e-4,
                          period / 50, sample_stride=10)
        peak = peak_frequency(power_spectrum(record, "x"), (0.9 * predicted, 1.1 * predicted))
        assert peak.frequency == pytest.approx(predicted, rel=0.02)


class TestCompensate:
    BOX = ((-100.0, 100.0), (-100.0, 100.0))

    def test_no_stray_field_gives_zero(self, ion):
        result = compensate(stray_model(ion, 0.0), ion, self.BOX, method="pseudopotential")
        assert abs(result.optimum[0]) <= 0.1
        assert abs(result.optimum[1]) <= 0.1
        assert not result.on_boundary

    def test_stray_field_cancelled(self, ion):
        model = stray_model(ion, 200.0)
        uncompensated = np.linalg.norm(equilibrium_position(model, ion))
        result = compensate(model, ion, self.BOX)
        d13, d24 = result.optimum
        assert d13 > 0 > d24
        assert np.linalg.norm(result.equilibrium) < 0.01 * uncompensated
        assert result.evaluations > 0
        assert not result.on_boundary

    def test_doubling_field_doubles_voltages(self, ion):
        single = compensate(stray_model(ion, 200.0), ion, self.BOX, method="pseudopotential")
        double = compensate(stray_model(ion, 400.0), ion, self.BOX, method="pseudopotential")
        for a, b in zip(single.optimum, double.optimum):
            assert b == pytest.approx(2 * a, rel=0.02)

    def test_box_enlargement_keeps_optimum(self, ion):
        model = stray_model(ion, 200.0)
        small = compensate(model, ion, ((-50.0, 50.0), (-50.0, 50.0)), method="pseudopotential")
        large = compensate(model, ion, self.BOX, method="pseudopotential")
        for a, b in zip(small.optimum, large.optimum):
            assert abs(a - b) <= 0.2

    def test_small_box_flags_boundary(self, ion):
        result = compensate(stray_model(ion, 200.0), ion, ((-10.0, 10.0), (-10.0, 10.0)),
                            method="pseudopotential")
        assert result.on_boundary

    def test_box_must_be_finite(self, ion):
        with pytest.raises(ValueError, match="finite"):
            compensate(stray_model(ion, 0.0), ion, ((-math.inf, 1.0), (-1.0, 1.0)))


# ---------------------------------------------------------------------------
# Principal axes
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def anchored(calibrated, ion):
    beta = calibrate_axis_rotation(calibrated, ion, C.AXIS_ANCHOR_VOLTAGE, C.AXIS_ANCHOR_ANGLE)
    return calibrated.with_drive(replace(calibrated.drive, beta_quad_xy=beta))


class TestAxisRotation:
    def test_weights_balance_at_anchor(self, anchored, ion):
        scan = axis_rotation_scan(anchored, ion, [0.0, C.AXIS_ANCHOR_VOLTAGE, 120.0])
        assert scan.column("angle_deg")[1] == pytest.approx(-22.5, abs=0.1)
        assert scan.column("weight_x")[1] == pytest.approx(scan.column("weight_y")[1], abs=1e-3)
        assert scan.column("weight_x")[0] > scan.column("weight_y")[0]
        assert scan.column("weight_x")[2] < scan.column("weight_y")[2]

    def test_balanced_common_voltage(self, anchored, ion):
        assert balanced_common_voltage(anchored, ion) == pytest.approx(
            C.AXIS_ANCHOR_VOLTAGE, abs=0.5)
