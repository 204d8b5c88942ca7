import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flametomo.fields import ThermochemState
from flametomo.spectra import (
    C2,
    CrossSectionTable,
    LineDatabase,
    LineDatabaseError,
    SpectralDomainError,
    SpectralLine,
    WavenumberGrid,
    absorption_spectrum,
    parse_line_database,
    planck_intensity,
    planck_intensity_dT,
    planck_mean,
    planck_mean_kappa,
    species_cross_sections,
)

# Planck's law from CODATA constants, written independently of the module.
_H, _C, _K = 6.62607015e-34, 2.99792458e8, 1.380649e-23


def planck_oracle(T, eta_cm):
    nu = eta_cm * 100.0  # m^-1
    per_m = 2 * _H * _C**2 * nu**3 / math.expm1(_H * _C * nu / (_K * T))
    return per_m * 100.0  # per cm^-1


def single_line_db(center=700.0, S=1.0, E=500.0, gamma=0.07, n=0.75, species="CO2"):
    return LineDatabase((SpectralLine(species, center, S, E, gamma, n),), (species,), 296.0, 1.0)


class TestWavenumberGrid:
    def test_count_and_points(self):
        g = WavenumberGrid(650.0, 725.0, 0.04)
        assert g.count == 1876
        assert g.points[0] == 650.0
        assert g.points[-1] == pytest.approx(725.0, abs=1e-9)

    def test_invalid(self):
        with pytest.raises(SpectralDomainError):
            WavenumberGrid(700.0, 650.0, 1.0)
        with pytest.raises(SpectralDomainError):
            WavenumberGrid(0.0, 650.0, 1.0)
        with pytest.raises(SpectralDomainError):
            WavenumberGrid(650.0, 700.0, 0.0)

    def test_points_read_only(self):
        g = WavenumberGrid(650.0, 660.0, 1.0)
        with pytest.raises(ValueError):
            g.points[0] = 1.0


class TestPlanck:
    def test_reference_value(self):
        assert C2 * 700.0 / 1000.0 == pytest.approx(1.00714, abs=1e-5)
        assert planck_intensity(1000.0, 700.0) == pytest.approx(planck_oracle(1000.0, 700.0), rel=1e-12)
        assert planck_intensity(1000.0, 700.0) == pytest.approx(2.35087, rel=1e-5)

    @given(st.floats(250, 3000), st.floats(100, 5000))
    def test_monotone_in_temperature(self, T, eta):
        assert planck_intensity(2 * T, eta) > planck_intensity(T, eta)

    @given(st.floats(300, 2500), st.floats(600, 800))
    def test_ratio_identity(self, T, eta):
        assert planck_intensity(T, eta) / planck_intensity(T, eta) == 1.0

    @given(st.floats(300, 2500), st.floats(600, 800))
    def test_derivative_matches_difference(self, T, eta):
        h = 1e-3 * T
        fd = (planck_intensity(T + h, eta) - planck_intensity(T - h, eta)) / (2 * h)
        assert planck_intensity_dT(T, eta) == pytest.approx(fd, rel=1e-6)

    @pytest.mark.parametrize("T,eta", [(0.0, 700.0), (-5.0, 700.0), (1000.0, 0.0)])
    def test_domain_errors(self, T, eta):
        with pytest.raises(SpectralDomainError):
            planck_intensity(T, eta)


class TestAbsorption:
    def test_zero_composition(self, db):
        grid = WavenumberGrid(650.0, 725.0, 0.5)
        state = ThermochemState(1500.0, {"CO2": 0.0, "H2O": 0.0, "CH4": 0.0})
        assert np.all(absorption_spectrum(state, grid, db) == 0.0)

    def test_linear_in_species_fraction(self, db):
        grid = WavenumberGrid(650.0, 725.0, 0.5)
        k1 = absorption_spectrum(ThermochemState(1200.0, {"CO2": 0.05}), grid, db)
        k2 = absorption_spectrum(ThermochemState(1200.0, {"CO2": 0.10}), grid, db)
        np.testing.assert_allclose(k2, 2 * k1, rtol=1e-14)

    @given(st.floats(400, 2200), st.floats(0.0, 0.3), st.floats(0.0, 0.3), st.floats(0.1, 3.0))
    def test_homogeneous_degree_one(self, db, T, a, b, scale):
        grid = WavenumberGrid(650.0, 725.0, 1.0)
        base = absorption_spectrum(ThermochemState(T, {"CO2": a / 3, "H2O": b / 3}), grid, db)
        scaled = absorption_spectrum(ThermochemState(T, {"CO2": scale * a / 3, "H2O": scale * b / 3}), grid, db)
        np.testing.assert_allclose(scaled, scale * base, rtol=1e-12, atol=1e-300)
        assert np.all(base >= 0)

    def test_unknown_species_contributes_nothing(self, db):
        grid = WavenumberGrid(650.0, 725.0, 1.0)
        with_co = absorption_spectrum(ThermochemState(1000.0, {"CO2": 0.1, "CO": 0.2}), grid, db)
        without = absorption_spectrum(ThermochemState(1000.0, {"CO2": 0.1}), grid, db)
        np.testing.assert_array_equal(with_co, without)

    def test_single_line_integrates_to_strength(self):
        T, X = 1000.0, 0.2
        line_db = single_line_db()
        grid = WavenumberGrid(200.0, 1200.0, 0.005)
        kappa = absorption_spectrum(ThermochemState(T, {"CO2": X}), grid, line_db)
        S_T = 1.0 * (296.0 / T) ** 0.75 * math.exp(-C2 * 500.0 * (1 / T - 1 / 296.0))
        expected = 100.0 * X * 1.0 * (296.0 / T) * S_T
        assert np.trapezoid(kappa, grid.points) == pytest.approx(expected, rel=1e-2)

    def test_continuous_across_reference_temperature(self, db):
        grid = WavenumberGrid(650.0, 725.0, 1.0)
        lo = absorption_spectrum(ThermochemState(296.0 - 1e-7, {"CO2": 0.1}), grid, db)
        hi = absorption_spectrum(ThermochemState(296.0 + 1e-7, {"CO2": 0.1}), grid, db)
        np.testing.assert_allclose(lo, hi, rtol=1e-6)

    def test_pure(self, db):
        grid = WavenumberGrid(650.0, 725.0, 0.5)
        s = ThermochemState(1400.0, {"CO2": 0.1, "H2O": 0.2})
        np.testing.assert_array_equal(absorption_spectrum(s, grid, db), absorption_spectrum(s, grid, db))

    def test_bad_state(self, db):
        grid = WavenumberGrid(650.0, 725.0, 1.0)

        class Raw:
            T = 1000.0
            X = {"CO2": 1.5}

        with pytest.raises(SpectralDomainError):
            absorption_spectrum(Raw(), grid, db)

    def test_cross_section_derivative(self, db):
        grid = WavenumberGrid(660.0, 680.0, 0.5)
        T = np.array([700.0, 1500.0])
        sig, dsig = species_cross_sections(db, grid, T, ("CO2", "H2O"), with_dT=True)
        h = 1e-3
        fd = (species_cross_sections(db, grid, T + h, ("CO2", "H2O"))
              - species_cross_sections(db, grid, T - h, ("CO2", "H2O"))) / (2 * h)
        np.testing.assert_allclose(dsig, fd, rtol=1e-6, atol=1e-12 * np.abs(sig).max())


class TestPlanckMean:
    def test_gray_absorber(self):
        grid = WavenumberGrid(650.0, 725.0, 0.1)
        assert planck_mean(np.full(grid.count, 3.25), 1300.0, grid) == pytest.approx(3.25, rel=1e-14)

    def test_zero_composition(self, db):
        grid = WavenumberGrid(650.0, 725.0, 0.5)
        assert planck_mean_kappa(ThermochemState(1000.0, {"CO2": 0.0}), grid, db) == 0.0

    def test_within_spectral_range(self, db):
        grid = WavenumberGrid(650.0, 725.0, 0.1)
        state = ThermochemState(1500.0, {"CO2": 0.1, "H2O": 0.15})
        k = absorption_spectrum(state, grid, db)
        kp = planck_mean_kappa(state, grid, db)
        assert k.min() <= kp <= k.max()

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_refinement(self, seed):
        rng = np.random.default_rng(seed)
        n = 40
        lines = tuple(
            SpectralLine(sp, c, s, e, g, t)
            for sp, c, s, e, g, t in zip(
                rng.choice(["CO2", "H2O"], n), rng.uniform(652, 723, n), rng.uniform(0.05, 1.0, n),
                rng.uniform(100, 1500, n), rng.uniform(0.05, 0.1, n), rng.uniform(0.5, 0.75, n))
        )
        rdb = LineDatabase(lines, ("CO2", "H2O"))
        state = ThermochemState(1500.0, {"CO2": 0.1, "H2O": 0.2})
        base = planck_mean_kappa(state, WavenumberGrid(650.0, 725.0, 0.04), rdb)
        dense = planck_mean_kappa(state, WavenumberGrid(650.0, 725.0, 0.004), rdb)
        assert base == pytest.approx(dense, rel=5e-3)


class TestCrossSectionTable:
    def test_matches_line_by_line(self, db):
        grid = WavenumberGrid(660.0, 700.0, 0.25)
        table = CrossSectionTable(db, grid, ("CO2", "H2O", "CH4"), 250.0, 2300.0)
        T = np.array([251.3, 777.7, 1499.9, 2299.0])
        val, der = table.evaluate(T)
        exact, dexact = species_cross_sections(db, grid, T, ("CO2", "H2O", "CH4"), with_dT=True)
        np.testing.assert_allclose(val, exact, rtol=1e-6, atol=1e-9 * exact.max())
        np.testing.assert_allclose(der, dexact, rtol=1e-4, atol=1e-5 * np.abs(dexact).max())

    def test_derivative_of_interpolant(self, db):
        grid = WavenumberGrid(660.0, 670.0, 0.5)
        table = CrossSectionTable(db, grid, ("CO2",), 250.0, 2300.0)
        T, h = np.array([1003.2]), 1e-4
        fd = (table.evaluate(T + h)[0] - table.evaluate(T - h)[0]) / (2 * h)
        np.testing.assert_allclose(table.evaluate(T)[1], fd, rtol=1e-6)


class TestLineDatabaseFile:
    def test_bundled(self, db):
        assert db.species_list == ("CO2", "H2O", "CH4")
        assert len(db.lines) > 100
        assert all(640 <= ln.center <= 735 for ln in db.lines)
        assert all(ln.halfwidth_ref > 0 and ln.strength_ref >= 0 for ln in db.lines)

    def test_empty_line_list(self):
        parsed = parse_line_database(["# nothing", "LINEDB v1 T_ref=296 P=1"])
        assert parsed.lines == () and parsed.T_ref == 296.0

    def test_order_preserved(self):
        parsed = parse_line_database([
            "LINEDB v1 T_ref=296 P=1",
            "H2O 700.0 0.1 100 0.07 0.8",
            "CO2 690.0 0.2 200 0.07 0.7",
        ])
        assert [ln.center for ln in parsed.lines] == [700.0, 690.0]
        assert parsed.species_list == ("CO2", "H2O")

    @pytest.mark.parametrize("row,fragment", [
        ("CO2 700.0 0.1 100 -0.07 0.8", ":2:"),
        ("XX 700.0 0.1 100 0.07 0.8", "unknown species"),
        ("CO2 700.0 0.1 100 0.07", "expected 6 fields"),
        ("CO2 700.0 abc 100 0.07 0.8", "non-numeric"),
    ])
    def test_bad_rows_name_line(self, row, fragment):
        with pytest.raises(LineDatabaseError, match=fragment):
            parse_line_database(["LINEDB v1 T_ref=296 P=1", row])

    def test_missing_header(self):
        with pytest.raises(LineDatabaseError):
            parse_line_database(["CO2 700.0 0.1 100 0.07 0.8"])
