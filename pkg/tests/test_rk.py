"""
Tests for Shu-Osher tableaux: construction, analysis and serialization
"""

import json
import logging

import numpy as np
import pytest

from stabopt.exceptions import ConstructionError, TableauFormatError
from stabopt.polynomial import (
    PseudoExtremaSet,
    StabilityPolynomial,
    disk_polynomial_pe,
    evaluate,
    exponential_taylor_pe,
    stability_boundary_samples,
)
from stabopt.rk import (
    ShuOsherTableau,
    abscissae,
    abscissae_recursive,
    build_tableau,
    deserialize_tableau,
    internal_stability,
    scalar_stability_function,
    serialize_tableau,
    ssp_coefficient,
    summarize_amplification,
)


def _ssp_rk2() -> ShuOsherTableau:
    """Two-stage SSP method: U + dt F(U), then the average with one more Euler step."""
    alpha = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 0.5]])
    beta = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 0.5]])
    return ShuOsherTableau(
        S=2, p=2, dt=1.0, v=np.array([1.0, 0.0, 0.0]), alpha=alpha, beta=beta, c=np.array([0.0, 1.0])
    )


def _dense_q(t: ShuOsherTableau, z: complex) -> np.ndarray:
    """Internal stability polynomials through an explicit inverse."""
    S = t.S
    resolvent = np.linalg.inv(np.eye(S) - t.alpha[:S] - z * t.beta[:S])
    return (t.alpha[S] + z * t.beta[S]) @ resolvent


class TestShuOsherTableau:
    """Tests for tableau validation"""

    def test_ssp_rk2_is_valid(self):
        """Test that the hand-entered SSP method passes validation"""
        t = _ssp_rk2()
        assert t.S == 2
        assert t.max_abs_beta == 1.0
        np.testing.assert_allclose(scalar_stability_function(t, np.array([-1.0, 1j])), [0.5, 1.0 + 1j - 0.5])

    def test_rejects_implicit_entries(self):
        """Test that diagonal entries are rejected"""
        t = _ssp_rk2()
        beta = np.array(t.beta)
        beta[1, 1] = 0.1
        with pytest.raises(TableauFormatError, match="explicit"):
            ShuOsherTableau(S=2, p=2, dt=1.0, v=t.v, alpha=t.alpha, beta=beta, c=t.c)

    def test_rejects_row_sum(self):
        """Test that alpha rows must sum to one"""
        t = _ssp_rk2()
        alpha = np.array(t.alpha)
        alpha[2, 0] = 0.4
        with pytest.raises(TableauFormatError) as excinfo:
            ShuOsherTableau(S=2, p=2, dt=1.0, v=t.v, alpha=alpha, beta=t.beta, c=t.c)
        assert excinfo.value.location == "alpha[2]"

    def test_rejects_shape(self):
        """Test that mismatched shapes are rejected"""
        t = _ssp_rk2()
        with pytest.raises(TableauFormatError, match="shape"):
            ShuOsherTableau(S=2, p=2, dt=1.0, v=t.v, alpha=t.alpha[:2], beta=t.beta, c=t.c)

    def test_rejects_v(self):
        """Test that only U_n enters the first stage"""
        t = _ssp_rk2()
        with pytest.raises(TableauFormatError):
            ShuOsherTableau(S=2, p=2, dt=1.0, v=np.array([1.0, 0.5, 0.0]), alpha=t.alpha, beta=t.beta, c=t.c)

    def test_arrays_are_copied(self):
        """Test that the tableau does not alias caller arrays"""
        alpha = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 0.5]])
        beta = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 0.5]])
        t = ShuOsherTableau(S=2, p=2, dt=1.0, v=np.eye(3)[0], alpha=alpha, beta=beta, c=np.array([0.0, 1.0]))
        alpha[2, 0] = 7.0
        assert t.alpha[2, 0] == 0.5


class TestBuildTableau:
    """Tests for realizing factorized polynomials as Shu-Osher tableaux"""

    def test_disk_tableau_layout(self, disk8_tableau):
        """Test submethod kinds, non-negative beta and the closing row"""
        kinds = [record.kind for record in disk8_tableau.grouping]
        assert kinds.count("euler") == 1
        assert kinds.count("pair") == 3
        assert np.all(disk8_tableau.beta >= 0.0)
        assert disk8_tableau.alpha[8, 0] == 1.0
        assert disk8_tableau.beta[8, 7] == 1.0
        assert disk8_tableau.grouping[0].stage_start == 2
        assert disk8_tableau.grouping[-1].stage_stop == 8

    def test_submethods_sorted_by_beta_norm(self, disk8_tableau):
        """Test that submethods appear with increasing beta norm"""
        norms = [
            float(np.abs(disk8_tableau.beta[r.stage_start - 1 : r.stage_stop]).sum())
            for r in disk8_tableau.grouping
        ]
        assert norms == sorted(norms)

    @pytest.mark.parametrize(("S", "rtol"), [(8, 1e-10), (16, 1e-10), (32, 1e-10), (64, 1e-10), (128, 1e-6)])
    def test_stability_function_round_trip(self, S, rtol):
        """Test that the stage recursion reproduces the factorized polynomial"""
        pe = disk_polynomial_pe(S, 1)
        t = build_tableau(StabilityPolynomial(pe, order=1, dt=1.0), lebedev_grouping=False)
        samples = stability_boundary_samples(pe, rays=100)
        expected = evaluate(pe, samples)
        np.testing.assert_allclose(scalar_stability_function(t, samples), expected, rtol=rtol)

    def test_second_order_round_trip(self, disk8_tableau):
        """Test the p=2 disk tableau away from the boundary"""
        z = np.array([-1.0, -7.0 + 3.0j, -0.5j, -12.0 + 0.1j])
        np.testing.assert_allclose(
            scalar_stability_function(disk8_tableau, z), evaluate(disk_polynomial_pe(8, 2), z), rtol=1e-10
        )

    def test_abscissae_agree(self, disk8_tableau):
        """Test that triangular solve and recursion give the same stage times"""
        c = abscissae(disk8_tableau.alpha, disk8_tableau.beta)
        np.testing.assert_allclose(c, abscissae_recursive(disk8_tableau.alpha, disk8_tableau.beta), atol=1e-12)
        np.testing.assert_allclose(disk8_tableau.c, c)
        assert c[0] == 0.0

    def test_negative_beta_mode(self):
        """Test that the relaxed construction still reproduces the polynomial"""
        pe = disk_polynomial_pe(8, 2)
        t = build_tableau(StabilityPolynomial(pe, order=2, dt=1.0), allow_negative_beta=True)
        z = np.array([-3.0 + 2.0j, -10.0, -1.0j])
        np.testing.assert_allclose(scalar_stability_function(t, z), evaluate(pe, z), rtol=1e-10)

    def test_positive_real_pair_needs_negative_beta(self):
        """Test that a factor with negative linear coefficient fails in strict mode"""
        pe = PseudoExtremaSet(np.array([-4.0]), np.array([0.5 + 2.0j]))
        poly = StabilityPolynomial(pe, order=1, dt=1.0)
        with pytest.raises(ConstructionError) as excinfo:
            build_tableau(poly, lebedev_grouping=False)
        assert excinfo.value.pseudo_extrema == (0.5 + 2.0j,)


class TestLebedevGrouping:
    """Tests for four-stage grouping of pairs near the imaginary axis"""

    def test_small_pair_is_grouped(self, small_re_pe):
        """Test that the pair near the axis is merged with the most negative pair"""
        t = build_tableau(StabilityPolynomial(small_re_pe, order=1, dt=1.0))
        kinds = sorted(record.kind for record in t.grouping)
        assert kinds == ["euler", "lebedev_quad", "pair"]
        quad = next(r for r in t.grouping if r.kind == "lebedev_quad")
        assert quad.stage_stop - quad.stage_start == 3
        # roots(): [-40, upper_0..2, conj_0..2]; small pair 0 with large pair 1
        assert sorted(quad.pe_indices) == [1, 2, 4, 5]
        assert np.all(t.beta >= 0.0)
        assert t.max_abs_beta <= 10.0

    def test_grouped_round_trip(self, small_re_pe):
        """Test that the grouped tableau reproduces the polynomial"""
        t = build_tableau(StabilityPolynomial(small_re_pe, order=1, dt=1.0))
        samples = stability_boundary_samples(small_re_pe, rays=100)
        np.testing.assert_allclose(
            scalar_stability_function(t, samples), evaluate(small_re_pe, samples), rtol=1e-10
        )

    def test_lone_small_pair(self):
        """Test that a pair near the axis without partner cannot be grouped"""
        pe = PseudoExtremaSet(np.array([-40.0]), np.array([-0.1 + 2.0j]))
        with pytest.raises(ConstructionError, match="no partner"):
            build_tableau(StabilityPolynomial(pe, order=1, dt=1.0))

    def test_ungrouped_large_beta_warning(self, caplog):
        """Test the warning for an ungrouped pair very close to the axis"""
        pe = PseudoExtremaSet(np.array([-40.0]), np.array([-0.01 + 2.0j, -20.0 + 5.0j]))
        with caplog.at_level(logging.WARNING, logger="stabopt.rk"):
            t = build_tableau(StabilityPolynomial(pe, order=1, dt=1.0), lebedev_grouping=False)
        assert t.max_abs_beta > 10.0
        assert "Large beta" in caplog.text

    def test_grouping_shrinks_coefficients(self):
        """Test that grouping the same pair keeps beta far below its ungrouped size"""
        pe = PseudoExtremaSet(np.array([-40.0]), np.array([-0.01 + 2.0j, -20.0 + 5.0j]))
        poly = StabilityPolynomial(pe, order=1, dt=1.0)
        grouped = build_tableau(poly)
        ungrouped = build_tableau(poly, lebedev_grouping=False)
        assert ungrouped.max_abs_beta >= 50.0
        assert grouped.max_abs_beta < 10.0

    def test_grouping_lowers_amplification(self, small_re_pe):
        """Test that grouping lowers the internal amplification bound"""
        pe = PseudoExtremaSet(np.array([-40.0]), np.array([-0.01 + 2.0j, -20.0 + 5.0j]))
        for fixture_pe, ratio in ((pe, 1.2), (small_re_pe, 1.1)):
            poly = StabilityPolynomial(fixture_pe, order=1, dt=1.0)
            samples = stability_boundary_samples(fixture_pe)
            grouped = internal_stability(build_tableau(poly), samples)
            ungrouped = internal_stability(build_tableau(poly, lebedev_grouping=False), samples)
            assert ungrouped.M_tilde > ratio * grouped.M_tilde


class TestInternalStability:
    """Tests for internal amplification factors"""

    @pytest.mark.parametrize("fixture", ["rk3_tableau", "disk8_tableau"])
    def test_dense_oracle(self, fixture, request):
        """Test the row recursion against an explicit inverse"""
        t = request.getfixturevalue(fixture)
        z = np.array([-0.5 + 0.5j, -1.0, -0.2j, -2.0 + 1.0j])
        report = internal_stability(t, z)
        for m, point in enumerate(z):
            np.testing.assert_allclose(report.q_values[m, : t.S], _dense_q(t, point), rtol=1e-10, atol=1e-14)
        np.testing.assert_array_equal(report.q_values[:, t.S], 1.0)

    def test_first_polynomial_is_stability_function(self, disk8_tableau):
        """Test that Q_1 equals P at random points"""
        rng = np.random.default_rng(4)
        z = -rng.uniform(0.0, 14.0, 20) + 1j * rng.uniform(-7.0, 7.0, 20)
        report = internal_stability(disk8_tableau, z)
        np.testing.assert_allclose(report.q_values[:, 0], evaluate(disk_polynomial_pe(8, 2), z), rtol=1e-9)

    def test_m_tilde(self, disk8_tableau):
        """Test M_tilde as the largest sum of |Q_k| for k >= 2"""
        samples = stability_boundary_samples(disk_polynomial_pe(8, 2), rays=64)
        report = internal_stability(disk8_tableau, samples)
        expected = np.max(np.abs(report.q_values[:, 1:]).sum(axis=1))
        assert report.M_tilde == pytest.approx(expected)
        assert report.per_stage_max.size == 9
        assert report.truncation_scale == 1.0

    def test_summary(self, rk3_tableau):
        """Test the round-off criterion fields"""
        samples = stability_boundary_samples(exponential_taylor_pe(3), rays=32)
        summary = summarize_amplification(rk3_tableau, internal_stability(rk3_tableau, samples))
        assert summary.samples == 32
        assert summary.truncation_scale == pytest.approx(0.01**4)
        assert summary.ratio == pytest.approx(summary.roundoff_scale / summary.truncation_scale)
        assert summary.roundoff_scale == pytest.approx(summary.m_tilde * np.finfo(float).eps)


class TestSspCoefficient:
    """Tests for the SSP coefficient"""

    def test_constructed_tableaux_are_not_ssp(self, disk8_tableau, rk3_tableau):
        """Test that the closing Euler row makes every constructed method non-SSP"""
        assert ssp_coefficient(disk8_tableau) == 0.0
        assert ssp_coefficient(rk3_tableau) == 0.0

    def test_ssp_rk2(self):
        """Test that the hand-entered SSP method has coefficient one"""
        assert ssp_coefficient(_ssp_rk2()) == 1.0


class TestSerialization:
    """Tests for the JSON tableau format"""

    def test_file_reloads_exactly(self, tmp_path, disk8_tableau):
        """Test that every coefficient survives the round trip bit for bit"""
        path = serialize_tableau(disk8_tableau, tmp_path / "t.json")
        loaded = deserialize_tableau(path)
        np.testing.assert_array_equal(loaded.alpha, disk8_tableau.alpha)
        np.testing.assert_array_equal(loaded.beta, disk8_tableau.beta)
        np.testing.assert_array_equal(loaded.c, disk8_tableau.c)
        assert loaded.grouping == disk8_tableau.grouping
        assert loaded.dt == disk8_tableau.dt

    def test_version_mismatch(self, tmp_path, disk8_tableau):
        """Test that an unknown format version is rejected"""
        path = serialize_tableau(disk8_tableau, tmp_path / "t.json")
        data = json.loads(path.read_text())
        data["version"] = "stabopt-tableau/0"
        path.write_text(json.dumps(data))
        with pytest.raises(TableauFormatError) as excinfo:
            deserialize_tableau(path)
        assert excinfo.value.location == "version"

    def test_missing_field(self, tmp_path, disk8_tableau):
        """Test that a missing field is reported with its location"""
        path = serialize_tableau(disk8_tableau, tmp_path / "t.json")
        data = json.loads(path.read_text())
        del data["c"]
        path.write_text(json.dumps(data))
        with pytest.raises(TableauFormatError) as excinfo:
            deserialize_tableau(path)
        assert excinfo.value.location == "c"

    def test_index_out_of_range(self, tmp_path, disk8_tableau):
        """Test that triplets outside the matrix are rejected"""
        path = serialize_tableau(disk8_tableau, tmp_path / "t.json")
        data = json.loads(path.read_text())
        data["alpha_triplets"][0] = [0, 8, 1.0]
        path.write_text(json.dumps(data))
        with pytest.raises(TableauFormatError) as excinfo:
            deserialize_tableau(path)
        assert excinfo.value.location == "alpha_triplets[0]"

    def test_missing_file(self, tmp_path):
        """Test that an unreadable file is a format error"""
        with pytest.raises(TableauFormatError):
            deserialize_tableau(tmp_path / "missing.json")
