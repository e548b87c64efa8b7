import numpy as np
import pytest

from data_gen import (
    Layout,
    Measurement,
    NoiseSpec,
    ReplicaDataset,
    boundary_equal,
    equally_spaced,
    exact_f,
    exact_laplacian,
    exact_u,
    expand_to_replicas,
    export_dataset,
    import_dataset,
    layout_points,
    manufactured_solution,
    problem_preset,
    sample_measurements,
    uniform_random,
)
from pde_residuals import PdeKind, PdeTag
from utils import ConfigError, DimensionError, DomainError, make_rng

LINEAR = PdeKind(PdeTag.LINEAR_1D, lam=0.01)
TANH = PdeKind(PdeTag.NONLINEAR_TANH_1D, lam=0.01, k_value=0.7)
ALLEN_CAHN = PdeKind(PdeTag.ALLEN_CAHN_2D, lam=0.01)
QUADRATIC = PdeKind(PdeTag.QUADRATIC_REACTION_2D, lam=0.01, k_value=1.0)


class TestManufacturedSolutions:
    def test_linear_origin(self):
        assert manufactured_solution(LINEAR, 0.0) == (0.0, 0.0)

    def test_second_derivative_matches_finite_difference(self):
        x = np.linspace(-0.65, 0.65, 17).reshape(-1, 1)
        h = 1e-4
        fd = (exact_u(LINEAR, x + h) - 2 * exact_u(LINEAR, x) + exact_u(LINEAR, x - h)) / h ** 2
        np.testing.assert_allclose(exact_laplacian(LINEAR, x), fd, atol=1e-2)

    def test_tanh_source(self):
        u, f = manufactured_solution(TANH, 0.3)
        s = np.sin(1.8)
        assert u == pytest.approx(s ** 3)
        assert f == pytest.approx(0.01 * 108.0 * s * (2.0 - 3.0 * s ** 2) + 0.7 * np.tanh(s ** 3))

    def test_allen_cahn_source(self):
        u, f = manufactured_solution(ALLEN_CAHN, [0.5, 0.5])
        assert u == pytest.approx(1.0)
        assert f == pytest.approx(-0.02 * np.pi ** 2)

    def test_quadratic_source(self):
        u, f = manufactured_solution(QUADRATIC, [0.5, -0.5])
        assert u == pytest.approx(-1.0)
        assert f == pytest.approx(0.02 * np.pi ** 2 + 1.0)

    def test_outside_domain_rejected(self):
        with pytest.raises(DomainError):
            manufactured_solution(LINEAR, 0.8)
        with pytest.raises(DomainError):
            exact_f(ALLEN_CAHN, np.array([[1.2, 0.0]]))


class TestLayouts:
    def test_equally_spaced_includes_endpoints(self):
        points = layout_points(LINEAR, equally_spaced(16), make_rng(0))
        assert points.shape == (16, 1)
        assert points[0, 0] == -0.7 and points[-1, 0] == 0.7

    def test_boundary_equal_2d(self):
        points = layout_points(ALLEN_CAHN, boundary_equal(25), make_rng(0))
        assert points.shape == (100, 2)
        assert np.all(np.isclose(np.abs(points), 1.0).any(axis=1))

    def test_boundary_equal_1d_is_both_ends(self):
        points = layout_points(LINEAR, boundary_equal(1), make_rng(0))
        np.testing.assert_array_equal(points.ravel(), [-0.7, 0.7])

    def test_uniform_random_stays_in_region(self):
        points = layout_points(ALLEN_CAHN, uniform_random(500), make_rng(3))
        assert points.shape == (500, 2)
        assert np.all(np.abs(points) <= 1.0)

    def test_equally_spaced_is_1d_only(self):
        with pytest.raises(ConfigError):
            layout_points(ALLEN_CAHN, equally_spaced(4), make_rng(0))

    @pytest.mark.parametrize("kind,count", [("grid", 4), ("equally_spaced", 0)])
    def test_bad_layouts(self, kind, count):
        with pytest.raises(ConfigError):
            Layout(kind, count)


class TestSampleMeasurements:
    def test_zero_noise_gives_exact_values(self):
        layouts = (equally_spaced(16, quantity="f"), equally_spaced(2, quantity="u"))
        measurements = sample_measurements(LINEAR, layouts, NoiseSpec(0.0, 0.0), seed=5)
        assert len(measurements) == 18
        for m in measurements:
            u, f = manufactured_solution(LINEAR, m.location)
            assert m.value == pytest.approx(u if m.quantity == "u" else f, abs=1e-15)

    def test_same_seed_same_data(self):
        layouts = problem_preset("allen_cahn_2d").layouts
        a = sample_measurements(ALLEN_CAHN, layouts, NoiseSpec.case("case1"), seed=9)
        b = sample_measurements(ALLEN_CAHN, layouts, NoiseSpec.case("case1"), seed=9)
        assert a == b

    def test_noise_level(self):
        measurements = sample_measurements(LINEAR, equally_spaced(4000, quantity="u"), NoiseSpec(0.1, 0.1), 2)
        errors = [m.value - manufactured_solution(LINEAR, m.location)[0] for m in measurements]
        assert np.std(errors) == pytest.approx(0.1, rel=0.05)

    def test_unknown_noise_case(self):
        with pytest.raises(ConfigError):
            NoiseSpec.case("case3")

    def test_unknown_quantity(self):
        with pytest.raises(ConfigError):
            Measurement((0.0,), 1.0, "g")


class TestExpandToReplicas:
    def _measurements(self):
        return [Measurement((0.0,), 1.0, "u"), Measurement((0.1,), -2.0, "f")]

    def test_shape_and_statistics(self):
        data = expand_to_replicas(self._measurements(), NoiseSpec(0.01, 0.1), 20000, seed=4)
        assert data.replica_targets.shape == (2, 20000)
        assert data.targets("u").mean() == pytest.approx(1.0, abs=1e-3)
        assert data.targets("u").std() == pytest.approx(0.01, rel=0.05)
        assert data.targets("f").std() == pytest.approx(0.1, rel=0.05)

    def test_replicas_are_uncorrelated(self):
        data = expand_to_replicas(self._measurements() * 500, NoiseSpec(0.1, 0.1), 2, seed=0)
        values = np.array([m.value for m in data.measurements])
        noise = data.replica_targets - values[:, None]
        corr = np.corrcoef(noise[:, 0], noise[:, 1])[0, 1]
        assert abs(corr) < 0.15

    def test_deterministic(self):
        a = expand_to_replicas(self._measurements(), NoiseSpec(0.1, 0.1), 5, seed=7)
        b = expand_to_replicas(self._measurements(), NoiseSpec(0.1, 0.1), 5, seed=7)
        assert np.array_equal(a.replica_targets, b.replica_targets)

    def test_zero_noise_copies_values(self):
        data = expand_to_replicas(self._measurements(), NoiseSpec(0.0, 0.0), 3, seed=7)
        np.testing.assert_array_equal(data.replica_targets, [[1.0] * 3, [-2.0] * 3])

    def test_bad_M(self):
        with pytest.raises(ConfigError):
            expand_to_replicas(self._measurements(), NoiseSpec(0.1, 0.1), 0, seed=0)

    def test_rows_must_match_measurements(self):
        with pytest.raises(DimensionError):
            ReplicaDataset(self._measurements(), np.zeros((3, 2)), 0)

    def test_dataset_csv_round_trip(self, tmp_path):
        data = expand_to_replicas(self._measurements(), NoiseSpec(0.1, 0.1), 4, seed=1)
        path = tmp_path / "dataset.csv"
        export_dataset(data, str(path))
        back = import_dataset(str(path))
        assert back.measurements == data.measurements
        np.testing.assert_allclose(back.replica_targets, data.replica_targets, rtol=1e-12)


class TestPresets:
    @pytest.mark.parametrize("name,counts", [
        ("linear1d", {"f": 16, "u": 2}),
        ("nonlinear1d", {"f": 32, "u": 2}),
        ("inverse1d", {"f": 32, "u": 8}),
        ("allen_cahn_2d", {"f": 500, "u": 100}),
        ("inverse2d", {"f": 100, "u": 200}),
    ])
    def test_measurement_counts(self, name, counts):
        problem = problem_preset(name)
        measurements = sample_measurements(problem.pde, problem.layouts, NoiseSpec.case("case1"), 0)
        for quantity, count in counts.items():
            assert sum(m.quantity == quantity for m in measurements) == count

    def test_inverse_presets_are_trainable(self):
        assert problem_preset("inverse1d").pde.trainable
        assert problem_preset("inverse2d").pde.k_value == 1.0
        assert not problem_preset("nonlinear1d").pde.trainable

    def test_f_count_override(self):
        assert problem_preset("linear1d", f_count=5).layouts[0].count == 5

    def test_unknown(self):
        with pytest.raises(ConfigError):
            problem_preset("heat3d")
