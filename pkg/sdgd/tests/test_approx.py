import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from sdgd.approx import (
    AdamState,
    NetSpec,
    Network,
    finite_difference,
    forward,
    grad,
    init,
    read_sidecar,
    relative_error,
    unpack,
)
from sdgd.exceptions import DatasetFormatError, ShapeError


class NetSpecTests(SimpleTestCase):
    def test_parameter_count(self):
        spec = NetSpec(input_dim=3, output_dim=2, hidden=(4, 5))
        self.assertEqual(spec.n_params, 3 * 4 + 4 + 4 * 5 + 5 + 5 * 2 + 2)

    def test_invalid_specs_rejected(self):
        with self.assertRaises(ValueError):
            NetSpec(input_dim=0, output_dim=1)
        with self.assertRaises(ValueError):
            NetSpec(input_dim=1, output_dim=1, hidden=())

    def test_layout_is_weights_then_bias(self):
        spec = NetSpec(input_dim=2, output_dim=1, hidden=(3,))
        params = np.arange(spec.n_params, dtype=float)
        (W1, b1), (W2, b2) = unpack(spec, params)
        assert_array_equal(W1, np.arange(6).reshape(2, 3))
        assert_array_equal(b1, [6, 7, 8])
        assert_array_equal(W2[:, 0], [9, 10, 11])
        assert_array_equal(b2, [12])


class ForwardTests(SimpleTestCase):
    def test_zero_params_give_zero_output(self):
        spec = NetSpec(input_dim=3, output_dim=2, hidden=(8,))
        assert_array_equal(forward(spec, np.zeros(spec.n_params), np.ones((4, 3))), np.zeros((4, 2)))

    def test_single_row_and_batch_agree(self):
        spec = NetSpec(input_dim=3, output_dim=2, hidden=(8, 8))
        params = init(spec, seed=0)
        x = np.random.default_rng(0).standard_normal((5, 3))
        batch = forward(spec, params, x)
        for i in range(5):
            assert_allclose(forward(spec, params, x[i]), batch[i])

    def test_wrong_input_dim_rejected(self):
        spec = NetSpec(input_dim=3, output_dim=1, hidden=(4,))
        with self.assertRaises(ShapeError):
            forward(spec, init(spec, 0), np.ones((2, 4)))
        with self.assertRaises(ShapeError):
            forward(spec, np.zeros(3), np.ones((2, 3)))

    def test_init_is_deterministic(self):
        spec = NetSpec(input_dim=3, output_dim=1, hidden=(16,))
        assert_array_equal(init(spec, 4), init(spec, 4))


class GradientTests(SimpleTestCase):
    def setUp(self):
        self.spec = NetSpec(input_dim=4, output_dim=3, hidden=(8, 6))
        self.params = init(self.spec, seed=1)
        rng = np.random.default_rng(2)
        self.x = rng.standard_normal((3, 4))
        self.upstream = rng.standard_normal((3, 3))

    def _objective(self, params, x):
        return float(np.sum(self.upstream * forward(self.spec, params, x)))

    def test_parameter_gradient_matches_finite_differences(self):
        analytic, _ = grad(self.spec, self.params, self.x, self.upstream)
        numeric = finite_difference(lambda p: self._objective(p, self.x), self.params, eps=1e-5)
        self.assertGreaterEqual(len(analytic), 100)
        self.assertLess(relative_error(analytic, numeric), 1e-3)

    def test_input_gradient_matches_finite_differences(self):
        _, analytic = grad(self.spec, self.params, self.x, self.upstream)
        numeric = finite_difference(lambda x: self._objective(self.params, x), self.x, eps=1e-5)
        self.assertLess(relative_error(analytic, numeric), 1e-3)

    def test_upstream_shape_checked(self):
        with self.assertRaises(ShapeError):
            grad(self.spec, self.params, self.x, np.ones((2, 3)))


class AdamTests(SimpleTestCase):
    def test_first_step_moves_by_learning_rate(self):
        state = AdamState(3, lr=0.1)
        params = state.step(np.zeros(3), np.array([2.0, -0.5, 0.0]))
        assert_allclose(params, [-0.1, 0.1, 0.0], atol=1e-6)
        self.assertEqual(state.t, 1)

    def test_minimizes_quadratic(self):
        state = AdamState(2, lr=0.05)
        params = np.array([3.0, -2.0])
        for _ in range(2000):
            params = state.step(params, 2.0 * params)
        assert_allclose(params, [0.0, 0.0], atol=1e-2)

    def test_shape_mismatch_rejected(self):
        with self.assertRaises(ShapeError):
            AdamState(2).step(np.zeros(3), np.zeros(3))


class NetworkFileTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = Path(self.tmp.name) / 'net.sdgdnn'

    def test_save_load_round_trip_in_f32(self):
        net = Network(NetSpec(input_dim=3, output_dim=2, hidden=(4,)), seed=3)
        net.save(self.path, sidecar={'kind': 'test'})
        loaded = Network.load(self.path)
        self.assertEqual(loaded.spec, net.spec)
        assert_array_equal(loaded.params, net.params.astype(np.float32).astype(np.float64))
        self.assertEqual(read_sidecar(self.path), {'kind': 'test'})

    def test_truncated_file_rejected(self):
        Network(NetSpec(input_dim=2, output_dim=1, hidden=(2,))).save(self.path)
        self.path.write_bytes(self.path.read_bytes()[:-4])
        with self.assertRaises(DatasetFormatError):
            Network.load(self.path)

    def test_missing_sidecar_rejected(self):
        Network(NetSpec(input_dim=2, output_dim=1, hidden=(2,))).save(self.path)
        with self.assertRaises(DatasetFormatError):
            read_sidecar(self.path)


class FiniteDifferenceTests(SimpleTestCase):
    def test_quadratic(self):
        x0 = np.array([1.0, -2.0, 0.5])
        assert_allclose(finite_difference(lambda x: float(np.sum(x ** 2)), x0), 2 * x0, atol=1e-8)

    def test_relative_error(self):
        self.assertEqual(relative_error([1.0, 2.0], [1.0, 2.0]), 0.0)
        self.assertAlmostEqual(relative_error([0.0], [0.5]), 0.5)
        self.assertAlmostEqual(relative_error([4.0], [5.0]), 0.25)
