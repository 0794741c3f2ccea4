"""Tests for Kronecker-factored curvature estimation."""

import pathlib

from absl.testing import absltest
from absl.testing import parameterized
import numpy as np

from src.pruning.surgery import curvature
from src.pruning.surgery import models
from src.pruning.surgery import oracle
from src.pruning.utils import errors
from tests import testing_util


def _tape(activations, out_grads, name='layer'):
  return models.LayerTape(
      layer_name=name,
      activations=np.asarray(activations, dtype=np.float64),
      out_grads=np.asarray(out_grads, dtype=np.float64),
  )


class AccumulateTest(parameterized.TestCase):

  def test_single_sample(self):
    curv = curvature.accumulate_kfac(_tape([[1.0, 0.0]], [[2.0]]))
    np.testing.assert_array_equal(curv.A, [[1.0, 0.0], [0.0, 0.0]])
    np.testing.assert_array_equal(curv.G, [[4.0]])
    self.assertEqual(curv.sample_count, 1)

  def test_identical_samples(self):
    curv = curvature.accumulate_kfac(_tape([[1.0, 0.0]] * 4, [[1.0]] * 4))
    np.testing.assert_allclose(curv.A, [[2.0, 0.0], [0.0, 0.0]])
    np.testing.assert_allclose(curv.G, [[2.0]])

  def test_direct_summation(self):
    rng = np.random.default_rng(0)
    tape = testing_util.random_tape(rng, 5, 6, 13)
    curv = curvature.accumulate_kfac(tape)
    expected_g = sum(np.outer(g, g) for g in tape.out_grads) / np.sqrt(13)
    expected_a = sum(np.outer(a, a) for a in tape.activations) / np.sqrt(13)
    np.testing.assert_allclose(curv.G, expected_g, atol=1e-12)
    np.testing.assert_allclose(curv.A, expected_a, atol=1e-12)

  def test_non_finite_tape(self):
    with self.assertRaises(errors.CurvatureError):
      curvature.accumulate_kfac(_tape([[np.inf, 0.0]], [[1.0]]))

  @parameterized.named_parameters(
      ('shared_activations', True),
      ('shared_gradients', False),
  )
  def test_kfac_matches_dense_when_expectation_factorizes(self, share_a):
    rng = np.random.default_rng(1)
    n, rows, cols = 7, 3, 4
    g = rng.standard_normal((n, rows))
    a = rng.standard_normal((n, cols))
    if share_a:
      a[:] = a[0]
    else:
      g[:] = g[0]
    tape = _tape(a, g)
    curv = curvature.accumulate_kfac(tape)
    dense = curvature.dense_fisher(tape).F
    # The 1/sqrt(N) per factor leaves G (x) A = N F.
    np.testing.assert_allclose(
        np.kron(curv.G, curv.A) / n, dense, atol=1e-10
    )


class DampenTest(absltest.TestCase):

  def test_mean_diagonal_shift(self):
    curv = curvature.KronCurvature(
        'layer', G=np.diag([2.0, 4.0]), A=np.eye(3), sample_count=1
    )
    damped = curvature.dampen(curv, 0.1, 0.01)
    np.testing.assert_allclose(damped.G, np.diag([2.3, 4.3]))
    np.testing.assert_allclose(damped.A, 1.01 * np.eye(3))
    self.assertAlmostEqual(damped.damp_g, 0.3)
    self.assertAlmostEqual(damped.damp_a, 0.01)
    self.assertTrue(damped.dampened)

  def test_eigenvalues_shift_exactly(self):
    rng = np.random.default_rng(2)
    curv = curvature.accumulate_kfac(testing_util.random_tape(rng, 6, 5, 4))
    damped = curvature.dampen(curv, 0.05, 0.02)
    np.testing.assert_allclose(
        np.linalg.eigvalsh(damped.G) - np.linalg.eigvalsh(curv.G),
        0.05 * np.mean(np.diag(curv.G)),
        atol=1e-10,
    )
    self.assertGreater(np.linalg.eigvalsh(damped.A)[0], 0.0)

  def test_zero_factor_is_degenerate(self):
    curv = curvature.KronCurvature(
        'layer', G=np.zeros((2, 2)), A=np.eye(2), sample_count=1
    )
    with self.assertRaises(errors.DegenerateCurvatureError):
      curvature.dampen(curv, 0.1, 0.1)

  def test_fraction_must_be_positive(self):
    curv = testing_util.identity_curvature(2, 2)
    with self.assertRaises(errors.ConfigurationError):
      curvature.dampen(curv, 0.0, 0.1)


class InverseTest(absltest.TestCase):

  def test_diagonal_eigendecomposition(self):
    curv = curvature.KronCurvature(
        'layer', G=np.diag([4.0, 1.0]), A=np.eye(2), sample_count=1
    )
    eig = curvature.eigendecompose(curv)
    np.testing.assert_allclose(eig.s1, [1.0, 4.0])
    np.testing.assert_allclose(np.abs(eig.K1), [[0.0, 1.0], [1.0, 0.0]])
    np.testing.assert_allclose(eig.s2, [1.0, 1.0])

  def test_random_eigendecomposition(self):
    rng = np.random.default_rng(3)
    curv = curvature.KronCurvature(
        'layer',
        G=testing_util.random_spd(rng, 8),
        A=testing_util.random_spd(rng, 5),
        sample_count=1,
    )
    eig = curvature.eigendecompose(curv)
    np.testing.assert_allclose(eig.K1.T @ eig.K1, np.eye(8), atol=1e-10)
    np.testing.assert_allclose(
        eig.K1 @ np.diag(eig.s1) @ eig.K1.T, curv.G, rtol=1e-8, atol=1e-12
    )
    self.assertTrue(np.all(np.diff(eig.s1) >= 0))
    self.assertEqual(eig.S.shape, (8, 5))

  def test_eigendecomposition_is_deterministic(self):
    rng = np.random.default_rng(4)
    curv = testing_util.random_curvature(rng, 5, 4)
    first = curvature.eigendecompose(curv)
    second = curvature.eigendecompose(curv)
    self.assertEqual(first.K1.tobytes(), second.K1.tobytes())
    self.assertEqual(first.s2.tobytes(), second.s2.tobytes())

  def test_undamped_singular_factor(self):
    curv = curvature.accumulate_kfac(_tape([[1.0, 0.0]], [[2.0]]))
    with self.assertRaises(errors.SingularSystemError):
      curvature.eigendecompose(curv)
    with self.assertRaises(errors.SingularSystemError):
      curvature.factor_inverses(curv)

  def test_factor_inverses(self):
    curv = curvature.KronCurvature(
        'layer', G=2.0 * np.eye(3), A=np.eye(2), sample_count=1
    )
    g_inv, a_inv = curvature.factor_inverses(curv)
    np.testing.assert_allclose(g_inv, 0.5 * np.eye(3))
    np.testing.assert_allclose(a_inv, np.eye(2))

  def test_kronecker_inverse(self):
    rng = np.random.default_rng(5)
    curv = testing_util.random_curvature(rng, 4, 5)
    g_inv, a_inv = curvature.factor_inverses(curv)
    np.testing.assert_allclose(curv.G @ g_inv, np.eye(4), atol=1e-8)
    np.testing.assert_allclose(
        np.linalg.inv(curvature.kron_dense(curv.G, curv.A)),
        np.kron(g_inv, a_inv),
        rtol=1e-8,
        atol=1e-10,
    )


class DenseFisherTest(absltest.TestCase):

  def test_single_sample_is_a_kronecker_product(self):
    g, a = np.array([1.0, -2.0]), np.array([0.5, 1.0, 3.0])
    dense = curvature.dense_fisher(_tape([a], [g]))
    np.testing.assert_allclose(
        dense.F, np.kron(np.outer(g, g), np.outer(a, a)), atol=1e-14
    )
    self.assertEqual(dense.shape, (2, 3))

  def test_trace_and_psd(self):
    rng = np.random.default_rng(6)
    tape = testing_util.random_tape(rng, 4, 5, 9)
    dense = curvature.dense_fisher(tape)
    expected = np.mean(
        np.sum(tape.out_grads**2, axis=1) * np.sum(tape.activations**2, axis=1)
    )
    self.assertAlmostEqual(np.trace(dense.F), expected, places=10)
    self.assertGreaterEqual(np.linalg.eigvalsh(dense.F)[0], -1e-10)

  def test_matches_oracle(self):
    rng = np.random.default_rng(7)
    tape = testing_util.random_tape(rng, 3, 6, 11)
    np.testing.assert_allclose(
        curvature.dense_fisher(tape).F, oracle.dense_fisher(tape), atol=1e-12
    )

  def test_size_guard(self):
    rng = np.random.default_rng(8)
    tape = testing_util.random_tape(rng, 17, 16, 2)
    with self.assertRaises(errors.OracleScaleError):
      curvature.dense_fisher(tape)


class NkpTest(absltest.TestCase):

  def test_single_sample_is_recovered(self):
    g, a = np.array([1.0, 2.0]), np.array([3.0, -1.0, 0.5])
    result = curvature.nkp_power_method(_tape([a], [g]), iters=5)
    np.testing.assert_allclose(
        np.kron(result.G, result.A),
        np.kron(np.outer(g, g), np.outer(a, a)),
        atol=1e-10,
    )

  def test_matches_svd_of_rearranged_fisher(self):
    rng = np.random.default_rng(9)
    for _ in range(5):
      rows, cols = rng.integers(2, 6, size=2)
      tape = testing_util.random_tape(rng, int(rows), int(cols), 10)
      result = curvature.nkp_power_method(tape, iters=300)
      dense = oracle.dense_fisher(tape)
      (best,) = oracle.rearrange_svd_nkp(dense, int(rows), int(cols))
      approx = np.kron(result.G, result.A)
      expected = np.kron(best.G, best.A)
      self.assertLessEqual(
          np.linalg.norm(approx - expected) / np.linalg.norm(expected), 1e-6
      )
      self.assertAlmostEqual(
          result.sigma / best.singular_values[0], 1.0, places=8
      )

  def test_sigma_is_non_decreasing(self):
    rng = np.random.default_rng(10)
    tape = testing_util.random_tape(rng, 5, 4, 8, offset=0.0)
    history = curvature.nkp_power_method(tape, iters=30).history
    self.assertLen(history, 30)
    for before, after in zip(history, history[1:]):
      self.assertGreaterEqual(after, before * (1 - 1e-12))

  def test_warm_start_reaches_the_fixed_point_in_one_step(self):
    rng = np.random.default_rng(11)
    tape = testing_util.random_tape(rng, 4, 5, 12)
    cold = curvature.nkp_power_method(tape, iters=300)
    warm = curvature.nkp_power_method(tape, init=(cold.G, cold.A), iters=1)
    cold_kron = np.kron(cold.G, cold.A)
    self.assertLessEqual(
        np.linalg.norm(np.kron(warm.G, warm.A) - cold_kron)
        / np.linalg.norm(cold_kron),
        1e-8,
    )

  def test_zero_tape_is_degenerate(self):
    with self.assertRaises(errors.DegenerateCurvatureError):
      curvature.nkp_power_method(_tape(np.zeros((3, 2)), np.ones((3, 2))))

  def test_rearrangement_identity(self):
    rng = np.random.default_rng(12)
    tape = testing_util.random_tape(rng, 3, 4, 6)
    dense = oracle.dense_fisher(tape)
    result = curvature.nkp_power_method(tape)
    lhs = np.linalg.norm(dense - np.kron(result.G, result.A))
    rhs = np.linalg.norm(
        oracle.rearrange(dense, 3, 4)
        - np.outer(result.G.ravel(), result.A.ravel())
    )
    self.assertAlmostEqual(lhs, rhs, places=10)


class SumKronTest(absltest.TestCase):

  def test_rank_one_equals_power_method(self):
    rng = np.random.default_rng(13)
    tape = testing_util.random_tape(rng, 3, 4, 6)
    fit = curvature.sum_kron_fit(tape, 1, iters=20)
    direct = curvature.nkp_power_method(tape, iters=20)
    self.assertEqual(fit.rank, 1)
    np.testing.assert_array_equal(fit.terms[0][0], direct.G)
    np.testing.assert_array_equal(fit.terms[0][1], direct.A)

  def test_recovers_a_constructed_sum(self):
    # F = 2 E11 (x) E11 + 0.5 E22 (x) E22, whose rearrangement has orthogonal
    # components with distinct singular values.
    tape = _tape([[1.0, 0.0], [0.0, 1.0]], [[2.0, 0.0], [0.0, 1.0]])
    dense = oracle.dense_fisher(tape)
    fit = curvature.sum_kron_fit(tape, 2, iters=20)
    self.assertLessEqual(oracle.kron_residual(dense, fit.terms), 1e-6)
    np.testing.assert_allclose(
        curvature.sum_kron_dense(fit).F, dense, atol=1e-6
    )

  def test_residual_does_not_grow_with_rank(self):
    rng = np.random.default_rng(14)
    for _ in range(5):
      tape = testing_util.random_tape(rng, 3, 4, 8, offset=0.5)
      dense = oracle.dense_fisher(tape)
      one = oracle.kron_residual(dense, curvature.sum_kron_fit(tape, 1).terms)
      two = oracle.kron_residual(dense, curvature.sum_kron_fit(tape, 2).terms)
      self.assertLessEqual(two, one + 1e-10)

  def test_rank_limits(self):
    tape = testing_util.random_tape(np.random.default_rng(0), 2, 2, 3)
    with self.assertRaises(errors.UnsupportedError):
      curvature.sum_kron_fit(tape, 3)
    with self.assertRaises(errors.ConfigurationError):
      curvature.sum_kron_fit(tape, 0)

  def test_generalised_eigen_inverse(self):
    rng = np.random.default_rng(15)
    sumcurv = curvature.SumKronCurvature(
        'layer',
        terms=[
            (testing_util.random_spd(rng, 3), testing_util.random_spd(rng, 4)),
            (
                0.3 * testing_util.random_spd(rng, 3),
                0.3 * testing_util.random_spd(rng, 4),
            ),
        ],
    )
    spectrum = curvature.sum_kron_eigen(sumcurv)
    self.assertIsNotNone(spectrum)
    k = np.kron(spectrum.K1, spectrum.K2)
    inverse = k @ np.diag(1.0 / spectrum.denominator.ravel()) @ k.T
    np.testing.assert_allclose(
        inverse,
        np.linalg.inv(curvature.sum_kron_dense(sumcurv).F),
        rtol=1e-8,
        atol=1e-10,
    )


class FactorStoreTest(absltest.TestCase):

  def test_round_trip(self):
    rng = np.random.default_rng(16)
    factors = {
        'fc1': (testing_util.random_spd(rng, 3), testing_util.random_spd(rng, 2)),
        'out.proj': (np.eye(2), np.ones((4, 4))),
    }
    path = pathlib.Path(self.create_tempdir().full_path) / 'factors.json'
    curvature.save_factors(path, factors, {'shot': 1})
    restored = curvature.load_factors(path)
    self.assertEqual(set(restored), set(factors))
    for name, (g, a) in factors.items():
      np.testing.assert_array_equal(restored[name][0], g)
      np.testing.assert_array_equal(restored[name][1], a)


if __name__ == '__main__':
  absltest.main()
