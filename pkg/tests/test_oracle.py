"""Tests for the dense brute-force oracle."""

import itertools

from absl.testing import absltest
from absl.testing import parameterized
import numpy as np

from src.pruning.surgery import constants as cs
from src.pruning.surgery import oracle
from src.pruning.utils import errors
from tests import testing_util


def _random_objective(seed, rows=2, cols=3):
  rng = np.random.default_rng(seed)
  F = testing_util.random_spd(rng, rows * cols)
  W = rng.standard_normal((rows, cols))
  return oracle.QuadraticObjective(theta_star=W, F=F, shape=(rows, cols))


class QuadraticTest(absltest.TestCase):

  def test_zero_at_optimum(self):
    obj = _random_objective(0)
    self.assertEqual(oracle.eval_quadratic(obj, obj.theta_star), 0.0)

  def test_unit_offset_under_identity(self):
    obj = oracle.QuadraticObjective(np.zeros((2, 2)), np.eye(4), (2, 2))
    self.assertAlmostEqual(oracle.eval_quadratic(obj, [1.0, 0.0, 0.0, 0.0]), 0.5)

  def test_rejects_indefinite_curvature(self):
    F = np.diag([1.0, 1.0, -1.0, 1.0])
    with self.assertRaises(errors.ConfigurationError):
      oracle.QuadraticObjective(np.zeros((2, 2)), F, (2, 2))

  def test_rejects_mismatched_shapes(self):
    with self.assertRaises(errors.ConfigurationError):
      oracle.QuadraticObjective(np.zeros((2, 2)), np.eye(6), (2, 2))


class ConstrainedSolutionTest(absltest.TestCase):

  def test_zeroes_chosen_weights_with_matching_loss(self):
    obj = _random_objective(1)
    idx = [0, 4]
    delta, cost = oracle.constrained_solution(obj.F, idx, obj.theta_star)
    updated = obj.theta_star + delta
    np.testing.assert_allclose(updated[idx], 0.0, atol=1e-12)
    self.assertAlmostEqual(oracle.eval_quadratic(obj, updated), cost, places=12)

  def test_empty_set(self):
    obj = _random_objective(2)
    delta, cost = oracle.constrained_solution(obj.F, [], obj.theta_star)
    np.testing.assert_array_equal(delta, 0.0)
    self.assertEqual(cost, 0.0)

  def test_batched_losses_match(self):
    obj = _random_objective(3)
    sets = np.array([[0, 1], [2, 5], [3, 4]])
    losses = oracle.removal_losses(obj.F, obj.theta_star, sets)
    for s, loss in zip(sets, losses):
      _, expected = oracle.constrained_solution(obj.F, s, obj.theta_star)
      self.assertAlmostEqual(loss, expected, places=12)


class ExhaustiveSearchTest(parameterized.TestCase):

  @parameterized.parameters(0, 1, 2)
  def test_single_weight_is_the_cheapest_obs_cost(self, seed):
    obj = _random_objective(seed)
    f_inv = np.linalg.inv(obj.F)
    costs = obj.theta_star**2 / (2.0 * np.diag(f_inv))
    result = oracle.exhaustive_best_mask(obj, 1)
    self.assertEqual(result.indices, (int(np.argmin(costs)),))
    self.assertAlmostEqual(result.loss, float(np.min(costs)), places=12)
    self.assertEqual(result.candidates, 6)

  def test_identity_removes_smallest_magnitudes(self):
    W = np.array([[0.5, -3.0, 0.1], [2.0, -0.2, 1.0]])
    obj = oracle.QuadraticObjective(W, np.eye(6), (2, 3))
    result = oracle.exhaustive_best_mask(obj, 2)
    self.assertEqual(result.indices, (2, 4))
    self.assertAlmostEqual(result.loss, 0.5 * (0.1**2 + 0.2**2))

  @parameterized.parameters(0, 1, 2, 3)
  def test_greedy_never_beats_exhaustive(self, seed):
    obj = _random_objective(seed, rows=2, cols=4)
    for k in (2, 3, 4):
      best = oracle.exhaustive_best_mask(obj, k)
      greedy = oracle.greedy_mask_loss(obj, k)
      self.assertGreaterEqual(greedy.loss, best.loss - 1e-12)

  def test_exhaustive_is_the_minimum(self):
    obj = _random_objective(4)
    result = oracle.exhaustive_best_mask(obj, 3)
    losses = [
        oracle.constrained_solution(obj.F, s, obj.theta_star)[1]
        for s in itertools.combinations(range(6), 3)
    ]
    self.assertAlmostEqual(result.loss, min(losses), places=12)
    self.assertEqual(result.candidates, 20)

  def test_structured_identity_picks_lightest_structure(self):
    W = np.array([[3.0, 0.4, 2.0], [1.0, 0.3, 2.5]])
    obj = oracle.QuadraticObjective(W, np.eye(6), (2, 3))
    result = oracle.exhaustive_best_mask(obj, 1, cs.PruneMode.STRUCTURED)
    # Column 1 sits after the two rows in the structure pool.
    self.assertEqual(result.indices, (3,))
    self.assertAlmostEqual(result.loss, 0.5 * (0.4**2 + 0.3**2))
    self.assertEqual(result.candidates, 5)

  def test_invalid_k(self):
    obj = _random_objective(5)
    with self.assertRaises(errors.ConfigurationError):
      oracle.exhaustive_best_mask(obj, 0)
    with self.assertRaises(errors.ConfigurationError):
      oracle.exhaustive_best_mask(obj, 7)

  def test_too_many_candidates(self):
    obj = oracle.QuadraticObjective(np.ones((16, 16)), np.eye(256), (16, 16))
    with self.assertRaises(errors.OracleScaleError):
      oracle.exhaustive_best_mask(obj, 5)


class DenseAlgebraTest(absltest.TestCase):

  def test_single_sample_fisher_is_a_kronecker_product(self):
    rng = np.random.default_rng(6)
    tape = testing_util.random_tape(rng, 2, 3, 1)
    g, a = tape.out_grads[0], tape.activations[0]
    np.testing.assert_allclose(
        oracle.dense_fisher(tape),
        np.kron(np.outer(g, g), np.outer(a, a)),
        atol=1e-12,
    )

  def test_dense_fisher_guard(self):
    rng = np.random.default_rng(7)
    tape = testing_util.random_tape(rng, 17, 16, 2)
    with self.assertRaises(errors.OracleScaleError):
      oracle.dense_fisher(tape)

  def test_rearrangement_of_a_kronecker_product_has_rank_one(self):
    rng = np.random.default_rng(8)
    G, A = testing_util.random_spd(rng, 2), testing_util.random_spd(rng, 3)
    R = oracle.rearrange(np.kron(G, A), 2, 3)
    np.testing.assert_allclose(R, np.outer(G.ravel(), A.ravel()), atol=1e-12)

  def test_svd_recovers_an_exact_product(self):
    rng = np.random.default_rng(9)
    G, A = testing_util.random_spd(rng, 3), testing_util.random_spd(rng, 2)
    F = np.kron(G, A)
    [term] = oracle.rearrange_svd_nkp(F, 3, 2)
    np.testing.assert_allclose(np.kron(term.G, term.A), F, atol=1e-10)
    self.assertGreater(np.trace(term.G), 0.0)
    self.assertLess(oracle.kron_residual(F, [(term.G, term.A)]), 1e-10)

  def test_residual_is_the_trailing_spectrum(self):
    rng = np.random.default_rng(10)
    F = testing_util.random_spd(rng, 6)
    terms = oracle.rearrange_svd_nkp(F, 2, 3, rank=2)
    s = terms[0].singular_values
    for rank in (1, 2):
      residual = oracle.kron_residual(F, [(t.G, t.A) for t in terms[:rank]])
      self.assertAlmostEqual(residual, np.sqrt(np.sum(s[rank:] ** 2)), places=10)

  def test_quadratic_for_uses_the_kronecker_curvature(self):
    rng = np.random.default_rng(11)
    G, A = testing_util.random_spd(rng, 2), testing_util.random_spd(rng, 2)
    W = rng.standard_normal((2, 2))
    obj = oracle.quadratic_for(G, A, W)
    np.testing.assert_allclose(obj.F, np.kron(G, A))
    np.testing.assert_array_equal(obj.theta_star, W.ravel())


if __name__ == '__main__':
  absltest.main()
