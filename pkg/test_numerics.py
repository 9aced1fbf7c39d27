import threading
import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from lightmove import numerics as nx
from lightmove.lib import DimensionError


def _store(**arrays):
    params = nx.ParamStore()
    for name, values in arrays.items():
        params.add(name, values)
    return params


class TestOps(unittest.TestCase):

    def test_matmul_identity(self):
        a = nx.tensor(np.eye(2))
        b = nx.tensor([[1, 2], [3, 4]])
        assert_array_equal(nx.matmul(a, b).data, [[1, 2], [3, 4]])

    def test_matmul_row_by_column(self):
        out = nx.matmul(nx.tensor([[1, 2]]), nx.tensor([[3], [4]]))
        assert_array_equal(out.data, [[11]])

    def test_matmul_matches_triple_loop(self):
        rng = np.random.default_rng(3)
        A = rng.integers(-5, 5, size=(3, 4)).astype(np.float64)
        B = rng.integers(-5, 5, size=(4, 2)).astype(np.float64)
        ref = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    ref[i, j] += A[i, k] * B[k, j]
        assert_array_equal(nx.matmul(nx.tensor(A), nx.tensor(B)).data, ref)

    def test_matmul_shape_mismatch_names_shapes(self):
        with self.assertRaises(DimensionError) as cm:
            nx.matmul(nx.tensor(np.ones((2, 3))), nx.tensor(np.ones((2, 3))))
        self.assertIn('2×3', str(cm.exception))

    def test_elementwise(self):
        self.assertEqual(nx.elementwise(nx.tensor([0.0]), 'sigmoid').data[0], 0.5)
        self.assertEqual(nx.elementwise(nx.tensor([0.0]), 'tanh').data[0], 0.0)
        out = nx.elementwise(nx.tensor([1.0, 2.0]), 'hadamard', nx.tensor([3.0, 4.0]))
        assert_array_equal(out.data, [3.0, 8.0])
        assert_array_equal(nx.elementwise(nx.tensor([1.0, 2.0]), 'scale', 3).data, [3.0, 6.0])
        with self.assertRaises(DimensionError):
            nx.elementwise(nx.tensor([1.0, 2.0]), 'add', nx.tensor([1.0]))
        with self.assertRaises(ValueError):
            nx.elementwise(nx.tensor([1.0]), 'relu')

    def test_row_softmax(self):
        assert_allclose(nx.row_softmax(nx.tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
        assert_allclose(nx.row_softmax(nx.tensor([[1000.0, 1000.0]])).data, [[0.5, 0.5]])
        assert_allclose(nx.row_softmax(nx.tensor([[np.log(2.0), 0.0]])).data,
                        [[2 / 3, 1 / 3]], atol=1e-15)

    def test_row_softmax_rows_sum_to_one_and_shift_invariant(self):
        x = np.random.default_rng(0).normal(size=(5, 7)) * 10
        y = nx.row_softmax(nx.tensor(x)).data
        assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
        shifted = nx.row_softmax(nx.tensor(x + np.arange(5)[:, None] * 3.0)).data
        assert_allclose(shifted, y, atol=1e-12)

    def test_row_log_softmax_large_logits(self):
        x = nx.tensor([[800.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        y = nx.row_log_softmax(x).data
        assert_allclose(y[0], [0.0, -800.0, -800.0])
        assert_allclose(y[1], [-np.log(3.0)] * 3)
        assert_allclose(np.exp(y), nx.row_softmax(x).data, atol=1e-15)
        params = _store(z=[[800.0, 0.0, 0.0]])
        with nx.Tape() as tape:
            out = nx.scale(nx.sum(nx.take(nx.row_log_softmax(params['z']), [0], [1])), -1.0)
        self.assertEqual(out.item(), 800.0)
        assert_allclose(nx.backward(out, tape).of(params['z']), [[1.0, -1.0, 0.0]])

    def test_concat_shapes(self):
        a = nx.tensor(np.ones((2, 3)))
        self.assertEqual(nx.concat(a, nx.tensor(np.ones((1, 3))), axis='rows').shape, (3, 3))
        self.assertEqual(nx.concat(a, nx.tensor(np.ones((2, 2))), axis='cols').shape, (2, 5))
        with self.assertRaises(DimensionError):
            nx.concat(a, nx.tensor(np.ones((1, 2))), axis='rows')

    def test_concat_gradient_splits_back(self):
        params = _store(a=np.ones((2, 3)), b=np.ones((1, 3)))
        weights = nx.tensor(np.arange(9.0).reshape(3, 3))
        with nx.Tape() as tape:
            out = nx.sum(nx.hadamard(nx.concat(params['a'], params['b']), weights))
        g = nx.backward(out, tape)
        assert_array_equal(g.of(params['a']), weights.data[:2])
        assert_array_equal(g.of(params['b']), weights.data[2:])

    def test_embedding_out_of_range(self):
        table = nx.tensor(np.zeros((3, 2)))
        with self.assertRaises(IndexError):
            nx.embedding(table, [0, 3])


class TestDropout(unittest.TestCase):

    def test_identity_cases(self):
        x = nx.tensor(np.ones((4, 4)))
        rng = np.random.default_rng(0)
        self.assertIs(nx.dropout(x, 0.0, True, rng), x)
        self.assertIs(nx.dropout(x, 0.7, False, rng), x)

    def test_inverted_scaling_mean(self):
        x = nx.tensor(np.ones(100000))
        out = nx.dropout(x, 0.5, True, np.random.default_rng(1)).data
        self.assertLess(abs(out.mean() - 1.0), 0.02)
        self.assertTrue(set(np.unique(out)) <= {0.0, 2.0})

    def test_rate_out_of_range(self):
        x = nx.tensor(np.ones(3))
        for rate in (-0.1, 1.0):
            with self.assertRaises(ValueError):
                nx.dropout(x, rate, True, np.random.default_rng(0))


class TestBackward(unittest.TestCase):

    def test_sum_gradient_is_ones(self):
        params = _store(x=np.random.default_rng(0).normal(size=(3, 4)))
        with nx.Tape() as tape:
            out = nx.sum(params['x'])
        assert_array_equal(nx.backward(out, tape).of(params['x']), np.ones((3, 4)))

    def test_shared_tensor_accumulates(self):
        params = _store(x=[1.5])
        with nx.Tape() as tape:
            out = nx.sum(nx.add(params['x'], params['x']))
        assert_array_equal(nx.backward(out, tape).of(params['x']), [2.0])

    def test_non_scalar_loss(self):
        params = _store(x=np.ones(3))
        with nx.Tape() as tape:
            out = nx.scale(params['x'], 2.0)
        with self.assertRaises(DimensionError):
            nx.backward(out, tape)

    def test_tape_runs_backward_once(self):
        params = _store(x=np.ones(3))
        with nx.Tape() as tape:
            out = nx.sum(params['x'])
        nx.backward(out, tape)
        with self.assertRaises(RuntimeError):
            nx.backward(out, tape)

    def test_tapes_in_parallel_threads(self):
        barrier = threading.Barrier(2)
        results = {}

        def run(c):
            params = _store(x=np.ones(3))
            with nx.Tape() as tape:
                barrier.wait()
                out = nx.sum(nx.scale(params['x'], c))
                barrier.wait()
            results[c] = (len(tape), nx.backward(out, tape).of(params['x']))

        threads = [threading.Thread(target=run, args=(c,)) for c in (2.0, 3.0)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for c in (2.0, 3.0):
            self.assertEqual(results[c][0], 2)
            assert_array_equal(results[c][1], [c, c, c])
        self.assertIsNone(nx.active_tape())

    def test_nothing_recorded_without_tape(self):
        params = _store(x=np.ones(3))
        out = nx.sum(params['x'])
        self.assertFalse(out.requires_grad)
        self.assertIsNone(nx.active_tape())

    def test_sigmoid_of_linear_against_central_differences(self):
        rng = np.random.default_rng(5)
        params = _store(W=rng.normal(size=(4, 3)))
        x = nx.tensor(rng.normal(size=(2, 3)))
        f = lambda: nx.sum(nx.sigmoid(nx.linear(x, params['W'])))
        self.assertLess(nx.finite_difference_check(f, params, eps=1e-5), 1e-5)

    def test_backward_bit_reproducible(self):
        rng = np.random.default_rng(9)
        params = _store(W=rng.normal(size=(5, 5)))

        def run():
            with nx.Tape() as tape:
                out = nx.sum(nx.tanh(nx.matmul(params['W'], params['W'])))
            return nx.backward(out, tape).of(params['W'])
        assert_array_equal(run(), run())


class TestGradientRules(unittest.TestCase):
    """Every recorded op against central differences on random 64-bit inputs."""

    def setUp(self):
        self.rng = np.random.default_rng(11)

    def check(self, f, params, tol=1e-5):
        self.assertLess(nx.finite_difference_check(f, params, eps=1e-5), tol)

    def test_unary_ops(self):
        params = _store(x=self.rng.uniform(0.5, 2.0, size=(4, 6)))
        w = nx.tensor(self.rng.normal(size=(4, 6)))
        x = lambda: params['x']
        for op in (nx.sigmoid, nx.tanh, nx.log, nx.row_softmax, nx.row_log_softmax,
                   nx.transpose,
                   lambda t: nx.scale(t, -1.7), lambda t: nx.add_const(t, 0.3)):
            f = lambda: nx.sum(nx.hadamard(op(x()), w) if op is not nx.transpose
                               else nx.matmul(op(x()), w))
            self.check(f, params)

    def test_binary_ops(self):
        params = _store(a=self.rng.normal(size=(3, 5)), b=self.rng.normal(size=(3, 5)))
        for op in (nx.add, nx.sub, nx.hadamard):
            f = lambda: nx.square_sum(op(params['a'], params['b']))
            self.check(f, params)

    def test_linear_and_matmul(self):
        params = _store(x=self.rng.normal(size=(6, 4)), W=self.rng.normal(size=(5, 4)),
                        b=self.rng.normal(size=5), B=self.rng.normal(size=(4, 3)))
        self.check(lambda: nx.square_sum(nx.linear(params['x'], params['W'], params['b'])), params)
        self.check(lambda: nx.square_sum(nx.matmul(params['x'], params['B'])), params)

    def test_batched_matvec(self):
        d = 3
        params = _store(W=self.rng.normal(size=(4, d * d)), h=self.rng.normal(size=(4, d)))
        self.check(lambda: nx.square_sum(nx.batched_matvec(params['W'], params['h'])), params)

    def test_structure_ops(self):
        params = _store(x=self.rng.normal(size=(5, 4)), v=self.rng.normal(size=4),
                        T=self.rng.normal(size=(6, 4)))
        w = nx.tensor(self.rng.normal(size=(3, 4)))
        self.check(lambda: nx.sum(nx.hadamard(nx.slice_rows(params['x'], 2), w)), params)
        self.check(lambda: nx.sum(nx.hadamard(nx.tile_rows(params['v'], 3), w)), params)
        self.check(lambda: nx.sum(nx.hadamard(nx.embedding(params['T'], [5, 0, 5]), w)), params)
        self.check(lambda: nx.square_sum(nx.reshape(params['x'], (20,))), params)
        self.check(lambda: nx.sum(nx.log(nx.take(nx.row_softmax(params['x']),
                                                 [0, 2, 4], [1, 3, 1]))), params)
        self.check(lambda: nx.mean(nx.tanh(nx.concat(params['x'], params['T'], axis='rows'))), params)

    def test_add_row(self):
        params = _store(x=self.rng.normal(size=(3, 4)), b=self.rng.normal(size=4))
        self.check(lambda: nx.square_sum(nx.add_row(params['x'], params['b'])), params)


class TestFiniteDifferenceCheck(unittest.TestCase):

    def test_quadratic(self):
        params = _store(w=np.random.default_rng(2).normal(size=7))
        f = lambda: nx.square_sum(params['w'])
        self.assertLess(nx.finite_difference_check(f, params, eps=1e-5), 1e-9)

    def test_corrupted_rule_is_caught(self):
        params = _store(w=np.random.default_rng(2).normal(size=5))

        def bad_tanh(x):
            return nx._result(np.tanh(x.data), (x,), lambda g: (2.0 * g,))
        f = lambda: nx.sum(bad_tanh(params['w']))
        self.assertGreater(nx.finite_difference_check(f, params, eps=1e-5), 1e-2)

    def test_difference_check_leaves_parameters_unchanged(self):
        params = _store(w=np.random.default_rng(4).normal(size=(3, 3)))
        before = params.digest()
        nx.finite_difference_check(lambda: nx.square_sum(nx.tanh(params['w'])), params)
        self.assertEqual(params.digest(), before)


class TestParamStore(unittest.TestCase):

    def test_snapshot_restore_and_clone(self):
        params = _store(w=np.ones((2, 2)))
        snap = params.snapshot()
        params['w'].data[0, 0] = 5.0
        other = params.clone()
        params.restore(snap)
        self.assertEqual(params['w'].data[0, 0], 1.0)
        self.assertEqual(other['w'].data[0, 0], 5.0)
        self.assertNotEqual(params.digest(), other.digest())

    def test_duplicate_name(self):
        params = _store(w=np.ones(2))
        with self.assertRaises(KeyError):
            params.add('w', np.ones(2))

    def test_decay_flags(self):
        params = nx.ParamStore()
        params.add('w', np.ones(2))
        params.add('b', np.ones(2), decay=False)
        self.assertEqual([t.name for t in params.decayed()], ['w'])
        self.assertEqual(params.num_scalars(), 4)


if __name__ == '__main__':
    unittest.main()
