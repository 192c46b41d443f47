import logging
import math
import unittest

import numpy as np
import torch

from reply_compression import tensor as T

logger = logging.getLogger(__name__)

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    handlers=[logging.StreamHandler()],
)

GRADCHECK_SEEDS = range(20)


def _gradcheck(fn, inputs):
    return torch.autograd.gradcheck(fn, inputs, eps=1e-6, atol=1e-7, rtol=1e-4)


class TestPrimitives(unittest.TestCase):
    def setUp(self):
        T.set_precision("test64")

    def test_gelu_at_zero(self):
        self.assertEqual(float(T.gelu(torch.tensor([0.0]))[0]), 0.0)

    def test_softmax_of_equal_logits_is_uniform(self):
        out = T.softmax(torch.zeros(3))
        for value in out.tolist():
            self.assertAlmostEqual(value, 1 / 3, places=12)

    def test_layer_norm_standardises(self):
        out = T.layer_norm(torch.tensor([1.0, 2.0, 3.0]), torch.ones(3), torch.zeros(3))
        expected = [-1.224744871391589, 0.0, 1.224744871391589]
        for got, want in zip(out.tolist(), expected):
            self.assertAlmostEqual(got, want, places=9)

    def test_matmul_shape_error_names_primitive_and_shapes(self):
        with self.assertRaises(ValueError) as ctx:
            T.matmul(torch.zeros(2, 3), torch.zeros(4, 5))
        self.assertIn("matmul", str(ctx.exception))
        self.assertIn("(2, 3)", str(ctx.exception))
        self.assertIn("(4, 5)", str(ctx.exception))

    def test_add_rejects_non_broadcastable(self):
        with self.assertRaises(ValueError):
            T.add(torch.zeros(2, 3), torch.zeros(4))

    def test_embedding_rejects_out_of_range_ids(self):
        with self.assertRaises(ValueError):
            T.embedding(torch.tensor([0, 5]), torch.zeros(5, 2))

    def test_non_finite_output_raises(self):
        with self.assertRaises(T.NonFiniteError):
            T.log(torch.tensor([0.0]))
        with T.finite_checks(False):
            self.assertTrue(math.isinf(float(T.log(torch.tensor([0.0]))[0])))

    def test_masked_fill_allows_negative_infinity(self):
        out = T.softmax(T.masked_fill(torch.zeros(3), torch.tensor([False, False, True]), -math.inf))
        self.assertEqual(out.tolist()[2], 0.0)
        self.assertAlmostEqual(out.tolist()[0], 0.5, places=12)

    def test_gradients_match_finite_differences(self):
        logger.info("Running: gradcheck of every primitive over 20 seeds")
        cases = {
            "matmul": (lambda a, b: T.matmul(a, b), [(3, 4), (4, 2)]),
            "add": (lambda a, b: T.add(a, b), [(3, 4), (4,)]),
            "scale": (lambda a: T.scale(a, 2.5), [(3, 4)]),
            "transpose": (lambda a: T.transpose(a), [(3, 4)]),
            "softmax": (lambda a: T.softmax(a), [(3, 5)]),
            "log_softmax": (lambda a: T.log_softmax(a), [(3, 5)]),
            "layer_norm": (lambda x, g, b: T.layer_norm(x, g, b), [(3, 5), (5,), (5,)]),
            "gelu": (lambda a: T.gelu(a), [(3, 4)]),
            "concat": (lambda a, b: T.concat([a, b], dim=1), [(2, 3), (2, 2)]),
            "reduce_mean": (lambda a: T.reduce_mean(a, dim=1), [(3, 4)]),
            "exp": (lambda a: T.exp(a), [(3, 4)]),
        }
        for seed in GRADCHECK_SEEDS:
            gen = torch.Generator().manual_seed(seed)
            for name, (fn, shapes) in cases.items():
                inputs = tuple(
                    torch.randn(s, generator=gen, dtype=torch.float64).requires_grad_(True)
                    for s in shapes
                )
                with self.subTest(primitive=name, seed=seed):
                    self.assertTrue(_gradcheck(fn, inputs))

            positive = (torch.rand(3, 4, generator=gen, dtype=torch.float64) + 0.5).requires_grad_(True)
            with self.subTest(primitive="log", seed=seed):
                self.assertTrue(_gradcheck(T.log, (positive,)))

            ids = torch.randint(0, 6, (4,), generator=gen)
            table = torch.randn(6, 3, generator=gen, dtype=torch.float64).requires_grad_(True)
            with self.subTest(primitive="embedding", seed=seed):
                self.assertTrue(_gradcheck(lambda t: T.embedding(ids, t), (table,)))

            keep = torch.rand(3, 4, generator=gen) < 0.5
            x = torch.randn(3, 4, generator=gen, dtype=torch.float64).requires_grad_(True)
            with self.subTest(primitive="masked_fill", seed=seed):
                self.assertTrue(_gradcheck(lambda a: T.masked_fill(a, keep, 0.0), (x,)))


class TestBackward(unittest.TestCase):
    def setUp(self):
        T.set_precision("test64")

    def test_square_sum_gradient(self):
        w = torch.tensor([1.0, 2.0], requires_grad=True)
        grads = T.backward((w * w).sum(), {"w": w})
        self.assertEqual(grads["w"].tolist(), [2.0, 4.0])

    def test_unused_parameter_gets_exact_zero(self):
        w = torch.tensor([1.0, 2.0], requires_grad=True)
        unused = torch.tensor([3.0, 4.0, 5.0], requires_grad=True)
        grads = T.backward((w * w).sum(), {"w": w, "unused": unused})
        self.assertTrue(torch.equal(grads["unused"], torch.zeros(3)))

    def test_non_scalar_loss_rejected(self):
        w = torch.tensor([1.0, 2.0], requires_grad=True)
        with self.assertRaises(ValueError):
            T.backward(w * 2, {"w": w})

    def test_matmul_chain_matches_central_differences(self):
        for seed in GRADCHECK_SEEDS:
            rng = np.random.default_rng(seed)
            a0, b0, c0 = (rng.standard_normal((3, 3)) for _ in range(3))

            def loss_of(a, b, c):
                return float(np.sum(np.tanh(a @ b @ c)))

            a = torch.tensor(a0, requires_grad=True)
            b = torch.tensor(b0, requires_grad=True)
            c = torch.tensor(c0)
            loss = torch.tanh(T.matmul(T.matmul(a, b), c)).sum()
            grads = T.backward(loss, {"a": a, "b": b})

            h = 1e-5
            numeric = np.zeros_like(a0)
            for i in range(3):
                for j in range(3):
                    plus, minus = a0.copy(), a0.copy()
                    plus[i, j] += h
                    minus[i, j] -= h
                    numeric[i, j] = (loss_of(plus, b0, c0) - loss_of(minus, b0, c0)) / (2 * h)
            with self.subTest(seed=seed):
                np.testing.assert_allclose(grads["a"].numpy(), numeric, rtol=1e-4, atol=1e-8)


class TestSchedule(unittest.TestCase):
    def test_warmup_then_decay(self):
        schedule = T.LearningRateSchedule(base_lr=1e-3, warmup_steps=100, decay=0.9999)
        self.assertEqual(schedule.lr_at(0), 0.0)
        self.assertAlmostEqual(schedule.lr_at(50), 5e-4, places=15)
        self.assertEqual(schedule.lr_at(100), 1e-3)
        self.assertAlmostEqual(schedule.lr_at(110), 9.99000449880021e-4, places=12)

    def test_zero_warmup_starts_at_base(self):
        schedule = T.LearningRateSchedule(base_lr=0.1, warmup_steps=0, decay=1.0)
        self.assertEqual(schedule.lr_at(0), 0.1)
        self.assertEqual(schedule.lr_at(1000), 0.1)

    def test_invalid_schedules(self):
        with self.assertRaises(ValueError):
            T.LearningRateSchedule(base_lr=0.0)
        with self.assertRaises(ValueError):
            T.LearningRateSchedule(decay=1.5)
        with self.assertRaises(ValueError):
            T.LearningRateSchedule().lr_at(-1)


class TestAdam(unittest.TestCase):
    def setUp(self):
        T.set_precision("test64")
        self.schedule = T.LearningRateSchedule(base_lr=0.1, warmup_steps=0, decay=1.0)

    def _state(self, values, frozen=()):
        params = {
            name: torch.nn.Parameter(torch.tensor(v, dtype=torch.float64))
            for name, v in values.items()
        }
        mask = {name: name in frozen for name in params}
        return T.AdamState(params, mask, self.schedule)

    def test_first_step_moves_by_learning_rate(self):
        state = self._state({"w": [0.0]})
        T.adam_step(state, {"w": torch.tensor([1.0])})
        self.assertAlmostEqual(float(state.params["w"][0]), -0.1, delta=1e-8)
        self.assertEqual(state.t, 1)

    def test_frozen_parameters_are_untouched(self):
        state = self._state({"w": [0.5, -0.5], "frozen": [1.0, 2.0]}, frozen=("frozen",))
        before = state.params["frozen"].detach().clone()
        for _ in range(3):
            T.adam_step(state, {"w": torch.ones(2), "frozen": torch.ones(2)})
        self.assertTrue(torch.equal(state.params["frozen"].detach(), before))
        self.assertIsNone(state.moments("frozen"))
        self.assertIsNotNone(state.moments("w"))

    def test_zero_gradient_leaves_parameters_unchanged(self):
        state = self._state({"w": [0.25, 0.75]})
        before = state.params["w"].detach().clone()
        T.adam_step(state, {"w": torch.zeros(2)})
        self.assertTrue(torch.equal(state.params["w"].detach(), before))

    def test_missing_and_non_finite_gradients(self):
        state = self._state({"w": [0.0]})
        with self.assertRaises(ValueError):
            T.adam_step(state, {})
        with self.assertRaises(T.NonFiniteError):
            T.adam_step(state, {"w": torch.tensor([float("nan")])})

    def test_all_frozen_state_has_no_optimizer(self):
        state = self._state({"w": [1.0]}, frozen=("w",))
        T.adam_step(state, {})
        self.assertIsNone(state.optimizer)
        self.assertEqual(float(state.params["w"][0]), 1.0)


class TestPrecision(unittest.TestCase):
    def test_use_precision_restores_previous_mode(self):
        T.set_precision("fast32")
        with T.use_precision("test64"):
            self.assertEqual(torch.get_default_dtype(), torch.float64)
        self.assertEqual(torch.get_default_dtype(), torch.float32)

    def test_unknown_precision(self):
        with self.assertRaises(ValueError):
            T.set_precision("fp16")


if __name__ == "__main__":
    unittest.main()
