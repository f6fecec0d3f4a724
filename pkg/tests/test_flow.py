import tempfile
import unittest
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from posterlab.data import DatasetConfig, gen_dataset
from posterlab.flow import FlowConfig, Generation, fm_loss, generate, initial_noise, interpolate, sample
from posterlab.model import ModelConfig, init_params
from posterlab.tokens import build_token_sequence, to_model_space

MODEL_CFG = ModelConfig(model_dim=32, n_heads=4, n_blocks=2, time_freq_dim=16)


class ConstantField(torch.nn.Module):
    def __init__(self, value: float = 0.0):
        super().__init__()
        self.value = value

    def forward(self, x, t, seq):
        return torch.full_like(x, self.value)


class LinearField(torch.nn.Module):
    """v(x) = a x, whose backward flow from t=1 to t=0 is x(0) = x(1) exp(-a)."""

    def __init__(self, a: float):
        super().__init__()
        self.a = a
        self.dtype = torch.float64

    def forward(self, x, t, seq):
        return self.a * x


class OracleField(torch.nn.Module):
    def __init__(self, target):
        super().__init__()
        self.target = target

    def forward(self, x, t, seq):
        return self.target


class TestObjective(unittest.TestCase):
    def setUp(self):
        g = torch.Generator().manual_seed(0)
        self.x0 = torch.rand(2, 3, 48, 48, generator=g) * 2 - 1
        self.eps = torch.randn(2, 3, 48, 48, generator=g)
        self.dataset = gen_dataset(DatasetConfig(), 2, seed=0)
        self.seqs = [build_token_sequence(s, True, MODEL_CFG) for s in self.dataset]

    def test_interpolation_endpoints(self):
        self.assertTrue(torch.equal(interpolate(self.x0, self.eps, 0.0), self.x0))
        self.assertTrue(torch.equal(interpolate(self.x0, self.eps, 1.0), self.eps))
        mid = interpolate(self.x0, self.eps, torch.tensor([0.5, 0.5]))
        self.assertTrue(torch.allclose(mid, (self.x0 + self.eps) / 2, atol=1e-6))

    def test_oracle_loss_is_zero(self):
        loss = fm_loss(self.x0, self.eps, 0.3, self.seqs, OracleField(self.eps - self.x0))
        self.assertEqual(loss.item(), 0.0)

    def test_loss_non_negative(self):
        model = init_params(MODEL_CFG, 0)
        loss = fm_loss(self.x0, self.eps, torch.tensor([0.2, 0.7]), self.seqs, model)
        self.assertGreater(loss.item(), 0.0)

    def test_invalid_time(self):
        with self.assertRaises(ValueError):
            fm_loss(self.x0, self.eps, 1.5, self.seqs, OracleField(self.eps - self.x0))
        with self.assertRaises(ValueError):
            fm_loss(self.x0, self.eps, torch.tensor([0.1, 0.2, 0.3]), self.seqs, OracleField(self.eps))

    def test_shape_mismatch(self):
        with self.assertRaises(ValueError):
            interpolate(self.x0, self.eps[:1], 0.5)
        with self.assertRaises(ValueError):
            fm_loss(self.x0, self.eps, 0.5, self.seqs, OracleField(torch.zeros(1, 3, 48, 48)))


class TestSampler(unittest.TestCase):
    def setUp(self):
        self.dataset = gen_dataset(DatasetConfig(), 2, seed=1)
        self.seqs = [build_token_sequence(s, True, MODEL_CFG) for s in self.dataset]

    def test_zero_field_returns_noise(self):
        out = sample(ConstantField(0.0), self.seqs, FlowConfig(n_sample_steps=7), seed=[3, 4])
        self.assertTrue(torch.equal(out, initial_noise((3, 48, 48), [3, 4])))

    def test_constant_field(self):
        out = sample(ConstantField(0.25), self.seqs, FlowConfig(n_sample_steps=10), seed=5)
        expected = initial_noise((3, 48, 48), [5, 5]) - 0.25
        self.assertLess((out - expected).abs().max().item(), 1e-5)

    def test_deterministic(self):
        model = init_params(MODEL_CFG, 0)
        cfg = FlowConfig(n_sample_steps=3)
        a = sample(model, self.seqs, cfg, seed=[1, 2])
        b = sample(model, self.seqs, cfg, seed=[1, 2])
        self.assertTrue(torch.equal(a, b))

    def test_euler_error_shrinks_with_steps(self):
        a = 0.8
        noise = initial_noise((3, 48, 48), [9, 9], dtype=torch.float64)
        exact = noise * np.exp(-a)
        field = LinearField(a)
        errors = []
        for steps in (10, 20, 40):
            out = sample(field, self.seqs, FlowConfig(n_sample_steps=steps), seed=9)
            errors.append((out - exact).abs().max().item())
        self.assertLess(errors[1], errors[0])
        self.assertLess(errors[2], errors[1])
        # first-order method: halving the step roughly halves the error
        self.assertAlmostEqual(errors[0] / errors[1], 2.0, delta=0.2)
        self.assertAlmostEqual(errors[1] / errors[2], 2.0, delta=0.2)

    def test_paste_product(self):
        cfg = FlowConfig(n_sample_steps=2, paste_product=True)
        out = sample(ConstantField(0.0), self.seqs, cfg, seed=0)
        for img, s in zip(out, self.dataset):
            keep = torch.from_numpy(s.product_mask)
            self.assertTrue(torch.equal(img[:, keep], to_model_space(s.image)[:, keep]))

    def test_seed_count_mismatch(self):
        with self.assertRaises(ValueError):
            sample(ConstantField(0.0), self.seqs, FlowConfig(n_sample_steps=1), seed=[1, 2, 3])

    def test_invalid_config(self):
        with self.assertRaises(ValueError):
            FlowConfig(n_sample_steps=0)


class TestGenerate(unittest.TestCase):
    def test_generate_and_save(self):
        dataset = gen_dataset(DatasetConfig(), 3, seed=2)
        model = init_params(MODEL_CFG, 0)
        cfg = FlowConfig(n_sample_steps=2)
        gens = generate(model, dataset.samples, cfg, [7, 8, 9], sample_ids=[4, 5, 6], batch_size=2)
        self.assertEqual([g.sample_id for g in gens], [4, 5, 6])
        self.assertEqual([g.seed for g in gens], [7, 8, 9])
        for g in gens:
            self.assertIsInstance(g, Generation)
            self.assertEqual(g.image.shape, (48, 48, 3))
            self.assertTrue(0.0 <= g.image.min() and g.image.max() <= 1.0)
            self.assertFalse(g.pasted)
        with tempfile.TemporaryDirectory() as tmp:
            path = gens[0].save(tmp)
            self.assertEqual(path, Path(tmp) / "4.png")
            with Image.open(path) as im:
                self.assertEqual(im.size, (48, 48))
                self.assertEqual(im.mode, "RGB")

    def test_generate_batches_match(self):
        dataset = gen_dataset(DatasetConfig(), 3, seed=2)
        model = init_params(MODEL_CFG, 0)
        cfg = FlowConfig(n_sample_steps=2)
        one = generate(model, dataset.samples, cfg, [1, 2, 3], batch_size=1)
        three = generate(model, dataset.samples, cfg, [1, 2, 3], batch_size=3)
        for a, b in zip(one, three):
            self.assertLess(np.abs(a.image - b.image).max(), 1e-4)

    def test_seed_count_mismatch(self):
        dataset = gen_dataset(DatasetConfig(), 2, seed=2)
        with self.assertRaises(ValueError):
            generate(init_params(MODEL_CFG, 0), dataset.samples, FlowConfig(), [1])


if __name__ == "__main__":
    unittest.main()
