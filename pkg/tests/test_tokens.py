import unittest
import warnings

import numpy as np
import torch

from posterlab.data import DatasetConfig, MaskRegime, PosterSample, gen_sample, make_mask
from posterlab.layout import BBox, Layout, TextLine, assign_char_positions
from posterlab.model import ModelConfig
from posterlab.tokens import (
    TokenSequenceConstructor,
    TokenTag,
    build_token_sequence,
    collate_tokens,
    from_model_space,
    image_grid_positions,
    patchify,
    to_model_space,
    unpatchify,
)


def small_sample(lines=("HELLO",)) -> PosterSample:
    mask = np.zeros((32, 32), dtype=bool)
    mask[20:28, 4:12] = True
    image = np.full((32, 32, 3), 0.5, dtype=np.float32)
    image[mask] = (1.0, 0.0, 0.0)
    text = [TextLine(c, BBox(0.1, 0.05 + 0.2 * i, 0.9, 0.2 + 0.2 * i)) for i, c in enumerate(lines)]
    return PosterSample(image=image, product_mask=mask, layout=Layout(text, (32, 32)), style_id=1, seed=0)


class TestPatches(unittest.TestCase):
    def test_model_space(self):
        image = np.random.default_rng(0).uniform(size=(8, 12, 3)).astype(np.float32)
        x = to_model_space(image)
        self.assertEqual(tuple(x.shape), (3, 8, 12))
        self.assertTrue(x.min() >= -1.0 and x.max() <= 1.0)
        self.assertTrue(np.allclose(from_model_space(x), image, atol=1e-6))

    def test_patch_order_is_row_major(self):
        x = torch.arange(2 * 1 * 8 * 12, dtype=torch.float32).reshape(2, 1, 8, 12)
        tokens = patchify(x, 4)
        self.assertEqual(tuple(tokens.shape), (2, 6, 16))
        # token 1 is the second patch of the first row: columns 4..7, rows 0..3
        self.assertTrue(torch.equal(tokens[0, 1], x[0, 0, 0:4, 4:8].flatten()))
        self.assertTrue(torch.equal(unpatchify(tokens, 4, (3, 2), channels=1), x))

    def test_grid_positions(self):
        pos = image_grid_positions((8, 8))
        self.assertEqual(tuple(pos.shape), (64, 2))
        for idx in (0, 9, 63):
            row, col = divmod(idx, 8)
            self.assertAlmostEqual(pos[idx, 0].item(), (col + 0.5) / 8, places=12)
            self.assertAlmostEqual(pos[idx, 1].item(), (row + 0.5) / 8, places=12)


class TestBuildTokenSequence(unittest.TestCase):
    def setUp(self):
        self.cfg = ModelConfig(canvas=(32, 32), patch_size=4, model_dim=16, n_heads=2, n_blocks=1)

    def test_image_tokens(self):
        seq = build_token_sequence(small_sample(), True, self.cfg)
        self.assertEqual(seq.n_image, 64)
        self.assertEqual(seq.tags[:64], [TokenTag.IMAGE] * 64)
        self.assertTrue(torch.equal(seq.positions[:64], image_grid_positions((8, 8))))

    def test_cpe_positions_match_layout(self):
        sample = small_sample()
        seq = build_token_sequence(sample, True, self.cfg)
        self.assertEqual(seq.n_text, 5)
        self.assertEqual(seq.tags[64:69], [TokenTag.TEXT] * 5)
        expected = [p.to_tuple() for p in assign_char_positions(sample.layout.lines[0])]
        self.assertEqual([tuple(p) for p in seq.positions[64:69].tolist()], expected)
        self.assertEqual(seq.char_ids.tolist(), [self.cfg.alphabet.index(c) for c in "HELLO"])
        self.assertEqual(seq.tags[-1], TokenTag.STYLE)
        self.assertEqual(seq.style_id, 1)

    def test_baseline_positions_are_origin(self):
        seq = build_token_sequence(small_sample(("AB", "CDE")), False, self.cfg)
        self.assertTrue(torch.equal(seq.positions[64:], torch.zeros(6, 2, dtype=torch.float64)))
        self.assertEqual(seq.line_ids.tolist(), [0, 0, 1, 1, 1])

    def test_cpe_flag_changes_only_text_positions(self):
        for seed in range(20):
            sample = gen_sample(DatasetConfig(), seed)
            on = build_token_sequence(sample, True, ModelConfig())
            off = build_token_sequence(sample, False, ModelConfig())
            self.assertTrue(torch.equal(on.char_ids, off.char_ids))
            self.assertTrue(torch.equal(on.line_ids, off.line_ids))
            self.assertEqual(on.tags, off.tags)
            self.assertEqual(on.style_id, off.style_id)
            self.assertTrue(torch.equal(on.cond_image, off.cond_image))
            self.assertTrue(torch.equal(on.gen_mask, off.gen_mask))
            text = torch.tensor([tag == TokenTag.TEXT for tag in on.tags])
            self.assertTrue(torch.equal(on.positions[~text], off.positions[~text]))
            self.assertTrue(torch.equal(off.positions[text], torch.zeros(int(text.sum()), 2, dtype=torch.float64)))
            self.assertFalse(torch.equal(on.positions[text], off.positions[text]))

    def test_conditioning_hides_generated_region(self):
        sample = small_sample()
        seq = build_token_sequence(sample, True, self.cfg)
        mask = make_mask(sample, MaskRegime.POSTER)
        self.assertTrue(torch.all(seq.cond_image[:, torch.from_numpy(mask)] == 0))
        self.assertTrue(torch.equal(seq.gen_mask[0], torch.from_numpy(mask.astype(np.float32))))
        keep = torch.from_numpy(sample.product_mask)
        self.assertTrue(torch.equal(seq.cond_image[:, keep], to_model_space(sample.image)[:, keep]))

    def test_custom_mask(self):
        sample = small_sample()
        mask = np.zeros((32, 32), dtype=bool)
        mask[:8, :8] = True
        seq = build_token_sequence(sample, True, self.cfg, mask)
        self.assertEqual(seq.gen_mask.sum().item(), 64)

    def test_errors(self):
        with self.assertRaises(TypeError):
            build_token_sequence("sample", True, self.cfg)
        with self.assertRaises(ValueError):
            build_token_sequence(small_sample(), True, self.cfg, np.zeros((16, 16), dtype=bool))
        with self.assertRaises(ValueError):
            build_token_sequence(small_sample(("A", "B", "C", "D", "E")), True, self.cfg)
        with self.assertRaises(ValueError):
            build_token_sequence(small_sample(("A!",)), True, self.cfg)

    def test_generated_sample(self):
        sample = gen_sample(DatasetConfig(), 3)
        seq = build_token_sequence(sample, True, ModelConfig())
        self.assertEqual(len(seq), 144 + sample.layout.n_chars + 1)


class TestConstructor(unittest.TestCase):
    def test_order_enforced(self):
        tsc = TokenSequenceConstructor("AB", 4, 2)
        with self.assertRaises(RuntimeError):
            tsc.add_lines(Layout(), True)
        tsc.add_image(np.zeros((8, 8, 3), dtype=np.float32), np.ones((8, 8), dtype=bool))
        with self.assertRaises(RuntimeError):
            tsc.add_style(0)
        tsc.add_lines(Layout(), True)
        with self.assertRaises(RuntimeError):
            tsc.build()

    def test_style_overwrite_warns(self):
        tsc = TokenSequenceConstructor("AB", 4, 2)
        tsc.add_image(np.zeros((8, 8, 3), dtype=np.float32), np.ones((8, 8), dtype=bool))
        tsc.add_lines(Layout((TextLine("AB", BBox(0.0, 0.0, 1.0, 0.5)),), (8, 8)), True)
        tsc.add_style(0)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            tsc.add_style(1)
        self.assertEqual(len(caught), 1)
        seq = tsc.build()
        self.assertEqual(len(seq), 4 + 2 + 1)
        self.assertEqual(seq.style_id, 1)

    def test_indivisible_canvas(self):
        tsc = TokenSequenceConstructor("AB", 4, 2)
        with self.assertRaises(ValueError):
            tsc.add_image(np.zeros((10, 8, 3), dtype=np.float32), np.ones((10, 8), dtype=bool))


class TestCollate(unittest.TestCase):
    def test_padding_and_key_mask(self):
        cfg = ModelConfig(canvas=(32, 32), patch_size=4, model_dim=16, n_heads=2, n_blocks=1)
        short = build_token_sequence(small_sample(("AB",)), True, cfg)
        long = build_token_sequence(small_sample(("ABCD", "EF")), True, cfg)
        batch = collate_tokens([short, long])
        self.assertEqual(tuple(batch.positions.shape), (2, 64 + 6 + 1, 2))
        self.assertEqual(batch.key_valid[0].sum().item(), 64 + 2 + 1)
        self.assertEqual(batch.key_valid[1].sum().item(), 64 + 6 + 1)
        self.assertFalse(batch.key_valid[0, 66:70].any())
        self.assertTrue(batch.key_valid[0, -1])
        self.assertTrue(torch.equal(batch.positions[0, :66], short.positions[:66]))
        self.assertTrue(torch.equal(batch.style_ids, torch.tensor([1, 1])))

    def test_mismatched_grid(self):
        coarse = ModelConfig(canvas=(32, 32), patch_size=8, model_dim=16, n_heads=2)
        a = build_token_sequence(small_sample(), True, ModelConfig(canvas=(32, 32), model_dim=16, n_heads=2))
        b = build_token_sequence(small_sample(), True, coarse)
        with self.assertRaises(ValueError):
            collate_tokens([a, b])
        with self.assertRaises(ValueError):
            collate_tokens([])


if __name__ == "__main__":
    unittest.main()
