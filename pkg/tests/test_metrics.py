import dataclasses
import itertools
import math
import unittest

import numpy as np
from scipy import ndimage

from posterlab.data import DatasetConfig, gen_dataset, gen_sample
from posterlab.flow import Generation
from posterlab.layout import BBox, Layout, TextLine
from posterlab.metrics import (
    PSNR_SENTINEL,
    EvalReport,
    ExtensionConfig,
    PastedGenerationError,
    align_lines,
    classify_style,
    cosine_similarity,
    embed_similarity,
    extension_rate,
    is_extended,
    mean_ned,
    ned,
    pair_texts,
    preservation_scores,
    product_patches,
    psnr,
    sentence_acc,
    split_by_line_count,
    style_acc,
)
from posterlab.model import ModelConfig, init_params
from posterlab.ocr import OcrLine


def edit_distance(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def strings(alphabet: str, max_len: int):
    for n in range(max_len + 1):
        for chars in itertools.product(alphabet, repeat=n):
            yield "".join(chars)


def distances_to_all(a: str, candidates: list[str]) -> dict[str, int]:
    """Edit distance from ``a`` to every candidate, reusing the DP row of each candidate's prefix."""
    rows = {"": list(range(len(a) + 1))}
    for b in candidates:
        if b in rows:
            continue
        prev, c = rows[b[:-1]], b[-1]
        row = [len(b)]
        for i, ca in enumerate(a, 1):
            row.append(min(prev[i] + 1, row[i - 1] + 1, prev[i - 1] + (ca != c)))
        rows[b] = row
    return {b: rows[b][-1] for b in candidates}


class TestTextMetrics(unittest.TestCase):
    def test_ned_against_dynamic_programming(self):
        everything = list(strings("ABC", 6))
        for a in everything:
            dist = distances_to_all(a, everything)
            gts = everything[1:]
            expected = np.array([1.0 - dist[b] / max(len(a), len(b)) for b in gts])
            got = np.array([ned(a, b) for b in gts])
            np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12, err_msg=a)

    def test_prefix_oracle_matches_plain_dp(self):
        short = list(strings("ABC", 3))
        for a in short:
            dist = distances_to_all(a, short)
            self.assertEqual([dist[b] for b in short], [edit_distance(a, b) for b in short])

    def test_ned_edges(self):
        self.assertEqual(ned("SALE", "SALE"), 1.0)
        self.assertEqual(ned("", "SALE"), 0.0)
        self.assertAlmostEqual(ned("SALT", "SALE"), 0.75)
        with self.assertRaises(ValueError):
            ned("A", "")

    def test_sentence_accuracy(self):
        self.assertEqual(sentence_acc([("A", "A"), ("B", "C")]), 0.5)
        self.assertEqual(sentence_acc([]), 1.0)
        self.assertEqual(mean_ned([]), 1.0)
        self.assertAlmostEqual(mean_ned([("AB", "AB"), ("", "CD")]), 0.5)

    def test_alignment_follows_boxes(self):
        gt = Layout((TextLine("TOP", BBox(0.1, 0.1, 0.6, 0.2)), TextLine("BOTTOM", BBox(0.1, 0.7, 0.9, 0.8))))
        pred = [OcrLine("BOTTOM", BBox(0.12, 0.71, 0.88, 0.79), 1.0), OcrLine("TOP", BBox(0.1, 0.1, 0.55, 0.2), 1.0)]
        self.assertEqual(align_lines(pred, gt), [(1, 0), (0, 1)])
        self.assertEqual(pair_texts(pred, gt), [("TOP", "TOP"), ("BOTTOM", "BOTTOM")])

    def test_unmatched_lines_read_empty(self):
        gt = Layout((TextLine("TOP", BBox(0.1, 0.1, 0.6, 0.2)), TextLine("BOTTOM", BBox(0.1, 0.7, 0.9, 0.8))))
        pred = [OcrLine("TOP", BBox(0.1, 0.1, 0.6, 0.2), 1.0), OcrLine("XX", BBox(0.1, 0.4, 0.2, 0.5), 1.0)]
        pairs = pair_texts(pred, gt)
        self.assertEqual(pairs, [("TOP", "TOP"), ("", "BOTTOM")])
        self.assertEqual(sentence_acc(pairs), 0.5)
        self.assertAlmostEqual(mean_ned(pairs), 0.5)

    def test_each_prediction_used_once(self):
        gt = Layout((TextLine("AB", BBox(0.1, 0.1, 0.5, 0.2)), TextLine("CD", BBox(0.1, 0.15, 0.5, 0.3))))
        pred = [OcrLine("AB", BBox(0.1, 0.1, 0.5, 0.2), 1.0)]
        self.assertEqual(align_lines(pred, gt), [(0, 0), (None, 1)])

    def test_split_by_line_count(self):
        dataset = gen_dataset(DatasetConfig(), 12, seed=0)
        split = split_by_line_count(dataset.samples)
        self.assertEqual(sorted(split["single"] + split["multi"]), list(range(12)))
        for idx in split["multi"]:
            self.assertGreater(len(dataset[idx].layout), 1)


class TestExtension(unittest.TestCase):
    def setUp(self):
        self.samples = gen_dataset(DatasetConfig(), 10, seed=5).samples

    def test_clean_posters_not_extended(self):
        for s in self.samples:
            self.assertFalse(is_extended(s.image, s.product_mask))
        self.assertEqual(extension_rate([s.image for s in self.samples], self.samples), 0.0)

    def test_grown_product_is_extended(self):
        cfg = DatasetConfig()
        images = []
        for s in self.samples:
            image = s.image.copy()
            grown = ndimage.binary_dilation(s.product_mask, structure=np.ones((3, 3), dtype=bool), iterations=4)
            ring = grown & ~s.product_mask
            cols = np.arange(image.shape[1])[None, :].repeat(image.shape[0], axis=0)
            x0, _, x1, _ = s.product_bbox()
            ring &= cols < (x0 + x1) / 2
            image[ring] = cfg.product_palette[s.product_color]
            self.assertTrue(is_extended(image, s.product_mask))
            images.append(image)
        self.assertEqual(extension_rate(images, self.samples), 1.0)

    def test_detached_pixel_is_ignored(self):
        s = self.samples[0]
        near = ndimage.binary_dilation(s.product_mask, structure=np.ones((3, 3), dtype=bool), iterations=2)
        far = ndimage.binary_dilation(s.product_mask, structure=np.ones((3, 3), dtype=bool), iterations=3)
        ys, xs = np.nonzero(far & ~near)
        image = s.image.copy()
        image[ys[0], xs[0]] = DatasetConfig().product_palette[s.product_color]
        self.assertFalse(is_extended(image, s.product_mask))

    def test_detector_calibration(self):
        cfg = DatasetConfig()
        samples = gen_dataset(cfg, 500, seed=11).samples
        self.assertEqual(extension_rate([s.image for s in samples], samples), 0.0)

        ring = np.ones((3, 3), dtype=bool)
        positives, negatives = [], []
        for s in samples[:50]:
            image = s.image.copy()
            grown = ndimage.binary_dilation(s.product_mask, structure=ring, iterations=4) & ~s.product_mask
            image[grown] = cfg.product_palette[s.product_color]
            positives.append(image)

            image = s.image.copy()
            rim = ndimage.binary_dilation(s.product_mask, structure=ring) & ~s.product_mask
            near = ndimage.binary_dilation(s.product_mask, structure=ring, iterations=2)
            far = ndimage.binary_dilation(s.product_mask, structure=ring, iterations=3) & ~near
            for speck in (rim, far):
                ys, xs = np.nonzero(speck)
                image[ys[0], xs[0]] = cfg.product_palette[s.product_color]
            negatives.append(image)
        self.assertTrue(all(is_extended(image, s.product_mask) for image, s in zip(positives, samples)))
        self.assertFalse(any(is_extended(image, s.product_mask) for image, s in zip(negatives, samples)))
        self.assertEqual(extension_rate(positives, samples[:50]), 1.0)
        self.assertEqual(extension_rate(negatives, samples[:50]), 0.0)

    def test_pasted_generation_refused(self):
        s = self.samples[0]
        gen = Generation(s.image, 0, 0, pasted=True, n_steps=1)
        with self.assertRaises(PastedGenerationError):
            extension_rate([gen], [s])
        with self.assertRaises(PastedGenerationError):
            preservation_scores(gen, s)

    def test_length_mismatch(self):
        with self.assertRaises(ValueError):
            extension_rate([self.samples[0].image], self.samples[:2])
        with self.assertRaises(ValueError):
            extension_rate([], [])

    def test_config_validation(self):
        with self.assertRaises(ValueError):
            ExtensionConfig(band_px=0)


class TestPreservation(unittest.TestCase):
    def test_psnr_noise_level(self):
        rng = np.random.default_rng(0)
        reference = rng.uniform(0.2, 0.8, size=(96, 96, 3))
        generated = reference + rng.normal(0.0, 0.01, size=reference.shape)
        mask = np.ones((96, 96), dtype=bool)
        self.assertAlmostEqual(psnr(generated, reference, mask), 40.0, delta=0.5)

    def test_psnr_identical_and_empty(self):
        image = np.full((8, 8, 3), 0.3)
        self.assertEqual(psnr(image, image, np.ones((8, 8), dtype=bool)), PSNR_SENTINEL)
        with self.assertRaises(ValueError):
            psnr(image, image, np.zeros((8, 8), dtype=bool))

    def test_cosine(self):
        self.assertAlmostEqual(cosine_similarity([1.0, 0.0], [2.0, 0.0]), 1.0)
        self.assertAlmostEqual(cosine_similarity([1.0, 0.0], [0.0, 3.0]), 0.0)
        self.assertEqual(cosine_similarity([0.0, 0.0], [1.0, 1.0]), 0.0)

    def test_product_patches(self):
        mask = np.zeros((8, 8), dtype=bool)
        mask[5, 1] = True
        self.assertEqual(product_patches(mask, 4).tolist(), [False, False, True, False])

    def test_embed_similarity_of_identical_images(self):
        cfg = ModelConfig(model_dim=32, n_heads=4, n_blocks=2, time_freq_dim=16)
        model = init_params(cfg, 0)
        s = gen_sample(DatasetConfig(), 1)
        self.assertAlmostEqual(embed_similarity(model, s.image, s), 1.0, places=5)
        score, sim = preservation_scores(s.image, s, model)
        self.assertEqual(score, PSNR_SENTINEL)
        self.assertAlmostEqual(sim, 1.0, places=5)

    def test_no_model_gives_nan(self):
        s = gen_sample(DatasetConfig(), 1)
        _, sim = preservation_scores(s.image, s)
        self.assertTrue(math.isnan(sim))


class TestStyle(unittest.TestCase):
    def test_clean_posters_classified(self):
        cfg = DatasetConfig()
        samples = gen_dataset(cfg, 12, seed=8).samples
        for s in samples:
            self.assertEqual(classify_style(s.image, s, cfg), s.style_id)
        self.assertEqual(style_acc([s.image for s in samples], samples, cfg), 1.0)

    def test_wrong_palette(self):
        cfg = DatasetConfig()
        s = gen_sample(cfg, 3)
        other = (s.style_id + 1) % cfg.n_styles
        image = np.broadcast_to(np.asarray(cfg.background_palettes[other][0], dtype=np.float32), s.image.shape)
        self.assertEqual(classify_style(image, s, cfg), other)

    def test_shuffled_style_ids_fall_to_chance(self):
        cfg = DatasetConfig()
        samples = gen_dataset(cfg, 160, seed=9).samples
        images = [s.image for s in samples]
        shifted = [dataclasses.replace(s, style_id=(s.style_id + 1) % cfg.n_styles) for s in samples]
        self.assertEqual(style_acc(images, shifted, cfg), 0.0)
        ids = np.random.default_rng(0).permutation([s.style_id for s in samples])
        shuffled = [dataclasses.replace(s, style_id=int(k)) for s, k in zip(samples, ids)]
        expected = float(np.mean([s.style_id == int(k) for s, k in zip(samples, ids)]))
        acc = style_acc(images, shuffled, cfg)
        self.assertAlmostEqual(acc, expected, places=12)
        self.assertLess(abs(acc - 1.0 / cfg.n_styles), 0.15)
        self.assertLess(acc, 0.5)


class TestEvalReport(unittest.TestCase):
    def make(self, **kwargs):
        values = dict(
            sen_acc=0.5,
            ned=0.75,
            extension_rate=0.1,
            preservation_psnr=31.0,
            embed_similarity=0.9,
            style_acc=1.0,
            n_samples=4,
            n_lines=6,
            splits={"single": {"sen_acc": 1.0, "n": 2}},
        )
        values.update(kwargs)
        return EvalReport(**values)

    def test_dict_round_trip(self):
        report = self.make()
        d = report.to_dict()
        self.assertEqual(d["schema_version"], 1)
        self.assertEqual(EvalReport.from_dict(d), report)

    def test_nan_similarity_allowed(self):
        self.assertTrue(math.isnan(self.make(embed_similarity=float("nan")).embed_similarity))

    def test_validation(self):
        with self.assertRaises(ValueError):
            self.make(sen_acc=1.5)
        with self.assertRaises(ValueError):
            self.make(n_samples=0)
        with self.assertRaises(ValueError):
            EvalReport.from_dict({**self.make().to_dict(), "schema_version": 99})

    def test_table(self):
        table = self.make().table()
        self.assertIn("sen_acc", table)
        self.assertIn("0.7500", table)
        self.assertIn("single/n", table)


if __name__ == "__main__":
    unittest.main()
