"""Text accuracy, subject extension, preservation and style metrics."""
from __future__ import annotations

import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from typing import Sequence

import Levenshtein
import numpy as np
import torch
from scipy import ndimage
from tabulate import tabulate

from posterlab.data import PRODUCT_PALETTE, DatasetConfig, MaskRegime, PosterSample, make_mask
from posterlab.flow import Generation
from posterlab.layout import Layout
from posterlab.ocr import OcrLine
from posterlab.tokens import build_token_sequence, to_model_space

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
PSNR_SENTINEL = 99.0

IS_NOTEBOOK = "ipykernel" in sys.modules
if IS_NOTEBOOK:
    from IPython.display import HTML, display  # type: ignore


class PastedGenerationError(ValueError):
    pass


# -- text -----------------------------------------------------------------------


def align_lines(pred: Sequence[OcrLine], gt: Layout) -> list[tuple[int | None, int]]:
    """Greedy one-to-one matching of predicted to ground-truth lines by descending box IoU.

    Only pairs with positive IoU may match. Returns one ``(pred_idx, gt_idx)`` entry per
    ground-truth line in ground-truth order; ``pred_idx`` is ``None`` for unmatched lines.
    """
    candidates = []
    for gi, line in enumerate(gt.lines):
        for pi, p in enumerate(pred):
            iou = p.box.iou(line.box)
            if iou > 0:
                candidates.append((-iou, gi, pi))
    candidates.sort()
    match: dict[int, int] = {}
    used = set()
    for _, gi, pi in candidates:
        if gi in match or pi in used:
            continue
        match[gi] = pi
        used.add(pi)
    return [(match.get(gi), gi) for gi in range(len(gt.lines))]


def pair_texts(pred: Sequence[OcrLine], gt: Layout, alignment=None) -> list[tuple[str, str]]:
    """``(predicted text, ground-truth text)`` per ground-truth line; unmatched lines read as ``""``."""
    if alignment is None:
        alignment = align_lines(pred, gt)
    return [("" if pi is None else pred[pi].text, gt.lines[gi].content) for pi, gi in alignment]


def ned(pred: str, gt: str) -> float:
    """``1 - Levenshtein(pred, gt) / max(len(pred), len(gt))``."""
    if not gt:
        raise ValueError("ground-truth text must be nonempty")
    return 1.0 - Levenshtein.distance(pred, gt) / max(len(pred), len(gt))


def mean_ned(pairs: Sequence[tuple[str, str]]) -> float:
    if not pairs:
        return 1.0
    return float(np.mean([ned(p, g) for p, g in pairs]))


def sentence_acc(pairs: Sequence[tuple[str, str]]) -> float:
    """Fraction of ground-truth lines whose matched prediction is identical. Vacuously 1 with no lines."""
    if not pairs:
        return 1.0
    return sum(p == g for p, g in pairs) / len(pairs)


def split_by_line_count(samples: Sequence[PosterSample]) -> dict[str, list[int]]:
    """Indices of single-line and multi-line samples."""
    split = {"single": [], "multi": []}
    for idx, s in enumerate(samples):
        n = len(s.layout.lines)
        if n == 1:
            split["single"].append(idx)
        elif n > 1:
            split["multi"].append(idx)
    return split


# -- subject extension ---------------------------------------------------------


@dataclass(frozen=True)
class ExtensionConfig:
    band_px: int = 3
    color_tolerance: float = 0.15
    area_fraction: float = 0.02
    product_palette: tuple = PRODUCT_PALETTE

    def __post_init__(self):
        object.__setattr__(self, "product_palette", tuple(tuple(float(v) for v in c) for c in self.product_palette))
        if self.band_px < 1:
            raise ValueError("band_px must be >= 1")
        if not 0 <= self.area_fraction < 1:
            raise ValueError("area_fraction must be in [0, 1)")


_EIGHT = np.ones((3, 3), dtype=bool)


def extension_mask(image: np.ndarray, product_mask: np.ndarray, cfg: ExtensionConfig = ExtensionConfig()):
    """Band pixels that continue the product in a connected run touching the mask boundary."""
    mask = np.asarray(product_mask, dtype=bool)
    band = ndimage.binary_dilation(mask, structure=_EIGHT, iterations=cfg.band_px) & ~mask
    colors = np.asarray(cfg.product_palette, dtype=np.float64)
    dist = np.abs(np.asarray(image, dtype=np.float64)[:, :, None, :] - colors[None, None]).max(axis=-1).min(axis=-1)
    continues = band & (dist < cfg.color_tolerance)
    labels, n = ndimage.label(continues, structure=_EIGHT)
    if n == 0:
        return continues, band
    rim = ndimage.binary_dilation(mask, structure=_EIGHT) & ~mask
    touching = np.unique(labels[rim & continues])
    return np.isin(labels, touching[touching > 0]), band


def is_extended(image: np.ndarray, product_mask: np.ndarray, cfg: ExtensionConfig = ExtensionConfig()) -> bool:
    run, band = extension_mask(image, product_mask, cfg)
    n_band = int(band.sum())
    return n_band > 0 and run.sum() > cfg.area_fraction * n_band


def _image_of(item) -> np.ndarray:
    if isinstance(item, Generation):
        if item.pasted:
            raise PastedGenerationError(f"generation {item.sample_id} was produced with product pasting enabled")
        return item.image
    return np.asarray(item)


def extension_rate(
    images: Sequence, samples: Sequence[PosterSample], cfg: ExtensionConfig = ExtensionConfig()
) -> float:
    """Fraction of images flagged as extending the product beyond its mask.

    ``images`` holds ``Generation`` records or plain ``H x W x 3`` arrays; records produced with
    product pasting are refused.
    """
    if len(images) != len(samples):
        raise ValueError(f"{len(images)} images for {len(samples)} samples")
    if not samples:
        raise ValueError("no samples to evaluate")
    flags = [is_extended(_image_of(img), s.product_mask, cfg) for img, s in zip(images, samples)]
    return sum(flags) / len(flags)


# -- preservation ----------------------------------------------------------------


def psnr(generated: np.ndarray, reference: np.ndarray, mask: np.ndarray) -> float:
    """PSNR in dB over the pixels of ``mask``; identical regions report ``PSNR_SENTINEL``."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask")
    diff = np.asarray(generated, dtype=np.float64)[mask] - np.asarray(reference, dtype=np.float64)[mask]
    mse = float(np.mean(diff**2))
    if mse == 0:
        return PSNR_SENTINEL
    return min(PSNR_SENTINEL, 10.0 * np.log10(1.0 / mse))


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0:
        return 0.0
    return float(np.clip(a @ b / denom, -1.0, 1.0))


def product_patches(product_mask: np.ndarray, patch_size: int) -> np.ndarray:
    """Row-major boolean flags of the patches containing any product pixel."""
    height, width = product_mask.shape
    blocks = product_mask.reshape(height // patch_size, patch_size, width // patch_size, patch_size)
    return blocks.any(axis=(1, 3)).ravel()


@torch.no_grad()
def embed_similarity(model, generated: np.ndarray, sample: PosterSample, cpe_enabled: bool = True) -> float:
    """Cosine similarity of the mean final-block product-patch activations, generated vs original."""
    seq = build_token_sequence(sample, cpe_enabled, model.cfg, make_mask(sample, MaskRegime.POSTER))
    keep = torch.from_numpy(product_patches(sample.product_mask, model.cfg.patch_size))
    if not bool(keep.any()):
        raise ValueError("empty mask")
    pair = torch.stack([to_model_space(generated), to_model_space(sample.image)])
    feats = model.image_features(pair, 0.0, [seq, seq])[:, keep].mean(dim=1)
    return cosine_similarity(feats[0].to(torch.float64).numpy(), feats[1].to(torch.float64).numpy())


def preservation_scores(generated, sample: PosterSample, model=None, cpe_enabled: bool = True) -> tuple[float, float]:
    """``(psnr, embed_similarity)`` of the product region; similarity is ``nan`` without a model."""
    image = _image_of(generated)
    score = psnr(image, sample.image, sample.product_mask)
    if model is None:
        return score, float("nan")
    return score, embed_similarity(model, image, sample, cpe_enabled)


# -- style ---------------------------------------------------------------------------


def classify_style(image: np.ndarray, sample: PosterSample, cfg: DatasetConfig) -> int | None:
    """Majority vote of background pixels over the nearest style palette color."""
    keep = ~np.asarray(sample.product_mask, dtype=bool)
    width, height = cfg.canvas
    for line in sample.layout.lines:
        x0, y0, x1, y1 = line.box.to_pixels(width, height)
        keep[y0:y1, x0:x1] = False
    if not keep.any():
        return None
    palettes = cfg.background_palettes[: cfg.n_styles]
    colors = np.asarray([c for pal in palettes for c in pal], dtype=np.float64)
    owner = np.asarray([k for k, pal in enumerate(palettes) for _ in pal])
    pixels = np.asarray(image, dtype=np.float64)[keep]
    nearest = np.abs(pixels[:, None, :] - colors[None]).max(axis=-1).argmin(axis=1)
    votes = np.bincount(owner[nearest], minlength=len(palettes))
    return int(votes.argmax())


def style_acc(images: Sequence, samples: Sequence[PosterSample], cfg: DatasetConfig) -> float:
    if len(images) != len(samples):
        raise ValueError(f"{len(images)} images for {len(samples)} samples")
    if not samples:
        raise ValueError("no samples to evaluate")
    hits = [classify_style(_image_of(img), s, cfg) == s.style_id for img, s in zip(images, samples)]
    return sum(hits) / len(hits)


# -- report --------------------------------------------------------------------------


def _check_rate(name: str, value: float, lo: float = 0.0, hi: float = 1.0) -> None:
    if not np.isnan(value) and not lo <= value <= hi:
        raise ValueError(f"{name} must be in [{lo}, {hi}], got {value}")


@dataclass
class EvalReport:
    sen_acc: float
    ned: float
    extension_rate: float
    preservation_psnr: float
    embed_similarity: float
    style_acc: float
    n_samples: int
    n_lines: int = 0
    splits: dict = field(default_factory=dict)
    pasted: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        for name in ("sen_acc", "ned", "extension_rate", "style_acc"):
            _check_rate(name, getattr(self, name))
        _check_rate("embed_similarity", self.embed_similarity, -1.0, 1.0)

    def metrics(self) -> dict[str, float]:
        return {
            "sen_acc": self.sen_acc,
            "ned": self.ned,
            "extension_rate": self.extension_rate,
            "preservation_psnr": self.preservation_psnr,
            "embed_similarity": self.embed_similarity,
            "style_acc": self.style_acc,
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = REPORT_SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        d = dict(d)
        version = d.pop("schema_version", REPORT_SCHEMA_VERSION)
        if version != REPORT_SCHEMA_VERSION:
            raise ValueError(f"report schema version {version}, expected {REPORT_SCHEMA_VERSION}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def rows(self) -> list[list[str]]:
        rows = [[name, f"{value:.4f}"] for name, value in self.metrics().items()]
        rows.append(["n_samples", str(self.n_samples)])
        for split, values in self.splits.items():
            for name, value in values.items():
                rows.append([f"{split}/{name}", f"{value:.4f}" if isinstance(value, float) else str(value)])
        return rows

    def table(self, tablefmt: str = "pretty") -> str:
        return tabulate(self.rows(), headers=["metric", "value"], tablefmt=tablefmt)

    def draw(self):
        """Draw the report in a table.

        If the code is run in a Jupyter notebook, the table will be displayed in HTML format.
        If the code is run in a terminal, the table will be displayed in ASCII format.
        """
        show_table(self.rows(), ["metric", "value"])


def show_table(rows: list, headers: list[str]) -> None:
    if IS_NOTEBOOK:
        display(HTML(tabulate(rows, headers=headers, tablefmt="html")))
    else:
        print(tabulate(rows, headers=headers, tablefmt="pretty"))
