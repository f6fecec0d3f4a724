"""Template-matching OCR for posters drawn with the lab's bitmap font.

Pixels within ``ink_tolerance`` of a text palette color are treated as ink. Every glyph template
is padded with a one-pixel blank ring, so a hit also certifies that the glyph stands apart from its
neighbours, which makes the reading of a clean render exact.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from skimage.feature import match_template

from posterlab.data import TEXT_PALETTE, DatasetConfig
from posterlab.font import ALPHABET, DEFAULT_FONT, BitmapFont
from posterlab.layout import BBox

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OcrConfig:
    alphabet: str = ALPHABET
    glyph_heights: tuple[int, ...] = (8, 12, 16)
    text_palette: tuple = TEXT_PALETTE
    ink_tolerance: float = 0.15
    threshold: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "glyph_heights", tuple(self.glyph_heights))
        object.__setattr__(self, "text_palette", tuple(tuple(float(v) for v in c) for c in self.text_palette))
        if not 0 < self.threshold <= 1:
            raise ValueError("threshold must be in (0, 1]")
        if self.ink_tolerance <= 0:
            raise ValueError("ink_tolerance must be positive")

    @classmethod
    def from_dataset_config(cls, cfg: DatasetConfig, **kwargs) -> OcrConfig:
        return cls(alphabet=cfg.alphabet, glyph_heights=cfg.glyph_heights, text_palette=cfg.text_palette, **kwargs)


@dataclass(frozen=True)
class GlyphHit:
    char: str
    height: int
    x: int
    y: int
    width: int
    score: float

    @property
    def x1(self) -> int:
        return self.x + self.width

    @property
    def y1(self) -> int:
        return self.y + self.height

    @property
    def cy(self) -> float:
        return self.y + self.height / 2


@dataclass(frozen=True)
class OcrLine:
    text: str
    box: BBox
    score: float


def binarize(image: np.ndarray, palette: Sequence[Sequence[float]], tolerance: float) -> np.ndarray:
    """Boolean ink map: max-channel distance to the nearest palette color below ``tolerance``."""
    colors = np.asarray(palette, dtype=np.float64)
    dist = np.abs(image[:, :, None, :].astype(np.float64) - colors[None, None]).max(axis=-1)
    return dist.min(axis=-1) < tolerance


def find_glyphs(ink: np.ndarray, cfg: OcrConfig = OcrConfig(), font: BitmapFont = DEFAULT_FONT) -> list[GlyphHit]:
    """Every template placement scoring at least ``cfg.threshold``, before suppression."""
    padded = np.pad(ink.astype(np.float64), 1)
    height_px, width_px = ink.shape
    hits = []
    for h in cfg.glyph_heights:
        for ch in cfg.alphabet:
            core = font.glyph(ch, h)
            if core.shape[0] > height_px or core.shape[1] > width_px:
                continue
            response = match_template(padded, np.pad(core.astype(np.float64), 1))
            for y, x in zip(*np.nonzero(response >= cfg.threshold)):
                hits.append(GlyphHit(ch, h, int(x), int(y), core.shape[1], float(response[y, x])))
    return hits


def suppress_overlaps(hits: list[GlyphHit], shape: tuple[int, int]) -> list[GlyphHit]:
    """Keep the highest-scoring hits whose glyph cores do not intersect a kept core."""
    taken = np.zeros(shape, dtype=bool)
    kept = []
    for hit in sorted(hits, key=lambda g: (-g.score, g.y, g.x, -g.height, g.char)):
        if taken[hit.y : hit.y1, hit.x : hit.x1].any():
            continue
        taken[hit.y : hit.y1, hit.x : hit.x1] = True
        kept.append(hit)
    return kept


def group_lines(hits: list[GlyphHit], canvas: tuple[int, int], font: BitmapFont = DEFAULT_FONT) -> list[OcrLine]:
    """Chain glyphs of one height whose vertical centers are within half a glyph, left to right."""
    width, height = canvas
    rows: list[list[GlyphHit]] = []
    for hit in sorted(hits, key=lambda g: (g.cy, g.x)):
        for row in rows:
            if row[0].height == hit.height and abs(row[0].cy - hit.cy) < hit.height / 2:
                row.append(hit)
                break
        else:
            rows.append([hit])
    lines = []
    for row in rows:
        row.sort(key=lambda g: g.x)
        max_gap = 2 * font.spacing(row[0].height)
        run = [row[0]]
        for hit in row[1:]:
            if hit.x - run[-1].x1 > max_gap:
                lines.append(_make_line(run, width, height))
                run = []
            run.append(hit)
        lines.append(_make_line(run, width, height))
    lines.sort(key=lambda line: (line.box.y_t, line.box.x_l))
    return lines


def _make_line(run: list[GlyphHit], width: int, height: int) -> OcrLine:
    x0 = min(g.x for g in run)
    y0 = min(g.y for g in run)
    x1 = max(g.x1 for g in run)
    y1 = max(g.y1 for g in run)
    score = float(np.clip(np.mean([g.score for g in run]), 0.0, 1.0))
    return OcrLine("".join(g.char for g in run), BBox.from_pixels(x0, y0, x1, y1, width, height), score)


def ocr(image: np.ndarray, cfg: OcrConfig = OcrConfig(), font: BitmapFont = DEFAULT_FONT) -> list[OcrLine]:
    """Read the horizontal text lines of an ``H x W x 3`` image in ``[0, 1]``.

    Returns
    -------
    lines : list of OcrLine
        Top-to-bottom, then left-to-right. Empty when nothing is detected.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {image.shape}")
    ink = binarize(image, cfg.text_palette, cfg.ink_tolerance)
    if not ink.any():
        return []
    hits = suppress_overlaps(find_glyphs(ink, cfg, font), ink.shape)
    lines = group_lines(hits, (image.shape[1], image.shape[0]), font)
    logger.debug("ocr: %d glyphs in %d lines", len(hits), len(lines))
    return lines
