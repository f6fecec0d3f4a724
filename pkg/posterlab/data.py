"""Deterministic synthetic poster generator and the dataset file format.

Every random draw goes through integer sampling of a seeded :class:`numpy.random.Generator`, and
all geometry is integer arithmetic on the pixel grid, so a seed reproduces the same sample on any
platform.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field
from enum import Enum
from functools import cached_property
from itertools import combinations
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from posterlab.font import ALPHABET, DEFAULT_FONT, BitmapFont
from posterlab.layout import BBox, Layout, Orientation, TextLine, describe_layout, validate_layout

logger = logging.getLogger(__name__)

# Colors sit on the {0, 0.34, 0.67, 1} lattice, so any two distinct colors are at least 0.33 apart
# in max-channel distance.
TEXT_PALETTE = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (0.0, 0.0, 0.34))
PRODUCT_PALETTE = ((1.0, 0.0, 0.0), (0.0, 0.67, 0.0), (0.0, 0.34, 1.0), (1.0, 0.0, 1.0), (1.0, 0.67, 0.0))
BACKGROUND_PALETTES = (
    ((0.67, 0.67, 1.0), (0.34, 0.34, 0.67)),
    ((1.0, 0.67, 0.67), (0.67, 0.34, 0.34)),
    ((0.67, 1.0, 0.67), (0.34, 0.67, 0.34)),
    ((1.0, 1.0, 0.67), (0.67, 0.67, 0.34)),
)
PATTERN_NAMES = ("horizontal-stripes", "vertical-stripes", "checkerboard", "diagonal-stripes")
SHAPES = ("ellipse", "rectangle", "triangle")

DATASET_MAGIC = b"PLDS"
DATASET_VERSION = 1
MIN_PALETTE_SEPARATION = 0.3


class RenderError(ValueError):
    """Raised when a text line does not fit its box."""


class DatasetFormatError(ValueError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class ChecksumError(DatasetFormatError):
    pass


class MaskRegime(Enum):
    POSTER = "poster"
    RANDOM_PATCH = "random_patch"

    def __str__(self) -> str:
        return self.value


def color_distance(a: Sequence[float], b: Sequence[float]) -> float:
    """RGB max-channel distance."""
    return float(max(abs(x - y) for x, y in zip(a, b)))


@dataclass(frozen=True)
class DatasetConfig:
    canvas: tuple[int, int] = (48, 48)
    n_styles: int = 4
    alphabet: str = ALPHABET
    glyph_heights: tuple[int, ...] = (8, 12, 16)
    min_lines: int = 1
    max_lines: int = 3
    min_chars: int = 1
    max_chars: int = 8
    shapes: tuple[str, ...] = SHAPES
    product_area: tuple[float, float] = (0.05, 0.40)
    box_padding: int = 1
    text_palette: tuple = TEXT_PALETTE
    product_palette: tuple = PRODUCT_PALETTE
    background_palettes: tuple = BACKGROUND_PALETTES
    max_attempts: int = 200

    def __post_init__(self):
        # JSON round trips hand back lists; store tuples so configs stay hashable
        for name in ("canvas", "glyph_heights", "shapes", "product_area"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        for name in ("text_palette", "product_palette"):
            object.__setattr__(self, name, tuple(tuple(float(v) for v in c) for c in getattr(self, name)))
        object.__setattr__(
            self,
            "background_palettes",
            tuple(tuple(tuple(float(v) for v in c) for c in pal) for pal in self.background_palettes),
        )
        width, height = self.canvas
        if width <= 0 or height <= 0:
            raise ValueError("canvas dimensions must be positive")
        if not 1 <= self.n_styles <= len(self.background_palettes):
            raise ValueError(f"n_styles must be in [1, {len(self.background_palettes)}]")
        if not 0 <= self.min_lines <= self.max_lines:
            raise ValueError("line count range is invalid")
        if not 1 <= self.min_chars <= self.max_chars:
            raise ValueError("character count range is invalid")
        if any(ch not in DEFAULT_FONT for ch in self.alphabet):
            raise ValueError("alphabet contains characters missing from the font")
        if any(s not in SHAPES for s in self.shapes):
            raise ValueError(f"shapes must be drawn from {SHAPES}")
        lo, hi = self.product_area
        if not 0 < lo <= hi < 1:
            raise ValueError("product_area must satisfy 0 < lo <= hi < 1")
        self.validate_palettes()

    def validate_palettes(self) -> None:
        """Raise ``ValueError`` unless all palette colors are pairwise separated."""
        colors = list(self.text_palette) + list(self.product_palette)
        for pal in self.background_palettes[: self.n_styles]:
            colors.extend(pal)
        for a, b in combinations(colors, 2):
            if color_distance(a, b) < MIN_PALETTE_SEPARATION:
                raise ValueError(f"palette colors {a} and {b} are closer than {MIN_PALETTE_SEPARATION}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> DatasetConfig:
        return cls(**d)

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass(frozen=True)
class LineStyle:
    glyph_height: int
    color: int


@dataclass
class PosterSample:
    """One training triplet: product (via mask), layout and style, plus the target poster."""

    image: np.ndarray
    product_mask: np.ndarray
    layout: Layout
    style_id: int
    seed: int
    line_styles: tuple[LineStyle, ...] = field(default_factory=tuple)
    shape: int = 0
    product_color: int = 0

    @cached_property
    def product_image(self) -> np.ndarray:
        """Product composited on white."""
        return np.where(self.product_mask[..., None], self.image, np.float32(1.0)).astype(np.float32)

    @property
    def canvas(self) -> tuple[int, int]:
        return self.layout.canvas

    def product_bbox(self) -> tuple[int, int, int, int]:
        ys, xs = np.nonzero(self.product_mask)
        return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1

    def __eq__(self, other) -> bool:
        if not isinstance(other, PosterSample):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.style_id == other.style_id
            and self.layout == other.layout
            and self.line_styles == other.line_styles
            and self.shape == other.shape
            and self.product_color == other.product_color
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.product_mask, other.product_mask)
        )


class PosterDataset(Sequence):
    def __init__(self, config: DatasetConfig, samples: Sequence[PosterSample] = ()):
        self.config = config
        self.samples = list(samples)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return PosterDataset(self.config, self.samples[idx])
        return self.samples[idx]

    def __iter__(self) -> Iterator[PosterSample]:
        return iter(self.samples)

    def config_hash(self) -> str:
        return self.config.config_hash()


def draw_background(cfg: DatasetConfig, style_id: int, offset: int) -> np.ndarray:
    width, height = cfg.canvas
    rows, cols = np.mgrid[0:height, 0:width]
    rows = rows + offset
    cols = cols + offset
    pattern = [
        (rows // 3) % 2,
        (cols // 3) % 2,
        (rows // 4 + cols // 4) % 2,
        ((rows + cols) // 4) % 2,
    ][style_id % len(PATTERN_NAMES)]
    palette = np.array(cfg.background_palettes[style_id], dtype=np.float32)
    return palette[pattern]


def draw_shape(shape: str, canvas: tuple[int, int], x0: int, y0: int, w: int, h: int) -> np.ndarray:
    """Binary mask of a product shape inscribed in the pixel rectangle ``(x0, y0, w, h)``."""
    width, height = canvas
    ys, xs = np.mgrid[0:height, 0:width]
    inside = (xs >= x0) & (xs < x0 + w) & (ys >= y0) & (ys < y0 + h)
    # doubled coordinates keep pixel centers on the integer lattice
    dx = 2 * xs + 1 - (2 * x0 + w)
    dy = 2 * ys + 1 - (2 * y0 + h)
    if shape == "rectangle":
        return inside
    if shape == "ellipse":
        return inside & (dx * dx * h * h + dy * dy * w * w <= w * w * h * h)
    if shape == "triangle":
        return inside & (np.abs(dx) * 2 * h <= w * (2 * (ys - y0) + 1))
    raise ValueError(f"unknown shape {shape!r}")


def _mask_ok(mask: np.ndarray, cfg: DatasetConfig) -> bool:
    frac = mask.mean()
    lo, hi = cfg.product_area
    if not lo <= frac <= hi:
        return False
    _, n_components = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    return n_components == 1


def render_text(
    canvas: np.ndarray,
    line: TextLine,
    color: Sequence[float],
    glyph_height: int | None = None,
    font: BitmapFont = DEFAULT_FONT,
    allowed_heights: Sequence[int] = (8, 12, 16),
) -> np.ndarray:
    """Draw a text line into a copy of ``canvas``.

    Glyphs are packed with one scaled source-pixel of spacing and the line block is centered in
    the line box. Ink pixels are set to exactly ``color``; nothing is blended.

    Parameters
    ----------
    canvas : numpy.ndarray
        ``H x W x 3`` float image.
    line : TextLine
        Content and target box.
    color : sequence of float
        RGB ink color.
    glyph_height : int, optional
        Pixel height of the glyphs. When omitted the largest of ``allowed_heights`` that fits the
        box is used.
    font : BitmapFont, optional
        Font to draw with.

    Returns
    -------
    canvas : numpy.ndarray
        New image with the line drawn.
    """
    height_px, width_px = canvas.shape[:2]
    if glyph_height is None:
        glyph_height = fit_height(line, (width_px, height_px), allowed_heights, font)
    vertical = line.orientation == Orientation.VERTICAL
    tw, th = font.line_extent(len(line.content), glyph_height, vertical=vertical)
    x0, y0, x1, y1 = line.box.to_pixels(width_px, height_px)
    if tw > x1 - x0 or th > y1 - y0:
        raise RenderError(f"line {line.content!r} does not fit its box at height {glyph_height}")
    out = canvas.copy()
    ink = np.asarray(color, dtype=canvas.dtype)
    x = x0 + (x1 - x0 - tw) // 2
    y = y0 + (y1 - y0 - th) // 2
    step = font.spacing(glyph_height)
    for ch in line.content:
        glyph = font.glyph(ch, glyph_height)
        gh, gw = glyph.shape
        out[y : y + gh, x : x + gw][glyph] = ink
        if vertical:
            y += gh + step
        else:
            x += gw + step
    return out


def fit_height(
    line: TextLine, canvas: tuple[int, int], allowed_heights: Sequence[int], font: BitmapFont = DEFAULT_FONT
) -> int:
    """Largest allowed glyph height at which ``line`` fits its box."""
    width_px, height_px = canvas
    x0, y0, x1, y1 = line.box.to_pixels(width_px, height_px)
    vertical = line.orientation == Orientation.VERTICAL
    for h in sorted(allowed_heights, reverse=True):
        tw, th = font.line_extent(len(line.content), h, vertical=vertical)
        if tw <= x1 - x0 and th <= y1 - y0:
            return h
    raise RenderError(f"line {line.content!r} does not fit its box at any allowed height")


def _place_lines(cfg: DatasetConfig, rng: np.random.Generator, product_rect: tuple[int, int, int, int]):
    width, height = cfg.canvas
    px0, py0, px1, py1 = product_rect
    pad = cfg.box_padding
    n_lines = int(rng.integers(cfg.min_lines, cfg.max_lines + 1))
    taken_rows: list[tuple[int, int]] = []
    lines, styles = [], []
    for _ in range(n_lines):
        placed = False
        for _ in range(50):
            h = int(cfg.glyph_heights[rng.integers(len(cfg.glyph_heights))])
            gw, sp = DEFAULT_FONT.glyph_width(h), DEFAULT_FONT.spacing(h)
            n_fit = (width - 2 * pad + sp) // (gw + sp)
            n_max = min(cfg.max_chars, n_fit)
            if n_max < cfg.min_chars:
                continue
            n = int(rng.integers(cfg.min_chars, n_max + 1))
            tw, th = DEFAULT_FONT.line_extent(n, h)
            bw, bh = tw + 2 * pad, th + 2 * pad
            if bw > width or bh > height:
                continue
            bx = int(rng.integers(0, width - bw + 1))
            by = int(rng.integers(0, height - bh + 1))
            hits_product = bx < px1 and px0 < bx + bw and by < py1 and py0 < by + bh
            # lines never share pixel rows, which keeps the OCR row grouping unambiguous
            shares_rows = any(by < r1 and r0 < by + bh for r0, r1 in taken_rows)
            if hits_product or shares_rows:
                continue
            content = "".join(cfg.alphabet[int(i)] for i in rng.integers(0, len(cfg.alphabet), size=n))
            box = BBox.from_pixels(bx, by, bx + bw, by + bh, width, height)
            lines.append(TextLine(content, box, Orientation.HORIZONTAL))
            styles.append(LineStyle(h, int(rng.integers(len(cfg.text_palette)))))
            taken_rows.append((by, by + bh))
            placed = True
            break
        if not placed:
            return None
    order = np.argsort([line.box.y_t for line in lines], kind="stable")
    return [lines[i] for i in order], [styles[i] for i in order]


def gen_sample(cfg: DatasetConfig, seed: int) -> PosterSample:
    """Generate one poster sample deterministically from ``seed``.

    Raises
    ------
    RuntimeError
        If no valid sample is found within ``cfg.max_attempts`` rejection rounds.
    """
    rng = np.random.default_rng(seed)
    width, height = cfg.canvas
    style_id = int(rng.integers(cfg.n_styles))
    offset = int(rng.integers(0, 12))
    for _ in range(cfg.max_attempts):
        shape = int(rng.integers(len(cfg.shapes)))
        w = int(rng.integers(max(4, width // 6), width * 4 // 5 + 1))
        h = int(rng.integers(max(4, height // 6), height * 4 // 5 + 1))
        x0 = int(rng.integers(0, width - w + 1))
        y0 = int(rng.integers(0, height - h + 1))
        mask = draw_shape(cfg.shapes[shape], cfg.canvas, x0, y0, w, h)
        if not _mask_ok(mask, cfg):
            continue
        ys, xs = np.nonzero(mask)
        rect = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
        placed = _place_lines(cfg, rng, rect)
        if placed is None:
            continue
        lines, styles = placed
        product_color = int(rng.integers(len(cfg.product_palette)))
        image = draw_background(cfg, style_id, offset)
        image[mask] = np.asarray(cfg.product_palette[product_color], dtype=np.float32)
        for line, style in zip(lines, styles):
            image = render_text(image, line, cfg.text_palette[style.color], style.glyph_height)
        layout = Layout(tuple(lines), cfg.canvas)
        return PosterSample(
            image=image.astype(np.float32),
            product_mask=mask,
            layout=layout,
            style_id=style_id,
            seed=int(seed),
            line_styles=tuple(styles),
            shape=shape,
            product_color=product_color,
        )
    raise RuntimeError(f"could not generate a valid sample for seed {seed} in {cfg.max_attempts} attempts")


def sample_seed(base_seed: int, index: int) -> int:
    """Seed of the ``index``-th sample of a dataset generated from ``base_seed``."""
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1, dtype=np.uint32)[0])


def gen_dataset(cfg: DatasetConfig, count: int, seed: int) -> PosterDataset:
    samples = [gen_sample(cfg, sample_seed(seed, i)) for i in range(count)]
    logger.info("generated %d samples (config %s)", count, cfg.config_hash())
    return PosterDataset(cfg, samples)


def make_mask(sample: PosterSample, regime: MaskRegime, seed: int = 0) -> np.ndarray:
    """Boolean mask of the region to generate.

    ``POSTER`` masks everything but the product. ``RANDOM_PATCH`` masks the union of 1 to 4
    random rectangles covering 5% to 20% of the canvas, independent of the product.
    """
    regime = MaskRegime(regime)
    if regime == MaskRegime.POSTER:
        return ~sample.product_mask
    height, width = sample.product_mask.shape
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        mask = np.zeros((height, width), dtype=bool)
        for _ in range(int(rng.integers(1, 5))):
            w = int(rng.integers(max(2, width // 12), width // 2 + 1))
            h = int(rng.integers(max(2, height // 12), height // 2 + 1))
            x = int(rng.integers(0, width - w + 1))
            y = int(rng.integers(0, height - h + 1))
            mask[y : y + h, x : x + w] = True
        if 0.05 <= mask.mean() <= 0.20:
            return mask
    raise RuntimeError(f"could not draw a random patch mask for seed {seed}")


def check_sample(sample: PosterSample, cfg: DatasetConfig) -> list[str]:
    """List the PosterSample invariants violated by ``sample``."""
    problems = [str(v) for v in validate_layout(sample.layout, cfg.alphabet)]
    if not _mask_ok(sample.product_mask, cfg):
        problems.append("product mask is not one component within the area bounds")
    width, height = cfg.canvas
    px0, py0, px1, py1 = sample.product_bbox()
    for idx, line in enumerate(sample.layout.lines):
        x0, y0, x1, y1 = line.box.to_pixels(width, height)
        if x0 < px1 and px0 < x1 and y0 < py1 and py0 < y1:
            problems.append(f"text box {idx} intersects the product")
    m = sample.product_mask
    if not np.array_equal(sample.image[m], sample.product_image[m]):
        problems.append("image differs from the product image inside the mask")
    return problems


# -- dataset file format ------------------------------------------------------


def _encode_sample(sample: PosterSample) -> bytes:
    parts = [
        struct.pack("<QIBBH", sample.seed, sample.style_id, sample.shape, sample.product_color, len(sample.layout))
    ]
    for line, style in zip(sample.layout.lines, sample.line_styles):
        content = line.content.encode("ascii")
        parts.append(
            struct.pack(
                "<BBB4dH",
                0 if line.orientation == Orientation.HORIZONTAL else 1,
                style.glyph_height,
                style.color,
                *line.box.to_tuple(),
                len(content),
            )
        )
        parts.append(content)
    height, width = sample.product_mask.shape
    parts.append(struct.pack("<HH", height, width))
    parts.append(np.ascontiguousarray(sample.image, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(sample.product_mask, dtype=np.uint8).tobytes())
    return b"".join(parts)


def _decode_sample(payload: bytes, canvas: tuple[int, int]) -> PosterSample:
    view = memoryview(payload)
    seed, style_id, shape, product_color, n_lines = struct.unpack_from("<QIBBH", view, 0)
    pos = struct.calcsize("<QIBBH")
    lines, styles = [], []
    line_fmt = "<BBB4dH"
    for _ in range(n_lines):
        orient, glyph_height, color, x_l, y_t, x_r, y_b, n = struct.unpack_from(line_fmt, view, pos)
        pos += struct.calcsize(line_fmt)
        content = bytes(view[pos : pos + n]).decode("ascii")
        pos += n
        orientation = Orientation.HORIZONTAL if orient == 0 else Orientation.VERTICAL
        lines.append(TextLine(content, BBox(x_l, y_t, x_r, y_b), orientation))
        styles.append(LineStyle(glyph_height, color))
    height, width = struct.unpack_from("<HH", view, pos)
    pos += 4
    n_img = height * width * 3 * 4
    image = np.frombuffer(view[pos : pos + n_img], dtype="<f4").reshape(height, width, 3).astype(np.float32)
    pos += n_img
    mask = np.frombuffer(view[pos : pos + height * width], dtype=np.uint8).reshape(height, width).astype(bool)
    return PosterSample(
        image=image,
        product_mask=mask,
        layout=Layout(tuple(lines), canvas),
        style_id=style_id,
        seed=seed,
        line_styles=tuple(styles),
        shape=shape,
        product_color=product_color,
    )


def save_dataset(dataset: PosterDataset, path: str | Path) -> None:
    """Write a dataset file.

    Layout: ``magic | u16 version | u32 config length | config JSON | 16-byte config hash |
    u32 count``, then per sample ``u32 length | payload | u32 CRC32(payload)``. Little-endian.
    """
    cfg_json = json.dumps(dataset.config.to_dict(), sort_keys=True).encode()
    with open(path, "wb") as fp:
        fp.write(DATASET_MAGIC)
        fp.write(struct.pack("<HI", DATASET_VERSION, len(cfg_json)))
        fp.write(cfg_json)
        fp.write(dataset.config_hash().encode("ascii"))
        fp.write(struct.pack("<I", len(dataset)))
        for sample in dataset:
            payload = _encode_sample(sample)
            fp.write(struct.pack("<I", len(payload)))
            fp.write(payload)
            fp.write(struct.pack("<I", zlib.crc32(payload)))
    logger.info("wrote %d samples to %s", len(dataset), path)


def _read_exact(fp, n: int) -> bytes:
    data = fp.read(n)
    if len(data) != n:
        raise TruncatedFileError(f"expected {n} bytes, file ended after {len(data)}")
    return data


def load_dataset(path: str | Path) -> PosterDataset:
    """Read a dataset file written by :func:`save_dataset`.

    Raises
    ------
    DatasetFormatError
        On a bad magic or a config hash that does not match the stored config.
    VersionMismatchError
        On an unsupported format version.
    TruncatedFileError
        When the file ends early.
    ChecksumError
        When a sample record fails its CRC32 check.
    """
    with open(path, "rb") as fp:
        if _read_exact(fp, 4) != DATASET_MAGIC:
            raise DatasetFormatError(f"{path} is not a posterlab dataset")
        version, cfg_len = struct.unpack("<HI", _read_exact(fp, 6))
        if version != DATASET_VERSION:
            raise VersionMismatchError(f"dataset version {version}, expected {DATASET_VERSION}")
        cfg_bytes = _read_exact(fp, cfg_len)
        stored_hash = _read_exact(fp, 16).decode("ascii", errors="replace")
        try:
            cfg = DatasetConfig.from_dict(json.loads(cfg_bytes))
        except ValueError as exc:
            # covers undecodable JSON as well as palettes that fail validation
            raise DatasetFormatError(f"invalid dataset config: {exc}") from exc
        if cfg.config_hash() != stored_hash:
            raise ChecksumError("dataset config does not match its stored hash")
        (count,) = struct.unpack("<I", _read_exact(fp, 4))
        samples = []
        for idx in range(count):
            (length,) = struct.unpack("<I", _read_exact(fp, 4))
            payload = _read_exact(fp, length)
            (crc,) = struct.unpack("<I", _read_exact(fp, 4))
            if zlib.crc32(payload) != crc:
                raise ChecksumError(f"sample {idx} failed its checksum")
            samples.append(_decode_sample(payload, cfg.canvas))
        if fp.read(1):
            raise DatasetFormatError("trailing bytes after the last sample")
    return PosterDataset(cfg, samples)


# -- image export ---------------------------------------------------------------


def save_png(image: np.ndarray, path: str | Path) -> None:
    """Save a ``[0, 1]`` float image (or boolean mask) as a lossless 8-bit PNG."""
    arr = np.asarray(image)
    if arr.dtype == bool:
        arr = arr.astype(np.float32)
    arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def export_sample(sample: PosterSample, out_dir: str | Path, name: str | None = None) -> Path:
    """Write image, product mask, product image and a JSON caption for inspection."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = name or f"sample_{sample.seed}"
    save_png(sample.image, out_dir / f"{stem}.png")
    save_png(sample.product_mask, out_dir / f"{stem}_mask.png")
    save_png(sample.product_image, out_dir / f"{stem}_product.png")
    caption = {
        "seed": sample.seed,
        "style": PATTERN_NAMES[sample.style_id % len(PATTERN_NAMES)],
        "lines": [line.content for line in sample.layout.lines],
        "boxes": [line.box.to_tuple() for line in sample.layout.lines],
        "descriptions": describe_layout(sample.layout),
    }
    path = out_dir / f"{stem}.json"
    path.write_text(json.dumps(caption, indent=2))
    return path
