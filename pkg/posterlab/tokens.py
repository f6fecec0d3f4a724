from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Sequence

import numpy as np
import torch
from einops import rearrange

from posterlab.data import MaskRegime, PosterSample, make_mask
from posterlab.layout import Layout, assign_char_positions

if TYPE_CHECKING:
    from posterlab.model import ModelConfig


class TokenTag(Enum):
    IMAGE = "image"
    TEXT = "text"
    STYLE = "style"

    def __str__(self) -> str:
        return self.value


def to_model_space(image: np.ndarray) -> torch.Tensor:
    """``H x W x 3`` image in ``[0, 1]`` to a ``3 x H x W`` tensor in ``[-1, 1]``."""
    return torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1) * 2.0 - 1.0


def from_model_space(x: torch.Tensor) -> np.ndarray:
    return ((x.detach().to(torch.float32).cpu().permute(1, 2, 0) + 1.0) / 2.0).numpy()


def patchify(x: torch.Tensor, patch_size: int) -> torch.Tensor:
    """``(B, C, H, W)`` to row-major patch tokens ``(B, N, C * p * p)``."""
    return rearrange(x, "b c (gh p1) (gw p2) -> b (gh gw) (c p1 p2)", p1=patch_size, p2=patch_size)


def unpatchify(tokens: torch.Tensor, patch_size: int, grid: tuple[int, int], channels: int = 3) -> torch.Tensor:
    grid_w, grid_h = grid
    return rearrange(
        tokens,
        "b (gh gw) (c p1 p2) -> b c (gh p1) (gw p2)",
        gh=grid_h,
        gw=grid_w,
        c=channels,
        p1=patch_size,
        p2=patch_size,
    )


def image_grid_positions(grid: tuple[int, int]) -> torch.Tensor:
    """Patch-center positions in row-major order, ``((col + 0.5) / G_w, (row + 0.5) / G_h)``."""
    grid_w, grid_h = grid
    rows, cols = torch.meshgrid(torch.arange(grid_h), torch.arange(grid_w), indexing="ij")
    xs = (cols.flatten().to(torch.float64) + 0.5) / grid_w
    ys = (rows.flatten().to(torch.float64) + 0.5) / grid_h
    return torch.stack([xs, ys], dim=-1)


@dataclass
class TokenSeq:
    """The model's view of one sample.

    Image tokens come first in row-major grid order, then one token per character of the
    layout, then the style token. Token embeddings are resolved by the model from ``char_ids``,
    ``line_ids`` and ``style_id`` (the embedding tables are model parameters); image tokens are
    embedded from ``[noisy patch | masked-image patch | mask patch]`` at every forward call.
    """

    cond_image: torch.Tensor
    gen_mask: torch.Tensor
    char_ids: torch.Tensor
    line_ids: torch.Tensor
    style_id: int
    positions: torch.Tensor
    tags: list
    image_grid: tuple[int, int]
    patch_size: int

    def __len__(self) -> int:
        return len(self.tags)

    @property
    def canvas(self) -> tuple[int, int]:
        return self.cond_image.shape[-1], self.cond_image.shape[-2]

    @property
    def n_image(self) -> int:
        return self.image_grid[0] * self.image_grid[1]

    @property
    def n_text(self) -> int:
        return int(self.char_ids.numel())

    def cond_patches(self) -> torch.Tensor:
        cond = torch.cat([self.cond_image, self.gen_mask], dim=0).unsqueeze(0)
        return patchify(cond, self.patch_size)[0]


@dataclass
class TokenBatch:
    """Several token sequences padded to a common text length.

    Sequence layout per row: ``n_image`` image tokens, ``max_text`` text slots (padding is
    excluded through ``key_valid``), one style token.
    """

    cond_image: torch.Tensor
    gen_mask: torch.Tensor
    char_ids: torch.Tensor
    line_ids: torch.Tensor
    style_ids: torch.Tensor
    positions: torch.Tensor
    key_valid: torch.Tensor
    image_grid: tuple[int, int]
    patch_size: int

    def __len__(self) -> int:
        return self.cond_image.shape[0]

    @property
    def n_image(self) -> int:
        return self.image_grid[0] * self.image_grid[1]

    def cond_patches(self) -> torch.Tensor:
        return patchify(torch.cat([self.cond_image, self.gen_mask], dim=1), self.patch_size)

    def to(self, device) -> TokenBatch:
        return TokenBatch(
            cond_image=self.cond_image.to(device),
            gen_mask=self.gen_mask.to(device),
            char_ids=self.char_ids.to(device),
            line_ids=self.line_ids.to(device),
            style_ids=self.style_ids.to(device),
            positions=self.positions.to(device),
            key_valid=self.key_valid.to(device),
            image_grid=self.image_grid,
            patch_size=self.patch_size,
        )


def collate_tokens(seqs: Sequence[TokenSeq] | TokenSeq | TokenBatch) -> TokenBatch:
    if isinstance(seqs, TokenBatch):
        return seqs
    if isinstance(seqs, TokenSeq):
        seqs = [seqs]
    if len(seqs) == 0:
        raise ValueError("cannot collate an empty list of token sequences")
    grid, patch = seqs[0].image_grid, seqs[0].patch_size
    if any(s.image_grid != grid or s.patch_size != patch for s in seqs):
        raise ValueError("token sequences disagree on the image grid")
    n_img = seqs[0].n_image
    max_text = max(s.n_text for s in seqs)
    batch = len(seqs)
    char_ids = torch.zeros(batch, max_text, dtype=torch.long)
    line_ids = torch.zeros(batch, max_text, dtype=torch.long)
    positions = torch.zeros(batch, n_img + max_text + 1, 2, dtype=torch.float64)
    key_valid = torch.zeros(batch, n_img + max_text + 1, dtype=torch.bool)
    for b, s in enumerate(seqs):
        t = s.n_text
        char_ids[b, :t] = s.char_ids
        line_ids[b, :t] = s.line_ids
        positions[b, : n_img + t] = s.positions[: n_img + t]
        positions[b, -1] = s.positions[-1]
        key_valid[b, : n_img + t] = True
        key_valid[b, -1] = True
    return TokenBatch(
        cond_image=torch.stack([s.cond_image for s in seqs]),
        gen_mask=torch.stack([s.gen_mask for s in seqs]),
        char_ids=char_ids,
        line_ids=line_ids,
        style_ids=torch.tensor([s.style_id for s in seqs], dtype=torch.long),
        positions=positions,
        key_valid=key_valid,
        image_grid=grid,
        patch_size=patch,
    )


class TokenSequenceConstructor:
    """Accumulates image, text and style tokens in the order the model expects."""

    def __init__(self, alphabet: str, patch_size: int, max_lines: int):
        self.alphabet = alphabet
        self.patch_size = patch_size
        self.max_lines = max_lines
        self.cond_image: torch.Tensor | None = None
        self.gen_mask: torch.Tensor | None = None
        self.image_grid: tuple[int, int] | None = None
        self.char_ids: list[int] = []
        self.line_ids: list[int] = []
        self.positions: list[tuple[float, float]] = []
        self.tags: list[TokenTag] = []
        self.style_id: int | None = None
        self._has_text = False

    def add_image(self, image: np.ndarray, mask: np.ndarray) -> None:
        if self.image_grid is not None:
            raise RuntimeError("Image tokens have already been added")
        height, width = mask.shape
        if height % self.patch_size or width % self.patch_size:
            raise ValueError(f"canvas {width}x{height} is not divisible by patch size {self.patch_size}")
        keep = torch.from_numpy(~np.asarray(mask, dtype=bool)).to(torch.float32)
        self.cond_image = to_model_space(image) * keep
        self.gen_mask = torch.from_numpy(np.asarray(mask, dtype=np.float32)).unsqueeze(0)
        self.image_grid = (width // self.patch_size, height // self.patch_size)
        grid_pos = image_grid_positions(self.image_grid)
        self.positions.extend(tuple(p) for p in grid_pos.tolist())
        self.tags.extend([TokenTag.IMAGE] * len(grid_pos))

    def add_lines(self, layout: Layout, cpe_enabled: bool) -> None:
        if self.image_grid is None:
            raise RuntimeError("Must add image tokens before text tokens")
        if self._has_text:
            raise RuntimeError("Text tokens have already been added")
        if len(layout.lines) > self.max_lines:
            raise ValueError(f"layout has {len(layout.lines)} lines, the model supports {self.max_lines}")
        for line_idx, line in enumerate(layout.lines):
            unknown = [c for c in line.content if c not in self.alphabet]
            if unknown:
                raise ValueError(f"line {line_idx} uses characters outside the alphabet: {''.join(unknown)!r}")
            if cpe_enabled:
                coords = [p.to_tuple() for p in assign_char_positions(line)]
            else:
                coords = [(0.0, 0.0)] * len(line.content)
            self.char_ids.extend(self.alphabet.index(c) for c in line.content)
            self.line_ids.extend([line_idx] * len(line.content))
            self.positions.extend(coords)
            self.tags.extend([TokenTag.TEXT] * len(line.content))
        self._has_text = True

    def add_style(self, style_id: int) -> None:
        if not self._has_text:
            raise RuntimeError("Must add text tokens before the style token")
        if self.style_id is not None:
            warnings.warn("The style token has already been set. The previous style will be overwritten.")
            self.positions.pop()
            self.tags.pop()
        self.style_id = int(style_id)
        self.positions.append((0.0, 0.0))
        self.tags.append(TokenTag.STYLE)

    def build(self) -> TokenSeq:
        if self.style_id is None:
            raise RuntimeError("Must add the style token before building the sequence")
        return TokenSeq(
            cond_image=self.cond_image,
            gen_mask=self.gen_mask,
            char_ids=torch.tensor(self.char_ids, dtype=torch.long),
            line_ids=torch.tensor(self.line_ids, dtype=torch.long),
            style_id=self.style_id,
            positions=torch.tensor(self.positions, dtype=torch.float64).reshape(-1, 2),
            tags=list(self.tags),
            image_grid=self.image_grid,
            patch_size=self.patch_size,
        )


def build_token_sequence(
    sample: PosterSample,
    cpe_enabled: bool,
    model_cfg: ModelConfig,
    mask: np.ndarray | None = None,
) -> TokenSeq:
    """Convert a poster sample into the model's token sequence.

    Parameters
    ----------
    sample : PosterSample
        Sample with a validated layout.
    cpe_enabled : bool
        When true, character tokens carry their character-position coordinates; otherwise every
        text token sits at ``(0, 0)``.
    model_cfg : ModelConfig
        Supplies the patch size, alphabet and number of line-index embeddings.
    mask : numpy.ndarray, optional
        Region to generate. Defaults to the poster mask (everything but the product).

    Returns
    -------
    seq : TokenSeq
    """
    if not isinstance(sample, PosterSample):
        raise TypeError("sample must be a PosterSample object")
    if mask is None:
        mask = make_mask(sample, MaskRegime.POSTER)
    if mask.shape != sample.product_mask.shape:
        raise ValueError("mask shape does not match the sample canvas")
    tsc = TokenSequenceConstructor(model_cfg.alphabet, model_cfg.patch_size, model_cfg.max_lines)
    tsc.add_image(sample.image, mask)
    tsc.add_lines(sample.layout, cpe_enabled)
    tsc.add_style(sample.style_id)
    return tsc.build()
