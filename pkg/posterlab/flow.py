"""Rectified-flow objective and Euler sampler.

Convention: ``t = 1`` is pure noise, ``t = 0`` is data, ``x_t = (1 - t) x0 + t eps`` and the
model regresses the constant velocity ``eps - x0``.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from posterlab.data import MaskRegime, PosterSample, make_mask, save_png
from posterlab.tokens import TokenBatch, TokenSeq, build_token_sequence, collate_tokens, from_model_space

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FlowConfig:
    n_sample_steps: int = 50
    paste_product: bool = False

    def __post_init__(self):
        if not isinstance(self.n_sample_steps, int) or self.n_sample_steps < 1:
            raise ValueError("n_sample_steps must be an integer >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> FlowConfig:
        return cls(**d)


def _broadcast_time(t, x: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=x.dtype, device=x.device)
    if t.dim() == 0:
        t = t.expand(x.shape[0])
    if t.shape != (x.shape[0],):
        raise ValueError(f"expected a scalar time or one time per image, got shape {tuple(t.shape)}")
    return t


def interpolate(x0: torch.Tensor, eps: torch.Tensor, t) -> torch.Tensor:
    """Point ``(1 - t) x0 + t eps`` on the straight path from data to noise."""
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ in shape")
    t = _broadcast_time(t, x0).view(-1, *([1] * (x0.dim() - 1)))
    return (1 - t) * x0 + t * eps


def fm_loss(x0: torch.Tensor, eps: torch.Tensor, t, seq: TokenSeq | TokenBatch | list, model) -> torch.Tensor:
    """Mean squared error between the predicted velocity and ``eps - x0`` over every image element.

    The inpainting constraint enters through the conditioning channels of ``seq``; the loss itself
    covers the full image.
    """
    t_vec = _broadcast_time(t, x0)
    if bool(((t_vec < 0) | (t_vec > 1)).any()):
        raise ValueError("t must lie in [0, 1]")
    x_t = interpolate(x0, eps, t_vec)
    pred = model(x_t, t_vec, seq)
    if pred.shape != x0.shape:
        raise ValueError(f"model returned shape {tuple(pred.shape)}, expected {tuple(x0.shape)}")
    return F.mse_loss(pred, eps - x0)


def initial_noise(shape: tuple[int, ...], seeds: Sequence[int], dtype=torch.float32) -> torch.Tensor:
    """One unit-Gaussian image per seed, each drawn from its own generator."""
    draws = [torch.randn(shape, generator=torch.Generator().manual_seed(int(s)), dtype=dtype) for s in seeds]
    return torch.stack(draws)


@torch.no_grad()
def sample(model, seq: TokenSeq | TokenBatch | list, cfg: FlowConfig, seed) -> torch.Tensor:
    """Integrate the learned ODE from noise at ``t = 1`` down to ``t = 0``.

    Parameters
    ----------
    model : callable
        Velocity model ``model(x_t, t, seq)``.
    seq : TokenSeq, list of TokenSeq or TokenBatch
        Conditioning tokens, one sequence per image.
    cfg : FlowConfig
        Number of uniform Euler steps and whether to paste the conditioning pixels back.
    seed : int or sequence of int
        Noise seed, or one seed per image.

    Returns
    -------
    x : torch.Tensor
        Generated images ``(B, 3, H, W)`` in model space.
    """
    batch = collate_tokens(seq)
    seeds = [seed] * len(batch) if np.isscalar(seed) else list(seed)
    if len(seeds) != len(batch):
        raise ValueError(f"{len(seeds)} seeds for {len(batch)} sequences")
    dtype = getattr(model, "dtype", torch.float32)
    x = initial_noise(tuple(batch.cond_image.shape[1:]), seeds, dtype=dtype)
    dt = 1.0 / cfg.n_sample_steps
    for i in range(cfg.n_sample_steps):
        t = 1.0 - i * dt
        x = x - dt * model(x, t, batch)
    if cfg.paste_product:
        keep = batch.gen_mask == 0
        x = torch.where(keep, batch.cond_image.to(x.dtype), x)
    return x


@dataclass
class Generation:
    """A generated poster together with how it was produced."""

    image: np.ndarray
    sample_id: int
    seed: int
    pasted: bool
    n_steps: int

    def save(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / f"{self.sample_id}.png"
        save_png(self.image, path)
        return path


def generate(
    model,
    samples: Sequence[PosterSample],
    cfg: FlowConfig,
    seeds: Sequence[int],
    cpe_enabled: bool = True,
    sample_ids: Sequence[int] | None = None,
    batch_size: int = 16,
) -> list[Generation]:
    """Generate one poster per sample under the poster mask."""
    if len(seeds) != len(samples):
        raise ValueError(f"{len(seeds)} seeds for {len(samples)} samples")
    sample_ids = list(range(len(samples))) if sample_ids is None else list(sample_ids)
    model.eval()
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        seqs = [build_token_sequence(s, cpe_enabled, model.cfg, make_mask(s, MaskRegime.POSTER)) for s in chunk]
        images = sample(model, seqs, cfg, seeds[start : start + batch_size])
        for j, x in enumerate(images):
            img = np.clip(from_model_space(x), 0.0, 1.0).astype(np.float32)
            seed = int(seeds[start + j])
            out.append(Generation(img, sample_ids[start + j], seed, cfg.paste_product, cfg.n_sample_steps))
        logger.debug("generated %d / %d", min(start + batch_size, len(samples)), len(samples))
    return out
