"""Axial 2D rotary position embedding.

The first ``d_x`` features of a head vector are rotated pairwise by angles driven by the x
coordinate, the remaining ``d_y`` features by the y coordinate. Coordinates are normalized to
``[0, 1]`` and multiplied by ``pos_scale`` before entering the phase, so image patches and the
characters drawn over them rotate to nearby phases.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    axis_split: tuple[int, int] | None = None
    base: float = 10000.0
    pos_scale: float = 1.0

    def __post_init__(self):
        if not isinstance(self.head_dim, int) or self.head_dim <= 0 or self.head_dim % 2:
            raise ValueError("head_dim must be an even positive integer")
        if self.axis_split is None:
            object.__setattr__(self, "axis_split", (self.head_dim // 2, self.head_dim // 2))
        d_x, d_y = self.axis_split
        if d_x + d_y != self.head_dim:
            raise ValueError("axis_split must sum to head_dim")
        if d_x < 0 or d_y < 0 or d_x % 2 or d_y % 2:
            raise ValueError("axis_split entries must be even and non-negative")
        if not self.base > 1:
            raise ValueError("base must be greater than 1")

    @property
    def d_x(self) -> int:
        return self.axis_split[0]

    @property
    def d_y(self) -> int:
        return self.axis_split[1]


def _axis_frequencies(d_axis: int, base: float) -> torch.Tensor:
    k = torch.arange(d_axis // 2, dtype=torch.float64)
    return base ** (-2.0 * k / d_axis)


def rotation_factors(pos: torch.Tensor, cfg: RopeConfig) -> torch.Tensor:
    """Rotation angle of every feature pair.

    Parameters
    ----------
    pos : torch.Tensor
        Positions of shape ``(..., 2)`` holding normalized ``(x, y)``.
    cfg : RopeConfig
        Rotary configuration.

    Returns
    -------
    angles : torch.Tensor
        Float64 tensor of shape ``(..., head_dim // 2)``. Entry ``k < d_x // 2`` equals
        ``x * pos_scale * base ** (-2k / d_x)``; the rest follow the same rule on ``y``.
    """
    pos = torch.as_tensor(pos, dtype=torch.float64)
    if pos.shape[-1] != 2:
        raise ValueError("positions must have a trailing dimension of size 2")
    x = pos[..., 0:1] * cfg.pos_scale
    y = pos[..., 1:2] * cfg.pos_scale
    angles_x = x * _axis_frequencies(cfg.d_x, cfg.base).to(pos.device)
    angles_y = y * _axis_frequencies(cfg.d_y, cfg.base).to(pos.device)
    return torch.cat([angles_x, angles_y], dim=-1)


def apply_rope(vec: torch.Tensor, pos: torch.Tensor, cfg: RopeConfig) -> torch.Tensor:
    """Rotate consecutive feature pairs ``(2j, 2j+1)`` of ``vec`` by the angles at ``pos``.

    ``pos`` must broadcast against ``vec`` once its trailing coordinate axis is replaced by the
    pair axis, e.g. ``vec`` of shape ``(B, H, N, D)`` with ``pos`` of shape ``(B, 1, N, 2)``.
    """
    if vec.shape[-1] != cfg.head_dim:
        raise ValueError(f"vector has {vec.shape[-1]} features, expected head_dim={cfg.head_dim}")
    angles = rotation_factors(pos.to(vec.device), cfg)
    cos = torch.cos(angles).to(vec.dtype)
    sin = torch.sin(angles).to(vec.dtype)
    v_even = vec[..., 0::2]
    v_odd = vec[..., 1::2]
    rotated = torch.stack([v_even * cos - v_odd * sin, v_even * sin + v_odd * cos], dim=-1)
    return rotated.flatten(-2)
