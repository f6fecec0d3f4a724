"""Miniature joint-attention diffusion transformer and its tuning regimes."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from posterlab.font import ALPHABET
from posterlab.rope import RopeConfig, apply_rope
from posterlab.tokens import TokenBatch, TokenSeq, collate_tokens, patchify, unpatchify

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PLCK"
CHECKPOINT_VERSION = 2
IMAGE_CHANNELS = 3
COND_CHANNELS = 4  # masked image (3) + mask (1)


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    canvas: tuple[int, int] = (48, 48)
    patch_size: int = 4
    model_dim: int = 192
    n_heads: int = 6
    n_blocks: int = 6
    mlp_ratio: float = 4.0
    rope_base: float = 10000.0
    pos_scale: float | None = None
    alphabet: str = ALPHABET
    max_lines: int = 4
    n_styles: int = 4
    time_freq_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "canvas", tuple(self.canvas))
        for name in ("patch_size", "model_dim", "n_heads", "n_blocks", "max_lines", "n_styles", "time_freq_dim"):
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise ValueError(f"{name} must be a positive integer")
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be positive")
        if self.model_dim % self.n_heads:
            raise ValueError("model_dim must be divisible by n_heads")
        if self.head_dim % 2:
            raise ValueError("head_dim must be even")
        width, height = self.canvas
        if width % self.patch_size or height % self.patch_size:
            raise ValueError(f"canvas {width}x{height} is not divisible by patch size {self.patch_size}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads

    @property
    def grid(self) -> tuple[int, int]:
        return self.canvas[0] // self.patch_size, self.canvas[1] // self.patch_size

    @property
    def rope_cfg(self) -> RopeConfig:
        # by default one grid cell spans one unit of rotary phase
        scale = float(max(self.grid)) if self.pos_scale is None else float(self.pos_scale)
        return RopeConfig(head_dim=self.head_dim, base=self.rope_base, pos_scale=scale)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


class ModeKind(Enum):
    FULL = "full"
    LORA = "lora"
    ADAPTER_BRANCH = "adapter_branch"
    FROZEN = "frozen"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class TrainMode:
    """Which tensors a training run may update."""

    kind: ModeKind = ModeKind.FULL
    rank: int = 0
    k: int = 0
    alpha: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ModeKind(self.kind))
        if self.kind == ModeKind.LORA and self.rank < 1:
            raise ValueError("lora mode requires rank >= 1")
        if self.kind == ModeKind.ADAPTER_BRANCH and self.k < 1:
            raise ValueError("adapter_branch mode requires k >= 1")

    @classmethod
    def full(cls) -> TrainMode:
        return cls(ModeKind.FULL)

    @classmethod
    def lora(cls, rank: int, alpha: float | None = None) -> TrainMode:
        return cls(ModeKind.LORA, rank=rank, alpha=alpha)

    @classmethod
    def adapter(cls, k: int) -> TrainMode:
        return cls(ModeKind.ADAPTER_BRANCH, k=k)

    @classmethod
    def frozen(cls) -> TrainMode:
        return cls(ModeKind.FROZEN)

    def __str__(self) -> str:
        if self.kind == ModeKind.LORA:
            return f"lora(r={self.rank})"
        if self.kind == ModeKind.ADAPTER_BRANCH:
            return f"adapter_branch(k={self.k})"
        return str(self.kind)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "rank": self.rank, "k": self.k, "alpha": self.alpha}

    @classmethod
    def from_dict(cls, d: dict) -> TrainMode:
        return cls(ModeKind(d["kind"]), rank=d.get("rank", 0), k=d.get("k", 0), alpha=d.get("alpha"))

    def apply(self, model: PosterDiT, seed: int = 0) -> PosterDiT:
        """Return a copy of ``model`` configured for this regime.

        LoRA adapters from an earlier stage are merged first. A model that already carries an adapter
        branch cannot be configured again.
        """
        if model.adapter is not None:
            raise ValueError("a model with an adapter branch cannot be re-configured")
        if self.kind == ModeKind.FULL:
            out = merge_lora(model)
            out.requires_grad_(True)
            return out
        if self.kind == ModeKind.FROZEN:
            out = merge_lora(model)
            out.requires_grad_(False)
            return out
        if self.kind == ModeKind.LORA:
            # lora_b starts at zero and attention sits behind zero-init gates, so on a fresh init the
            # factors get no gradient until the modulation moves; ablations adapt a pretrained base
            return lora_wrap(model, self.rank, alpha=self.alpha, seed=seed)
        return adapter_branch(model, self.k)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features of ``1000 * t``."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half).to(t.device)
    args = (t.to(torch.float64)[:, None] * 1000.0) * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class LoRALinear(nn.Module):
    """Frozen linear layer plus a trainable low-rank update ``(alpha / rank) * B A``."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float | None = None, generator: torch.Generator = None):
        super().__init__()
        if rank < 1:
            raise ValueError("rank must be >= 1")
        if rank > min(base.in_features, base.out_features):
            raise ValueError(f"rank {rank} exceeds the {base.out_features}x{base.in_features} weight")
        self.base = base
        self.base.requires_grad_(False)
        self.rank = rank
        self.scale = (alpha if alpha is not None else rank) / rank
        param = base.weight
        self.lora_a = nn.Parameter(torch.empty(rank, base.in_features, dtype=param.dtype))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank, dtype=param.dtype))
        bound = 1.0 / math.sqrt(base.in_features)
        with torch.no_grad():
            uniform = torch.rand(rank, base.in_features, generator=generator, dtype=param.dtype)
            self.lora_a.copy_(uniform * 2 * bound - bound)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + F.linear(F.linear(x, self.lora_a), self.lora_b) * self.scale

    def merged(self) -> nn.Linear:
        out = nn.Linear(self.base.in_features, self.base.out_features, bias=self.base.bias is not None)
        out = out.to(self.base.weight.dtype)
        with torch.no_grad():
            out.weight.copy_(self.base.weight + self.scale * self.lora_b @ self.lora_a)
            if self.base.bias is not None:
                out.bias.copy_(self.base.bias)
        return out


class JointAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int, rope_cfg: RopeConfig):
        super().__init__()
        self.n_heads = n_heads
        self.rope_cfg = rope_cfg
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, positions: torch.Tensor, key_valid: torch.Tensor) -> torch.Tensor:
        batch, n_tokens, dim = x.shape
        head_dim = dim // self.n_heads
        qkv = self.qkv(x).reshape(batch, n_tokens, 3, self.n_heads, head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        pos = positions.unsqueeze(1)
        q = apply_rope(q, pos, self.rope_cfg)
        k = apply_rope(k, pos, self.rope_cfg)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(head_dim)
        scores = scores.masked_fill(~key_valid[:, None, None, :], float("-inf"))
        out = scores.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(batch, n_tokens, dim))


class JointBlock(nn.Module):
    """Pre-norm transformer block with adaptive layer-norm time modulation."""

    def __init__(self, dim: int, n_heads: int, mlp_ratio: float, rope_cfg: RopeConfig):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = JointAttention(dim, n_heads, rope_cfg)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, dim))
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))

    def forward(self, x, c, positions, key_valid):
        shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = self.modulation(c).chunk(6, dim=-1)
        x = x + gate_a.unsqueeze(1) * self.attn(modulate(self.norm1(x), shift_a, scale_a), positions, key_valid)
        x = x + gate_m.unsqueeze(1) * self.mlp(modulate(self.norm2(x), shift_m, scale_m))
        return x


class AdapterBranch(nn.Module):
    """Trainable copy of the first ``k`` blocks feeding the frozen base through zero projections."""

    def __init__(self, blocks: list[JointBlock], dim: int, cond_dim: int):
        super().__init__()
        self.blocks = nn.ModuleList(copy.deepcopy(b) for b in blocks)
        self.cond_in = nn.Linear(cond_dim, dim)
        self.zero_projs = nn.ModuleList(nn.Linear(dim, dim) for _ in blocks)
        dtype = blocks[0].attn.qkv.weight.dtype
        self.to(dtype)
        for layer in [self.cond_in, *self.zero_projs]:
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)
        self.requires_grad_(True)

    def __len__(self) -> int:
        return len(self.blocks)


class PosterDiT(nn.Module):
    """Velocity-predicting transformer over image patches, character tokens and a style token."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        p = cfg.patch_size
        dim = cfg.model_dim
        self.patch_in = nn.Linear((IMAGE_CHANNELS + COND_CHANNELS) * p * p, dim)
        self.char_embed = nn.Embedding(len(cfg.alphabet), dim)
        self.line_embed = nn.Embedding(cfg.max_lines, dim)
        self.style_embed = nn.Embedding(cfg.n_styles, dim)
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))
        rope_cfg = cfg.rope_cfg
        self.blocks = nn.ModuleList(JointBlock(dim, cfg.n_heads, cfg.mlp_ratio, rope_cfg) for _ in range(cfg.n_blocks))
        self.patch_out = nn.Linear(dim, IMAGE_CHANNELS * p * p)
        self.adapter: AdapterBranch | None = None

    @property
    def dtype(self) -> torch.dtype:
        return self.patch_in.weight.dtype

    def _embed(self, x_t: torch.Tensor, t: torch.Tensor, batch: TokenBatch):
        cfg = self.cfg
        width, height = cfg.canvas
        if x_t.dim() != 4 or tuple(x_t.shape[1:]) != (IMAGE_CHANNELS, height, width):
            raise ValueError(f"expected images of shape (B, 3, {height}, {width}), got {tuple(x_t.shape)}")
        if batch.image_grid != cfg.grid or batch.patch_size != cfg.patch_size:
            raise ValueError("token sequence was built for a different canvas or patch size")
        if len(batch) != x_t.shape[0]:
            raise ValueError(f"{x_t.shape[0]} images but {len(batch)} token sequences")
        t = torch.as_tensor(t, dtype=self.dtype, device=x_t.device)
        if t.dim() == 0:
            t = t.expand(x_t.shape[0])
        cond = batch.cond_patches().to(self.dtype)
        img_in = torch.cat([patchify(x_t.to(self.dtype), cfg.patch_size), cond], dim=-1)
        h_img = self.patch_in(img_in)
        h_txt = self.char_embed(batch.char_ids) + self.line_embed(batch.line_ids)
        h_style = self.style_embed(batch.style_ids).unsqueeze(1)
        h = torch.cat([h_img, h_txt, h_style], dim=1)
        c = self.time_mlp(timestep_embedding(t, cfg.time_freq_dim).to(self.dtype))
        return h, c, cond

    def _trunk(self, x_t, t, seq) -> torch.Tensor:
        batch = collate_tokens(seq)
        h, c, cond = self._embed(x_t, t, batch)
        positions, key_valid = batch.positions, batch.key_valid
        n_img = batch.n_image
        hb = None
        if self.adapter is not None:
            hb = torch.cat([h[:, :n_img] + self.adapter.cond_in(cond), h[:, n_img:]], dim=1)
        for i, block in enumerate(self.blocks):
            h = block(h, c, positions, key_valid)
            if hb is not None and i < len(self.adapter):
                hb = self.adapter.blocks[i](hb, c, positions, key_valid)
                h = torch.cat([h[:, :n_img] + self.adapter.zero_projs[i](hb[:, :n_img]), h[:, n_img:]], dim=1)
        return h[:, :n_img]

    def forward(self, x_t: torch.Tensor, t, seq: TokenSeq | TokenBatch | list) -> torch.Tensor:
        """Predict the velocity field.

        Parameters
        ----------
        x_t : torch.Tensor
            Noisy images ``(B, 3, H, W)`` in model space.
        t : float or torch.Tensor
            Flow time in ``[0, 1]``, scalar or one per image.
        seq : TokenSeq, list of TokenSeq or TokenBatch
            Conditioning tokens, one sequence per image.

        Returns
        -------
        velocity : torch.Tensor
            Same shape as ``x_t``.
        """
        h_img = self._trunk(x_t, t, seq)
        return unpatchify(self.patch_out(h_img), self.cfg.patch_size, self.cfg.grid, IMAGE_CHANNELS)

    def image_features(self, x: torch.Tensor, t, seq) -> torch.Tensor:
        """Final-block image-token activations ``(B, N_image, model_dim)``."""
        return self._trunk(x, t, seq)


def _init_weights(model: PosterDiT) -> None:
    for module in model.modules():
        if isinstance(module, nn.Linear):
            nn.init.xavier_uniform_(module.weight)
            nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            nn.init.normal_(module.weight, std=0.02)
    for module in model.time_mlp:
        if isinstance(module, nn.Linear):
            nn.init.normal_(module.weight, std=0.02)
    # zero modulation: every block starts as the identity map
    for block in model.blocks:
        nn.init.zeros_(block.modulation[-1].weight)
        nn.init.zeros_(block.modulation[-1].bias)


def init_params(cfg: ModelConfig, seed: int) -> PosterDiT:
    """Deterministically initialize a model from ``seed``."""
    if not isinstance(cfg, ModelConfig):
        raise TypeError("cfg must be a ModelConfig object")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = PosterDiT(cfg)
        _init_weights(model)
    return model


def lora_wrap(model: PosterDiT, rank: int, alpha: float | None = None, seed: int = 0) -> PosterDiT:
    """Copy of ``model`` with frozen base tensors and LoRA adapters on every attention projection."""
    if rank < 1:
        raise ValueError("rank must be >= 1")
    out = merge_lora(model)
    out.requires_grad_(False)
    generator = torch.Generator().manual_seed(seed)
    for block in out.blocks:
        attn = block.attn
        attn.qkv = LoRALinear(attn.qkv, rank, alpha, generator)
        attn.proj = LoRALinear(attn.proj, rank, alpha, generator)
    return out


def merge_lora(model: PosterDiT) -> PosterDiT:
    """Copy of ``model`` with every LoRA adapter folded into a plain linear layer."""
    out = copy.deepcopy(model)
    for block in out.blocks:
        for name in ("qkv", "proj"):
            layer = getattr(block.attn, name)
            if isinstance(layer, LoRALinear):
                merged = layer.merged()
                merged.requires_grad_(layer.base.weight.requires_grad)
                setattr(block.attn, name, merged)
    return out


def adapter_branch(model: PosterDiT, k: int) -> PosterDiT:
    """Copy of ``model`` with a frozen base and a zero-initialized trainable branch of ``k`` blocks."""
    n_blocks = len(model.blocks)
    if model.adapter is not None:
        raise ValueError("model already carries an adapter branch")
    if not 1 <= k <= n_blocks:
        raise ValueError(f"k must be in [1, {n_blocks}]")
    out = copy.deepcopy(model)
    out.requires_grad_(False)
    cond_dim = COND_CHANNELS * model.cfg.patch_size**2
    out.adapter = AdapterBranch(list(out.blocks[:k]), model.cfg.model_dim, cond_dim)
    return out


def trainable_parameters(model: nn.Module) -> list[torch.nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def count_trainable(model: nn.Module) -> int:
    return sum(p.numel() for p in trainable_parameters(model))


# -- checkpoints ------------------------------------------------------------------


@dataclass
class CheckpointInfo:
    config: ModelConfig
    mode: TrainMode
    seeds: dict
    extra: dict


def save_checkpoint(
    path: str | Path, model: PosterDiT, mode: TrainMode, seeds: dict | None = None, extra: dict | None = None
) -> None:
    """Write ``magic | u16 version | u32 header length | header JSON | raw <f4 tensors | u32 CRC32``.

    The CRC covers every byte before it. The header lists tensor names, shapes and trainable flags
    in storage order, the model config, the training mode and the seed lineage.
    """
    state = model.state_dict()
    trainable = {name for name, p in model.named_parameters() if p.requires_grad}
    tensors = [{"name": name, "shape": list(t.shape), "trainable": name in trainable} for name, t in state.items()]
    header = {
        "config": model.cfg.to_dict(),
        "mode": mode.to_dict(),
        "seeds": seeds or {},
        "extra": extra or {},
        "tensors": tensors,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(header_bytes)), header_bytes]
    chunks += [state[name].detach().cpu().numpy().astype("<f4").tobytes() for name in state]
    payload = b"".join(chunks)
    with open(path, "wb") as fp:
        fp.write(payload)
        fp.write(struct.pack("<I", zlib.crc32(payload)))


def load_checkpoint(path: str | Path) -> tuple[PosterDiT, CheckpointInfo]:
    with open(path, "rb") as fp:
        data = fp.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path} is not a posterlab checkpoint")
    if len(data) < 14:
        raise CheckpointFormatError(f"{path} is truncated")
    (stored,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != stored:
        raise CheckpointFormatError(f"{path} fails its CRC32 check (truncated or corrupted)")
    version, header_len = struct.unpack_from("<HI", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    offset = 10
    header = json.loads(data[offset : offset + header_len])
    offset += header_len
    cfg = ModelConfig.from_dict(header["config"])
    mode = TrainMode.from_dict(header["mode"])
    model = mode.apply(init_params(cfg, 0))
    state = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        if offset + 4 * n + 4 > len(data):
            raise CheckpointFormatError(f"checkpoint truncated inside tensor {entry['name']}")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
        offset += 4 * n
    if offset + 4 != len(data):
        raise CheckpointFormatError(f"{len(data) - offset - 4} unexpected trailing bytes in {path}")
    model.load_state_dict(state)
    trainable = {e["name"] for e in header["tensors"] if e["trainable"]}
    for name, p in model.named_parameters():
        p.requires_grad_(name in trainable)
    return model, CheckpointInfo(cfg, mode, header["seeds"], header["extra"])
