"""Seeded training loop for the inpainting model."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from tqdm import tqdm

from posterlab.data import MaskRegime, PosterSample, make_mask
from posterlab.flow import fm_loss
from posterlab.model import PosterDiT, TrainMode, save_checkpoint, trainable_parameters
from posterlab.tokens import TokenSeq, build_token_sequence, to_model_space

logger = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    """Raised when the loss stops being finite; ``snapshot`` points at the saved model state."""

    def __init__(self, message: str, snapshot: Path | None = None):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class TrainConfig:
    mode: TrainMode = field(default_factory=TrainMode.full)
    lr: float = 1e-3
    weight_decay: float = 1e-2
    batch_size: int = 16
    epochs: int = 1
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float = 1.0

    def __post_init__(self):
        if isinstance(self.mode, dict):
            object.__setattr__(self, "mode", TrainMode.from_dict(self.mode))
        object.__setattr__(self, "betas", tuple(self.betas))
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ValueError("epochs must be an integer >= 1")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ValueError("batch_size must be an integer >= 1")
        if self.weight_decay < 0 or self.grad_clip < 0:
            raise ValueError("weight_decay and grad_clip must be non-negative")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.to_dict(),
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "betas": list(self.betas),
            "eps": self.eps,
            "grad_clip": self.grad_clip,
        }

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)


def _derived_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, dtype=np.uint32)[0])


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Sample order of one epoch, fixed by ``(seed, epoch)``."""
    return np.random.default_rng(_derived_seed(seed, epoch)).permutation(n)


def step_noise(x0: torch.Tensor, seed: int, epoch: int, step: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Gaussian noise and uniform flow times for one optimizer step, fixed by ``(seed, epoch, step)``."""
    g = torch.Generator().manual_seed(_derived_seed(seed, epoch, step))
    eps = torch.randn(x0.shape, generator=g, dtype=x0.dtype)
    t = torch.rand(x0.shape[0], generator=g, dtype=x0.dtype)
    return eps, t


class Trainer:
    """Owns the single mutable copy of a model during one training stage.

    Parameters
    ----------
    model : PosterDiT
        Starting point; it is copied and configured for ``cfg.mode``.
    samples : sequence of PosterSample
        Training data.
    cfg : TrainConfig
        Optimizer, budget and seed.
    regime : MaskRegime
        ``RANDOM_PATCH`` masks are redrawn every epoch; ``POSTER`` masks are fixed.
    cpe_enabled : bool
        Whether character tokens carry their layout coordinates.
    snapshot_dir : path, optional
        Where to dump the model state if the loss becomes non-finite.
    """

    def __init__(
        self,
        model: PosterDiT,
        samples: Sequence[PosterSample],
        cfg: TrainConfig,
        regime: MaskRegime = MaskRegime.POSTER,
        cpe_enabled: bool = True,
        snapshot_dir: str | Path | None = None,
    ):
        if len(samples) == 0:
            raise ValueError("cannot train on an empty dataset")
        self.cfg = cfg
        self.samples = samples
        self.regime = MaskRegime(regime)
        self.cpe_enabled = cpe_enabled
        self.snapshot_dir = Path(snapshot_dir) if snapshot_dir is not None else None
        self.model = cfg.mode.apply(model, seed=cfg.seed)
        self.params = trainable_parameters(self.model)
        self.optimizer = None
        if self.params:
            self.optimizer = torch.optim.AdamW(
                self.params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay
            )
        self._poster_seqs: dict[int, TokenSeq] = {}
        self.losses: list[float] = []

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.samples) / self.cfg.batch_size)

    def _seq(self, idx: int, epoch: int) -> TokenSeq:
        sample = self.samples[idx]
        if self.regime == MaskRegime.POSTER:
            if idx not in self._poster_seqs:
                self._poster_seqs[idx] = build_token_sequence(sample, self.cpe_enabled, self.model.cfg)
            return self._poster_seqs[idx]
        mask = make_mask(sample, MaskRegime.RANDOM_PATCH, seed=_derived_seed(sample.seed, epoch))
        return build_token_sequence(sample, self.cpe_enabled, self.model.cfg, mask)

    def step(self, indices: Sequence[int], epoch: int, step: int) -> float:
        x0 = torch.stack([to_model_space(self.samples[i].image) for i in indices]).to(self.model.dtype)
        seqs = [self._seq(i, epoch) for i in indices]
        eps, t = step_noise(x0, self.cfg.seed, epoch, step)
        if self.optimizer is None:
            with torch.no_grad():
                loss = fm_loss(x0, eps, t, seqs, self.model)
            self._check(loss, epoch, step)
            return float(loss)
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        loss = fm_loss(x0, eps, t, seqs, self.model)
        self._check(loss, epoch, step)
        loss.backward()
        if self.cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.params, self.cfg.grad_clip)
        self.optimizer.step()
        return float(loss.detach())

    def _check(self, loss: torch.Tensor, epoch: int, step: int) -> None:
        if torch.isfinite(loss):
            return
        path = None
        if self.snapshot_dir is not None:
            self.snapshot_dir.mkdir(parents=True, exist_ok=True)
            path = self.snapshot_dir / f"nonfinite_e{epoch}_s{step}.ckpt"
            save_checkpoint(path, self.model, self.cfg.mode, seeds={"train_seed": self.cfg.seed})
        raise NonFiniteLossError(f"loss became {float(loss)} at epoch {epoch} step {step}", path)

    def fit(self, progress: bool = False) -> list[float]:
        """Run every epoch and return the per-step loss trace."""
        total = self.cfg.epochs * self.steps_per_epoch
        logger.info(
            "training %s on %d samples for %d steps (%d trainable tensors)",
            self.cfg.mode,
            len(self.samples),
            total,
            len(self.params),
        )
        bar = tqdm(total=total, desc=f"train[{self.cfg.mode}]", disable=not progress)
        for epoch in range(self.cfg.epochs):
            order = epoch_order(len(self.samples), self.cfg.seed, epoch)
            for step in range(self.steps_per_epoch):
                batch = order[step * self.cfg.batch_size : (step + 1) * self.cfg.batch_size]
                self.losses.append(self.step(batch.tolist(), epoch, step))
                bar.update()
                bar.set_postfix(loss=f"{self.losses[-1]:.4f}")
        bar.close()
        return self.losses


def train_model(
    model: PosterDiT,
    samples: Sequence[PosterSample],
    cfg: TrainConfig,
    regime: MaskRegime = MaskRegime.POSTER,
    cpe_enabled: bool = True,
    snapshot_dir: str | Path | None = None,
    progress: bool = False,
) -> tuple[PosterDiT, list[float]]:
    trainer = Trainer(model, samples, cfg, regime, cpe_enabled, snapshot_dir)
    losses = trainer.fit(progress=progress)
    return trainer.model, losses
