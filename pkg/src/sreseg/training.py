"""Supervised training loop: seeded patch sampling, lossless augmentation,
cross-entropy, AdamW with cosine decay, CSV logging, and checkpoints.

Randomness comes from counter-based Philox streams keyed by
(seed, epoch, step, slot), so runs are bit-reproducible and resuming from
a checkpoint replays exactly the same remaining schedule.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Sample, augment_d4, sample_patch
from .ops import softmax_ce_loss
from .optim import AdamWState, adamw_init, adamw_step, cosine_lr
from .unet import UNet, UNetConfig

__all__ = ["TrainConfig", "TrainResult", "train", "LOG_HEADER"]

LOG_HEADER = ("epoch", "step", "loss", "lr", "seconds")


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run needs besides the dataset itself."""

    epochs: int = 50
    batch_size: int = 32
    patch_size: int = 96
    lr0: float = 5e-4
    seed: int = 0
    augment: bool = True
    steps_per_epoch: int | None = None
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    conv_type: str = "sre"
    k_list: tuple[int, ...] = (9, 7, 5)
    base_channels: int | None = None
    in_channels: int = 3
    out_classes: int = 2
    final_k: int = 5
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "k_list", tuple(int(k) for k in self.k_list))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        for name in ("epochs", "batch_size", "patch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        depth = len(self.k_list) - 1
        if self.patch_size % (1 << depth):
            raise ValueError(
                f"patch_size must be divisible by {1 << depth}, got {self.patch_size}"
            )
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be positive when given")

    def unet_config(self) -> UNetConfig:
        return UNetConfig(
            k_list=self.k_list,
            base_channels=self.base_channels,
            depth=len(self.k_list) - 1,
            conv_type=self.conv_type,
            in_channels=self.in_channels,
            out_classes=self.out_classes,
            final_k=self.final_k,
        )

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "patch_size": self.patch_size,
            "lr0": self.lr0,
            "seed": self.seed,
            "augment": self.augment,
            "steps_per_epoch": self.steps_per_epoch,
            "weight_decay": self.weight_decay,
            "betas": list(self.betas),
            "eps": self.eps,
            "conv_type": self.conv_type,
            "k_list": list(self.k_list),
            "base_channels": self.base_channels,
            "in_channels": self.in_channels,
            "out_classes": self.out_classes,
            "final_k": self.final_k,
            "checkpoint_every": self.checkpoint_every,
        }

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = {f for f in TrainConfig.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        prepared = dict(d)
        for key in ("k_list", "betas"):
            if key in prepared and prepared[key] is not None:
                prepared[key] = tuple(prepared[key])
        return TrainConfig(**prepared)


@dataclass
class TrainResult:
    net: UNet
    state: AdamWState
    log: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def _step_rng(seed: int, epoch: int, step: int, slot: int) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=seed, spawn_key=(epoch, step, slot))
    return np.random.Generator(np.random.Philox(seq))


def _make_batch(cfg: TrainConfig, samples: list[Sample], epoch: int,
                step: int) -> tuple[np.ndarray, np.ndarray]:
    images, labels = [], []
    for slot in range(cfg.batch_size):
        rng = _step_rng(cfg.seed, epoch, step, slot)
        s = samples[int(rng.integers(len(samples)))]
        patch = sample_patch(s, cfg.patch_size, rng)
        if cfg.augment:
            patch = augment_d4(patch, rng)
        images.append(patch.image)
        labels.append(patch.label)
    return np.stack(images), np.stack(labels)


def train(cfg: TrainConfig, samples: list[Sample], out_dir: str | Path | None = None,
          resume: str | Path | None = None) -> TrainResult:
    """Train a network on the given samples; fully determined by (cfg, seed).

    Raises ValueError before any step on an empty dataset or a patch size
    the images cannot supply. Writes log.csv and checkpoints when out_dir
    is given; returns the in-memory result either way.
    """
    if not samples:
        raise ValueError("dataset is empty")
    for s in samples:
        if cfg.patch_size > s.height or cfg.patch_size > s.width:
            raise ValueError(
                f"patch size {cfg.patch_size} exceeds image {s.id} "
                f"({s.height}x{s.width})"
            )

    steps_per_epoch = cfg.steps_per_epoch or max(1, -(-len(samples) // cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch

    start_epoch = 0
    if resume is not None:
        net, state, manifest = load_checkpoint(resume)
        if net.cfg != cfg.unet_config():
            raise ValueError("checkpoint architecture does not match the config")
        start_epoch = int(manifest["epoch"])
    else:
        net = UNet(cfg.unet_config(), seed=cfg.seed)
        state = adamw_init(net.parameters(), lr0=cfg.lr0, betas=cfg.betas,
                           eps=cfg.eps, weight_decay=cfg.weight_decay)

    out_dir = Path(out_dir) if out_dir is not None else None
    log_rows: list[dict] = []
    checkpoints: list[Path] = []
    log_fh = None
    writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "log.csv"
        fresh = resume is None or not log_path.exists()
        log_fh = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(log_fh)
        if fresh:
            writer.writerow(LOG_HEADER)

    try:
        params = net.parameters()
        for epoch in range(start_epoch, cfg.epochs):
            for step in range(steps_per_epoch):
                t0 = time.perf_counter()
                global_step = epoch * steps_per_epoch + step
                x, y = _make_batch(cfg, samples, epoch, step)
                logits = net.forward(x)
                loss, grad = softmax_ce_loss(logits, y)
                net.backward(grad)
                lr = cosine_lr(global_step, total_steps, cfg.lr0)
                adamw_step(params, net.gradients(), state, lr=lr)
                row = {
                    "epoch": epoch,
                    "step": global_step,
                    "loss": loss,
                    "lr": lr,
                    "seconds": time.perf_counter() - t0,
                }
                log_rows.append(row)
                if writer is not None:
                    writer.writerow([row[k] for k in LOG_HEADER])
            if (out_dir is not None and cfg.checkpoint_every
                    and (epoch + 1) % cfg.checkpoint_every == 0
                    and epoch + 1 < cfg.epochs):
                path = save_checkpoint(net, state, out_dir / f"ckpt_epoch{epoch + 1:05d}",
                                       seed=cfg.seed, epoch=epoch + 1,
                                       extra={"train_config": cfg.to_dict()})
                checkpoints.append(path)
        if out_dir is not None:
            path = save_checkpoint(net, state, out_dir / "ckpt_final",
                                   seed=cfg.seed, epoch=cfg.epochs,
                                   extra={"train_config": cfg.to_dict()})
            checkpoints.append(path)
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(net=net, state=state, log=log_rows, checkpoints=checkpoints)
