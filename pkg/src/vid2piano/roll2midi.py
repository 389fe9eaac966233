"""Adversarial refinement of noisy probability rolls into coherent key rolls.

A five-depth U-Net generator consumes 4 s (100-frame) probability windows;
a five-layer CNN discriminator scores windows as pseudo-GT-like or not.
Both train with least-squares (MSE) real/fake targets, plus an optional
reconstruction term that anchors the generator to the paired ground truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoints import Checkpoint
from .nnutil import (
    UNet2d,
    check_finite,
    crop_to,
    load_numpy_state,
    pad_to,
    seed_everything,
    state_to_numpy,
)
from .rollcore import NUM_KEYS, PianoRoll, ProbRoll, events_from_roll

CHECKPOINT_KIND = "roll2midi"
WINDOW_FRAMES = 100  # 4 s at 25 fps
TRAIN_STRIDE = 50  # 2 s
# five halvings need multiples of 32; 88x100 windows are zero-padded up to this
PAD_H = 96
PAD_W = 128


@dataclass
class Roll2MidiConfig:
    gen_channels: int = 16
    disc_channels: int = 16
    num_keys: int = NUM_KEYS
    batch_size: int = 64
    lr: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    recon_weight: float = 10.0  # 0 recovers the purely adversarial objective
    epochs: int = 30
    seed: int = 0

    @classmethod
    def tiny(cls, **overrides) -> "Roll2MidiConfig":
        defaults = dict(gen_channels=8, disc_channels=8, batch_size=16, epochs=10)
        defaults.update(overrides)
        return cls(**defaults)


def build_generator(cfg: Roll2MidiConfig) -> UNet2d:
    return UNet2d(
        depth=5,
        base_channels=cfg.gen_channels,
        max_channels=cfg.gen_channels * 8,
        out_activation="sigmoid",
    )


class Discriminator(nn.Module):
    """Five convolution layers mapping a K x 100 window to one realness score."""

    def __init__(self, cfg: Roll2MidiConfig):
        super().__init__()
        c = cfg.disc_channels
        self.num_keys = cfg.num_keys
        self.conv1 = nn.Conv2d(1, c, 4, stride=2, padding=1)
        self.conv2 = nn.Conv2d(c, c * 2, 4, stride=2, padding=1)
        self.bn2 = nn.BatchNorm2d(c * 2)
        self.conv3 = nn.Conv2d(c * 2, c * 4, 4, stride=2, padding=1)
        self.bn3 = nn.BatchNorm2d(c * 4)
        self.conv4 = nn.Conv2d(c * 4, c * 8, 4, stride=2, padding=1)
        self.bn4 = nn.BatchNorm2d(c * 8)
        self.conv5 = nn.Conv2d(c * 8, 1, (PAD_H // 16, PAD_W // 16))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_window(x, self.num_keys)
        x = pad_to(x, PAD_H, PAD_W)
        x = F.leaky_relu(self.conv1(x), 0.2)
        x = F.leaky_relu(self.bn2(self.conv2(x)), 0.2)
        x = F.leaky_relu(self.bn3(self.conv3(x)), 0.2)
        x = F.leaky_relu(self.bn4(self.conv4(x)), 0.2)
        return self.conv5(x).flatten(1).squeeze(1)


def _check_window(x: torch.Tensor, num_keys: int) -> None:
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != num_keys or x.shape[3] != WINDOW_FRAMES:
        raise ValueError(
            f"expected windows (B, 1, {num_keys}, {WINDOW_FRAMES}), got {tuple(x.shape)}"
        )


def generator_forward(gen: UNet2d, window: torch.Tensor, num_keys: int = NUM_KEYS) -> torch.Tensor:
    """Refine (B, 1, K, 100) windows; zero-pads to 96x128 inside and crops back."""
    _check_window(window, num_keys)
    out = gen(pad_to(window, PAD_H, PAD_W))
    return crop_to(out, num_keys, WINDOW_FRAMES)


def _window_starts(num_frames: int) -> list[int]:
    if num_frames <= WINDOW_FRAMES:
        return [0]
    return [TRAIN_STRIDE * i for i in range(1 + math.ceil((num_frames - WINDOW_FRAMES) / TRAIN_STRIDE))]


def make_training_windows(
    prob_rolls: list[ProbRoll], gt_rolls: list[PianoRoll]
) -> tuple[torch.Tensor, torch.Tensor]:
    """Slice aligned roll pairs into (input, target) 100-frame training windows."""
    xs, ys = [], []
    for prob, gt in zip(prob_rolls, gt_rolls, strict=True):
        if prob.data.shape != gt.data.shape:
            raise ValueError("prob roll and gt roll must share a shape")
        for start in range(0, prob.num_frames - WINDOW_FRAMES + 1, TRAIN_STRIDE):
            xs.append(prob.data[:, start : start + WINDOW_FRAMES])
            ys.append(gt.data[:, start : start + WINDOW_FRAMES])
    if not xs:
        raise ValueError("no full windows: rolls shorter than the window size")
    x = torch.from_numpy(np.stack(xs).astype(np.float32)).unsqueeze(1)
    y = torch.from_numpy(np.stack(ys).astype(np.float32)).unsqueeze(1)
    return x, y


def train_gan(
    prob_rolls: list[ProbRoll],
    gt_rolls: list[PianoRoll],
    cfg: Roll2MidiConfig,
) -> tuple[UNet2d, Discriminator, list[dict]]:
    """Alternate least-squares generator/discriminator updates over windows.

    D minimizes MSE(D(gt), 1) + MSE(D(G(x)), 0); G minimizes MSE(D(G(x)), 1)
    plus ``recon_weight`` * MSE(G(x), gt).
    """
    rng = seed_everything(cfg.seed)
    x_all, y_all = make_training_windows(prob_rolls, gt_rolls)
    gen = build_generator(cfg)
    disc = Discriminator(cfg)
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr, betas=cfg.adam_betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=cfg.adam_betas)
    mse = nn.MSELoss()
    history: list[dict] = []
    n = x_all.shape[0]
    batch = min(cfg.batch_size, n)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = np.zeros(3)
        steps = 0
        for start in range(0, n - batch + 1, batch):
            ids = order[start : start + batch]
            x, y = x_all[ids], y_all[ids]
            fake = generator_forward(gen, x, cfg.num_keys)

            d_real = disc(y)
            d_fake = disc(fake.detach())
            d_loss = mse(d_real, torch.ones_like(d_real)) + mse(
                d_fake, torch.zeros_like(d_fake)
            )
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            g_score = disc(fake)
            g_adv = mse(g_score, torch.ones_like(g_score))
            g_rec = mse(fake, y)
            g_loss = g_adv + cfg.recon_weight * g_rec
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()

            sums += (
                check_finite(d_loss, f"roll2midi D epoch {epoch}"),
                check_finite(g_adv, f"roll2midi G epoch {epoch}"),
                check_finite(g_rec, f"roll2midi G epoch {epoch}"),
            )
            steps += 1
        history.append(
            {
                "epoch": epoch,
                "d_loss": sums[0] / steps,
                "g_adv": sums[1] / steps,
                "g_recon": sums[2] / steps,
            }
        )
    gen.eval()
    disc.eval()
    return gen, disc, history


@torch.no_grad()
def refine_sequence(gen: UNet2d, roll: ProbRoll) -> ProbRoll:
    """Refine a full-length roll in 100-frame windows with 50-frame overlap.

    The tail window is zero-padded and the output cropped back, so outputs
    match what explicit padding to the window grid would give. Overlapping
    windows are averaged.
    """
    gen.eval()
    k, t = roll.data.shape
    starts = _window_starts(t)
    padded_t = starts[-1] + WINDOW_FRAMES
    data = np.zeros((k, padded_t), dtype=np.float32)
    data[:, :t] = roll.data
    windows = torch.from_numpy(
        np.stack([data[:, s : s + WINDOW_FRAMES] for s in starts])
    ).unsqueeze(1)
    refined = generator_forward(gen, windows, k).squeeze(1).numpy()
    acc = np.zeros((k, padded_t), dtype=np.float64)
    cover = np.zeros(padded_t, dtype=np.float64)
    for i, s in enumerate(starts):
        acc[:, s : s + WINDOW_FRAMES] += refined[i]
        cover[s : s + WINDOW_FRAMES] += 1.0
    out = (acc / cover)[:, :t]
    return ProbRoll(np.clip(out, 0.0, 1.0).astype(np.float32), fps=roll.fps, key_base=roll.key_base)


def corrupt_prob_roll(
    gt: PianoRoll,
    seed: int,
    frame_dropout: float = 0.2,
    truncate_frac: float = 0.25,
    truncate_min_frames: int = 8,
    fp_rate: float = 0.01,
) -> ProbRoll:
    """Desk-scale stand-in for classifier output: drops active frames, cuts
    note tails the way audio decay does, and sprinkles false positives."""
    rng = np.random.default_rng(seed)
    k, t = gt.data.shape
    probs = rng.uniform(0.02, 0.20, size=(k, t)).astype(np.float32)
    active = gt.data.astype(bool)
    probs[active] = rng.uniform(0.75, 0.95, size=int(active.sum())).astype(np.float32)
    for ev in events_from_roll(gt):
        dur = ev.duration_frames
        if truncate_frac > 0 and dur >= truncate_min_frames:
            cut = int(dur * truncate_frac)
            if cut:
                row = ev.pitch - gt.key_base
                probs[row, ev.offset_frame - cut : ev.offset_frame] = rng.uniform(
                    0.02, 0.20, size=cut
                )
    if frame_dropout > 0:
        drop = active & (rng.random((k, t)) < frame_dropout)
        probs[drop] = rng.uniform(0.02, 0.20, size=int(drop.sum())).astype(np.float32)
    if fp_rate > 0:
        flip = ~active & (rng.random((k, t)) < fp_rate)
        probs[flip] = rng.uniform(0.45, 0.75, size=int(flip.sum())).astype(np.float32)
    return ProbRoll(probs, fps=gt.fps, key_base=gt.key_base)


def to_checkpoint(
    gen: UNet2d, disc: Discriminator, cfg: Roll2MidiConfig, history: list[dict] | None = None
) -> Checkpoint:
    params = {f"gen.{k}": v for k, v in state_to_numpy(gen).items()}
    params.update({f"disc.{k}": v for k, v in state_to_numpy(disc).items()})
    return Checkpoint(CHECKPOINT_KIND, params, asdict(cfg), history or [])


def from_checkpoint(ckpt: Checkpoint) -> tuple[UNet2d, Discriminator, Roll2MidiConfig]:
    if ckpt.kind != CHECKPOINT_KIND:
        raise ValueError(f"expected a {CHECKPOINT_KIND} checkpoint, got {ckpt.kind!r}")
    raw = dict(ckpt.config)
    raw["adam_betas"] = tuple(raw["adam_betas"])
    cfg = Roll2MidiConfig(**raw)
    gen = build_generator(cfg)
    disc = Discriminator(cfg)
    load_numpy_state(gen, {k[4:]: v for k, v in ckpt.params.items() if k.startswith("gen.")})
    load_numpy_state(disc, {k[5:]: v for k, v in ckpt.params.items() if k.startswith("disc.")})
    gen.eval()
    disc.eval()
    return gen, disc, cfg
