"""Multi-label key-press classifier: 5 stacked grayscale frames in, per-key
logits for the middle frame out.

A ResNet18-style backbone feeds multi-scale features through a per-scale
transform (1x1 projection + channel gate), a top-down refinement pathway,
and a spatial self-attention block before the classifier head.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoints import Checkpoint
from .ingest import STACK_SIZE, TARGET_H, TARGET_W, DatasetIndex, FrameStack, balanced_batches, make_frame_stack
from .metrics import MetricsReport, frame_metrics
from .nnutil import check_finite, count_params, load_numpy_state, seed_everything, state_to_numpy
from .rollcore import NUM_KEYS, PianoRoll, ProbRoll

CHECKPOINT_KIND = "video2roll"


@dataclass
class Video2RollConfig:
    stem_channels: int = 64
    stage_channels: tuple[int, int, int, int] = (64, 128, 256, 512)
    blocks_per_stage: int = 2
    scales_used: tuple[int, ...] = (2, 3, 4)  # backbone stages fed to refinement
    common_width: int = 128  # transform projection width
    attention_dim: int = 64
    head_width: int = 56  # horizontal bins kept by the classifier head
    num_keys: int = NUM_KEYS
    batch_size: int = 64
    lr: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    plateau_factor: float = 0.5
    plateau_patience: int = 2
    epochs: int = 20
    batches_per_epoch: int = 100
    threshold: float = 0.4
    early_stop_f1: float | None = None
    seed: int = 0

    def __post_init__(self):
        if len(self.stage_channels) != 4:
            raise ValueError("stage_channels must list four stages")
        bad = [s for s in self.scales_used if s not in (2, 3, 4)]
        if bad:
            raise ValueError(f"scales_used may only contain stages 2-4, got {bad}")
        if not self.scales_used:
            raise ValueError("scales_used must not be empty")

    @classmethod
    def tiny(cls, **overrides) -> "Video2RollConfig":
        """Desk-scale config: same topology, drastically fewer channels."""
        defaults = dict(
            stem_channels=6,
            stage_channels=(6, 8, 12, 16),
            common_width=16,
            attention_dim=8,
            batch_size=24,
            batches_per_epoch=40,
            epochs=8,
        )
        defaults.update(overrides)
        return cls(**defaults)


class _BasicBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False), nn.BatchNorm2d(c_out)
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class Backbone(nn.Module):
    """ResNet18-style trunk taking the 5 stacked frames as input channels."""

    def __init__(self, cfg: Video2RollConfig):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(STACK_SIZE, cfg.stem_channels, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(cfg.stem_channels),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        stages = []
        c_prev = cfg.stem_channels
        for i, c in enumerate(cfg.stage_channels):
            blocks = [_BasicBlock(c_prev, c, stride=1 if i == 0 else 2)]
            for _ in range(cfg.blocks_per_stage - 1):
                blocks.append(_BasicBlock(c, c))
            stages.append(nn.Sequential(*blocks))
            c_prev = c
        self.stages = nn.ModuleList(stages)

    def forward(self, x) -> dict[int, torch.Tensor]:
        x = self.stem(x)
        features = {}
        for i, stage in enumerate(self.stages, start=1):
            x = stage(x)
            features[i] = x
        return features


class FeatureTransform(nn.Module):
    """1x1 projection to a common width plus squeeze-excitation channel gate."""

    def __init__(self, c_in: int, c_out: int, reduction: int = 4):
        super().__init__()
        hidden = max(c_out // reduction, 2)
        self.proj = nn.Conv2d(c_in, c_out, 1, bias=False)
        self.fc1 = nn.Linear(c_out, hidden)
        self.fc2 = nn.Linear(hidden, c_out)

    def gates(self, x) -> torch.Tensor:
        y = self.proj(x)
        pooled = y.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(pooled))))

    def forward(self, x):
        y = self.proj(x)
        pooled = y.mean(dim=(2, 3))
        gate = torch.sigmoid(self.fc2(F.relu(self.fc1(pooled))))
        return y * gate[:, :, None, None]


class FeatureRefine(nn.Module):
    """Top-down pathway: each coarser map is upsampled and added to the next
    finer one; returns the finest fused map. Parameter-free."""

    def forward(self, maps: list[torch.Tensor]) -> torch.Tensor:
        widths = {m.shape[1] for m in maps}
        if len(widths) > 1:
            raise ValueError(f"refinement inputs must share channel width, got {widths}")
        fused = maps[0]
        for finer in maps[1:]:
            fused = F.interpolate(fused, size=finer.shape[-2:], mode="nearest") + finer
        return fused


class CorrelationAttention(nn.Module):
    """Single-head scaled dot-product self-attention over spatial positions,
    with a residual connection; shape preserving."""

    def __init__(self, channels: int, dim: int):
        super().__init__()
        self.dim = dim
        self.to_q = nn.Conv2d(channels, dim, 1)
        self.to_k = nn.Conv2d(channels, dim, 1)
        self.to_v = nn.Conv2d(channels, channels, 1)

    def attention(self, x) -> torch.Tensor:
        q = self.to_q(x).flatten(2).transpose(1, 2)  # B, N, d
        k = self.to_k(x).flatten(2)  # B, d, N
        return torch.softmax(q @ k / self.dim**0.5, dim=-1)  # B, N, N

    def forward(self, x):
        b, c, h, w = x.shape
        attn = self.attention(x)
        v = self.to_v(x).flatten(2)  # B, C, N
        out = v @ attn.transpose(1, 2)
        return x + out.reshape(b, c, h, w)


class Video2RollNet(nn.Module):
    def __init__(self, cfg: Video2RollConfig | None = None):
        super().__init__()
        self.cfg = cfg or Video2RollConfig()
        cfg = self.cfg
        self.backbone = Backbone(cfg)
        self.transforms = nn.ModuleDict(
            {
                str(s): FeatureTransform(cfg.stage_channels[s - 1], cfg.common_width)
                for s in cfg.scales_used
            }
        )
        self.refine = FeatureRefine()
        self.correlate = CorrelationAttention(cfg.common_width, cfg.attention_dim)
        # keys live along the width axis: pool height away, keep horizontal bins
        self.pool = nn.AdaptiveAvgPool2d((1, cfg.head_width))
        self.head = nn.Linear(cfg.common_width * cfg.head_width, cfg.num_keys)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1:] != (STACK_SIZE, TARGET_H, TARGET_W):
            raise ValueError(
                f"expected input (B, {STACK_SIZE}, {TARGET_H}, {TARGET_W}), got {tuple(x.shape)}"
            )
        features = self.backbone(x)
        # coarse -> fine ordering for the top-down pathway
        scales = sorted(self.cfg.scales_used, reverse=True)
        maps = [self.transforms[str(s)](features[s]) for s in scales]
        fused = self.refine(maps)
        attended = self.correlate(fused)
        pooled = self.pool(attended).flatten(1)
        return self.head(pooled)

    @torch.no_grad()
    def classify(self, stack: FrameStack) -> np.ndarray:
        """Raw logits for one frame stack; sigmoid gives press probabilities."""
        self.eval()
        x = torch.from_numpy(stack.data.copy()).unsqueeze(0)
        return self.forward(x).squeeze(0).numpy()


@torch.no_grad()
def predict_roll(model: Video2RollNet, frames, batch_size: int = 64) -> ProbRoll:
    """Classify every frame of a sequence into a K x T probability roll."""
    model.eval()
    num_frames = len(frames)
    cols = []
    for start in range(0, num_frames, batch_size):
        ts = range(start, min(start + batch_size, num_frames))
        batch = torch.from_numpy(
            np.stack([make_frame_stack(frames, t).data for t in ts])
        )
        cols.append(torch.sigmoid(model(batch)).numpy().T)
    data = np.concatenate(cols, axis=1) if cols else np.zeros((model.cfg.num_keys, 0), np.float32)
    return ProbRoll(np.clip(data, 0.0, 1.0))


def _batch_tensors(index: DatasetIndex, sources, ids) -> tuple[torch.Tensor, torch.Tensor]:
    stacks, labels = [], []
    for i in ids:
        video_id, t, _ = index.samples[int(i)]
        stacks.append(make_frame_stack(sources[video_id], t).data)
        labels.append(index.label_vector(int(i)))
    return torch.from_numpy(np.stack(stacks)), torch.from_numpy(np.stack(labels))


@torch.no_grad()
def evaluate_index(
    model: Video2RollNet,
    index: DatasetIndex,
    sources,
    threshold: float = 0.4,
    batch_size: int = 64,
) -> tuple[float, MetricsReport]:
    """Mean BCE loss and frame metrics of a model over an index's samples."""
    model.eval()
    total_loss = 0.0
    preds, gts = [], []
    ids = np.arange(len(index.samples))
    for start in range(0, len(ids), batch_size):
        x, y = _batch_tensors(index, sources, ids[start : start + batch_size])
        logits = model(x)
        total_loss += F.binary_cross_entropy_with_logits(logits, y, reduction="sum").item()
        preds.append((torch.sigmoid(logits) >= threshold).numpy().T.astype(np.uint8))
        gts.append(y.numpy().T.astype(np.uint8))
    loss = total_loss / (len(ids) * index.num_keys)
    report = frame_metrics(
        PianoRoll(np.concatenate(preds, axis=1)),
        PianoRoll(np.concatenate(gts, axis=1)),
        threshold=threshold,
    )
    return loss, report


def train_video2roll(
    train_index: DatasetIndex,
    val_index: DatasetIndex,
    sources,
    cfg: Video2RollConfig,
) -> tuple[Video2RollNet, list[dict]]:
    """Optimize BCE over balanced batches; keeps the best-val-F1 weights.

    ``sources`` maps video id -> indexable frame sequence shared by both
    indices. Raises TrainingDiverged on NaN loss.
    """
    seed_everything(cfg.seed)
    model = Video2RollNet(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.adam_betas)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=cfg.plateau_factor, patience=cfg.plateau_patience
    )
    history: list[dict] = [{"event": "init", "param_count": count_params(model)}]
    best_f1, best_state = -1.0, None
    for epoch in range(cfg.epochs):
        model.train()
        epoch_loss = 0.0
        batches = balanced_batches(
            train_index, cfg.batch_size, cfg.seed + epoch, cfg.batches_per_epoch
        )
        for ids in batches:
            x, y = _batch_tensors(train_index, sources, ids)
            logits = model(x)
            loss = F.binary_cross_entropy_with_logits(logits, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += check_finite(loss, f"video2roll epoch {epoch}")
        val_loss, report = evaluate_index(model, val_index, sources, cfg.threshold)
        sched.step(val_loss)
        history.append(
            {
                "epoch": epoch,
                "train_loss": epoch_loss / cfg.batches_per_epoch,
                "val_loss": val_loss,
                "val_f1": report.f1,
                "lr": opt.param_groups[0]["lr"],
            }
        )
        if report.f1 > best_f1:
            best_f1 = report.f1
            best_state = copy.deepcopy(model.state_dict())
        if cfg.early_stop_f1 is not None and report.f1 >= cfg.early_stop_f1:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history


def to_checkpoint(model: Video2RollNet, history: list[dict] | None = None) -> Checkpoint:
    return Checkpoint(
        kind=CHECKPOINT_KIND,
        params=state_to_numpy(model),
        config=asdict(model.cfg),
        history=history or [],
    )


def from_checkpoint(ckpt: Checkpoint) -> Video2RollNet:
    if ckpt.kind != CHECKPOINT_KIND:
        raise ValueError(f"expected a {CHECKPOINT_KIND} checkpoint, got {ckpt.kind!r}")
    raw = dict(ckpt.config)
    for key in ("stage_channels", "scales_used", "adam_betas"):
        raw[key] = tuple(raw[key])
    model = Video2RollNet(Video2RollConfig(**raw))
    load_numpy_state(model, ckpt.params)
    model.eval()
    return model
