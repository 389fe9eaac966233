"""Roll-to-audio synthesis.

Two paths: a classical additive synthesizer driven by note events, and a
deep path that maps 2 s midi windows to log spectrograms (PerfNet-style
encoder-decoder), refines them with a spectrogram U-Net, and inverts with
Griffin-Lim. All audio is mono 16 kHz; spectrograms are log1p magnitudes
of a centered 2048/256 Hann STFT.
"""

from __future__ import annotations

import copy
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoints import Checkpoint
from .errors import ConfigError
from .midiio import document_from_events, write_midi_file
from .nnutil import (
    UNet2d,
    check_finite,
    crop_to,
    load_numpy_state,
    pad_to,
    seed_everything,
    state_to_numpy,
)
from .rollcore import DEFAULT_VELOCITY, FPS, NoteEvent, PianoRoll, events_from_roll

SAMPLE_RATE = 16000
N_FFT = 2048
HOP = 256
FULL_BINS = N_FFT // 2 + 1  # 1025
TRAIN_BINS = 576  # highest piano fundamental (4186 Hz) sits below bin 576
ROLL_WINDOW = 50  # 2 s of roll frames
SPEC_WINDOW = 126  # spectrogram frames for 2 s of audio
SAMPLES_PER_FRAME = SAMPLE_RATE // 25  # 640
CHECKPOINT_KIND = "synth"


@dataclass(frozen=True, eq=False)
class Spectrogram:
    """Log-scaled (log1p) STFT magnitude, frequency bins x frames."""

    data: np.ndarray
    sample_rate: int = SAMPLE_RATE
    n_fft: int = N_FFT
    hop: int = HOP

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError(f"spectrogram must be 2-D, got shape {arr.shape}")
        if arr.size and not arr.min() >= 0.0:
            raise ValueError("log spectrogram entries must be non-negative")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def num_bins(self) -> int:
        return self.data.shape[0]

    @property
    def num_frames(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class AudioClip:
    """Mono waveform with samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float32)
        if arr.ndim != 1:
            raise ValueError(f"audio must be mono 1-D, got shape {arr.shape}")
        if arr.size and not (np.abs(arr).max() <= 1.0 + 1e-6):
            raise ValueError("samples must lie in [-1, 1]; peak-normalize first")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        arr.flags.writeable = False
        object.__setattr__(self, "samples", arr)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


def _hann() -> torch.Tensor:
    return torch.hann_window(N_FFT, periodic=True, dtype=torch.float64)


def _stft(x: torch.Tensor) -> torch.Tensor:
    return torch.stft(
        x,
        n_fft=N_FFT,
        hop_length=HOP,
        window=_hann(),
        center=True,
        pad_mode="constant",
        return_complex=True,
    )


def _istft(spec: torch.Tensor, length: int) -> torch.Tensor:
    return torch.istft(
        spec, n_fft=N_FFT, hop_length=HOP, window=_hann(), center=True, length=length
    )


def log_spectrogram(audio: AudioClip) -> Spectrogram:
    """log1p magnitude STFT; 2 s at 16 kHz gives exactly 1025 x 126."""
    if len(audio.samples) == 0:
        raise ValueError("cannot compute a spectrogram of empty audio")
    if audio.sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {audio.sample_rate}")
    x = torch.from_numpy(audio.samples.astype(np.float64))
    mag = _stft(x).abs().numpy()
    return Spectrogram(np.log1p(mag).astype(np.float32))


def griffin_lim(
    spec: Spectrogram,
    iterations: int = 60,
    momentum: float = 0.99,
    seed: int = 0,
    return_trace: bool = False,
):
    """Invert a log spectrogram to audio by alternating STFT projections.

    Accepts full 1025-bin input (or 576-bin training windows, zero-padded up
    internally). Phase starts random (seeded); iterations use momentum on the
    projected spectrogram for speed, falling back to the plain update whenever
    the accelerated step would raise the spectral-convergence error, so the
    error trace stays non-increasing. Output length is hop * (frames - 1);
    audio is peak-normalized. With ``return_trace`` also returns the
    per-iteration errors.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    data = spec.data
    if data.shape[0] == TRAIN_BINS:
        data = np.pad(data, ((0, FULL_BINS - TRAIN_BINS), (0, 0)))
    if data.shape[0] != FULL_BINS:
        raise ValueError(f"expected {FULL_BINS} (or {TRAIN_BINS}) bins, got {data.shape[0]}")
    length = HOP * (data.shape[1] - 1)
    mag = torch.from_numpy(np.expm1(data.astype(np.float64)))
    norm = torch.linalg.norm(mag)
    if norm == 0 or length <= 0:
        silence = AudioClip(np.zeros(max(length, 0), dtype=np.float32))
        return (silence, []) if return_trace else silence

    def sc_error(signal: torch.Tensor) -> float:
        return float(torch.linalg.norm(_stft(signal).abs() - mag) / norm)

    gen = torch.Generator().manual_seed(seed)
    phase = 2.0 * np.pi * torch.rand(mag.shape, generator=gen, dtype=torch.float64)
    x = _istft(mag * torch.exp(1j * phase), length)
    errors: list[float] = []
    err_prev = float("inf")
    t_prev = None
    for _ in range(iterations):
        s = _stft(x)
        t = mag * torch.exp(1j * torch.angle(s))
        c = t if (t_prev is None or momentum == 0.0) else t + momentum * (t - t_prev)
        t_prev = t
        candidate = _istft(c, length)
        err = sc_error(candidate)
        if err <= err_prev:
            x = candidate
        else:
            x = _istft(t, length)  # plain update never increases the error
            err = sc_error(x)
        errors.append(err)
        err_prev = err
    samples = x.numpy()
    peak = np.abs(samples).max()
    if peak > 0:
        samples = samples / peak
    clip = AudioClip(samples.astype(np.float32))
    return (clip, errors) if return_trace else clip


def upsample_midi_window(window: np.ndarray) -> np.ndarray:
    """Nearest-neighbour upsampling of an 88 x 50 roll window to 88 x 126."""
    window = np.asarray(window)
    if window.ndim != 2 or window.shape[1] != ROLL_WINDOW:
        raise ValueError(f"expected a (K, {ROLL_WINDOW}) window, got {window.shape}")
    idx = (np.arange(SPEC_WINDOW) * ROLL_WINDOW) // SPEC_WINDOW
    return window[:, idx]


# ---------------------------------------------------------------------------
# deep synthesizer models


@dataclass
class SynthConfig:
    perfnet_channels: int = 96
    refiner_channels: int = 16
    num_keys: int = 88
    perfnet_batch: int = 16
    refiner_batch: int = 8
    lr: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    perfnet_epochs: int = 80
    refiner_epochs: int = 25
    val_fraction: float = 0.1
    seed: int = 0

    @classmethod
    def tiny(cls, **overrides) -> "SynthConfig":
        defaults = dict(perfnet_channels=48, refiner_channels=8, perfnet_epochs=40, refiner_epochs=12)
        defaults.update(overrides)
        return cls(**defaults)


class PerfNet(nn.Module):
    """Midi-window to spectrogram-window transformation (encoder-decoder).

    Stand-in honoring the 88 x 126 -> 576 x 126 interface: the time axis is
    downsampled three times and decoded back (receptive field spans most of
    the 2 s window, enough to shape note decay), then a 1x1 head expands
    pitch features to frequency bins. Softplus keeps the output non-negative.
    """

    def __init__(self, cfg: SynthConfig):
        super().__init__()
        c = cfg.perfnet_channels
        self.enc1 = nn.Conv1d(cfg.num_keys, c, 5, padding=2)
        self.enc2 = nn.Conv1d(c, c, 5, stride=2, padding=2)
        self.enc3 = nn.Conv1d(c, c, 5, stride=2, padding=2)
        self.enc4 = nn.Conv1d(c, c, 5, stride=2, padding=2)
        self.dec1 = nn.Conv1d(c, c, 5, padding=2)
        self.dec2 = nn.Conv1d(c, c, 5, padding=2)
        self.dec3 = nn.Conv1d(c, c, 5, padding=2)
        self.head = nn.Conv1d(c, TRAIN_BINS, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 3 or x.shape[2] != SPEC_WINDOW:
            raise ValueError(
                f"expected (B, K, {SPEC_WINDOW}) midi windows, got {tuple(x.shape)}"
            )
        h1 = F.relu(self.enc1(x))
        h2 = F.relu(self.enc2(h1))
        h3 = F.relu(self.enc3(h2))
        h4 = F.relu(self.enc4(h3))
        d = F.interpolate(h4, size=h3.shape[-1], mode="nearest")
        d = F.relu(self.dec1(d)) + h3
        d = F.interpolate(d, size=h2.shape[-1], mode="nearest")
        d = F.relu(self.dec2(d)) + h2
        d = F.interpolate(d, size=x.shape[-1], mode="nearest")
        d = F.relu(self.dec3(d))
        return F.softplus(self.head(d))


def build_spec_refiner(cfg: SynthConfig) -> UNet2d:
    return UNet2d(
        depth=5,
        base_channels=cfg.refiner_channels,
        max_channels=cfg.refiner_channels * 8,
        out_activation="softplus",
    )


@dataclass
class SynthModels:
    perfnet: PerfNet
    refiner: UNet2d
    cfg: SynthConfig


def perfnet_forward(models: SynthModels, window: np.ndarray | torch.Tensor) -> np.ndarray:
    """Initial spectrogram estimate for one 88 x 126 midi window."""
    models.perfnet.eval()
    x = torch.as_tensor(np.asarray(window, dtype=np.float32))
    squeeze = x.ndim == 2
    if squeeze:
        x = x.unsqueeze(0)
    with torch.no_grad():
        out = models.perfnet(x)
    return (out.squeeze(0) if squeeze else out).numpy()


def refine_spectrogram(models: SynthModels, initial: np.ndarray) -> np.ndarray:
    """Refine 576 x 126 spectrogram windows; shape preserving."""
    models.refiner.eval()
    x = torch.as_tensor(np.asarray(initial, dtype=np.float32))
    squeeze = x.ndim == 2
    if squeeze:
        x = x.unsqueeze(0)
    if x.shape[-2:] != (TRAIN_BINS, SPEC_WINDOW):
        raise ValueError(
            f"expected ({TRAIN_BINS}, {SPEC_WINDOW}) windows, got {tuple(x.shape[-2:])}"
        )
    with torch.no_grad():
        out = crop_to(models.refiner(pad_to(x.unsqueeze(1), TRAIN_BINS, 128)), TRAIN_BINS, SPEC_WINDOW)
    out = out.squeeze(1)
    return (out.squeeze(0) if squeeze else out).numpy()


def _split_val(n: int, val_fraction: float, rng: np.random.Generator):
    order = rng.permutation(n)
    n_val = max(1, int(n * val_fraction)) if (n > 1 and val_fraction > 0) else 0
    return order[n_val:], order[:n_val]


def train_perfnet(
    midi_windows: np.ndarray, spec_windows: np.ndarray, cfg: SynthConfig
) -> tuple[PerfNet, list[dict]]:
    """MSE-fit the midi-to-spectrogram transform; keeps best-validation weights."""
    rng = seed_everything(cfg.seed)
    x_all = torch.from_numpy(np.asarray(midi_windows, dtype=np.float32))
    y_all = torch.from_numpy(np.asarray(spec_windows, dtype=np.float32))
    train_ids, val_ids = _split_val(len(x_all), cfg.val_fraction, rng)
    model = PerfNet(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.adam_betas)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(opt, mode="min", factor=0.5, patience=10)
    history: list[dict] = []
    best = (np.inf, None)
    batch = min(cfg.perfnet_batch, len(train_ids))
    for epoch in range(cfg.perfnet_epochs):
        model.train()
        order = rng.permutation(len(train_ids))
        total, steps = 0.0, 0
        for start in range(0, len(order) - batch + 1, batch):
            ids = train_ids[order[start : start + batch]]
            loss = F.mse_loss(model(x_all[ids]), y_all[ids])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += check_finite(loss, f"perfnet epoch {epoch}")
            steps += 1
        model.eval()
        with torch.no_grad():
            val = (
                float(F.mse_loss(model(x_all[val_ids]), y_all[val_ids]))
                if len(val_ids)
                else total / max(steps, 1)
            )
        sched.step(val)
        history.append({"epoch": epoch, "train_mse": total / max(steps, 1), "val_mse": val})
        if val < best[0]:
            best = (val, copy.deepcopy(model.state_dict()))
    if best[1] is not None:
        model.load_state_dict(best[1])
    model.eval()
    return model, history


def train_spec_refiner(
    initial: np.ndarray, targets: np.ndarray, cfg: SynthConfig
) -> tuple[UNet2d, list[dict]]:
    """L1-fit the spectrogram refiner on (initial estimate, target) pairs."""
    rng = seed_everything(cfg.seed + 1)
    x_all = torch.from_numpy(np.asarray(initial, dtype=np.float32)).unsqueeze(1)
    y_all = torch.from_numpy(np.asarray(targets, dtype=np.float32)).unsqueeze(1)
    model = build_spec_refiner(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.adam_betas)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(opt, mode="min", factor=0.5, patience=8)
    history: list[dict] = []
    batch = min(cfg.refiner_batch, len(x_all))
    for epoch in range(cfg.refiner_epochs):
        model.train()
        order = rng.permutation(len(x_all))
        total, steps = 0.0, 0
        for start in range(0, len(order) - batch + 1, batch):
            ids = order[start : start + batch]
            out = crop_to(model(pad_to(x_all[ids], TRAIN_BINS, 128)), TRAIN_BINS, SPEC_WINDOW)
            loss = F.l1_loss(out, y_all[ids])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += check_finite(loss, f"spec refiner epoch {epoch}")
            steps += 1
        sched.step(total / max(steps, 1))
        history.append({"epoch": epoch, "train_l1": total / max(steps, 1)})
    model.eval()
    return model, history


def train_synth(
    midi_windows: np.ndarray, spec_windows: np.ndarray, cfg: SynthConfig
) -> tuple[SynthModels, list[dict]]:
    """Train the transform H, then the refiner U on H's own outputs."""
    perfnet, hist_h = train_perfnet(midi_windows, spec_windows, cfg)
    with torch.no_grad():
        initial = perfnet(torch.from_numpy(np.asarray(midi_windows, dtype=np.float32))).numpy()
    refiner, hist_u = train_spec_refiner(initial, spec_windows, cfg)
    models = SynthModels(perfnet, refiner, cfg)
    return models, hist_h + hist_u


# ---------------------------------------------------------------------------
# classical additive synthesizer


@dataclass
class ClassicalSynthParams:
    harmonics: int = 4  # amplitudes 1/k
    attack_s: float = 0.010
    release_s: float = 0.020
    decay_rate: float = 0.9  # exponential amplitude decay, 1/s

    def __post_init__(self):
        if self.harmonics < 1:
            raise ValueError("harmonics must be >= 1")


def pitch_to_hz(pitch: int) -> float:
    return 440.0 * 2.0 ** ((pitch - 69) / 12.0)


def classical_synth(
    events: list[NoteEvent],
    duration_frames: int,
    params: ClassicalSynthParams | None = None,
) -> AudioClip:
    """Additive harmonic rendering of note events; peak-normalized output."""
    params = params or ClassicalSynthParams()
    n = duration_frames * SAMPLES_PER_FRAME
    out = np.zeros(n, dtype=np.float64)
    for ev in events:
        i0 = ev.onset_frame * SAMPLES_PER_FRAME
        i1 = min(ev.offset_frame * SAMPLES_PER_FRAME, n)
        if i1 <= i0:
            continue
        t = np.arange(i1 - i0) / SAMPLE_RATE
        env = np.exp(-params.decay_rate * t)
        if params.attack_s > 0:
            env *= np.clip(t / params.attack_s, 0.0, 1.0)
        if params.release_s > 0:
            env *= np.clip((t[-1] - t) / params.release_s, 0.0, 1.0)
        f0 = pitch_to_hz(ev.pitch)
        wave = np.zeros_like(t)
        for k in range(1, params.harmonics + 1):
            if k * f0 >= SAMPLE_RATE / 2:
                break
            wave += np.sin(2.0 * np.pi * k * f0 * t) / k
        out[i0:i1] += (ev.velocity / 127.0) * env * wave
    peak = np.abs(out).max()
    if peak > 0:
        out /= peak
    return AudioClip(out.astype(np.float32))


def synthesize(
    midi: PianoRoll,
    mode: str = "classical",
    models: SynthModels | None = None,
    params: ClassicalSynthParams | None = None,
    gl_iterations: int = 60,
) -> AudioClip:
    """Render a binary roll to audio via the classical or deep path."""
    if mode == "classical":
        events = events_from_roll(midi, velocity=DEFAULT_VELOCITY)
        return classical_synth(events, midi.num_frames, params)
    if mode != "deep":
        raise ValueError(f"unknown synthesis mode {mode!r}")
    if models is None:
        raise ConfigError("deep synthesis requires trained synth models", "synth.models")
    t = midi.num_frames
    if t == 0:
        return AudioClip(np.zeros(0, dtype=np.float32))
    padded_t = ROLL_WINDOW * -(-t // ROLL_WINDOW)
    data = np.zeros((midi.num_keys, padded_t), dtype=np.float32)
    data[:, :t] = midi.data
    windows = np.stack(
        [
            upsample_midi_window(data[:, s : s + ROLL_WINDOW])
            for s in range(0, padded_t, ROLL_WINDOW)
        ]
    )
    initial = perfnet_forward(models, windows)
    refined = refine_spectrogram(models, initial)
    spec = np.concatenate(list(refined), axis=1)
    target_frames = 1 + (t * SAMPLES_PER_FRAME) // HOP
    spec = spec[:, :target_frames]
    full = np.pad(spec, ((0, FULL_BINS - TRAIN_BINS), (0, 0)))
    return griffin_lim(Spectrogram(full), iterations=gl_iterations)


# ---------------------------------------------------------------------------
# WAV + checkpoints + optional external synthesizer


def write_wav(path: str | Path, clip: AudioClip) -> None:
    """16-bit PCM mono WAV."""
    import wave

    pcm = np.clip(clip.samples, -1.0, 1.0)
    pcm = (pcm * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(clip.sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path: str | Path) -> AudioClip:
    import wave

    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise IOError(f"{path}: expected 16-bit mono PCM")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32767.0
    return AudioClip(np.clip(samples, -1.0, 1.0), sample_rate=rate)


def external_synth(
    events: list[NoteEvent],
    duration_frames: int,
    soundfont: str | Path,
    binary: str = "fluidsynth",
) -> AudioClip:
    """Optional adapter: render events through an external SoundFont
    synthesizer subprocess. Never required by the pipeline or tests."""
    if shutil.which(binary) is None:
        raise ConfigError(f"external synthesizer {binary!r} not found on PATH", "synth.binary")
    with tempfile.TemporaryDirectory() as tmp:
        mid = Path(tmp) / "notes.mid"
        wav = Path(tmp) / "notes.wav"
        mid.write_bytes(write_midi_file(document_from_events(events)))
        subprocess.run(
            [binary, "-ni", "-r", str(SAMPLE_RATE), "-F", str(wav), str(soundfont), str(mid)],
            check=True,
            capture_output=True,
        )
        clip = read_wav(wav)
    n = duration_frames * SAMPLES_PER_FRAME
    samples = np.zeros(n, dtype=np.float32)
    take = min(n, len(clip.samples))
    samples[:take] = clip.samples[:take]
    peak = np.abs(samples).max()
    if peak > 1.0:
        samples /= peak
    return AudioClip(samples)


def to_checkpoint(models: SynthModels, history: list[dict] | None = None) -> Checkpoint:
    params = {f"perfnet.{k}": v for k, v in state_to_numpy(models.perfnet).items()}
    params.update({f"refiner.{k}": v for k, v in state_to_numpy(models.refiner).items()})
    return Checkpoint(CHECKPOINT_KIND, params, asdict(models.cfg), history or [])


def from_checkpoint(ckpt: Checkpoint) -> SynthModels:
    if ckpt.kind != CHECKPOINT_KIND:
        raise ValueError(f"expected a {CHECKPOINT_KIND} checkpoint, got {ckpt.kind!r}")
    raw = dict(ckpt.config)
    raw["adam_betas"] = tuple(raw["adam_betas"])
    cfg = SynthConfig(**raw)
    perfnet = PerfNet(cfg)
    refiner = build_spec_refiner(cfg)
    load_numpy_state(perfnet, {k[8:]: v for k, v in ckpt.params.items() if k.startswith("perfnet.")})
    load_numpy_state(refiner, {k[8:]: v for k, v in ckpt.params.items() if k.startswith("refiner.")})
    perfnet.eval()
    refiner.eval()
    return SynthModels(perfnet, refiner, cfg)
