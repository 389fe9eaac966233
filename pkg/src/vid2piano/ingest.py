"""Dataset preparation: video decoding, alignment, sampling and the
synthetic top-view keyboard renderer used for desk-scale verification."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .midiio import MidiDocument
from .rollcore import (
    KEY_BASE,
    NUM_KEYS,
    NoteEvent,
    PianoRoll,
    roll_from_events,
    trim_leading_silence,
)

TARGET_H = 100
TARGET_W = 900
STACK_SIZE = 5
SILENCE_BUCKET = -1

_WHITE_CLASSES = {0, 2, 4, 5, 7, 9, 11}


class AlignmentError(ValueError):
    """Video and pseudo-GT midi durations disagree by more than the tolerance."""


@dataclass(frozen=True)
class FrameStack:
    """Five consecutive preprocessed grayscale frames centred on one frame."""

    data: np.ndarray  # (5, 100, 900) float32 in [0, 1]
    center_frame_index: int

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.shape != (STACK_SIZE, TARGET_H, TARGET_W):
            raise ValueError(
                f"frame stack must be {(STACK_SIZE, TARGET_H, TARGET_W)}, got {arr.shape}"
            )
        if arr.size and not (arr.min() >= 0.0 and arr.max() <= 1.0):
            raise ValueError("frame values must lie in [0, 1]")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)


def _prepare_frame(frame: np.ndarray, region: tuple[int, int, int, int] | None) -> np.ndarray:
    """Crop, grayscale, resize to 100x900 and normalize one decoded frame."""
    if region is not None:
        x, y, w, h = region
        if w <= 0 or h <= 0:
            raise ValueError(f"empty crop region {region}")
        if x < 0 or y < 0 or x + w > frame.shape[1] or y + h > frame.shape[0]:
            raise ValueError(f"crop region {region} outside frame bounds {frame.shape[:2]}")
        frame = frame[y : y + h, x : x + w]
    if np.issubdtype(frame.dtype, np.integer):
        frame = frame.astype(np.float32) / 255.0
    else:
        frame = frame.astype(np.float32)
    if frame.ndim == 3:
        frame = cv2.cvtColor(frame, cv2.COLOR_BGR2GRAY)
    frame = cv2.resize(frame, (TARGET_W, TARGET_H), interpolation=cv2.INTER_AREA)
    return np.clip(frame, 0.0, 1.0)


def decode_video_frames(
    path: str | Path, region: tuple[int, int, int, int] | None = None
) -> np.ndarray:
    """Decode a video (or .npz frame bundle) into (T, 100, 900) float32 frames.

    ``region`` is an (x, y, w, h) keyboard crop in source pixel coordinates;
    None keeps the full frame. Container video is expected at 25 fps.
    """
    path = Path(path)
    if not path.exists():
        raise IOError(f"no such video file: {path}")
    if path.suffix == ".npz":
        with np.load(path) as archive:
            if "frames" not in archive.files:
                raise IOError(f"{path} has no 'frames' entry")
            raw = archive["frames"]
        return np.stack([_prepare_frame(f, region) for f in raw]) if len(raw) else np.zeros(
            (0, TARGET_H, TARGET_W), np.float32
        )
    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise IOError(f"cannot decode video file: {path}")
    frames = []
    while True:
        ok, frame = cap.read()
        if not ok:
            break
        frames.append(_prepare_frame(frame, region))
    cap.release()
    if not frames:
        raise IOError(f"no frames decoded from {path}")
    return np.stack(frames)


def make_frame_stack(frames, t: int) -> FrameStack:
    """Stack frames t-2..t+2; indices outside [0, T) replicate the edge frame."""
    n = len(frames)
    if not 0 <= t < n:
        raise ValueError(f"frame index {t} outside [0, {n})")
    idx = np.clip(np.arange(t - 2, t + 3), 0, n - 1)
    data = np.stack([np.asarray(frames[int(i)], dtype=np.float32) for i in idx])
    return FrameStack(data, t)


def align_dataset(
    frames: np.ndarray, pseudo_gt: MidiDocument, tolerance_s: float = 1.0
) -> tuple[np.ndarray, PianoRoll]:
    """Pair decoded frames with the pseudo-GT roll, trimmed and length-matched.

    The midi's leading silence is removed from both streams by the same
    offset, then both are truncated to the common length.
    """
    roll = roll_from_events(list(pseudo_gt.events), pseudo_gt.num_frames)
    mismatch = abs(len(frames) - roll.num_frames) / 25.0
    if mismatch > tolerance_s:
        raise AlignmentError(
            f"video ({len(frames)} frames) and midi ({roll.num_frames} frames) "
            f"differ by {mismatch:.2f} s"
        )
    trimmed, offset = trim_leading_silence(roll)
    frames = frames[offset:]
    common = min(len(frames), trimmed.num_frames)
    return frames[:common], PianoRoll(trimmed.data[:, :common], key_base=roll.key_base)


# ---------------------------------------------------------------------------
# dataset index + balanced sampling


@dataclass
class DatasetIndex:
    """Flat list of (video, frame, active pitches) samples plus per-pitch buckets."""

    samples: list[tuple[str, int, tuple[int, ...]]]
    num_keys: int = NUM_KEYS
    key_base: int = KEY_BASE
    class_buckets: dict[int, np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        buckets: dict[int, list[int]] = {}
        for i, (_, _, pitches) in enumerate(self.samples):
            if pitches:
                for p in pitches:
                    buckets.setdefault(p, []).append(i)
            else:
                buckets.setdefault(SILENCE_BUCKET, []).append(i)
        self.class_buckets = {k: np.asarray(v, dtype=np.int64) for k, v in buckets.items()}

    @classmethod
    def from_roll(cls, video_id: str, roll: PianoRoll) -> "DatasetIndex":
        samples = []
        for t in range(roll.num_frames):
            pitches = tuple(int(roll.key_base + k) for k in np.flatnonzero(roll.data[:, t]))
            samples.append((video_id, t, pitches))
        return cls(samples, num_keys=roll.num_keys, key_base=roll.key_base)

    @classmethod
    def merge(cls, indices: list["DatasetIndex"]) -> "DatasetIndex":
        samples = []
        for idx in indices:
            samples.extend(idx.samples)
        first = indices[0]
        return cls(samples, num_keys=first.num_keys, key_base=first.key_base)

    def label_vector(self, i: int) -> np.ndarray:
        vec = np.zeros(self.num_keys, dtype=np.float32)
        for p in self.samples[i][2]:
            vec[p - self.key_base] = 1.0
        return vec

    def save(self, path: str | Path) -> None:
        doc = {
            "num_keys": self.num_keys,
            "key_base": self.key_base,
            "samples": [
                {"video": v, "frame": t, "pitches": list(p)} for v, t, p in self.samples
            ],
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path: str | Path) -> "DatasetIndex":
        doc = json.loads(Path(path).read_text())
        samples = [
            (s["video"], int(s["frame"]), tuple(int(p) for p in s["pitches"]))
            for s in doc["samples"]
        ]
        return cls(samples, num_keys=int(doc["num_keys"]), key_base=int(doc["key_base"]))


def balanced_batches(
    index: DatasetIndex, batch_size: int, seed: int, num_batches: int | None = None
):
    """Yield sample-index batches drawn evenly across pitch buckets.

    Small buckets are oversampled with replacement, large ones subsampled,
    so every batch covers all classes. Deterministic for a fixed seed;
    ``num_batches=None`` streams forever.
    """
    if not index.samples:
        raise ValueError("empty dataset")
    keys = sorted(index.class_buckets)
    if batch_size < len(keys):
        raise ValueError(f"batch_size {batch_size} below bucket count {len(keys)}")
    rng = np.random.default_rng(seed)
    base, extra = divmod(batch_size, len(keys))
    produced = 0
    while num_batches is None or produced < num_batches:
        counts = np.full(len(keys), base, dtype=np.int64)
        if extra:
            counts[rng.choice(len(keys), extra, replace=False)] += 1
        chosen = []
        for key, count in zip(keys, counts):
            bucket = index.class_buckets[key]
            replace = len(bucket) < count
            chosen.append(rng.choice(bucket, size=count, replace=replace))
        batch = np.concatenate(chosen)
        rng.shuffle(batch)
        produced += 1
        yield batch


# ---------------------------------------------------------------------------
# synthetic keyboard renderer

_BG = 0.10
_WHITE = 0.92
_WHITE_PRESSED = 0.55
_BLACK = 0.12
_BLACK_PRESSED = 0.45
_OCCLUDER = 0.30
_BLACK_HEIGHT = 0.62  # fraction of key length covered by black keys
_BLACK_WIDTH = 0.62  # fraction of one white key's width


def _is_white(pitch: int) -> bool:
    return pitch % 12 in _WHITE_CLASSES


def _white_index(pitch: int) -> int:
    return sum(1 for p in range(KEY_BASE, pitch) if _is_white(p))


def key_span(pitch: int, width: int = TARGET_W, height: int = TARGET_H):
    """Pixel rectangle (x0, x1, y0, y1) of one key on the rendered keyboard."""
    if not KEY_BASE <= pitch <= KEY_BASE + NUM_KEYS - 1:
        raise ValueError(f"pitch {pitch} outside keyboard")
    w = width / 52.0
    if _is_white(pitch):
        i = _white_index(pitch)
        return int(round(i * w)) + 1, int(round((i + 1) * w)) - 1, 0, height
    boundary = (_white_index(pitch - 1) + 1) * w
    half = _BLACK_WIDTH * w / 2.0
    return (
        int(round(boundary - half)),
        int(round(boundary + half)),
        0,
        int(height * _BLACK_HEIGHT),
    )


class SyntheticPerformance:
    """Lazy frame sequence: a rendered 88-key top view driven by a roll.

    Pressed keys darken (whites) or lighten (blacks) while active; a moving
    opaque band occludes ~``occlusion_level`` of the keyboard per frame,
    standing in for the performer's hands. Deterministic per seed.
    """

    def __init__(self, roll: PianoRoll, occlusion_level: float = 0.0, seed: int = 0):
        if not 0.0 <= occlusion_level <= 1.0:
            raise ValueError(f"occlusion_level must be in [0, 1], got {occlusion_level}")
        self.roll = roll
        self.occlusion_level = occlusion_level
        self.base = self._render_base()
        self._press_masks = self._build_press_masks()
        self._occluder_x = self._occluder_track(roll.num_frames, seed)

    @staticmethod
    def _render_base() -> np.ndarray:
        img = np.full((TARGET_H, TARGET_W), _BG, dtype=np.float32)
        for pitch in range(KEY_BASE, KEY_BASE + NUM_KEYS):
            if _is_white(pitch):
                x0, x1, y0, y1 = key_span(pitch)
                img[y0:y1, x0:x1] = _WHITE
        for pitch in range(KEY_BASE, KEY_BASE + NUM_KEYS):
            if not _is_white(pitch):
                x0, x1, y0, y1 = key_span(pitch)
                img[y0:y1, x0:x1] = _BLACK
        return img

    def _build_press_masks(self) -> list[tuple[np.ndarray, float]]:
        """Per key: (flat pixel indices of its visible area, pressed intensity)."""
        owner = np.full((TARGET_H, TARGET_W), -1, dtype=np.int16)
        for pitch in range(KEY_BASE, KEY_BASE + NUM_KEYS):
            if _is_white(pitch):
                x0, x1, y0, y1 = key_span(pitch)
                owner[y0:y1, x0:x1] = pitch
        for pitch in range(KEY_BASE, KEY_BASE + NUM_KEYS):
            if not _is_white(pitch):
                x0, x1, y0, y1 = key_span(pitch)
                owner[y0:y1, x0:x1] = pitch
        masks = []
        flat = owner.ravel()
        for pitch in range(KEY_BASE, KEY_BASE + NUM_KEYS):
            value = _WHITE_PRESSED if _is_white(pitch) else _BLACK_PRESSED
            masks.append((np.flatnonzero(flat == pitch), value))
        return masks

    def _occluder_track(self, num_frames: int, seed: int) -> np.ndarray:
        """Occluder centre x per frame: fast bouncing drift with random jitter."""
        rng = np.random.default_rng(seed)
        xs = np.empty(num_frames, dtype=np.float32)
        x = rng.uniform(0, TARGET_W)
        v = rng.choice([-1.0, 1.0]) * rng.uniform(80.0, 120.0)
        for t in range(num_frames):
            xs[t] = x
            x += v + rng.normal(0.0, 10.0)
            if x < 0:
                x, v = -x, abs(v)
            elif x > TARGET_W:
                x, v = 2 * TARGET_W - x, -abs(v)
            if rng.random() < 0.02:
                v = -v
        return xs

    def __len__(self) -> int:
        return self.roll.num_frames

    def frame(self, t: int) -> np.ndarray:
        img = self.base.copy()
        flat = img.ravel()
        for k in np.flatnonzero(self.roll.data[:, t]):
            idx, value = self._press_masks[int(k)]
            flat[idx] = value
        if self.occlusion_level > 0.0:
            half = self.occlusion_level * TARGET_W / 2.0
            # keep the band fully on-keyboard so its covered fraction stays ~constant
            x = float(np.clip(self._occluder_x[t], half, TARGET_W - half))
            x0 = int(np.floor(x - half))
            x1 = int(np.ceil(x + half))
            img[:, max(0, x0) : min(TARGET_W, x1)] = _OCCLUDER
        return img

    def __getitem__(self, t: int) -> np.ndarray:
        if t < 0:
            t += len(self)
        return self.frame(t)

    def labels(self, t: int) -> np.ndarray:
        return self.roll.data[:, t].astype(np.float32)

    def to_array(self) -> np.ndarray:
        return np.stack([self.frame(t) for t in range(len(self))])


def render_synthetic_performance(
    roll: PianoRoll, occlusion_level: float = 0.0, seed: int = 0
) -> SyntheticPerformance:
    """Render a roll as a synthetic top-view performance (lazy sequence)."""
    return SyntheticPerformance(roll, occlusion_level, seed)


def write_frames_npz(path: str | Path, frames) -> None:
    """Store frames as a uint8 bundle decodable by decode_video_frames."""
    arr = np.stack([np.asarray(frames[t]) for t in range(len(frames))])
    packed = np.clip(arr * 255.0, 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        np.savez_compressed(fh, frames=packed)


def write_frames_video(path: str | Path, frames, fps: float = 25.0) -> None:
    """Encode frames as an mp4/avi via OpenCV (lossy; for preview/interop)."""
    fourcc = cv2.VideoWriter_fourcc(*("MJPG" if str(path).endswith(".avi") else "mp4v"))
    writer = cv2.VideoWriter(str(path), fourcc, fps, (TARGET_W, TARGET_H))
    if not writer.isOpened():
        raise IOError(f"cannot open video writer for {path}")
    for t in range(len(frames)):
        gray = np.clip(np.asarray(frames[t]) * 255.0, 0, 255).astype(np.uint8)
        writer.write(cv2.cvtColor(gray, cv2.COLOR_GRAY2BGR))
    writer.release()


# ---------------------------------------------------------------------------
# synthetic roll generators (desk-scale data)


def random_performance_roll(
    num_frames: int,
    pitches: list[int],
    seed: int,
    note_frames: tuple[int, int] = (6, 30),
    gap_frames: tuple[int, int] = (4, 50),
) -> PianoRoll:
    """Random polyphonic roll: each pitch alternates rests and held notes."""
    rng = np.random.default_rng(seed)
    events = []
    for pitch in pitches:
        t = int(rng.integers(0, max(1, gap_frames[1])))
        while t < num_frames:
            dur = int(rng.integers(note_frames[0], note_frames[1] + 1))
            end = min(t + dur, num_frames)
            if end > t:
                events.append(NoteEvent(pitch, t, end))
            t = end + int(rng.integers(gap_frames[0], gap_frames[1] + 1))
    return roll_from_events(events, num_frames)


def random_monophonic_roll(
    num_frames: int,
    pitches: list[int],
    seed: int,
    note_frames: tuple[int, int] = (8, 20),
    gap_frames: tuple[int, int] = (0, 6),
) -> PianoRoll:
    """Random one-note-at-a-time roll (used by the synthesis consistency tests)."""
    rng = np.random.default_rng(seed)
    events = []
    t = 0
    while t < num_frames:
        dur = int(rng.integers(note_frames[0], note_frames[1] + 1))
        end = min(t + dur, num_frames)
        pitch = int(rng.choice(pitches))
        if end > t:
            events.append(NoteEvent(pitch, t, end))
        t = end + int(rng.integers(gap_frames[0], gap_frames[1] + 1))
    return roll_from_events(events, num_frames)
