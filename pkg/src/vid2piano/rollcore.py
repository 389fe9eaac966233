"""Piano-roll and note-event data model shared by every pipeline stage.

A roll is a K x T matrix at 25 fps: row k covers MIDI pitch ``key_base + k``,
column t covers frame t. Offsets are exclusive everywhere.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

FPS = 25.0
NUM_KEYS = 88
KEY_BASE = 21  # A0
KEY_TOP = 108  # C8
MIN_VELOCITY = 1
MAX_VELOCITY = 127
DEFAULT_VELOCITY = 100


@dataclass(frozen=True)
class NoteEvent:
    """One key press: pitch plus half-open frame interval [onset, offset).

    Attributes:
        pitch: MIDI note number, 21..108.
        onset_frame: first frame (25 fps) the key sounds, >= 0.
        offset_frame: one past the last sounding frame, > onset_frame.
        velocity: MIDI velocity 1..127; the pipeline emits 100 by default.
    """

    pitch: int
    onset_frame: int
    offset_frame: int
    velocity: int = DEFAULT_VELOCITY

    def __post_init__(self):
        if not KEY_BASE <= self.pitch <= KEY_TOP:
            raise ValueError(f"pitch {self.pitch} outside piano range [{KEY_BASE}, {KEY_TOP}]")
        if self.onset_frame < 0:
            raise ValueError(f"onset_frame must be >= 0, got {self.onset_frame}")
        if self.offset_frame <= self.onset_frame:
            raise ValueError(
                f"offset_frame {self.offset_frame} must be > onset_frame {self.onset_frame}"
            )
        if not MIN_VELOCITY <= self.velocity <= MAX_VELOCITY:
            raise ValueError(f"velocity {self.velocity} outside [{MIN_VELOCITY}, {MAX_VELOCITY}]")

    @property
    def duration_frames(self) -> int:
        return self.offset_frame - self.onset_frame


def _freeze(obj, name: str, arr: np.ndarray) -> None:
    arr.flags.writeable = False
    object.__setattr__(obj, name, arr)


@dataclass(frozen=True, eq=False)
class PianoRoll:
    """Binary K x T key-state matrix; entry (k, t) = 1 iff key k sounds at frame t."""

    data: np.ndarray
    fps: float = FPS
    key_base: int = KEY_BASE

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ValueError(f"roll must be 2-D (K x T), got shape {arr.shape}")
        if arr.size and not np.isin(arr, (0, 1)).all():
            raise ValueError("roll entries must all be 0 or 1")
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        _freeze(self, "data", arr.astype(np.uint8))

    @property
    def num_keys(self) -> int:
        return self.data.shape[0]

    @property
    def num_frames(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class ProbRoll:
    """Per-key press probabilities, one column per frame; entries in [0, 1]."""

    data: np.ndarray
    fps: float = FPS
    key_base: int = KEY_BASE

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError(f"prob roll must be 2-D (K x T), got shape {arr.shape}")
        if arr.size and not (arr.min() >= 0.0 and arr.max() <= 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        _freeze(self, "data", arr)

    @property
    def num_keys(self) -> int:
        return self.data.shape[0]

    @property
    def num_frames(self) -> int:
        return self.data.shape[1]


def roll_from_events(
    events: list[NoteEvent],
    num_frames: int,
    num_keys: int = NUM_KEYS,
    key_base: int = KEY_BASE,
    fps: float = FPS,
) -> PianoRoll:
    """Rasterize note events into a binary roll; same-pitch overlaps union."""
    if num_frames < 0:
        raise ValueError(f"num_frames must be >= 0, got {num_frames}")
    data = np.zeros((num_keys, num_frames), dtype=np.uint8)
    for ev in events:
        row = ev.pitch - key_base
        if not 0 <= row < num_keys:
            raise ValueError(f"pitch {ev.pitch} outside the roll's key range")
        if ev.offset_frame > num_frames:
            raise ValueError(
                f"event offset {ev.offset_frame} exceeds roll length {num_frames}"
            )
        data[row, ev.onset_frame : ev.offset_frame] = 1
    return PianoRoll(data, fps=fps, key_base=key_base)


def events_from_roll(roll: PianoRoll, velocity: int = DEFAULT_VELOCITY) -> list[NoteEvent]:
    """Extract maximal per-row runs of ones as events, sorted by (onset, pitch)."""
    events = []
    for row in range(roll.num_keys):
        col = roll.data[row]
        # run boundaries: +1 where 0->1, -1 where 1->0
        edges = np.diff(np.concatenate(([0], col.astype(np.int8), [0])))
        onsets = np.flatnonzero(edges == 1)
        offsets = np.flatnonzero(edges == -1)
        for on, off in zip(onsets, offsets):
            events.append(
                NoteEvent(roll.key_base + row, int(on), int(off), velocity=velocity)
            )
    events.sort(key=lambda ev: (ev.onset_frame, ev.pitch))
    return events


def binarize(roll: ProbRoll, threshold: float) -> PianoRoll:
    """Threshold probabilities into a binary roll; ties (p == threshold) activate."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return PianoRoll(
        (roll.data >= threshold).astype(np.uint8), fps=roll.fps, key_base=roll.key_base
    )


def resample_roll(roll: PianoRoll, src_fps: float, dst_fps: float) -> PianoRoll:
    """Resample in time by max-pooling, so no press shorter than a frame is dropped.

    Output frame f is active iff any source frame overlapping the time span
    [f/dst_fps, (f+1)/dst_fps) is active. Output length is ceil(T*dst/src).
    """
    if src_fps <= 0 or dst_fps <= 0:
        raise ValueError("frame rates must be positive")
    t_src = roll.num_frames
    if src_fps == dst_fps:
        return PianoRoll(roll.data.copy(), fps=dst_fps, key_base=roll.key_base)
    t_dst = math.ceil(t_src * dst_fps / src_fps)
    out = np.zeros((roll.num_keys, t_dst), dtype=np.uint8)
    ratio = src_fps / dst_fps
    for f in range(t_dst):
        lo = int(math.floor(f * ratio + 1e-9))
        hi = int(math.ceil((f + 1) * ratio - 1e-9))
        hi = min(hi, t_src)
        if lo < hi:
            out[:, f] = roll.data[:, lo:hi].max(axis=1)
    return PianoRoll(out, fps=dst_fps, key_base=roll.key_base)


def trim_leading_silence(roll: PianoRoll) -> tuple[PianoRoll, int]:
    """Drop all-zero leading columns up to the first key press.

    Returns the trimmed roll and the number of frames removed. Interior
    silence is untouched. An entirely silent roll becomes empty (warns).
    """
    active = np.flatnonzero(roll.data.any(axis=0))
    if active.size == 0:
        offset = roll.num_frames
        if offset:
            warnings.warn("roll is entirely silent; trimmed to empty", RuntimeWarning)
        empty = np.zeros((roll.num_keys, 0), dtype=np.uint8)
        return PianoRoll(empty, fps=roll.fps, key_base=roll.key_base), offset
    offset = int(active[0])
    return (
        PianoRoll(roll.data[:, offset:].copy(), fps=roll.fps, key_base=roll.key_base),
        offset,
    )
