"""vid2piano: silent piano-performance video to audio.

Three trainable stages: per-frame key classification (video2roll),
adversarial roll refinement (roll2midi), and synthesis (classical additive
or midi-to-spectrogram with Griffin-Lim inversion), plus the roll/midi data
model, frame-level metrics, dataset tooling and a CLI tying them together.
"""

__version__ = "0.1.0"

from .rollcore import (
    NoteEvent,
    PianoRoll,
    ProbRoll,
    binarize,
    events_from_roll,
    resample_roll,
    roll_from_events,
    trim_leading_silence,
)
from .midiio import MidiDocument, MidiParseError, read_midi_file, write_midi_file
from .metrics import MetricsReport, evaluate_run, frame_metrics
from .checkpoints import Checkpoint
from .errors import ConfigError

__all__ = [
    "Checkpoint",
    "ConfigError",
    "MetricsReport",
    "MidiDocument",
    "MidiParseError",
    "NoteEvent",
    "PianoRoll",
    "ProbRoll",
    "binarize",
    "evaluate_run",
    "events_from_roll",
    "frame_metrics",
    "read_midi_file",
    "resample_roll",
    "roll_from_events",
    "trim_leading_silence",
    "write_midi_file",
]
