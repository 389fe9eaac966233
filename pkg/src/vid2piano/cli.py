"""Command-line entry point.

Subcommands: ingest, render-synth, train (video2roll | roll2midi | synth),
infer, synth, eval. Every run that produces files writes a JSON manifest
(command, arguments, seed, config snapshot, library versions) next to its
primary output, so runs can be reproduced exactly.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
from pathlib import Path

import cv2
import numpy as np
import torch

from . import __version__
from . import roll2midi as r2m
from . import synth as synthmod
from . import video2roll as v2r
from .checkpoints import Checkpoint
from .config import RunConfig, load_run_config, require_paths
from .errors import ConfigError
from .ingest import (
    AlignmentError,
    DatasetIndex,
    align_dataset,
    decode_video_frames,
    render_synthetic_performance,
    write_frames_npz,
    write_frames_video,
)
from .metrics import evaluate_run, format_report_table
from .midiio import MidiParseError, document_from_events, read_midi_file, write_midi_file
from .rollcore import PianoRoll, ProbRoll, binarize, events_from_roll, roll_from_events

VIDEO_SUFFIXES = (".mp4", ".avi", ".mkv", ".npz")
MIDI_SUFFIXES = (".mid", ".midi")


def _versions() -> dict:
    return {
        "vid2piano": __version__,
        "numpy": np.__version__,
        "torch": torch.__version__,
        "python": platform.python_version(),
    }


def write_manifest(primary_output: Path, command: str, args: argparse.Namespace,
                   cfg: RunConfig | None, outputs: list[Path]) -> Path:
    manifest = {
        "command": command,
        "args": {k: str(v) for k, v in vars(args).items() if k != "func" and v is not None},
        "seed": getattr(args, "seed", None) if cfg is None else cfg.seed,
        "config": cfg.snapshot() if cfg is not None else None,
        "outputs": [str(p) for p in outputs],
        "versions": _versions(),
    }
    path = Path(str(primary_output) + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2))
    return path


def save_roll_png(path: str | Path, data: np.ndarray) -> None:
    """Debug dump: roll/probabilities as an image, low pitches at the bottom."""
    img = (np.clip(np.asarray(data, dtype=np.float32), 0.0, 1.0) * 255).astype(np.uint8)
    cv2.imwrite(str(path), img[::-1])


def save_spec_png(path: str | Path, data: np.ndarray) -> None:
    arr = np.asarray(data, dtype=np.float32)
    peak = arr.max() if arr.size else 0.0
    img = (255 * arr / peak).astype(np.uint8) if peak > 0 else np.zeros_like(arr, np.uint8)
    cv2.imwrite(str(path), img[::-1])


def _parse_crop(text: str | None):
    if text is None:
        return None
    parts = text.split(",")
    if len(parts) != 4:
        raise ConfigError("crop must be 'x,y,w,h'", "crop")
    return tuple(int(p) for p in parts)


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return load_run_config(args.config)
    return RunConfig()


def _roll_from_midi(path: Path) -> PianoRoll:
    doc = read_midi_file(Path(path).read_bytes())
    return roll_from_events(list(doc.events), doc.num_frames)


# ---------------------------------------------------------------------------
# subcommands


def cmd_eval(args) -> int:
    pred_doc = read_midi_file(Path(args.pred).read_bytes())
    gt_doc = read_midi_file(Path(args.gt).read_bytes())
    num_frames = max(pred_doc.num_frames, gt_doc.num_frames)
    pred = roll_from_events(list(pred_doc.events), num_frames)
    gt = roll_from_events(list(gt_doc.events), num_frames)
    thresholds = args.ts or [0.4]
    reports = evaluate_run(ProbRoll(pred.data.astype(np.float32)), gt, thresholds)
    print(format_report_table(reports))
    if args.out:
        out = Path(args.out)
        out.write_text(json.dumps([json.loads(r.to_json()) for r in reports], indent=2))
        write_manifest(out, "eval", args, None, [out])
    return 0


def cmd_synth(args) -> int:
    roll = _roll_from_midi(args.midi)
    models = None
    if args.mode == "deep":
        if not args.checkpoint:
            raise ConfigError("deep mode needs --checkpoint with synth models", "checkpoint")
        models = synthmod.from_checkpoint(Checkpoint.load(args.checkpoint))
    clip = synthmod.synthesize(roll, mode=args.mode, models=models)
    out = Path(args.out)
    synthmod.write_wav(out, clip)
    write_manifest(out, "synth", args, None, [out])
    return 0


def cmd_render_synth(args) -> int:
    roll = _roll_from_midi(args.midi)
    seq = render_synthetic_performance(roll, args.occlusion, args.seed)
    out = Path(args.out)
    if out.suffix == ".npz":
        write_frames_npz(out, seq)
    else:
        write_frames_video(out, seq)
    write_manifest(out, "render-synth", args, None, [out])
    return 0


def cmd_ingest(args) -> int:
    cfg = _load_config(args)
    video = Path(args.video)
    crop = _parse_crop(args.crop) or cfg.crops.get(video.stem)
    frames = decode_video_frames(video, crop)
    doc = read_midi_file(Path(args.midi).read_bytes())
    aligned_frames, roll = align_dataset(frames, doc)
    offset = len(frames) - len(aligned_frames)
    samples = []
    for t in range(roll.num_frames):
        pitches = tuple(int(roll.key_base + k) for k in np.flatnonzero(roll.data[:, t]))
        samples.append((video.stem, offset + t, pitches))
    index = DatasetIndex(samples, num_keys=roll.num_keys, key_base=roll.key_base)
    out = Path(args.out_index)
    index.save(out)
    print(f"indexed {len(samples)} frames from {video.name} (leading silence: {offset} frames)")
    write_manifest(out, "ingest", args, cfg if args.config else None, [out])
    return 0


def _discover_pairs(videos_dir: Path, midis_dir: Path) -> list[tuple[Path, Path]]:
    pairs = []
    for video in sorted(videos_dir.iterdir()):
        if video.suffix not in VIDEO_SUFFIXES:
            continue
        for suffix in MIDI_SUFFIXES:
            midi = midis_dir / (video.stem + suffix)
            if midi.exists():
                pairs.append((video, midi))
                break
    if not pairs:
        raise ConfigError(f"no video/midi stem pairs under {videos_dir} and {midis_dir}", "paths")
    return pairs


def _aligned_streams(cfg: RunConfig, videos_dir: Path, midis_dir: Path):
    sources, rolls = {}, {}
    for video, midi in _discover_pairs(videos_dir, midis_dir):
        frames = decode_video_frames(video, cfg.crops.get(video.stem))
        doc = read_midi_file(midi.read_bytes())
        frames, roll = align_dataset(frames, doc)
        sources[video.stem] = frames
        rolls[video.stem] = roll
    return sources, rolls


def _split_indices(sources, rolls, val_fraction: float):
    train_samples, val_samples = [], []
    first = next(iter(rolls.values()))
    for stem, roll in rolls.items():
        cut = int(roll.num_frames * (1.0 - val_fraction))
        for t in range(roll.num_frames):
            pitches = tuple(int(roll.key_base + k) for k in np.flatnonzero(roll.data[:, t]))
            (train_samples if t < cut else val_samples).append((stem, t, pitches))
    make = lambda s: DatasetIndex(s, num_keys=first.num_keys, key_base=first.key_base)
    return make(train_samples), make(val_samples)


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    paths = require_paths(cfg, ("videos", "midis"))
    sources, rolls = _aligned_streams(cfg, paths["videos"], paths["midis"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    if args.target == "video2roll":
        sub = cfg.video2roll
        sub.seed = cfg.seed
        train_index, val_index = _split_indices(sources, rolls, cfg.val_fraction)
        model, history = v2r.train_video2roll(train_index, val_index, sources, sub)
        v2r.to_checkpoint(model, history).save(out)
    elif args.target == "roll2midi":
        classifier = v2r.from_checkpoint(Checkpoint.load(args.video2roll_checkpoint))
        prob_rolls = [v2r.predict_roll(classifier, sources[stem]) for stem in sorted(rolls)]
        gt_rolls = [rolls[stem] for stem in sorted(rolls)]
        sub = cfg.roll2midi
        sub.seed = cfg.seed
        gen, disc, history = r2m.train_gan(prob_rolls, gt_rolls, sub)
        r2m.to_checkpoint(gen, disc, sub, history).save(out)
    elif args.target == "synth":
        sub = cfg.synth
        sub.seed = cfg.seed
        midi_windows, spec_windows = [], []
        for stem in sorted(rolls):
            roll = rolls[stem]
            for start in range(0, roll.num_frames - synthmod.ROLL_WINDOW + 1, synthmod.ROLL_WINDOW):
                window = roll.data[:, start : start + synthmod.ROLL_WINDOW]
                clip = synthmod.classical_synth(
                    events_from_roll(PianoRoll(window)), synthmod.ROLL_WINDOW
                )
                spec = synthmod.log_spectrogram(clip)
                midi_windows.append(synthmod.upsample_midi_window(window))
                spec_windows.append(spec.data[: synthmod.TRAIN_BINS])
        models, history = synthmod.train_synth(
            np.stack(midi_windows).astype(np.float32), np.stack(spec_windows), sub
        )
        synthmod.to_checkpoint(models, history).save(out)
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigError(f"unknown train target {args.target}", "train.target")
    print(f"saved {args.target} checkpoint to {out}")
    write_manifest(out, f"train {args.target}", args, cfg, [out])
    return 0


def cmd_infer(args) -> int:
    cfg = _load_config(args)
    torch.manual_seed(args.seed)
    np.random.seed(args.seed)
    ckpt_dir = Path(args.checkpoint)
    v2r_path = ckpt_dir / "video2roll.npz" if ckpt_dir.is_dir() else ckpt_dir
    if not v2r_path.exists():
        raise ConfigError(f"missing video2roll checkpoint at {v2r_path}", "checkpoint")
    classifier = v2r.from_checkpoint(Checkpoint.load(v2r_path))

    crop = _parse_crop(args.crop) or cfg.crops.get(Path(args.video).stem)
    frames = decode_video_frames(args.video, crop)
    prob = v2r.predict_roll(classifier, frames)

    refined = prob
    gen_path = ckpt_dir / "roll2midi.npz" if ckpt_dir.is_dir() else None
    if gen_path is not None and gen_path.exists():
        gen, _, _ = r2m.from_checkpoint(Checkpoint.load(gen_path))
        refined = r2m.refine_sequence(gen, prob)

    pred = binarize(refined, args.ts)
    events = events_from_roll(pred)
    doc = document_from_events(events)
    out_midi = Path(args.out_midi)
    out_midi.parent.mkdir(parents=True, exist_ok=True)
    out_midi.write_bytes(write_midi_file(doc))
    outputs = [out_midi]

    if args.out_wav:
        models = None
        mode = args.mode or cfg.synth_mode
        if mode == "deep":
            synth_path = ckpt_dir / "synth.npz" if ckpt_dir.is_dir() else None
            if synth_path is None or not synth_path.exists():
                raise ConfigError("deep synthesis needs a synth checkpoint", "checkpoint")
            models = synthmod.from_checkpoint(Checkpoint.load(synth_path))
        clip = synthmod.synthesize(pred, mode=mode, models=models)
        out_wav = Path(args.out_wav)
        synthmod.write_wav(out_wav, clip)
        outputs.append(out_wav)

    if args.dump_dir:
        dump = Path(args.dump_dir)
        dump.mkdir(parents=True, exist_ok=True)
        save_roll_png(dump / "roll_prob.png", prob.data)
        save_roll_png(dump / "roll_refined.png", refined.data)
        save_roll_png(dump / "roll_binary.png", pred.data)

    print(f"wrote {', '.join(str(p) for p in outputs)} ({len(events)} notes)")
    write_manifest(out_midi, "infer", args, cfg if args.config else None, outputs)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vid2piano",
        description="Silent piano video to audio: classify key presses, refine, synthesize.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="frame-level metrics between two midi files")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--ts", type=float, action="append", help="threshold; repeatable")
    p.add_argument("--out", help="optional JSON report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="render a midi file to a 16 kHz mono wav")
    p.add_argument("--midi", required=True)
    p.add_argument("--mode", choices=["classical", "deep"], default="classical")
    p.add_argument("--checkpoint", help="synth models (.npz) for deep mode")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("render-synth", help="render a midi as a synthetic keyboard video")
    p.add_argument("--midi", required=True)
    p.add_argument("--out", required=True, help=".npz (lossless) or .mp4/.avi")
    p.add_argument("--occlusion", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_render_synth)

    p = sub.add_parser("ingest", help="align one video with its pseudo-GT midi into an index")
    p.add_argument("--video", required=True)
    p.add_argument("--midi", required=True)
    p.add_argument("--out-index", required=True)
    p.add_argument("--crop", help="x,y,w,h keyboard rectangle in source pixels")
    p.add_argument("--config")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train one pipeline stage from a config file")
    p.add_argument("target", choices=["video2roll", "roll2midi", "synth"])
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="checkpoint output path (.npz)")
    p.add_argument("--video2roll-checkpoint", help="needed for the roll2midi target")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="video -> midi (and optionally wav)")
    p.add_argument("--video", required=True)
    p.add_argument("--checkpoint", required=True, help="checkpoint dir or video2roll .npz")
    p.add_argument("--out-midi", required=True)
    p.add_argument("--out-wav")
    p.add_argument("--ts", type=float, default=0.4)
    p.add_argument("--mode", choices=["classical", "deep"])
    p.add_argument("--crop")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump-dir", help="write roll PNGs here for inspection")
    p.set_defaults(func=cmd_infer)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (MidiParseError, AlignmentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
