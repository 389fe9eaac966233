import numpy as np
import pytest

from vid2piano.ingest import (
    AlignmentError,
    DatasetIndex,
    FrameStack,
    SILENCE_BUCKET,
    align_dataset,
    balanced_batches,
    decode_video_frames,
    key_span,
    make_frame_stack,
    random_monophonic_roll,
    random_performance_roll,
    render_synthetic_performance,
    write_frames_npz,
    write_frames_video,
)
from vid2piano.midiio import document_from_events
from vid2piano.rollcore import NoteEvent, PianoRoll, roll_from_events


def simple_roll(notes, t=40):
    return roll_from_events([NoteEvent(*n) for n in notes], t)


class TestFrameStack:
    def test_shape_enforced(self):
        with pytest.raises(ValueError):
            FrameStack(np.zeros((4, 100, 900), dtype=np.float32), 0)
        with pytest.raises(ValueError):
            FrameStack(np.zeros((5, 50, 900), dtype=np.float32), 0)

    def test_interior(self):
        frames = np.stack([np.full((100, 900), i / 10, np.float32) for i in range(10)])
        stack = make_frame_stack(frames, 5)
        assert stack.center_frame_index == 5
        np.testing.assert_allclose(stack.data[0], frames[3])
        np.testing.assert_allclose(stack.data[4], frames[7])

    def test_left_edge_replication(self):
        frames = np.stack([np.full((100, 900), i / 10, np.float32) for i in range(5)])
        stack = make_frame_stack(frames, 0)
        np.testing.assert_allclose(stack.data[0], frames[0])
        np.testing.assert_allclose(stack.data[1], frames[0])
        np.testing.assert_allclose(stack.data[2], frames[0])
        np.testing.assert_allclose(stack.data[3], frames[1])

    def test_right_edge_replication(self):
        frames = np.stack([np.full((100, 900), i / 10, np.float32) for i in range(6)])
        stack = make_frame_stack(frames, 5)
        np.testing.assert_allclose(stack.data[2], frames[5])
        np.testing.assert_allclose(stack.data[3], frames[5])
        np.testing.assert_allclose(stack.data[4], frames[5])

    def test_out_of_range(self):
        frames = np.zeros((3, 100, 900), np.float32)
        with pytest.raises(ValueError):
            make_frame_stack(frames, 3)


class TestDecode:
    def test_npz_round_trip_shapes(self, tmp_path):
        seq = render_synthetic_performance(simple_roll([(60, 2, 8)], 10))
        path = tmp_path / "clip.npz"
        write_frames_npz(path, seq)
        frames = decode_video_frames(path)
        assert frames.shape == (10, 100, 900)
        assert frames.dtype == np.float32
        np.testing.assert_allclose(frames, seq.to_array(), atol=0.003)

    def test_all_white_npz(self, tmp_path):
        path = tmp_path / "white.npz"
        white = np.full((4, 100, 900), 1.0, np.float32)
        write_frames_npz(path, white)
        frames = decode_video_frames(path)
        assert frames.min() == 1.0 and frames.max() == 1.0

    def test_missing_file(self, tmp_path):
        with pytest.raises(IOError):
            decode_video_frames(tmp_path / "nope.mp4")

    def test_bad_region(self, tmp_path):
        path = tmp_path / "clip.npz"
        write_frames_npz(path, np.zeros((2, 100, 900), np.float32))
        with pytest.raises(ValueError, match="empty crop"):
            decode_video_frames(path, (0, 0, 0, 10))
        with pytest.raises(ValueError, match="outside"):
            decode_video_frames(path, (0, 0, 2000, 10))

    def test_video_round_trip_and_landmark_order(self, tmp_path):
        # three frames, each pressing a different key: left, middle, right
        pitches = [24, 60, 104]
        events = [NoteEvent(p, i, i + 1) for i, p in enumerate(pitches)]
        roll = roll_from_events(events, 3)
        seq = render_synthetic_performance(roll)
        path = tmp_path / "clip.avi"
        write_frames_video(path, seq)
        frames = decode_video_frames(path)
        assert frames.shape == (3, 100, 900)
        centroids = []
        reference = seq.base
        for i in range(3):
            diff = np.abs(frames[i] - reference) > 0.15
            cols = np.flatnonzero(diff.any(axis=0))
            assert cols.size, "pressed key not visible after encode/decode"
            centroids.append(cols.mean())
        assert centroids[0] < centroids[1] < centroids[2]


class TestAlign:
    def test_already_aligned(self):
        frames = np.zeros((20, 100, 900), np.float32)
        doc = document_from_events([NoteEvent(60, 0, 10), NoteEvent(60, 15, 20)])
        out_frames, out_roll = align_dataset(frames, doc)
        assert len(out_frames) == out_roll.num_frames == 20

    def test_leading_silence_shifts_both(self):
        frames = np.arange(100, dtype=np.float32)[:, None, None] / 100
        frames = np.broadcast_to(frames, (100, 100, 900)).copy()
        doc = document_from_events([NoteEvent(60, 50, 90)])
        out_frames, out_roll = align_dataset(frames, doc)
        assert out_roll.num_frames == len(out_frames) == 40
        assert out_frames[0, 0, 0] == pytest.approx(0.5)
        assert out_roll.data[39, 0] == 1

    def test_length_mismatch_truncated(self):
        frames = np.zeros((23, 100, 900), np.float32)
        doc = document_from_events([NoteEvent(60, 0, 20)])
        out_frames, out_roll = align_dataset(frames, doc)
        assert len(out_frames) == out_roll.num_frames == 20

    def test_duration_mismatch_error(self):
        frames = np.zeros((100, 100, 900), np.float32)
        doc = document_from_events([NoteEvent(60, 0, 10)])
        with pytest.raises(AlignmentError):
            align_dataset(frames, doc)


class TestIndexAndSampler:
    def test_buckets_cover_positives(self):
        roll = simple_roll([(60, 0, 10), (64, 5, 15)], 20)
        index = DatasetIndex.from_roll("v", roll)
        assert len(index.samples) == 20
        covered = set(np.concatenate([index.class_buckets[60], index.class_buckets[64]]))
        positives = {i for i, (_, _, p) in enumerate(index.samples) if p}
        assert positives <= covered
        assert set(index.class_buckets[SILENCE_BUCKET]) == set(range(20)) - positives

    def test_save_load(self, tmp_path):
        roll = simple_roll([(60, 0, 10)], 15)
        index = DatasetIndex.from_roll("v", roll)
        index.save(tmp_path / "index.json")
        again = DatasetIndex.load(tmp_path / "index.json")
        assert again.samples == index.samples
        assert set(again.class_buckets) == set(index.class_buckets)

    def test_label_vector(self):
        index = DatasetIndex([("v", 0, (60, 64)), ("v", 1, ())])
        vec = index.label_vector(0)
        assert vec[60 - 21] == 1 and vec[64 - 21] == 1 and vec.sum() == 2
        assert index.label_vector(1).sum() == 0

    def test_two_pitch_batches_balanced(self):
        samples = [("v", t, (60,)) for t in range(100)]
        samples += [("v", t, (64,)) for t in range(100, 130)]
        index = DatasetIndex(samples)
        counts = {60: 0, 64: 0}
        for batch in balanced_batches(index, 64, seed=0, num_batches=100):
            assert len(batch) == 64
            per_batch = {60: 0, 64: 0}
            for i in batch:
                per_batch[index.samples[int(i)][2][0]] += 1
            assert abs(per_batch[60] - 32) <= 1 and abs(per_batch[64] - 32) <= 1
            counts[60] += per_batch[60]
            counts[64] += per_batch[64]
        total = counts[60] + counts[64]
        assert abs(counts[60] / total - 0.5) <= 0.10

    def test_deterministic_under_seed(self):
        samples = [("v", t, (60 + (t % 3),)) for t in range(50)]
        index = DatasetIndex(samples)
        a = [b.tolist() for b in balanced_batches(index, 12, seed=7, num_batches=5)]
        b = [b.tolist() for b in balanced_batches(index, 12, seed=7, num_batches=5)]
        assert a == b
        c = [b_.tolist() for b_ in balanced_batches(index, 12, seed=8, num_batches=5)]
        assert a != c

    def test_rare_pitch_oversampled(self):
        samples = [("v", t, (60,)) for t in range(100)] + [("v", 100, (64,))]
        index = DatasetIndex(samples)
        batch = next(balanced_batches(index, 64, seed=0, num_batches=1))
        rare = [i for i in batch if index.samples[int(i)][2] == (64,)]
        assert len(rare) >= 2  # the single sample repeats

    def test_empty_dataset(self):
        with pytest.raises(ValueError, match="empty"):
            next(balanced_batches(DatasetIndex([]), 8, 0, 1))

    def test_batch_smaller_than_buckets(self):
        samples = [("v", t, (60 + t,)) for t in range(10)]
        index = DatasetIndex(samples)
        with pytest.raises(ValueError, match="bucket count"):
            next(balanced_batches(index, 4, 0, 1))


class TestRenderer:
    def test_constant_when_silent(self):
        seq = render_synthetic_performance(PianoRoll(np.zeros((88, 6))), 0.0, seed=1)
        arr = seq.to_array()
        assert arr.shape == (6, 100, 900)
        for t in range(1, 6):
            np.testing.assert_array_equal(arr[t], arr[0])

    def test_single_key_changes_its_region_only(self):
        roll = simple_roll([(60, 2, 5)], 8)
        seq = render_synthetic_performance(roll, 0.0, seed=0)
        base = seq.frame(0)
        pressed = seq.frame(3)
        diff = np.argwhere(base != pressed)
        assert diff.size
        x0, x1, y0, y1 = key_span(60)
        assert diff[:, 0].min() >= y0 and diff[:, 0].max() < y1
        assert diff[:, 1].min() >= x0 and diff[:, 1].max() < x1
        # frames outside the note are identical to the base
        np.testing.assert_array_equal(seq.frame(6), base)

    def test_black_key_changes_inside_its_span(self):
        roll = simple_roll([(61, 0, 3)], 4)
        seq = render_synthetic_performance(roll, 0.0, seed=0)
        diff = np.argwhere(seq.frame(0) != seq.frame(3))
        x0, x1, y0, y1 = key_span(61)
        assert diff.size
        assert diff[:, 1].min() >= x0 and diff[:, 1].max() < x1
        assert diff[:, 0].max() < y1

    def test_deterministic_per_seed(self):
        roll = random_performance_roll(30, [60, 64, 67], seed=3)
        a = render_synthetic_performance(roll, 0.4, seed=5).to_array()
        b = render_synthetic_performance(roll, 0.4, seed=5).to_array()
        c = render_synthetic_performance(roll, 0.4, seed=6).to_array()
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_occlusion_fraction(self):
        roll = PianoRoll(np.zeros((88, 20)))
        seq = render_synthetic_performance(roll, 0.3, seed=2)
        base = render_synthetic_performance(roll, 0.0, seed=2).frame(0)
        for t in range(20):
            covered = (seq.frame(t) != base).any(axis=0).mean()
            assert 0.25 <= covered <= 0.35

    def test_full_occlusion_hides_presses(self):
        roll = simple_roll([(60, 0, 10)], 10)
        seq = render_synthetic_performance(roll, 1.0, seed=0)
        arr = seq.to_array()
        for t in range(1, 10):
            np.testing.assert_array_equal(arr[t], arr[0])

    def test_invalid_occlusion(self):
        with pytest.raises(ValueError):
            render_synthetic_performance(PianoRoll(np.zeros((88, 2))), 1.5)

    def test_frame_values_in_range(self):
        roll = random_performance_roll(20, [50, 61, 72], seed=1)
        seq = render_synthetic_performance(roll, 0.2, seed=1)
        arr = seq.to_array()
        assert arr.min() >= 0.0 and arr.max() <= 1.0


class TestRollGenerators:
    def test_performance_roll_uses_given_pitches(self):
        roll = random_performance_roll(200, [60, 62], seed=0)
        active = {21 + int(k) for k in np.flatnonzero(roll.data.any(axis=1))}
        assert active == {60, 62}

    def test_monophonic(self):
        roll = random_monophonic_roll(300, [60, 64, 67], seed=0)
        assert roll.data.sum(axis=0).max() <= 1
        assert roll.data.sum() > 0

    def test_deterministic(self):
        a = random_performance_roll(100, [60], seed=4)
        b = random_performance_roll(100, [60], seed=4)
        np.testing.assert_array_equal(a.data, b.data)
