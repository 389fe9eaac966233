"""Independent brute-force oracles the tests check the library against.

Everything here is deliberately written the slow, obvious way (loops,
direct DFTs, per-cell counting) and stays independent of the library
implementations it verifies.
"""

import math

import numpy as np
import torch


def roll_from_events_loop(events, num_frames, num_keys=88, key_base=21):
    out = np.zeros((num_keys, num_frames), dtype=np.uint8)
    for ev in events:
        for f in range(num_frames):
            if ev.onset_frame <= f < ev.offset_frame:
                out[ev.pitch - key_base, f] = 1
    return out


def runs_loop(row):
    """Maximal runs of ones as (start, end-exclusive) pairs."""
    runs, start = [], None
    for i, v in enumerate(row):
        if v and start is None:
            start = i
        elif not v and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(row)))
    return runs


def resample_cover_loop(data, src_fps, dst_fps):
    """Max-pool resampling by explicit interval-overlap checks."""
    k, t = data.shape
    n = math.ceil(t * dst_fps / src_fps)
    out = np.zeros((k, n), dtype=np.uint8)
    for f in range(n):
        for s in range(t):
            if s / src_fps < (f + 1) / dst_fps - 1e-12 and (s + 1) / src_fps > f / dst_fps + 1e-12:
                out[:, f] |= data[:, s]
    return out


def count_metrics_loop(pred, gt):
    tp = fp = fn = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            p, g = pred[i, j], gt[i, j]
            if p and g:
                tp += 1
            elif p and not g:
                fp += 1
            elif g and not p:
                fn += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    accuracy = tp / (tp + fp + fn) if tp + fp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return tp, fp, fn, precision, recall, accuracy, f1


# ---------------------------------------------------------------------------
# gradient checking


def fd_max_rel_error(loss_fn, tensors, eps=1e-6, coords_per_tensor=8, seed=0, floor_rel=1e-3):
    """Max relative error between autograd and central finite differences.

    ``loss_fn`` recomputes a scalar loss from scratch; ``tensors`` are the
    leaves (parameters and/or inputs, float64) to perturb. A sample of
    coordinates per tensor is checked. The relative-error denominator is
    floored at ``floor_rel`` times the largest gradient entry: coordinates
    whose gradients sit below the finite-difference noise floor are judged
    against the model's gradient scale instead of their own.

    Central differences require local smoothness; coordinates whose stencil
    straddles a ReLU-style kink (forward and backward slopes disagree) are
    retried with a smaller step and skipped if still non-smooth. More than a
    quarter of coordinates skipping fails the check outright.
    """
    rng = np.random.default_rng(seed)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors)
    base = float(loss.detach())
    floor = max(1e-8, floor_rel * max(float(g.abs().max()) for g in grads))
    worst, skipped, total = 0.0, 0, 0
    with torch.no_grad():
        for tensor, grad in zip(tensors, grads):
            flat = tensor.data.view(-1)
            n = flat.numel()
            coords = rng.choice(n, size=min(coords_per_tensor, n), replace=False)
            for c in coords:
                c = int(c)
                orig = flat[c].item()
                total += 1
                numeric = None
                for step in (eps, eps / 64.0):
                    flat[c] = orig + step
                    plus = float(loss_fn())
                    flat[c] = orig - step
                    minus = float(loss_fn())
                    flat[c] = orig
                    fwd = (plus - base) / step
                    bwd = (base - minus) / step
                    tol = max(
                        3e-5 * max(abs(fwd), abs(bwd), floor),
                        30.0 * abs(base) * 1e-16 / step,
                    )
                    if abs(fwd - bwd) <= tol:
                        numeric = (plus - minus) / (2.0 * step)
                        break
                if numeric is None:
                    skipped += 1
                    continue
                analytic = float(grad.view(-1)[c])
                scale = max(abs(analytic), abs(numeric), floor)
                worst = max(worst, abs(analytic - numeric) / scale)
    if skipped > max(1, total // 4):
        raise AssertionError(f"{skipped}/{total} coordinates sat on non-smooth points")
    return worst


# ---------------------------------------------------------------------------
# spectral oracles


def fft_peak_hz(samples, sample_rate, min_hz=15.0):
    """Frequency of the strongest rFFT bin above ``min_hz``."""
    spec = np.abs(np.fft.rfft(np.asarray(samples, dtype=np.float64)))
    freqs = np.fft.rfftfreq(len(samples), 1.0 / sample_rate)
    spec[freqs < min_hz] = 0.0
    return float(freqs[int(np.argmax(spec))])


def pitch_bin(pitch, n_fft=2048, sample_rate=16000):
    """STFT bin of a MIDI pitch's equal-temperament fundamental."""
    f0 = 440.0 * 2.0 ** ((pitch - 69) / 12.0)
    return int(round(f0 * n_fft / sample_rate))


def stft_mag_np(x, n_fft=2048, hop=256):
    """Centered magnitude STFT via direct numpy rFFTs (periodic Hann)."""
    x = np.asarray(x, dtype=np.float64)
    pad = n_fft // 2
    xp = np.concatenate([np.zeros(pad), x, np.zeros(pad)])
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n_fft) / n_fft)
    frames = 1 + len(x) // hop
    cols = []
    for f in range(frames):
        seg = xp[f * hop : f * hop + n_fft]
        if len(seg) < n_fft:
            seg = np.pad(seg, (0, n_fft - len(seg)))
        cols.append(np.abs(np.fft.rfft(window * seg)))
    return np.stack(cols, axis=1)


def recovered_note_fraction(samples, events, sample_rate=16000, hop=256, tol_bins=1):
    """Fraction of notes whose fundamental dominates the audio's spectrogram.

    For each note, looks at the spectrogram columns spanning the middle half
    of the note and asks whether the median peak bin sits within ``tol_bins``
    of the expected fundamental bin.
    """
    mag = stft_mag_np(samples, hop=hop)
    mag[:4, :] = 0.0  # ignore DC leakage
    recovered = 0
    for ev in events:
        lo_s = ev.onset_frame / 25.0 + (ev.offset_frame - ev.onset_frame) / 25.0 * 0.25
        hi_s = ev.onset_frame / 25.0 + (ev.offset_frame - ev.onset_frame) / 25.0 * 0.75
        lo = int(round(lo_s * sample_rate / hop))
        hi = max(lo + 1, int(round(hi_s * sample_rate / hop)))
        hi = min(hi, mag.shape[1])
        lo = min(lo, hi - 1)
        peaks = np.argmax(mag[:, lo:hi], axis=0)
        if abs(int(np.median(peaks)) - pitch_bin(ev.pitch)) <= tol_bins:
            recovered += 1
    return recovered / max(len(events), 1)
