"""Audio ingestion: WAV decoding, resampling to 16 kHz, and energy VAD.

The voice activity detector is a frame-energy threshold over 30 ms frames
with peak-hold (hangover) smoothing. The decision threshold adapts to the
recording's noise floor and is parameterized by an aggressiveness level
0-3 (higher keeps less audio).
"""

from __future__ import annotations

import dataclasses
import wave

import numpy as np
import scipy.signal

TARGET_RATE = 16000
VAD_FRAME_SECONDS = 0.030

# Threshold for level a is min(BASE[a], noise_floor + MARGIN[a]), in dB.
# The BASE term handles normal recordings; the MARGIN term keeps digital
# silence below threshold even when the noise floor sits at the energy
# floor itself.
VAD_BASE_DB = (-50.0, -45.0, -40.0, -35.0)
VAD_MARGIN_DB = (3.0, 6.0, 9.0, 12.0)
# Peak-hold decay of the smoothed frame energy; keeps short intra-speech
# gaps attached to the surrounding segment.
VAD_HANGOVER_DB_PER_FRAME = 12.0

ENERGY_FLOOR = 1e-12


@dataclasses.dataclass
class Waveform:
    """Mono audio in [-1, 1] at a known sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"expected mono samples, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples must be finite")
        peak = np.abs(samples).max() if samples.size else 0.0
        if peak > 1.0 + 1e-6:
            raise ValueError(f"samples exceed full scale (peak {peak:.6f})")
        self.samples = np.clip(samples, -1.0, 1.0)
        self.sample_rate = int(self.sample_rate)
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


def read_wav(path):
    """Decode a mono 16-bit PCM WAV file; 48 kHz input is resampled to 16 kHz."""
    with wave.open(str(path), "rb") as fh:
        channels = fh.getnchannels()
        width = fh.getsampwidth()
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    if channels != 1:
        raise ValueError(f"{path}: expected mono audio, got {channels} channels")
    if width != 2:
        raise ValueError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(resample_to_16k(samples, rate), TARGET_RATE)


def write_wav(path, waveform):
    """Write a Waveform as mono 16-bit PCM."""
    pcm = np.clip(np.round(waveform.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(waveform.sample_rate)
        fh.writeframes(pcm.tobytes())


def resample_to_16k(samples, rate):
    """Bring samples to 16 kHz; only 16 kHz (no-op) and 48 kHz are supported."""
    samples = np.asarray(samples, dtype=np.float64)
    if rate == TARGET_RATE:
        return samples
    if rate == 48000:
        # Polyphase 3:1 decimation with the built-in anti-alias low-pass;
        # clip the filter's sub-LSB overshoot back to full scale.
        return np.clip(scipy.signal.resample_poly(samples, 1, 3), -1.0, 1.0)
    raise ValueError(f"unsupported sample rate {rate} (expected 16000 or 48000)")


def frame_energies_db(samples, frame_length):
    """Mean power per frame in dB; trailing partial frame included."""
    n_frames = int(np.ceil(samples.size / frame_length))
    energies = np.empty(n_frames)
    for i in range(n_frames):
        frame = samples[i * frame_length : (i + 1) * frame_length]
        energies[i] = np.mean(frame * frame)
    return 10.0 * np.log10(energies + ENERGY_FLOOR)


def detect_voiced_segments(waveform, aggressiveness=1):
    """Voiced (start_sample, end_sample) spans at 30 ms frame granularity.

    A frame is voiced when its hangover-smoothed energy exceeds the
    adaptive threshold min(BASE[a], noise_floor + MARGIN[a]). Segments are
    sorted, non-overlapping maximal runs of voiced frames; empty or
    all-silence input yields an empty list.
    """
    if waveform.sample_rate != TARGET_RATE:
        raise ValueError(f"VAD expects {TARGET_RATE} Hz, got {waveform.sample_rate}")
    if aggressiveness not in (0, 1, 2, 3):
        raise ValueError(f"aggressiveness must be 0-3, got {aggressiveness}")
    samples = waveform.samples
    if samples.size == 0:
        return []

    frame_length = int(round(VAD_FRAME_SECONDS * TARGET_RATE))
    raw_db = frame_energies_db(samples, frame_length)

    smoothed = raw_db.copy()
    for i in range(1, smoothed.size):
        smoothed[i] = max(raw_db[i], smoothed[i - 1] - VAD_HANGOVER_DB_PER_FRAME)

    threshold = min(
        VAD_BASE_DB[aggressiveness],
        raw_db.min() + VAD_MARGIN_DB[aggressiveness],
    )
    voiced = smoothed > threshold

    segments = []
    start = None
    for i, flag in enumerate(voiced):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            segments.append((start * frame_length, i * frame_length))
            start = None
    if start is not None:
        segments.append((start * frame_length, samples.size))
    return segments


def extract_voiced(waveform, aggressiveness=1):
    """Concatenation of the voiced segments (the 'voice-only' signal)."""
    segments = detect_voiced_segments(waveform, aggressiveness)
    if not segments:
        return Waveform(np.zeros(0), waveform.sample_rate)
    parts = [waveform.samples[a:b] for a, b in segments]
    return Waveform(np.concatenate(parts), waveform.sample_rate)
