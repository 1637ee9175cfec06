"""Log-mel spectrograms, masking augmentation, and the feature cache.

Frontend parameters: 50 ms Hann window, 12.5 ms hop, 1024-point FFT,
80 triangular mel filters spanning 0-8000 Hz, natural-log energies
clamped at log(1e-10). No padding: T = 1 + floor((len - window) / hop).
"""

from __future__ import annotations

import dataclasses
import os
import struct

import numpy as np

from .audio import TARGET_RATE

WINDOW_SECONDS = 0.050
HOP_SECONDS = 0.0125
N_MELS = 80
FFT_SIZE = 1024
FMIN_HZ = 0.0
FMAX_HZ = 8000.0
ENERGY_FLOOR = 1e-10
LOG_FLOOR = float(np.log(ENERGY_FLOOR))

FEATURE_MAGIC = b"DKSDFEAT"


def mel_from_hz(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def hz_from_mel(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels=N_MELS, fmin=FMIN_HZ, fmax=FMAX_HZ):
    """Center frequency (Hz) of each triangular filter."""
    mels = np.linspace(mel_from_hz(fmin), mel_from_hz(fmax), n_mels + 2)
    return hz_from_mel(mels)[1:-1]


def mel_filterbank(n_mels=N_MELS, sample_rate=TARGET_RATE, n_fft=FFT_SIZE,
                   fmin=FMIN_HZ, fmax=FMAX_HZ):
    """(n_mels, n_fft//2 + 1) triangular filter matrix on the mel scale."""
    edges_hz = hz_from_mel(
        np.linspace(mel_from_hz(fmin), mel_from_hz(fmax), n_mels + 2)
    )
    fft_hz = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    bank = np.zeros((n_mels, fft_hz.size))
    for i in range(n_mels):
        left, center, right = edges_hz[i], edges_hz[i + 1], edges_hz[i + 2]
        rising = (fft_hz - left) / max(center - left, 1e-12)
        falling = (right - fft_hz) / max(right - center, 1e-12)
        bank[i] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


def compute_log_mel(waveform):
    """Log-mel spectrogram as a (T, 80) float32 matrix."""
    if waveform.sample_rate != TARGET_RATE:
        raise ValueError(
            f"features expect {TARGET_RATE} Hz input, got {waveform.sample_rate}"
        )
    window_length = int(round(WINDOW_SECONDS * TARGET_RATE))
    hop_length = int(round(HOP_SECONDS * TARGET_RATE))
    samples = waveform.samples
    if samples.size < window_length:
        raise ValueError(
            f"input too short: {samples.size} samples < one {window_length}-sample window"
        )
    n_frames = 1 + (samples.size - window_length) // hop_length
    window = np.hanning(window_length)
    frames = np.lib.stride_tricks.sliding_window_view(samples, window_length)[
        :: hop_length
    ][:n_frames]
    spectrum = np.abs(np.fft.rfft(frames * window, n=FFT_SIZE, axis=1)) ** 2
    bank = mel_filterbank()
    energies = spectrum @ bank.T
    return np.log(np.maximum(energies, ENERGY_FLOOR)).astype(np.float32)


def spec_augment(spectrogram, rng, probability=0.5):
    """Randomly mask time/frequency stripes with the spectrogram mean.

    Draw order (fixed; tests replay it):
      1. gate = rng.random(); if gate >= probability, return an unchanged copy
      2. n_time = rng.integers(0, 3), n_freq = rng.integers(0, 3); the pair
         is redrawn until at least one mask is due, so a gated utterance is
         always actually altered
      3. per time mask: width = rng.integers(1, ceil(0.10*T) + 1),
         then start = rng.integers(0, T - width + 1)
      4. per frequency mask: width = rng.integers(1, 9),
         then start = rng.integers(0, F - width + 1)
    Masked stripes are set to the mean of the original spectrogram.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    spectrogram = np.asarray(spectrogram)
    t_len, f_len = spectrogram.shape
    if t_len < 10:
        raise ValueError(f"augmentation needs T >= 10, got T={t_len}")
    out = spectrogram.copy()
    if rng.random() >= probability:
        return out

    fill = spectrogram.mean(dtype=np.float64)
    max_time_width = int(np.ceil(0.10 * t_len))
    n_time, n_freq = int(rng.integers(0, 3)), int(rng.integers(0, 3))
    while n_time == 0 and n_freq == 0:
        n_time, n_freq = int(rng.integers(0, 3)), int(rng.integers(0, 3))
    for _ in range(n_time):
        width = int(rng.integers(1, max_time_width + 1))
        start = int(rng.integers(0, t_len - width + 1))
        out[start : start + width, :] = fill
    for _ in range(n_freq):
        width = int(rng.integers(1, 9))
        start = int(rng.integers(0, f_len - width + 1))
        out[:, start : start + width] = fill
    return out


# -- feature cache ------------------------------------------------------------


def save_features(path, features):
    """Write a (T, F) float32 matrix in the binary cache format, atomically."""
    features = np.ascontiguousarray(features, dtype="<f4")
    if features.ndim != 2:
        raise ValueError(f"expected a T x F matrix, got shape {features.shape}")
    t_len, f_len = features.shape
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", t_len, f_len))
        fh.write(features.tobytes())
    os.replace(tmp, path)


def load_features(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != FEATURE_MAGIC:
        raise ValueError(f"bad feature-cache magic in {path}: {blob[:8]!r}")
    t_len, f_len = struct.unpack_from("<II", blob, 8)
    expected = 16 + 4 * t_len * f_len
    if len(blob) != expected:
        raise ValueError(
            f"feature cache {path} has {len(blob)} bytes, expected {expected}"
        )
    return (
        np.frombuffer(blob, dtype="<f4", offset=16)
        .reshape(t_len, f_len)
        .astype(np.float32)
    )


# -- manifests ----------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    speaker_id: str
    path: str


@dataclasses.dataclass
class Utterance:
    """A manifest record with its cached features loaded."""

    utterance_id: str
    speaker_id: str
    features: np.ndarray


def write_manifest(path, records):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(f"{rec.utterance_id}\t{rec.speaker_id}\t{rec.path}\n")
    os.replace(tmp, path)


def read_manifest(path):
    records = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}"
                )
            utterance_id, speaker_id, rel_path = parts
            if utterance_id in seen:
                raise ValueError(f"{path}:{lineno}: duplicate utterance id {utterance_id}")
            if not speaker_id:
                raise ValueError(f"{path}:{lineno}: empty speaker id")
            seen.add(utterance_id)
            records.append(UtteranceRecord(utterance_id, speaker_id, rel_path))
    return records


def load_dataset(manifest_path, root=None):
    """Load every record's cached features; relative paths resolve against
    the manifest's directory unless an explicit root is given.

    Scans the whole manifest before loading so one error lists every
    utterance whose feature cache is absent.
    """
    if root is None:
        root = os.path.dirname(os.path.abspath(manifest_path))
    resolved = []
    for rec in read_manifest(manifest_path):
        path = rec.path
        if not os.path.isabs(path):
            path = os.path.join(root, path)
        resolved.append((rec, path))
    missing = [rec.utterance_id for rec, path in resolved if not os.path.exists(path)]
    if missing:
        raise FileNotFoundError(
            f"feature caches missing for {len(missing)} utterances: {missing}"
        )
    return [
        Utterance(rec.utterance_id, rec.speaker_id, load_features(path))
        for rec, path in resolved
    ]
