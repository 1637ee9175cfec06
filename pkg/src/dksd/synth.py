"""Synthetic two-timescale spectrogram corpus for desk-scale experiments.

Each class owns a static broadband level plus a faint spectral shape (the
slow factor standing in for speaker identity); each utterance overlays
fast-moving content — a Gaussian ridge of per-utterance height whose
center traces whole cycles of a random sinusoid — plus per-frame jitter.
The class signal is deliberately subtle next to the ridge, mirroring how
vocal timbre is subtle next to phonetic content: a frame-level view is
dominated by the fast factor, while the class level survives temporal
averaging. The per-utterance ridge height is the static content cue that
keeps same-class utterances apart in any representation that has to
reconstruct the ridge.
"""

from __future__ import annotations

import os

import numpy as np
from scipy.stats import norm

from .features import UtteranceRecord, save_features, write_manifest

N_MELS = 80
ENVELOPE_HARMONICS = 4
ENVELOPE_SCALE = 0.01
ENVELOPE_OFFSET_SCALE = 0.8
BUMP_SCALE = 2.5
BUMP_AMP_SPREAD = 0.4
JITTER_SCALE = 0.2


def class_envelope(rng, n_mels=N_MELS, scale=ENVELOPE_SCALE):
    """Faint smooth spectral shape (low-order cosine series) so every class
    envelope is a genuine 80-dim curve; the class separation itself lives in
    the broadband level from class_levels."""
    grid = np.linspace(0.0, np.pi, n_mels)
    envelope = np.zeros(n_mels)
    for j in range(1, ENVELOPE_HARMONICS + 1):
        amplitude = rng.normal(0.0, scale / j)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        envelope += amplitude * np.cos(j * grid + phase)
    return envelope


def class_levels(seed, n_classes, offset_scale=ENVELOPE_OFFSET_SCALE):
    """Broadband level per class: equally spaced standard-normal quantiles
    scaled by offset_scale, assigned to class indices in seeded shuffled
    order.

    A broadband level difference is the kind of utterance-global statistic
    the content branch's per-frame normalization shrugs off, so it lands in
    the dynamics branch. Stratified levels keep every class pair separable;
    i.i.d. draws routinely produce near-duplicate classes."""
    quantiles = norm.ppf((np.arange(n_classes) + 0.5) / n_classes)
    order = np.random.default_rng([seed, 2]).permutation(n_classes)
    return offset_scale * quantiles[order]


RIDGE_SIGMA = 6.0


def utterance_content(rng, t_frames, n_mels=N_MELS, bump_scale=BUMP_SCALE,
                      amp_spread=BUMP_AMP_SPREAD, jitter_scale=JITTER_SCALE):
    """Fast factor: moving Gaussian ridge plus white per-frame jitter.

    The ridge center traces a whole number of sinusoid cycles with random
    count and phase, so the time-averaged ridge center is (up to
    discretization) the same for every utterance and class separation stays
    confined to the envelope. The ridge height is drawn per utterance: a
    loudness-like scale that any branch reconstructing the ridge has to
    encode, which keeps content embeddings spread out within each class."""
    cycles = float(rng.integers(2, 5))
    phase = rng.uniform(0.0, 2.0 * np.pi)
    amplitude = bump_scale * rng.uniform(1.0 - amp_spread, 1.0 + amp_spread)
    t = np.arange(t_frames)
    center = n_mels / 2.0 + (n_mels / 3.0) * np.sin(
        2.0 * np.pi * cycles * t / t_frames + phase
    )
    bins = np.arange(n_mels)
    ridge = amplitude * np.exp(
        -((bins[None, :] - center[:, None]) ** 2) / (2.0 * RIDGE_SIGMA**2)
    )
    return ridge + jitter_scale * rng.standard_normal((t_frames, n_mels))


def synthesize_utterance(seed, class_idx, utt_idx, t_frames,
                         envelope_scale=ENVELOPE_SCALE,
                         envelope_offset_scale=ENVELOPE_OFFSET_SCALE,
                         bump_scale=BUMP_SCALE, amp_spread=BUMP_AMP_SPREAD,
                         jitter_scale=JITTER_SCALE, n_classes=8):
    """Deterministic (T, 80) float32 features for one utterance."""
    if not 0 <= class_idx < n_classes:
        raise ValueError(
            f"class index {class_idx} outside [0, {n_classes})"
        )
    env_rng = np.random.default_rng([seed, 0, class_idx])
    utt_rng = np.random.default_rng([seed, 1, class_idx, utt_idx])
    level = class_levels(seed, n_classes, envelope_offset_scale)[class_idx]
    envelope = class_envelope(env_rng, scale=envelope_scale) + level
    content = utterance_content(
        utt_rng, t_frames, bump_scale=bump_scale, amp_spread=amp_spread,
        jitter_scale=jitter_scale,
    )
    return (envelope[None, :] + content).astype(np.float32)


def generate_synthetic_corpus(n_classes, utts_per_class, t_frames, seed,
                              out_dir, envelope_scale=ENVELOPE_SCALE,
                              envelope_offset_scale=ENVELOPE_OFFSET_SCALE,
                              bump_scale=BUMP_SCALE,
                              amp_spread=BUMP_AMP_SPREAD,
                              jitter_scale=JITTER_SCALE):
    """Write the feature cache and manifest; returns the records.

    Layout: <out_dir>/features/<utterance_id>.feat plus
    <out_dir>/manifest.tsv with cache paths relative to out_dir.
    """
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    if utts_per_class < 2:
        raise ValueError(f"need at least 2 utterances per class, got {utts_per_class}")
    if t_frames < 32:
        raise ValueError(f"need T >= 32, got {t_frames}")

    feature_dir = os.path.join(out_dir, "features")
    os.makedirs(feature_dir, exist_ok=True)
    records = []
    for c in range(n_classes):
        speaker_id = f"class{c:02d}"
        for u in range(utts_per_class):
            utterance_id = f"{speaker_id}_utt{u:03d}"
            features = synthesize_utterance(
                seed, c, u, t_frames,
                envelope_scale=envelope_scale,
                envelope_offset_scale=envelope_offset_scale,
                bump_scale=bump_scale,
                amp_spread=amp_spread,
                jitter_scale=jitter_scale,
                n_classes=n_classes,
            )
            rel_path = os.path.join("features", f"{utterance_id}.feat")
            save_features(os.path.join(out_dir, rel_path), features)
            records.append(UtteranceRecord(utterance_id, speaker_id, rel_path))
    write_manifest(os.path.join(out_dir, "manifest.tsv"), records)
    return records


def split_records(records, train_frac=0.8, val_frac=0.1):
    """Per-class split into train/val/test by utterance position."""
    if train_frac <= 0 or val_frac < 0 or train_frac + val_frac >= 1:
        raise ValueError(
            f"invalid split fractions train={train_frac}, val={val_frac}"
        )
    by_class = {}
    for rec in records:
        by_class.setdefault(rec.speaker_id, []).append(rec)
    train, val, test = [], [], []
    for speaker_id in sorted(by_class):
        group = by_class[speaker_id]
        n = len(group)
        n_train = max(1, int(round(train_frac * n)))
        n_val = max(1, int(round(val_frac * n)))
        if n_train + n_val >= n:
            raise ValueError(
                f"class {speaker_id} has {n} utterances, too few for the split"
            )
        train.extend(group[:n_train])
        val.extend(group[n_train : n_train + n_val])
        test.extend(group[n_train + n_val :])
    return train, val, test
