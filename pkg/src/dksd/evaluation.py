"""Speaker-verification evaluation: pooled embeddings, cosine trials,
equal error rate, 2D projections, and horizon/loss ablation sweeps.

Embeddings are temporal means of a branch's latent sequence over the full
utterance (no cropping at evaluation time). Trials pair every same-speaker
combination with seeded impostor sampling at a configurable ratio. The EER
sweep enumerates every decision threshold that can matter — the sorted
scores, midpoints of adjacent scores, and sentinels beyond both ends — and
interpolates linearly between the two bracketing thresholds when no
candidate hits FAR = FRR exactly.
"""

from __future__ import annotations

import dataclasses
import itertools
import logging

import numpy as np

from . import model as md
from . import training as tr
from .autodiff import Tensor, no_grad

logger = logging.getLogger(__name__)

POOLING_METHOD = "temporal-mean"
BRANCHES = ("speaker", "content")


class UndefinedScoreError(ValueError):
    """Cosine similarity is undefined for a zero-length embedding."""


class DegenerateProjectionError(ValueError):
    """Embedding cloud has numerical rank < 2; no 2D projection exists."""


@dataclasses.dataclass
class Embedding:
    vector: np.ndarray
    source: str
    utterance_id: str

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1:
            raise ValueError(f"embedding must be a vector, got {self.vector.shape}")
        if not np.all(np.isfinite(self.vector)):
            raise ValueError(f"embedding for {self.utterance_id} has non-finite entries")


def pool_embedding(z, source="speaker", utterance_id=""):
    """Temporal mean over the rows of a (T, k) latent sequence."""
    data = z.data if isinstance(z, Tensor) else np.asarray(z)
    if data.ndim != 2 or data.shape[0] < 1:
        raise ValueError(f"expected a non-empty T x k sequence, got {data.shape}")
    return Embedding(data.mean(axis=0, dtype=np.float64), source, utterance_id)


def cosine_score(a, b):
    """dot(a, b) / (|a| * |b|), in [-1, 1]."""
    va = a.vector if isinstance(a, Embedding) else np.asarray(a, dtype=np.float64)
    vb = b.vector if isinstance(b, Embedding) else np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise UndefinedScoreError("cosine score is undefined for a zero vector")
    return float(np.clip(va @ vb / (na * nb), -1.0, 1.0))


# -- trials ---------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_id: str
    label: int  # 1 genuine, 0 impostor


@dataclasses.dataclass
class TrialSet:
    trials: list

    @property
    def n_genuine(self):
        return sum(t.label for t in self.trials)

    @property
    def n_impostor(self):
        return len(self.trials) - self.n_genuine


def build_trials(records, max_impostor_per_genuine=1, seed=0):
    """All same-speaker pairs plus seeded impostor pairs at the given ratio.

    ``records`` need ``utterance_id`` and ``speaker_id`` attributes. Impostor
    pairs are sampled without replacement up to
    max_impostor_per_genuine * n_genuine.
    """
    ids = [r.utterance_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate utterance ids in trial source")
    speakers = [r.speaker_id for r in records]

    genuine, cross = [], []
    for i, j in itertools.combinations(range(len(records)), 2):
        pair = (ids[i], ids[j])
        if speakers[i] == speakers[j]:
            genuine.append(pair)
        else:
            cross.append(pair)
    if not genuine:
        raise ValueError("no genuine pairs possible: every speaker has one utterance")

    rng = np.random.default_rng(seed)
    n_impostor = min(len(cross), int(max_impostor_per_genuine * len(genuine)))
    chosen = rng.choice(len(cross), size=n_impostor, replace=False)
    trials = [Trial(a, b, 1) for a, b in genuine]
    trials.extend(Trial(*cross[int(idx)], 0) for idx in sorted(chosen))
    return TrialSet(trials)


def write_trials(path, trial_set):
    import os

    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for t in trial_set.trials:
            fh.write(f"{t.enroll_id}\t{t.test_id}\t{t.label}\n")
    os.replace(tmp, path)


def read_trials(path):
    trials = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[2] not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: bad trial line {line!r}")
            trials.append(Trial(parts[0], parts[1], int(parts[2])))
    return TrialSet(trials)


# -- equal error rate -----------------------------------------------------------


@dataclasses.dataclass
class EERResult:
    eer: float  # percent
    threshold: float
    far_curve: list  # (threshold, FAR) points over the candidate sweep
    frr_curve: list


def _candidate_thresholds(scores):
    """Every threshold at which FAR/FRR can change, plus flanking sentinels."""
    unique = np.unique(scores)
    mids = (unique[:-1] + unique[1:]) / 2.0
    return np.concatenate(([unique[0] - 1.0], unique, mids, [unique[-1] + 1.0]))


def compute_eer(genuine_scores, impostor_scores):
    """EER (percent) of the threshold sweep over both score lists.

    FAR(e) = fraction of impostor scores >= e; FRR(e) = fraction of genuine
    scores < e. FAR - FRR is non-increasing in e, so the crossing is unique
    up to plateaus: a candidate hitting FAR = FRR exactly is reported as-is,
    otherwise the EER is linearly interpolated between the two bracketing
    candidates.
    """
    genuine = np.asarray(genuine_scores, dtype=np.float64)
    impostor = np.asarray(impostor_scores, dtype=np.float64)
    if genuine.size == 0 or impostor.size == 0:
        raise ValueError("both genuine and impostor score lists must be non-empty")

    candidates = np.sort(_candidate_thresholds(np.concatenate([genuine, impostor])))
    far = np.array([(impostor >= e).mean() for e in candidates])
    frr = np.array([(genuine < e).mean() for e in candidates])
    far_curve = list(zip(candidates.tolist(), far.tolist()))
    frr_curve = list(zip(candidates.tolist(), frr.tolist()))

    diff = far - frr
    exact = np.nonzero(diff == 0.0)[0]
    if exact.size:
        i = int(exact[0])
        return EERResult(100.0 * far[i], float(candidates[i]), far_curve, frr_curve)

    # diff starts at +1 (accept all) and ends at -1 (reject all); find the
    # sign change and interpolate both rates at the implied crossing.
    above = np.nonzero(diff > 0)[0]
    i = int(above[-1])
    d1, d2 = diff[i], diff[i + 1]
    t = d1 / (d1 - d2)
    eer = far[i] + t * (far[i + 1] - far[i])
    threshold = candidates[i] + t * (candidates[i + 1] - candidates[i])
    return EERResult(100.0 * eer, float(threshold), far_curve, frr_curve)


# -- end-to-end verification -----------------------------------------------------


def embed_utterances(params, config, utterances, branch):
    """Pool the selected branch's latents for every utterance (no grads)."""
    if branch not in BRANCHES:
        raise ValueError(f"branch must be one of {BRANCHES}, got {branch!r}")
    encoder = md.encode_dynamics if branch == "speaker" else md.encode_content
    embeddings = []
    with no_grad():
        for utt in utterances:
            z = encoder(utt.features, params, config)
            embeddings.append(pool_embedding(z, branch, utt.utterance_id))
    return embeddings


def score_trials(embeddings, trial_set):
    """Cosine scores split by label; returns (genuine, impostor) arrays."""
    table = {e.utterance_id: e for e in embeddings}
    missing = {
        uid
        for t in trial_set.trials
        for uid in (t.enroll_id, t.test_id)
        if uid not in table
    }
    if missing:
        raise ValueError(f"trials reference missing utterances: {sorted(missing)}")
    genuine, impostor = [], []
    for t in trial_set.trials:
        score = cosine_score(table[t.enroll_id], table[t.test_id])
        (genuine if t.label else impostor).append(score)
    return np.array(genuine), np.array(impostor)


def verify(params, config, utterances, branch, seed=0,
           max_impostor_per_genuine=1, trial_set=None):
    """Speaker-verification EER of one branch on a test set.

    Builds trials from the utterance list (unless an explicit trial set is
    given), embeds, scores, and sweeps. Deterministic given (parameters,
    utterances, seed).
    """
    if trial_set is None:
        trial_set = build_trials(utterances, max_impostor_per_genuine, seed)
    embeddings = embed_utterances(params, config, utterances, branch)
    genuine, impostor = score_trials(embeddings, trial_set)
    return compute_eer(genuine, impostor), trial_set


# -- 2D projection ----------------------------------------------------------------


RANK_TOLERANCE = 1e-12


def project_2d(embeddings):
    """PCA onto the top-2 principal components of the centered embeddings.

    Component signs are fixed by making each component's largest-magnitude
    loading positive. Raises when the centered cloud has numerical rank < 2
    (second singular value below RANK_TOLERANCE relative to the first).
    """
    if len(embeddings) < 3:
        raise ValueError(f"need at least 3 embeddings, got {len(embeddings)}")
    matrix = np.stack([e.vector for e in embeddings]).astype(np.float64)
    centered = matrix - matrix.mean(axis=0)
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    if singular[0] == 0.0 or singular[1] / singular[0] < RANK_TOLERANCE:
        raise DegenerateProjectionError(
            f"embedding cloud has numerical rank < 2 "
            f"(singular values {singular[:2].tolist()})"
        )
    components = vt[:2].copy()
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    coords = centered @ components.T
    return [
        (e.utterance_id, float(x), float(y))
        for e, (x, y) in zip(embeddings, coords)
    ]


# -- ablation sweeps ---------------------------------------------------------------


LOSS_MODES = ("total", "pred", "rec")


@dataclasses.dataclass
class AblationRow:
    label: str
    speaker_eer_mean: float
    speaker_eer_std: float
    content_eer_mean: float
    speaker_eers: list
    content_eers: list


def _run_once(model_cfg, train_cfg, train_set, val_set, test_set, seed):
    params, _ = md.build_model(model_cfg, seed=seed)
    cfg = dataclasses.replace(train_cfg, seed=seed)
    tr.train(params, model_cfg, cfg, train_set, val_set)
    speaker, _ = verify(params, model_cfg, test_set, "speaker", seed=seed)
    content, _ = verify(params, model_cfg, test_set, "content", seed=seed)
    return speaker.eer, content.eer


def _sweep(configs, train_cfg, train_set, val_set, test_set, seeds):
    rows = []
    for label, model_cfg, cfg_override in configs:
        speaker_eers, content_eers = [], []
        for seed in seeds:
            cfg = cfg_override if cfg_override is not None else train_cfg
            s, c = _run_once(model_cfg, cfg, train_set, val_set, test_set, seed)
            speaker_eers.append(s)
            content_eers.append(c)
            logger.info(
                "%s seed %d: speaker EER %.2f%%, content EER %.2f%%", label, seed, s, c
            )
        rows.append(
            AblationRow(
                label=label,
                speaker_eer_mean=float(np.mean(speaker_eers)),
                speaker_eer_std=float(np.std(speaker_eers)),
                content_eer_mean=float(np.mean(content_eers)),
                speaker_eers=speaker_eers,
                content_eers=content_eers,
            )
        )
    return rows


def ablate_horizon(model_cfg, train_cfg, train_set, val_set, test_set,
                   m_values, seeds):
    """Train/evaluate once per (M, seed); rows report speaker EER mean/std."""
    for m in m_values:
        if not 1 <= m <= train_cfg.crop_frames - 2:
            raise ValueError(
                f"M={m} outside [1, {train_cfg.crop_frames - 2}] for "
                f"crop_frames={train_cfg.crop_frames}"
            )
    configs = [
        (f"M={m}", dataclasses.replace(model_cfg, m_steps=m), None)
        for m in m_values
    ]
    return _sweep(configs, train_cfg, train_set, val_set, test_set, seeds)


def ablate_losses(model_cfg, train_cfg, train_set, val_set, test_set, seeds):
    """Objective ablation: full objective, prediction-only, reconstruction-only.

    'pred' zeroes the eigenvalue penalty; 'rec' never leaves the
    reconstruction-only phase.
    """
    rec_only_train = dataclasses.replace(
        train_cfg, pretrain_epochs=train_cfg.max_epochs
    )
    configs = [
        ("total", model_cfg, None),
        ("pred", dataclasses.replace(model_cfg, w_eigen=0.0), None),
        ("rec", model_cfg, rec_only_train),
    ]
    return _sweep(configs, train_cfg, train_set, val_set, test_set, seeds)
