"""Two-phase optimization: reconstruction-only pretraining, then the full
objective (reconstruction + multi-step prediction + eigenvalue penalty).

The optimizer is AdamW with decoupled weight decay; decay never touches
bias parameters. Batches are fixed-length random crops (optionally
mask-augmented); validation uses deterministic center crops and never
mutates parameters or optimizer state. Every random draw comes from one
seeded generator, so a (seed, data, config) triple pins the entire run.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import time

import numpy as np

from . import features as ft
from . import koopman as km
from . import model as md
from .autodiff import Tensor, no_grad

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

HISTORY_FIELDS = (
    "epoch", "phase", "split", "l_rec", "l_pred", "l_eigen", "l_total", "seconds"
)


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; message carries the offending batch."""


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 500
    pretrain_epochs: int = 30
    learning_rate: float = 1e-4
    weight_decay: float = 0.4
    batch_size: int = 32
    augment_probability: float = 0.5
    early_stop_patience: int = 20
    crop_frames: int = 128
    grad_clip: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.pretrain_epochs < 0:
            raise ValueError(
                f"pretrain_epochs must be >= 0, got {self.pretrain_epochs}"
            )
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.augment_probability <= 1.0:
            raise ValueError(
                f"augment_probability must be in [0, 1], got {self.augment_probability}"
            )
        if self.early_stop_patience < 1:
            raise ValueError(
                f"early_stop_patience must be >= 1, got {self.early_stop_patience}"
            )
        if self.crop_frames < 10:
            raise ValueError(
                f"crop_frames must be >= 10 (augmentation minimum), "
                f"got {self.crop_frames}"
            )
        if self.grad_clip <= 0:
            raise ValueError(f"grad_clip must be > 0, got {self.grad_clip}")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, mapping):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**mapping)


# -- optimizer ----------------------------------------------------------------


@dataclasses.dataclass
class AdamState:
    step: int
    m: dict
    v: dict

    @classmethod
    def fresh(cls, values):
        return cls(
            step=0,
            m={k: np.zeros_like(a) for k, a in values.items()},
            v={k: np.zeros_like(a) for k, a in values.items()},
        )


def adamw_step(values, grads, state, lr, decay, decay_exempt=frozenset()):
    """One decoupled-weight-decay adaptive-moment update, in place.

    ``values``/``grads`` map parameter name to ndarray; entries with no
    gradient are left untouched. Decay subtracts lr*decay*theta from the
    pre-update weights directly — it never enters the moment buffers.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for name, value in values.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        if decay and name not in decay_exempt:
            value -= lr * decay * value
        value -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


class AdamW:
    """Optimizer bound to a parameter table; biases are decay-exempt."""

    def __init__(self, params, lr, weight_decay):
        self.params = params
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.decay_exempt = frozenset(
            name for name in params.names() if md.is_bias_name(name)
        )
        self.state = AdamState.fresh({n: t.data for n, t in params.items()})

    def step(self):
        values = {name: t.data for name, t in self.params.items()}
        grads = {name: t.grad for name, t in self.params.items()}
        adamw_step(
            values, grads, self.state, self.lr, self.weight_decay,
            self.decay_exempt,
        )


def clip_gradients(params, max_norm):
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for tensor in params.tensors():
        if tensor.grad is not None:
            total += float((tensor.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for tensor in params.tensors():
            if tensor.grad is not None:
                tensor.grad *= scale
    return norm


# -- history ------------------------------------------------------------------


@dataclasses.dataclass
class EpochRecord:
    epoch: int
    phase: str
    split: str
    l_rec: float
    l_pred: float
    l_eigen: float
    l_total: float
    seconds: float


class TrainHistory:
    """Per-epoch loss records for the train and validation splits."""

    def __init__(self):
        self.records = []

    def append(self, record):
        self.records.append(record)

    def rows(self, split=None, phase=None):
        return [
            r
            for r in self.records
            if (split is None or r.split == split)
            and (phase is None or r.phase == phase)
        ]

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(HISTORY_FIELDS)
            for r in self.records:
                writer.writerow(
                    [
                        r.epoch,
                        r.phase,
                        r.split,
                        f"{r.l_rec:.8g}",
                        f"{r.l_pred:.8g}",
                        f"{r.l_eigen:.8g}",
                        f"{r.l_total:.8g}",
                        f"{r.seconds:.4f}",
                    ]
                )


# -- loss evaluation ----------------------------------------------------------


@dataclasses.dataclass
class BatchLosses:
    l_rec: Tensor
    l_pred: Tensor | None
    l_eigen: Tensor | None
    l_total: Tensor
    operator: km.KoopmanOperator | None


def batch_losses(x_batch, params, model_cfg, full_phase):
    """Forward pass and loss assembly for one (B, T, F) batch.

    In the pretraining phase the objective is the reconstruction loss
    alone and no operator is estimated; in the full phase the dynamics
    latents additionally pay the multi-step prediction loss and the
    eigenvalue penalty of the batch-shared operator.
    """
    x = x_batch if isinstance(x_batch, Tensor) else Tensor(x_batch)
    n = x.shape[0]
    z_s, z_c, x_hat = md.reconstruct(x, params, model_cfg)
    l_rec = md.reconstruction_loss(x_hat, x, n)
    if not full_phase:
        return BatchLosses(l_rec, None, None, l_rec, None)

    pair, targets = km.batch_snapshots(z_s, model_cfg.m_steps)
    operator = km.estimate_koopman(pair, model_cfg.ridge_lambda)
    predictions = km.multi_step_forecast(pair, operator, model_cfg.m_steps)
    bundle = km.ForecastBundle(predictions=predictions, targets=targets)
    l_pred = km.prediction_loss(bundle, n)
    l_eigen = km.eigen_loss(operator)
    l_total = md.total_loss(
        l_rec, l_pred, l_eigen,
        (model_cfg.w_rec, model_cfg.w_pred, model_cfg.w_eigen),
    )
    return BatchLosses(l_rec, l_pred, l_eigen, l_total, operator)


def _eligible(utterances, crop, split):
    kept = [u for u in utterances if u.features.shape[0] >= crop]
    if not kept:
        raise ValueError(
            f"{split} split has no utterances of at least {crop} frames"
        )
    return kept


def _center_crop(features_, crop):
    start = (features_.shape[0] - crop) // 2
    return features_[start : start + crop]


def _mean_losses(sums, counts):
    return {k: (sums[k] / counts if counts else float("nan")) for k in sums}


def evaluate_split(params, model_cfg, utterances, crop, batch_size, full_phase):
    """Loss means over deterministic center crops; touches no state."""
    sums = {"l_rec": 0.0, "l_pred": 0.0, "l_eigen": 0.0, "l_total": 0.0}
    total = 0
    with no_grad():
        for i in range(0, len(utterances), batch_size):
            chunk = utterances[i : i + batch_size]
            x = np.stack([_center_crop(u.features, crop) for u in chunk])
            losses = batch_losses(x, params, model_cfg, full_phase)
            n = len(chunk)
            sums["l_rec"] += losses.l_rec.item() * n
            sums["l_total"] += losses.l_total.item() * n
            if full_phase:
                sums["l_pred"] += losses.l_pred.item() * n
                sums["l_eigen"] += losses.l_eigen.item() * n
            total += n
    means = _mean_losses(sums, total)
    if not full_phase:
        means["l_pred"] = float("nan")
        means["l_eigen"] = float("nan")
    return means


@dataclasses.dataclass
class TrainResult:
    epoch: int
    phase: str
    val_total: float
    epochs_run: int


def train(params, model_cfg, train_cfg, train_utterances, val_utterances,
          checkpoint_path=None, history_path=None):
    """Run the two-phase protocol; leaves ``params`` at the best checkpoint.

    Epochs 1..pretrain_epochs optimize the reconstruction loss only (no
    operator estimation); later epochs optimize the full weighted
    objective. The best checkpoint is the lowest validation total within
    the most advanced phase reached, and early stopping (configured
    patience) applies only in the full phase.
    """
    crop = train_cfg.crop_frames
    if crop < model_cfg.m_steps + 2:
        raise ValueError(
            f"crop_frames={crop} too short for m_steps={model_cfg.m_steps}; "
            f"need at least m_steps + 2 frames"
        )
    train_set = _eligible(train_utterances, crop, "train")
    val_set = _eligible(val_utterances, crop, "validation")

    rng = np.random.default_rng(train_cfg.seed)
    optimizer = AdamW(params, train_cfg.learning_rate, train_cfg.weight_decay)
    history = TrainHistory()

    best = None  # (phase_rank, -val_total is lower-better) handled explicitly
    epochs_since_improvement = 0
    epochs_run = 0

    for epoch in range(1, train_cfg.max_epochs + 1):
        full_phase = epoch > train_cfg.pretrain_epochs
        phase = "full" if full_phase else "pretrain"
        epochs_run = epoch

        started = time.perf_counter()
        order = rng.permutation(len(train_set))
        sums = {"l_rec": 0.0, "l_pred": 0.0, "l_eigen": 0.0, "l_total": 0.0}
        seen = 0
        for batch_index, lo in enumerate(range(0, len(order), train_cfg.batch_size)):
            chunk = [train_set[j] for j in order[lo : lo + train_cfg.batch_size]]
            crops = []
            for utt in chunk:
                t_len = utt.features.shape[0]
                start = int(rng.integers(0, t_len - crop + 1))
                window = utt.features[start : start + crop]
                crops.append(
                    ft.spec_augment(window, rng, train_cfg.augment_probability)
                )
            x = np.stack(crops)

            params.zero_grad()
            losses = batch_losses(x, params, model_cfg, full_phase)
            total_value = losses.l_total.item()
            if not np.isfinite(total_value):
                condition = (
                    f"{np.linalg.cond(losses.operator.k.data.astype(np.float64)):.3e}"
                    if losses.operator is not None
                    else "n/a (pretraining: no operator)"
                )
                raise TrainingDivergedError(
                    f"non-finite loss {total_value} at epoch {epoch}, "
                    f"batch {batch_index} "
                    f"(utterances {[u.utterance_id for u in chunk]}); "
                    f"operator condition number: {condition}"
                )
            losses.l_total.backward()
            clip_gradients(params, train_cfg.grad_clip)
            optimizer.step()

            n = len(chunk)
            sums["l_rec"] += losses.l_rec.item() * n
            sums["l_total"] += total_value * n
            if full_phase:
                sums["l_pred"] += losses.l_pred.item() * n
                sums["l_eigen"] += losses.l_eigen.item() * n
            seen += n
        train_means = _mean_losses(sums, seen)
        if not full_phase:
            train_means["l_pred"] = float("nan")
            train_means["l_eigen"] = float("nan")
        train_seconds = time.perf_counter() - started

        history.append(EpochRecord(
            epoch, phase, "train",
            train_means["l_rec"], train_means["l_pred"],
            train_means["l_eigen"], train_means["l_total"], train_seconds,
        ))

        started = time.perf_counter()
        val_means = evaluate_split(
            params, model_cfg, val_set, crop, train_cfg.batch_size, full_phase
        )
        val_seconds = time.perf_counter() - started
        history.append(EpochRecord(
            epoch, phase, "val",
            val_means["l_rec"], val_means["l_pred"],
            val_means["l_eigen"], val_means["l_total"], val_seconds,
        ))
        logger.info(
            "epoch %d (%s): train total %.5f, val total %.5f",
            epoch, phase, train_means["l_total"], val_means["l_total"],
        )

        # Model selection is phase-consistent: entering the full phase
        # resets the incumbent so pretraining scores never outrank
        # full-objective ones.
        metric = val_means["l_total"]
        if best is not None and best["phase"] == "pretrain" and full_phase:
            best = None
        if best is None or metric < best["val_total"]:
            best = {
                "epoch": epoch,
                "phase": phase,
                "val_total": metric,
                "values": params.copy_values(),
            }
            epochs_since_improvement = 0
        else:
            epochs_since_improvement += 1
        if full_phase and epochs_since_improvement >= train_cfg.early_stop_patience:
            logger.info(
                "early stop at epoch %d (no improvement for %d epochs)",
                epoch, epochs_since_improvement,
            )
            break

    params.load_values(best["values"])
    result = TrainResult(
        epoch=best["epoch"],
        phase=best["phase"],
        val_total=best["val_total"],
        epochs_run=epochs_run,
    )
    if checkpoint_path is not None:
        metadata = {
            "best_epoch": result.epoch,
            "best_phase": result.phase,
            "best_val_total": result.val_total,
            "epochs_run": result.epochs_run,
            "train_config": train_cfg.to_dict(),
            # Decay policy note: decay applies to all non-bias parameters,
            # recurrent weights included.
            "weight_decay_policy": "all non-bias parameters",
        }
        md.save_checkpoint(checkpoint_path, params, model_cfg, metadata)
    if history_path is not None:
        history.to_csv(history_path)
    return result, history
