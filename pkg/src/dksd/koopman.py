"""Multi-step Koopman operator estimation on latent sequences.

A latent sequence Z (T x k) is sliced into a temporal prefix, a pair of
one-step-shifted snapshot matrices, and M forecast targets. The operator
K is the ridge-regularized least-squares map from the minus snapshot to
the plus snapshot; forecasts are iterated applications of K. Losses keep
gradients flowing back into the latents so the encoder that produced
them can be trained.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ComplexSpectrum, SingularSystemError, Tensor

# Incremented on every operator estimation; training instrumentation
# asserts it stays at zero during reconstruction-only pretraining.
_estimation_count = 0


def estimation_count():
    return _estimation_count


def reset_estimation_count():
    global _estimation_count
    _estimation_count = 0


@dataclass
class SnapshotPair:
    """Two time-shifted views of one or more latent sequences.

    Row t of ``minus`` is row t of the source prefix, row t of ``plus``
    is row t+1; both share shape (rows, k). Batched pairs are vertical
    stacks of per-sequence pairs.
    """

    minus: Tensor
    plus: Tensor

    def __post_init__(self):
        if self.minus.shape != self.plus.shape:
            raise ValueError(
                f"snapshot shapes differ: {self.minus.shape} vs {self.plus.shape}"
            )

    @property
    def rows(self):
        return self.minus.shape[0]

    @property
    def k(self):
        return self.minus.shape[1]


@dataclass
class KoopmanOperator:
    """A k x k linear latent propagator with its ridge weight."""

    k: Tensor
    ridge_lambda: float
    _spectrum: ComplexSpectrum | None = field(default=None, repr=False)

    @property
    def dim(self):
        return self.k.shape[0]

    @property
    def eigenvalues(self):
        if self._spectrum is None:
            self._spectrum = ComplexSpectrum.from_matrix(self.k)
        return self._spectrum


@dataclass
class ForecastBundle:
    """Aligned forecasts and ground-truth targets for horizons 1..M."""

    predictions: list
    targets: list

    def __post_init__(self):
        if len(self.predictions) != len(self.targets):
            raise ValueError("prediction/target horizon counts differ")
        for m, (p, t) in enumerate(zip(self.predictions, self.targets), start=1):
            if p.shape != t.shape:
                raise ValueError(
                    f"horizon {m}: prediction shape {p.shape} != target shape {t.shape}"
                )

    @property
    def horizon(self):
        return len(self.predictions)


def _check_horizon(t, m):
    if t <= 2:
        raise ValueError(f"sequence length must exceed 2, got T={t}")
    if not 1 <= m <= t - 2:
        raise ValueError(f"horizon M={m} outside valid range [1, {t - 2}] for T={t}")


def split_prefix(z, m):
    """Slice a (T, k) latent sequence for an M-step forecasting problem.

    Returns (prefix, SnapshotPair, targets): the prefix keeps rows
    [0, T-M); the snapshots are its two one-step-shifted views of
    T-M-1 rows; target m (1-based) holds rows [m, T-M+m-1), so every
    target aligns row-for-row with minus @ K^m.
    """
    if not isinstance(z, Tensor):
        z = Tensor(z)
    if z.ndim != 2:
        raise ValueError(f"expected a (T, k) sequence, got shape {z.shape}")
    t = z.shape[0]
    _check_horizon(t, m)

    prefix = z[0 : t - m]
    pair = SnapshotPair(minus=z[0 : t - m - 1], plus=z[1 : t - m])
    targets = [z[step : t - m + step - 1] for step in range(1, m + 1)]
    return prefix, pair, targets


def batch_snapshots(z, m):
    """Batched split: (B, T, k) -> stacked SnapshotPair + stacked targets.

    Per-sequence slices are stacked vertically so one shared operator is
    estimated from the whole minibatch.
    """
    if z.ndim != 3:
        raise ValueError(f"expected a (B, T, k) batch, got shape {z.shape}")
    b, t, k = z.shape
    _check_horizon(t, m)
    rows = t - m - 1

    def flat(sl):
        return sl.reshape(b * rows, k)

    pair = SnapshotPair(
        minus=flat(z[:, 0 : t - m - 1, :]), plus=flat(z[:, 1 : t - m, :])
    )
    targets = [flat(z[:, step : t - m + step - 1, :]) for step in range(1, m + 1)]
    return pair, targets


def estimate_koopman(pair, ridge_lambda=0.0):
    """Ridge-regularized least-squares operator from a snapshot pair.

    Solves (minus^T minus + lambda I) K = minus^T plus. Gradients flow to
    the latent entries through the Gram products and the solve.
    """
    global _estimation_count
    if ridge_lambda < 0:
        raise ValueError(f"ridge weight must be nonnegative, got {ridge_lambda}")
    gram = ad.matmul(ad.transpose(pair.minus), pair.minus)
    cross = ad.matmul(ad.transpose(pair.minus), pair.plus)
    try:
        k = ad.solve_regularized(gram, cross, ridge_lambda)
    except SingularSystemError as exc:
        raise SingularSystemError(
            f"{exc}; the snapshot Gram matrix is rank-deficient, "
            "use ridge_lambda > 0",
            condition=exc.condition,
        ) from exc
    _estimation_count += 1
    return KoopmanOperator(k=k, ridge_lambda=float(ridge_lambda))


def multi_step_forecast(pair, operator, m):
    """Forecast minus @ K^step for step = 1..m by iterated multiplication."""
    if m < 1:
        raise ValueError(f"horizon must be at least 1, got {m}")
    predictions = []
    current = pair.minus
    for _ in range(m):
        current = ad.matmul(current, operator.k)
        predictions.append(current)
    return predictions


def forecast_bundle(z, m, ridge_lambda=0.0):
    """Full per-sequence pipeline: slice, estimate, forecast, bundle."""
    _, pair, targets = split_prefix(z, m)
    operator = estimate_koopman(pair, ridge_lambda)
    predictions = multi_step_forecast(pair, operator, m)
    return operator, ForecastBundle(predictions=predictions, targets=targets)


def prediction_loss(bundle, n):
    """Mean squared forecast residual: sum over horizons of the squared
    entrywise error, scaled by 1 / (2 n M) for a batch of n sequences."""
    if n < 1:
        raise ValueError(f"batch size must be at least 1, got {n}")
    m = bundle.horizon
    total = ad.squared_error(bundle.predictions[0], bundle.targets[0])
    for pred, targ in zip(bundle.predictions[1:], bundle.targets[1:]):
        total = ad.add(total, ad.squared_error(pred, targ))
    scale = np.asarray(1.0 / (2.0 * n * m), dtype=total.data.dtype)
    return ad.mul(total, Tensor(scale))


def eigen_loss(operator):
    """Mean squared complex distance of K's eigenvalues to 1 + 0j.

    Pulls the spectrum toward the unit eigenvalue, biasing the operator
    toward slow or static dynamics. Differentiable w.r.t. K.
    """
    vals = ad.eig_values(operator.k)
    one = Tensor(np.array([1.0, 0.0], dtype=vals.data.dtype))
    shifted = ad.sub(vals, one)
    return ad.tensor_mean(ad.mul(shifted, shifted).sum(axis=1))


def spectrum_report(operator):
    """Eigenvalue table sorted by descending modulus.

    Rows are (eigenvalue, modulus, distance to 1+0j); slow or static
    modes sit at the top with modulus near 1.
    """
    vals = operator.eigenvalues.as_complex()
    rows = [(v, abs(v), abs(v - 1.0)) for v in vals]
    rows.sort(key=lambda r: -r[1])
    return rows


def format_spectrum_report(rows):
    """Tab-separated rendering of a spectrum_report table."""
    lines = ["real\timag\tmodulus\tdistance_to_one"]
    for value, modulus, dist in rows:
        lines.append(f"{value.real:.6f}\t{value.imag:.6f}\t{modulus:.6f}\t{dist:.6f}")
    return "\n".join(lines) + "\n"
