"""Shared numeric oracles for the test suite.

Everything here is deliberately independent of the library's own math:
finite differences for gradients, float64 normal equations for the ridge
solve, and plain numpy eigendecompositions for spectra.
"""

import numpy as np


def central_difference(f, x, step=1e-4):
    """Central finite-difference gradient of scalar f at array x (float64)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def assert_grad_close(analytic, numeric, rel=1e-4, abs_floor=1e-6):
    """Elementwise |a-n| <= abs_floor + rel*max(|a|,|n|)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    assert analytic.shape == numeric.shape
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric)
    bad = err > (abs_floor + rel * scale)
    assert not bad.any(), (
        f"gradient mismatch at {bad.sum()} / {bad.size} entries; "
        f"worst abs err {err.max():.3e}, worst rel "
        f"{(err / np.maximum(scale, 1e-30)).max():.3e}"
    )


def ridge_oracle(minus, plus, lam):
    """64-bit normal-equations solve for the ridge operator."""
    minus = np.asarray(minus, dtype=np.float64)
    plus = np.asarray(plus, dtype=np.float64)
    k = minus.shape[1]
    gram = minus.T @ minus + lam * np.eye(k)
    return np.linalg.solve(gram, minus.T @ plus)


def sorted_eigvals(matrix):
    """Eigenvalues in float64, sorted by (real, imag) for comparison."""
    vals = np.linalg.eigvals(np.asarray(matrix, dtype=np.float64))
    order = np.lexsort((vals.imag, vals.real))
    return vals[order]


def eer_oracle(genuine, impostor):
    """Exhaustive threshold-enumeration EER, percent.

    Candidates are the sorted union of all scores, midpoints of adjacent
    distinct scores, and sentinels below the minimum / above the maximum.
    FAR(e) counts impostor scores >= e, FRR(e) genuine scores < e. The
    result is the common value where FAR == FRR at some candidate, else a
    linear interpolation between the two candidates bracketing the sign
    change of FAR - FRR.
    """
    genuine = list(genuine)
    impostor = list(impostor)
    scores = sorted(set(genuine) | set(impostor))
    candidates = [scores[0] - 1.0]
    for i, s in enumerate(scores):
        candidates.append(s)
        if i + 1 < len(scores):
            candidates.append((s + scores[i + 1]) / 2.0)
    candidates.append(scores[-1] + 1.0)

    rows = []
    for eps in candidates:
        far = sum(1 for s in impostor if s >= eps) / len(impostor)
        frr = sum(1 for s in genuine if s < eps) / len(genuine)
        rows.append((eps, far, frr))

    for eps, far, frr in rows:
        if far == frr:
            return 100.0 * far, eps
    for (e1, far1, frr1), (e2, far2, frr2) in zip(rows, rows[1:]):
        d1 = far1 - frr1
        d2 = far2 - frr2
        if d1 > 0 and d2 < 0:
            t = d1 / (d1 - d2)
            return 100.0 * (far1 + (far2 - far1) * t), e1 + (e2 - e1) * t
    raise AssertionError("no FAR/FRR crossing found")
