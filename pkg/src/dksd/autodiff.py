"""Reverse-mode automatic differentiation over numpy arrays.

Small tape-based engine in the micrograd tradition, extended to
n-dimensional tensors plus the two linear-algebra primitives the
Koopman module needs gradients for: the regularized SPD solve and the
eigenvalue map. Training runs in float32; tensors built from float64
arrays stay float64 so test oracles can run the same code path at
higher precision.
"""

from __future__ import annotations

import logging

import numpy as np
import scipy.linalg

logger = logging.getLogger(__name__)

# Gradient through eig uses the simple-eigenvalue adjoint. Spectra with a
# pairwise gap below EIG_GAP_TOL get a diagonal jitter before the backward
# eigendecomposition (and the event is logged).
EIG_GAP_TOL = 1e-6
EIG_JITTER = 1e-8

# Condition estimate above this raises SingularSystemError in solves.
COND_LIMIT = 1e12

_grad_enabled = True


class UnsupportedPrimitiveError(ValueError):
    """Requested primitive is not part of the supported op set."""


class SingularSystemError(RuntimeError):
    """Linear system is numerically singular.

    Carries the condition-number estimate in ``condition``.
    """

    def __init__(self, message, condition):
        super().__init__(message)
        self.condition = condition


class EigenConvergenceError(RuntimeError):
    """Eigenvalue iteration failed to converge."""


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64:
        return arr
    return arr.astype(np.float32, copy=False)


def _unbroadcast(grad, shape):
    """Sum grad down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    # Sum away leading axes added by broadcasting.
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    # Sum axes that were broadcast from size 1.
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A numpy array with an optional gradient tape entry.

    ``grad`` is populated (same shape as ``data``) after a backward pass
    from a scalar output that the tensor participated in.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- graph plumbing ----------------------------------------------------

    @staticmethod
    def _result(data, parents, backward):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._parents = ()
        out._backward = None
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self):
        """Reverse-mode pass from a scalar; accumulates into ``.grad``."""
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar output, got shape {self.data.shape}"
            )
        # Iterative topological sort; graphs from long sequences overflow
        # the recursion limit.
        topo = []
        visited = {id(self)}
        stack = [(self, iter(self._parents))]
        while stack:
            node, parents = stack[-1]
            advanced = False
            for p in parents:
                if id(p) not in visited and p._parents is not None:
                    visited.add(id(p))
                    stack.append((p, iter(p._parents)))
                    advanced = True
                    break
            if not advanced:
                topo.append(node)
                stack.pop()

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=parent.data.dtype, copy=True)
                else:
                    parent.grad += g

    # -- operators ----------------------------------------------------------

    def _lift(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return mul(self._lift(other), self)

    def __truediv__(self, other):
        return div(self, self._lift(other))

    def __neg__(self):
        return mul(self, Tensor(np.asarray(-1.0, dtype=self.data.dtype)))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)

    def item(self):
        return float(self.data.reshape(()))


# -- elementwise and structural primitives ----------------------------------


def add(a, b):
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._result(out, (a, b), backward)


def sub(a, b):
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor._result(out, (a, b), backward)


def mul(a, b):
    out = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return Tensor._result(out, (a, b), backward)


def div(a, b):
    out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return Tensor._result(out, (a, b), backward)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(
            f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}"
        )
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._result(out, (a, b), backward)


def transpose(a):
    if a.data.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {a.data.shape}")
    out = a.data.T

    def backward(g):
        return (g.T,)

    return Tensor._result(out, (a,), backward)


def reshape(a, shape):
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.data.shape),)

    return Tensor._result(out, (a,), backward)


def take(a, index):
    """Basic (slice/integer) indexing with scatter-add backward."""
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return Tensor._result(out, (a,), backward)


def concat(tensors, axis=0):
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return Tensor._result(out, tensors, backward)


def stack(tensors, axis=0):
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._result(out, tensors, backward)


def tanh(a):
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return Tensor._result(out, (a,), backward)


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        return (g * out * (1.0 - out),)

    return Tensor._result(out, (a,), backward)


def sqrt(a):
    out = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out,)

    return Tensor._result(out, (a,), backward)


def tensor_sum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return Tensor._result(np.asarray(out), (a,), backward)


def tensor_mean(a, axis=None, keepdims=False):
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape) / count,)

    return Tensor._result(np.asarray(out), (a,), backward)


def squared_error(a, b):
    """Sum of squared entrywise differences, as a scalar tensor."""
    diff = a.data - b.data
    out = np.asarray((diff * diff).sum())

    def backward(g):
        d = 2.0 * g * diff
        return _unbroadcast(d, a.data.shape), _unbroadcast(-d, b.data.shape)

    return Tensor._result(out, (a, b), backward)


# -- linear-algebra primitives ----------------------------------------------


def _condition_estimate(matrix):
    try:
        return float(np.linalg.cond(matrix.astype(np.float64)))
    except np.linalg.LinAlgError:
        return float("inf")


def solve_regularized(a, b, lam=0.0):
    """Solve (A + lam*I) X = B for symmetric PSD A, differentiably.

    Uses a Cholesky factorization with a pivoted-LU fallback when A is
    indefinite at the margin of floating-point symmetry. Gradients reach
    A, B and (when passed as a tensor) lam through the adjoint of the
    linear system.
    """
    if not isinstance(a, Tensor):
        a = Tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(b)
    lam_tensor = lam if isinstance(lam, Tensor) else None
    lam_value = float(lam.data) if isinstance(lam, Tensor) else float(lam)
    if lam_value < 0:
        raise ValueError(f"ridge weight must be nonnegative, got {lam_value}")

    k = a.data.shape[0]
    if a.data.shape != (k, k):
        raise ValueError(f"expected a square system matrix, got {a.data.shape}")

    system = a.data + lam_value * np.eye(k, dtype=a.data.dtype)
    cond = _condition_estimate(system)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularSystemError(
            f"system matrix is numerically singular (condition estimate {cond:.3e})",
            condition=cond,
        )

    try:
        cho = scipy.linalg.cho_factor(system, lower=True, check_finite=False)
        x = scipy.linalg.cho_solve(cho, b.data, check_finite=False)
        solve_t = lambda rhs: scipy.linalg.cho_solve(cho, rhs, check_finite=False)
    except scipy.linalg.LinAlgError:
        lu = scipy.linalg.lu_factor(system, check_finite=False)
        x = scipy.linalg.lu_solve(lu, b.data, check_finite=False)
        solve_t = lambda rhs: scipy.linalg.lu_solve(lu, rhs, trans=1, check_finite=False)

    parents = [a, b] + ([lam_tensor] if lam_tensor is not None else [])

    def backward(g):
        # dX = S^{-1} (dB - dS X) with S = A + lam*I, so with Y = S^{-T} g:
        # dL/dB = Y, dL/dA = -Y X^T, dL/dlam = -tr(Y X^T).
        y = solve_t(g)
        grad_a = -y @ x.T
        grads = [grad_a, y]
        if lam_tensor is not None:
            grads.append(np.asarray(np.trace(grad_a), dtype=lam_tensor.data.dtype))
        return tuple(grads)

    return Tensor._result(x.astype(a.data.dtype, copy=False), parents, backward)


def eig_values(k):
    """Eigenvalues of a square real matrix as an (n, 2) [real, imag] tensor.

    The decomposition runs in float64 regardless of input dtype. Backward
    uses the adjoint for simple eigenvalues; a spectrum with a pairwise gap
    below EIG_GAP_TOL gets a diagonal jitter of EIG_JITTER before the
    backward decomposition, and the event is logged.
    """
    if not isinstance(k, Tensor):
        k = Tensor(k)
    if k.data.ndim != 2 or k.data.shape[0] != k.data.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {k.data.shape}")
    if not np.all(np.isfinite(k.data)):
        raise ValueError("matrix entries must be finite")

    mat = k.data.astype(np.float64)
    try:
        values = np.linalg.eigvals(mat)
    except np.linalg.LinAlgError as exc:
        raise EigenConvergenceError(f"eigenvalue iteration failed: {exc}") from exc

    out = np.stack([values.real, values.imag], axis=1).astype(k.data.dtype)

    def backward(g):
        work = mat
        gaps = np.abs(values[:, None] - values[None, :])
        np.fill_diagonal(gaps, np.inf)
        if gaps.min() < EIG_GAP_TOL:
            logger.warning(
                "near-degenerate spectrum (min gap %.3e); adding diagonal jitter %g "
                "before differentiating",
                gaps.min(),
                EIG_JITTER,
            )
            work = work + EIG_JITTER * np.eye(work.shape[0])
        try:
            lam, vecs = np.linalg.eig(work)
        except np.linalg.LinAlgError as exc:
            raise EigenConvergenceError(f"eigenvalue iteration failed: {exc}") from exc
        # dlam_i = (V^{-1} dK V)_{ii}; for a real loss with partials
        # (g_re, g_im) per eigenvalue the adjoint collapses to
        # Re[(V diag(g_re - i*g_im) V^{-1})^T].
        c = g[:, 0].astype(np.complex128) - 1j * g[:, 1].astype(np.complex128)
        grad = (vecs * c) @ np.linalg.inv(vecs)
        return (grad.T.real.astype(k.data.dtype),)

    return Tensor._result(out, (k,), backward)


# -- spectrum container -------------------------------------------------------


class ComplexSpectrum:
    """Eigenvalue list of a real matrix, kept as (real, imag) pairs."""

    def __init__(self, values):
        values = np.asarray(values, dtype=np.complex128)
        self.entries = [(float(v.real), float(v.imag)) for v in values]

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.as_complex())

    def as_complex(self):
        return np.array([re + 1j * im for re, im in self.entries])

    @classmethod
    def from_matrix(cls, matrix):
        data = matrix.data if isinstance(matrix, Tensor) else np.asarray(matrix)
        try:
            return cls(np.linalg.eigvals(data.astype(np.float64)))
        except np.linalg.LinAlgError as exc:
            raise EigenConvergenceError(f"eigenvalue iteration failed: {exc}") from exc


# -- program evaluation -------------------------------------------------------

PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "take": take,
    "concat": concat,
    "stack": stack,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "sqrt": sqrt,
    "sum": tensor_sum,
    "mean": tensor_mean,
    "squared_error": squared_error,
    "solve_regularized": solve_regularized,
    "eig_values": eig_values,
}


def get_primitive(name):
    try:
        return PRIMITIVES[name]
    except KeyError:
        raise UnsupportedPrimitiveError(
            f"unsupported primitive '{name}'; supported: {sorted(PRIMITIVES)}"
        ) from None


def evaluate_and_backprop(program, inputs):
    """Run ``program`` on ``inputs`` and return (scalar value, input grads).

    ``program`` must be a composition of the supported primitives producing
    a scalar tensor. Each returned gradient is the exact reverse-mode
    derivative for the corresponding input (None where requires_grad is
    unset).
    """
    for t in inputs:
        t.zero_grad()
    out = program(*inputs)
    if not isinstance(out, Tensor):
        raise TypeError("program must return a Tensor")
    if out.data.size != 1:
        raise ValueError(f"program output must be scalar, got shape {out.data.shape}")
    out.backward()
    return out.item(), [t.grad for t in inputs]
