"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation runs eagerly on numpy arrays and, when any input requires a
gradient, records its parents and a local vector-Jacobian product.  Calling
:func:`grad` (or :meth:`Tensor.backward`) walks the recorded DAG once in
reverse topological order.

Also hosts the scalar numeric primitives the rest of the package builds on:
temperature softmax, KL divergence and cross-entropy.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DivergenceUndefinedError,
    InvalidInputError,
    InvalidParameterError,
)

KL_EPS = 1e-12


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def activation_and_slope(z: np.ndarray, activation: str) -> tuple:
    """Elementwise ``act(z)`` and ``act'(z)`` for ``relu`` or ``smooth_relu``."""
    if activation == "relu":
        return np.maximum(z, 0.0), (z > 0).astype(np.float64)
    if activation == "smooth_relu":
        inner = (z > 0) & (z < 1)
        outer = z >= 1
        out = np.where(inner, z**3 / 3.0, 0.0) + np.where(outer, z - 2.0 / 3.0, 0.0)
        return out, np.where(inner, z * z, 0.0) + outer
    raise InvalidParameterError(f"unknown activation {activation!r}")


class Tensor:
    """An immutable float64 array that may participate in a gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = _frozen(np.array(data, dtype=np.float64))
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._vjp = None
        self.op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, vjp, op: str) -> "Tensor":
        out = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64)
        data.flags.writeable = False
        out.data = data
        out.grad = None
        out.op = op
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out._parents = parents
                out._vjp = vjp
                return out
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        return Tensor._result(
            a.data + b.data,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
            "add",
        )

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._result(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        return Tensor._result(
            a.data * b.data,
            (a, b),
            lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        return Tensor._result(
            a.data / b.data,
            (a, b),
            lambda g: (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            ),
            "div",
        )

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise ContractError("only scalar exponents are supported")
        a = self
        e = float(exponent)
        return Tensor._result(
            a.data**e, (a,), lambda g: (g * e * a.data ** (e - 1.0),), "pow"
        )

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        if a.ndim == 0 or b.ndim != 2:
            raise ContractError(f"matmul needs a non-scalar left and 2-D right operand, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[0]:
            raise ContractError(f"matmul shape mismatch {a.shape} @ {b.shape}")

        def vjp(g):
            g2 = g.reshape(-1, b.shape[1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a.data.reshape(-1, a.shape[-1]).T @ g2 if b.requires_grad else None
            return ga, gb

        # fold leading axes so batched products hit a single BLAS call
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[1],))
        return Tensor._result(out, (a, b), vjp, "matmul")

    @property
    def T(self) -> "Tensor":
        if self.ndim != 2:
            raise ContractError("transpose is defined for 2-D tensors only")
        return Tensor._result(self.data.T, (self,), lambda g: (g.T,), "transpose")

    # -- reductions and reshapes ------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape),)

        return Tensor._result(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")

    def take_last(self, index) -> "Tensor":
        """Select one entry along the last axis per leading row (label gather)."""
        a = self
        idx = np.asarray(index, dtype=np.int64)
        if a.ndim == 1:
            if idx.ndim != 0:
                raise ContractError("1-D tensor needs a scalar index")
            out = a.data[int(idx)]

            def vjp(g):
                full = np.zeros(a.shape)
                full[int(idx)] = g
                return (full,)

        else:
            rows = np.arange(a.shape[0])
            if idx.shape != (a.shape[0],):
                raise ContractError(f"index shape {idx.shape} does not match rows {a.shape[0]}")
            out = a.data[rows, idx]

            def vjp(g):
                full = np.zeros(a.shape)
                full[rows, idx] = g
                return (full,)

        return Tensor._result(out, (a,), vjp, "take")

    # -- elementwise nonlinearities -------------------------------------
    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._result(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        a = self
        return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")

    def relu(self) -> "Tensor":
        out, slope = activation_and_slope(self.data, "relu")
        return Tensor._result(out, (self,), lambda g: (g * slope,), "relu")

    def smooth_relu(self) -> "Tensor":
        """z^3/3 on (0,1), z - 2/3 on [1,inf), 0 elsewhere; continuously differentiable."""
        out, slope = activation_and_slope(self.data, "smooth_relu")
        return Tensor._result(out, (self,), lambda g: (g * slope,), "smooth_relu")

    def log_softmax(self, axis: int = -1) -> "Tensor":
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        probs = np.exp(out)
        return Tensor._result(
            out, (a,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),), "log_softmax"
        )

    def softmax(self, axis: int = -1) -> "Tensor":
        return self.log_softmax(axis).exp()

    def backward(self) -> None:
        """Populate ``.grad`` on every leaf that requires a gradient."""
        graph = ComputationGraph(self)
        grads = graph.backward()
        for node in graph.nodes:
            if node.is_leaf and node.requires_grad:
                node.grad = grads.get(id(node), np.zeros(node.shape))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)



def patch_pool(X, W, activation: str = "relu") -> Tensor:
    """``sum_p act(X[..., p, :] @ W.T)``: shape ``(..., P, d)`` x ``(m, d)`` -> ``(..., m)``.

    One tape node instead of matmul/activation/sum; the hot path of every
    forward and attack step.
    """
    X, W = as_tensor(X), as_tensor(W)
    if X.ndim < 2 or W.ndim != 2 or X.shape[-1] != W.shape[1]:
        raise ContractError(f"patch_pool shape mismatch {X.shape} with weights {W.shape}")
    lead, (P, d), m = X.shape[:-2], X.shape[-2:], W.shape[0]
    x2 = X.data.reshape(-1, d)
    act, slope = activation_and_slope(x2 @ W.data.T, activation)
    out = act.reshape(-1, P, m).sum(axis=1).reshape(lead + (m,))

    def vjp(g):
        gpre = (g.reshape(-1, 1, m) * slope.reshape(-1, P, m)).reshape(-1, m)
        gX = (gpre @ W.data).reshape(X.shape) if X.requires_grad else None
        gW = gpre.T @ x2 if W.requires_grad else None
        return gX, gW

    return Tensor._result(out, (X, W), vjp, "patch_pool")

class ComputationGraph:
    """The DAG reachable from a scalar output, held in topological order."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = self._toposort(output)

    @staticmethod
    def _toposort(output: Tensor) -> list:
        order, seen = [], set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self) -> dict:
        """Return ``{id(node): gradient}`` for every node that requires a gradient."""
        if self.output.data.size != 1:
            raise ContractError(f"backward needs a scalar output, got shape {self.output.shape}")
        grads = {id(self.output): np.ones(self.output.shape)}
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return grads


def backward(output: Tensor, leaves: Sequence[Tensor]) -> list:
    """Gradients of scalar ``output`` with respect to each of ``leaves``.

    Leaves unreachable from ``output`` get a zero gradient.
    """
    grads = ComputationGraph(output).backward()
    out = []
    for t in leaves:
        g = grads.get(id(t))
        out.append(np.zeros(t.shape) if g is None else np.array(g, dtype=np.float64).reshape(t.shape))
    return out


grad = backward


def finite_diff_grad(f: Callable[[np.ndarray], float], params, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``f`` at ``params``, one coordinate at a time."""
    if not h > 0:
        raise InvalidParameterError(f"step h must be positive, got {h}")
    base = np.array(params, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(base))
        flat[i] = orig - h
        fm = float(f(base))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise InvalidInputError(f"non-finite function value at coordinate {i}")
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(base.shape)


# -- numeric primitives ---------------------------------------------------


def softmax_temp(logits, tau: float = 1.0) -> Tensor:
    """softmax(logits / tau) along the last axis, max-shifted for stability."""
    if not tau > 0:
        raise InvalidParameterError(f"temperature must be positive, got {tau}")
    logits = as_tensor(logits)
    if not np.all(np.isfinite(logits.data)):
        raise InvalidInputError("non-finite logit")
    return (logits * (1.0 / tau)).softmax(axis=-1)


def log_softmax_temp(logits, tau: float = 1.0) -> Tensor:
    if not tau > 0:
        raise InvalidParameterError(f"temperature must be positive, got {tau}")
    logits = as_tensor(logits)
    if not np.all(np.isfinite(logits.data)):
        raise InvalidInputError("non-finite logit")
    return (logits * (1.0 / tau)).log_softmax(axis=-1)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def kl_divergence(p, q) -> float:
    """sum_j p_j ln(p_j / q_j) for probability vectors, with 0 ln(0/q) = 0.

    Raises :class:`DivergenceUndefinedError` when ``q_j == 0 < p_j``; floor
    ``q`` (see :data:`KL_EPS`) before calling if that can happen.
    """
    p, q = _as_array(p), _as_array(q)
    if p.shape != q.shape or p.ndim != 1:
        raise ContractError(f"expected two equal-length vectors, got {p.shape} and {q.shape}")
    for name, v in (("p", p), ("q", q)):
        if not np.all(np.isfinite(v)) or np.any(v < 0) or np.any(v > 1):
            raise InvalidInputError(f"{name} has entries outside [0, 1]")
        if abs(v.sum() - 1.0) > 1e-9:
            raise InvalidInputError(f"{name} does not sum to 1 (sum={v.sum()!r})")
    support = p > 0
    if np.any(q[support] == 0):
        raise DivergenceUndefinedError("q vanishes on the support of p")
    terms = p[support] * np.log(p[support] / q[support])
    return max(0.0, math.fsum(terms.tolist()))


def floor_probs(q, eps: float = KL_EPS) -> np.ndarray:
    q = np.maximum(_as_array(q), eps)
    return q / q.sum(axis=-1, keepdims=True)


def cross_entropy(logits, y) -> Tensor:
    """-ln softmax(logits)[y]; batched inputs return the batch mean."""
    logits = as_tensor(logits)
    k = logits.shape[-1]
    y_arr = np.asarray(y)
    if np.any(y_arr < 0) or np.any(y_arr >= k):
        raise IndexError(f"label out of range for {k} classes")
    picked = logits.log_softmax(axis=-1).take_last(y_arr.astype(np.int64))
    return -(picked.mean() if logits.ndim > 1 else picked)


def kl_from_log_probs(target_logp: Tensor, student_logp: Tensor) -> Tensor:
    """Batch-mean KL(target || student) given log-probabilities of both.

    Gradients flow through whichever argument requires them.
    """
    target_logp, student_logp = as_tensor(target_logp), as_tensor(student_logp)
    per = (target_logp.exp() * (target_logp - student_logp)).sum(axis=-1)
    return per.mean() if per.ndim else per


def one_hot(y, k: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    out = np.zeros(y.shape + (k,))
    np.put_along_axis(out, y[..., None], 1.0, axis=-1)
    return out


def relative_error(a, b, floor: float = 1e-12) -> float:
    """Normwise relative discrepancy ||a - b|| / max(||a||, ||b||, floor)."""
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))

