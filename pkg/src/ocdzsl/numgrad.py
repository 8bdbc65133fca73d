"""Minimal reverse-mode autodiff core plus numeric plumbing.

Every trainable object in this package is a feed-forward composition of
dense layers and elementwise maps over row-major float64 arrays, so the
tape is deliberately small: a :class:`Tensor` wraps an ndarray, remembers
its parents and per-parent gradient closures, and :func:`backward` walks
the recorded graph once and then consumes it.

Also here: the seeded, splittable RNG used everywhere (Philox, a
counter-based 64-bit generator, split via ``SeedSequence.spawn``),
plain Gaussian sampling, dense-layer forward, an Adam optimizer over a
:class:`ParamStore`, and a central-finite-difference gradient checker.

All math is float64. Every op verifies its result is finite and raises
:class:`~ocdzsl.errors.NumericError` otherwise.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator

import numpy as np

from .errors import DimensionError, NumericError, ParameterError, StateError

__all__ = [
    "Rng",
    "Tensor",
    "ParamStore",
    "as_tensor",
    "no_grad",
    "backward",
    "matmul",
    "concat_cols",
    "take_rows",
    "exp",
    "sigmoid",
    "leaky_relu",
    "maximum0",
    "dense_forward",
    "sample_gaussian",
    "optimizer_step",
    "finite_diff_check",
]

# Tape recording is on unless a no_grad() block is active.
_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (frozen forward passes)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {what}")


class Rng:
    """Deterministic, splittable random stream.

    Same seed, same call order => identical samples. ``split`` derives
    independent child streams with distinct deterministic sub-seeds.
    """

    def __init__(self, seed):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(int(seed))
        self._gen = np.random.Generator(np.random.Philox(self._seq))

    def split(self, n: int) -> list["Rng"]:
        return [Rng(child) for child in self._seq.spawn(int(n))]

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(loc=mean, scale=std, size=shape)

    def standard_normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(size=shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=size)

    def integers(self, low: int, high: int | None = None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(int(n))

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self._gen.choice(int(n), size=int(size), replace=replace)


class Tensor:
    """Array node on the backprop tape.

    ``data`` is always float64. ``grad`` is the accumulation slot:
    parameters get a zero-filled slot at creation, intermediate nodes get
    one lazily during :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fns")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fns: tuple[Callable[[np.ndarray], np.ndarray], ...] = ()

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def sum(self, axis=None) -> "Tensor":
        out = self.data.sum(axis=axis)
        shape = self.data.shape

        def g_self(g):
            return _spread(g, shape, axis)

        return _make(out, (self,), (g_self,), "sum")

    def mean(self, axis=None) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        out = self.data.mean(axis=axis)
        shape = self.data.shape

        def g_self(g):
            return _spread(g, shape, axis) / n

        return _make(out, (self,), (g_self,), "mean")

    def __add__(self, other):
        other = as_tensor(other)
        return _make(
            self.data + other.data,
            (self, other),
            (lambda g: g, lambda g: g),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        return _make(
            self.data - other.data,
            (self, other),
            (lambda g: g, lambda g: -g),
            "sub",
        )

    def __rsub__(self, other):
        return as_tensor(other).__sub__(self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return _make(
            a * b,
            (self, other),
            (lambda g: g * b, lambda g: g * a),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise ParameterError("tensor/tensor division is not supported")
        return self * (1.0 / float(scalar))

    def __neg__(self):
        return _make(-self.data, (self,), (lambda g: -g,), "neg")

    def __pow__(self, n):
        n = float(n)
        d = self.data
        return _make(d**n, (self,), (lambda g: g * n * d ** (n - 1.0),), "pow")

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    """Wrap arrays/scalars as constant Tensors; pass Tensors through."""
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, grad_fns, what: str) -> Tensor:
    """Build an op-result node; records the tape only when needed."""
    data = np.asarray(data, dtype=np.float64)
    _check_finite(data, what)
    out = Tensor(data)
    if _GRAD_ENABLED[-1] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.grad = None
        out._parents = tuple(parents)
        out._grad_fns = tuple(grad_fns)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcast during the forward op."""
    g = np.asarray(g, dtype=np.float64)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _spread(g, shape, axis) -> np.ndarray:
    """Broadcast a reduction gradient back to the pre-reduction shape."""
    g = np.asarray(g, dtype=np.float64)
    if axis is None:
        return np.broadcast_to(g, shape).copy() if g.shape != shape else g * np.ones(shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape).copy()


def _accumulate(node: Tensor, g: np.ndarray) -> None:
    g = _unbroadcast(g, node.data.shape)
    if node.grad is None:
        node.grad = np.zeros_like(node.data)
    node.grad += g


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a traced scalar loss.

    Gradients land in the ``grad`` slots of every reachable parameter.
    The trace is consumed: a second backward on the same loss raises.
    """
    if not isinstance(loss, Tensor) or not loss._parents:
        raise StateError("backward called without a recorded forward trace")
    if loss.data.size != 1:
        raise DimensionError(f"backward expects a scalar loss, got shape {loss.data.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node.grad is None:
            continue
        for parent, grad_fn in zip(node._parents, node._grad_fns):
            if parent.requires_grad:
                _accumulate(parent, grad_fn(node.grad))
    for node in topo:
        node._parents = ()
        node._grad_fns = ()


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul shapes {a.data.shape} x {b.data.shape} do not align")
    da, db = a.data, b.data
    return _make(
        da @ db,
        (a, b),
        (lambda g: g @ db.T, lambda g: da.T @ g),
        "matmul",
    )


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[0] != b.data.shape[0]:
        raise DimensionError(f"concat_cols row mismatch {a.data.shape} vs {b.data.shape}")
    k = a.data.shape[1]
    return _make(
        np.concatenate([a.data, b.data], axis=1),
        (a, b),
        (lambda g: g[:, :k], lambda g: g[:, k:]),
        "concat_cols",
    )


def take_rows(t: Tensor, idx) -> Tensor:
    t = as_tensor(t)
    idx = np.asarray(idx, dtype=np.intp)
    shape = t.data.shape

    def g_t(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return out

    return _make(t.data[idx], (t,), (g_t,), "take_rows")


def exp(t: Tensor) -> Tensor:
    t = as_tensor(t)
    e = np.exp(t.data)
    return _make(e, (t,), (lambda g: g * e,), "exp")


def sigmoid(t: Tensor) -> Tensor:
    t = as_tensor(t)
    d = t.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    return _make(s, (t,), (lambda g: g * s * (1.0 - s),), "sigmoid")


def leaky_relu(t: Tensor, slope: float = 0.2) -> Tensor:
    t = as_tensor(t)
    d = t.data
    # for slope < 1, max(x, slope*x) is exactly leaky ReLU
    out = np.maximum(d, slope * d)

    def g_t(g):
        scale = np.where(d > 0, 1.0, slope)
        return g * scale

    return _make(out, (t,), (g_t,), "leaky_relu")


def maximum0(t: Tensor) -> Tensor:
    """Hinge max(0, x); the kink at 0 contributes zero gradient."""
    t = as_tensor(t)
    mask = t.data > 0
    return _make(
        np.where(mask, t.data, 0.0),
        (t,),
        (lambda g: g * mask,),
        "maximum0",
    )


_ACTIVATIONS = {
    "linear": lambda t: t,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
}


class ParamStore:
    """Named parameter arrays plus per-parameter Adam moment slots."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, values) -> Tensor:
        if name in self._params:
            raise ParameterError(f"duplicate parameter {name!r}")
        arr = np.array(values, dtype=np.float64)
        _check_finite(arr, f"parameter {name!r}")
        t = Tensor(arr, requires_grad=True)
        self._params[name] = t
        self._m[name] = np.zeros_like(arr)
        self._v[name] = np.zeros_like(arr)
        return t

    def dense(self, name: str, fan_in: int, fan_out: int, rng: Rng) -> None:
        """Create a dense layer: weight `name.W` scaled 1/sqrt(fan_in), zero bias `name.b`."""
        self.add(f"{name}.W", rng.normal((fan_in, fan_out), std=1.0 / math.sqrt(fan_in)))
        self.add(f"{name}.b", np.zeros(fan_out))

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise StateError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)


def dense_forward(params: ParamStore, layer_name: str, x, activation: str = "linear") -> Tensor:
    """activation(x @ W + b) for the named layer, recorded on the tape."""
    if activation not in _ACTIVATIONS:
        raise ParameterError(f"unknown activation {activation!r}")
    x = as_tensor(x)
    w = params[f"{layer_name}.W"]
    b = params[f"{layer_name}.b"]
    if x.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise DimensionError(
            f"layer {layer_name!r} expects inputs with {w.data.shape[0]} cols, got {x.data.shape}"
        )
    return _ACTIVATIONS[activation](matmul(x, w) + b)


def sample_gaussian(mu, sigma, rng: Rng) -> np.ndarray:
    """mu + sigma * eps with eps ~ N(0, I), elementwise.

    sigma may be a scalar or an array broadcastable to mu's shape; negative
    entries are rejected. sigma == 0 is the documented limiting test mode
    and returns mu exactly (the standard-normal draw is still consumed, so
    stream positions do not depend on sigma).
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma_arr = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma_arr < 0):
        raise ParameterError("sigma must be >= 0")
    eps = rng.standard_normal(mu.shape)
    out = mu + sigma_arr * eps
    _check_finite(out, "sample_gaussian")
    return out


def optimizer_step(
    params: ParamStore,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamStore:
    """One Adam update from the accumulated gradients; clears them after."""
    if lr <= 0:
        raise ParameterError(f"lr must be > 0, got {lr}")
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ParameterError("betas must lie in [0, 1)")
    if eps <= 0:
        raise ParameterError("eps must be > 0")
    t = params.step_count + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = params._m[name]
        v = params._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        _check_finite(p.data, f"optimizer_step on {name!r}")
        p.grad = np.zeros_like(p.data)
    params.step_count = t
    return params


def finite_diff_check(loss_fn: Callable[[ParamStore], Tensor], params: ParamStore, eps: float = 1e-5) -> float:
    """Max relative error of analytic vs central-difference gradients.

    loss_fn must be deterministic (fix its Rng per call). Relative error
    per element is |analytic - fd| / max(1, |fd|); returns the max over
    every element of every parameter, 0.0 for a parameter-free store.
    """
    if eps <= 0:
        raise ParameterError("eps must be > 0")
    if len(params) == 0:
        return 0.0
    params.zero_grad()
    loss = loss_fn(params)
    _check_finite(np.asarray(loss.data), "finite_diff_check loss")
    backward(loss)
    analytic = {name: p.grad.copy() for name, p in params.items()}
    params.zero_grad()

    worst = 0.0
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            g_flat = analytic[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = float(loss_fn(params).data)
                flat[i] = orig - eps
                lo = float(loss_fn(params).data)
                flat[i] = orig
                fd = (hi - lo) / (2.0 * eps)
                err = abs(g_flat[i] - fd) / max(1.0, abs(fd))
                if err > worst:
                    worst = err
    return worst
