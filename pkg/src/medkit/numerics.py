"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything downstream (encoder, classifier heads, generator) is built from the
ops in this module. The graph is define-by-run: every op returns a new Tensor
that remembers its parents and a closure computing parent gradients. Tensors
are value-like: treat them as immutable once constructed; only the optimizer
writes ``data`` in place, and only between graph builds.
"""

from __future__ import annotations

import hashlib
import struct
import warnings
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class NumericsError(Exception):
    """Raised when an op produces non-finite values or the graph is misused."""


class ShapeError(NumericsError):
    """Operand shapes do not conform."""


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    for _ in range(extra):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """One node of the computation graph, holding a float64 ndarray.

    `requires_grad` marks trainable leaves; op outputs inherit it from their
    parents so backward() knows what to visit. Non-finite values are rejected
    at construction, which turns any NaN/Inf produced by a forward op into an
    immediate error instead of a silent poisoned training run.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericsError("non-finite values in tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def flatten(self) -> "Tensor":
        return reshape(self, (-1,))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        backward(self)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


# -- arithmetic --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    with np.errstate(over="ignore"):  # overflow surfaces as the non-finite check
        out = a.data + b.data

    def backward_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    with np.errstate(over="ignore"):
        out = a.data * b.data

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _make(out, (a, b), backward_fn)


def neg(a: Tensor) -> Tensor:
    a = _wrap(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, factor: float) -> Tensor:
    a = _wrap(a)
    factor = float(factor)
    return _make(a.data * factor, (a,), lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors; gradients flow to both operands."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data @ b.data

    def backward_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), backward_fn)


def transpose(a: Tensor) -> Tensor:
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError("transpose needs a 2-D tensor")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    a = _wrap(a)
    old = a.data.shape
    out = a.data.reshape(shape)

    def backward_fn(g):
        return (g.reshape(old),)

    return _make(out, (a,), backward_fn)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def backward_fn(g):
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(parts), backward_fn)


def getitem(a: Tensor, key) -> Tensor:
    """Basic indexing (ints and slices); duplicates are impossible so the
    backward pass can scatter with plain assignment."""
    a = _wrap(a)
    out = np.asarray(a.data[key], dtype=np.float64)

    def backward_fn(g):
        z = np.zeros_like(a.data)
        z[key] += g
        return (z,)

    return _make(out, (a,), backward_fn)


def take_rows(a: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D tensor by integer index (duplicates allowed)."""
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError("take_rows needs a 2-D tensor")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("take_rows needs a 1-D index list")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError("row index out of range")
    out = a.data[idx]

    def backward_fn(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _make(out, (a,), backward_fn)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis=axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(out, (a,), backward_fn)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return scale(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- nonlinearities ----------------------------------------------------------


def tanh(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    a = _wrap(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a: Tensor) -> Tensor:
    a = _wrap(a)
    with np.errstate(over="ignore"):  # overflow surfaces as the non-finite check
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = _wrap(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit (tanh approximation)."""
    a = _wrap(a)
    x = a.data
    with np.errstate(over="ignore"):
        inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward_fn(g):
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * d,)

    return _make(out, (a,), backward_fn)


def masked_fill(a: Tensor, keep, value: float) -> Tensor:
    """Replace entries where `keep` is False by `value`; gradient flows only
    through kept entries, so masked inputs cannot influence the output at all."""
    a = _wrap(a)
    keep_arr = np.broadcast_to(np.asarray(keep, dtype=bool), a.data.shape)
    out = np.where(keep_arr, a.data, float(value))

    def backward_fn(g):
        return (np.where(keep_arr, g, 0.0),)

    return _make(out, (a,), backward_fn)


# -- softmax family ----------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Probability-normalize along `axis`, with max-subtraction for stability."""
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), backward_fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _wrap(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward_fn(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply an
    affine gain and bias. `eps` sits inside the square root and guards the
    zero-variance case."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    n = x.data.shape[-1]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ShapeError("layer_norm gain/bias must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv
    out = y * gain.data + bias.data

    def backward_fn(g):
        dgain = (g * y).reshape(-1, n).sum(axis=0)
        dbias = g.reshape(-1, n).sum(axis=0)
        dy = g * gain.data
        dx = inv * (dy - dy.mean(axis=-1, keepdims=True) - y * (dy * y).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _make(out, (x, gain, bias), backward_fn)


def cross_entropy(probs: Tensor, target_index: int) -> Tensor:
    """Negative log-likelihood of `target_index` under an already-normalized
    distribution. A zero probability is clamped to 1e-12 with a warning."""
    probs = _wrap(probs)
    if probs.ndim != 1:
        raise ShapeError("cross_entropy expects a 1-D distribution")
    t = int(target_index)
    if not 0 <= t < probs.data.shape[0]:
        raise ShapeError("target index out of range")
    p = probs.data[t]
    if p <= 0.0:
        warnings.warn("cross_entropy target probability clamped to 1e-12")
    p_safe = max(p, 1e-12)
    out = np.asarray(-np.log(p_safe))

    def backward_fn(g):
        z = np.zeros_like(probs.data)
        z[t] = -float(g) / p_safe
        return (z,)

    return _make(out, (probs,), backward_fn)


def softmax_cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Fused log-softmax + NLL over rows of `logits`; the gradient with respect
    to the logits is (softmax - one_hot), which stays stable for any scale."""
    logits = _wrap(logits)
    if logits.ndim == 1:
        logits = reshape(logits, (1, -1))
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, k = logits.data.shape
    if t.shape[0] != n:
        raise ShapeError("one target per logits row required")
    if t.size and (t.min() < 0 or t.max() >= k):
        raise ShapeError("target id out of range")
    m = logits.data.max(axis=1, keepdims=True)
    shifted = logits.data - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    nll = (lse - shifted[np.arange(n), t][:, None]).reshape(-1)
    if reduction == "mean":
        out = np.asarray(nll.mean())
    elif reduction == "sum":
        out = np.asarray(nll.sum())
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    probs = np.exp(shifted - lse)

    def backward_fn(g):
        d = probs.copy()
        d[np.arange(n), t] -= 1.0
        d *= float(g)
        if reduction == "mean":
            d /= n
        return (d,)

    return _make(out, (logits,), backward_fn)


# -- backward pass -----------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate gradients of `loss` into every reachable requires_grad
    tensor. Repeated calls without zeroing keep accumulating."""
    if not isinstance(loss, Tensor):
        raise NumericsError("backward needs a Tensor")
    if loss.data.size != 1:
        raise NumericsError("backward needs a scalar loss")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward_fn is None:
            continue
        parent_grads = node._backward_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + pg
            else:
                pending[id(parent)] = np.asarray(pg, dtype=np.float64)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-4,
    max_entries_per_param: int = 4,
    rng: "Rng | None" = None,
) -> float:
    """Compare analytic gradients against central finite differences.

    `loss_fn` must be deterministic (it is called repeatedly while single
    parameter entries are perturbed in place). Returns the maximum relative
    error |analytic - numeric| / max(1e-8, |analytic| + |numeric|) over a
    sampled subset of scalar entries.
    """
    rng = rng or Rng(0)
    items = list(params.items())
    zero_grads(p for _, p in items)
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NumericsError("loss is not finite")
    backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in items}

    worst = 0.0
    for name, p in items:
        flat = p.data.reshape(-1)
        size = flat.shape[0]
        if size <= max_entries_per_param:
            picks = np.arange(size)
        else:
            picks = rng.choice(size, max_entries_per_param)
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + eps
            up = loss_fn().item()
            flat[idx] = orig - eps
            down = loss_fn().item()
            flat[idx] = orig
            numeric = (up - down) / (2.0 * eps)
            a = float(analytic[name].reshape(-1)[idx])
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, rel)
    return worst


# -- randomness and initialization -------------------------------------------


class Rng:
    """Seeded random source; identical seeds yield identical draw sequences.

    `spawn(tag)` derives an independent child stream from a stable hash of
    (seed, tag), so subsystems stay reproducible regardless of call order."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, tag: str) -> "Rng":
        digest = hashlib.sha256(f"{self.seed}:{tag}".encode("utf-8")).digest()
        return Rng(int.from_bytes(digest[:8], "little"))

    def random(self) -> float:
        return float(self._gen.random())

    def uniform(self, low: float, high: float, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, k: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=k, replace=replace)


def xavier_uniform(rng: Rng, rows: int, cols: int) -> Tensor:
    """Xavier/Glorot uniform weight init for an (in, out)-shaped matrix."""
    limit = np.sqrt(6.0 / (rows + cols))
    return Tensor(rng.uniform(-limit, limit, (rows, cols)), requires_grad=True)


def zeros_param(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(*shape: int) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


# -- optimizer ----------------------------------------------------------------


class Adam:
    """Adam with per-group learning rates (bias-corrected moments).

    `groups` is a list of {"name": str, "lr": float, "params": dict} entries;
    separate groups let the encoder fine-tune at a different rate than the
    freshly initialized heads.
    """

    def __init__(self, groups: list[dict], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.groups = []
        for g in groups:
            params = dict(g["params"])
            self.groups.append({"name": g.get("name", "group"), "lr": float(g["lr"]), "params": params})
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = {}
        self._v = {}
        for g in self.groups:
            for name, p in g["params"].items():
                key = (g["name"], name)
                self._m[key] = np.zeros_like(p.data)
                self._v[key] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for g in self.groups:
            zero_grads(g["params"].values())

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for g in self.groups:
            lr = g["lr"]
            for name, p in g["params"].items():
                if p.grad is None:
                    continue
                key = (g["name"], name)
                m = self._m[key]
                v = self._v[key]
                m *= self.beta1
                m += (1.0 - self.beta1) * p.grad
                v *= self.beta2
                v += (1.0 - self.beta2) * (p.grad * p.grad)
                p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_summary(self) -> dict:
        """Small JSON-able snapshot; exposes the learning-rate groups."""
        return {
            "step": self.t,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "groups": [
                {"name": g["name"], "lr": g["lr"], "param_count": int(sum(p.size for p in g["params"].values())), "params": sorted(g["params"])}
                for g in self.groups
            ],
        }


# -- checkpoint file format ---------------------------------------------------
#
# Layout (all integers little-endian uint64, floats little-endian float64):
#   magic            8 bytes  b"MEDCKPT\x00"
#   version          u64      currently 1
#   tensor count     u64
#   per tensor (sorted by name):
#     name length    u64
#     name           UTF-8 bytes
#     rank           u64
#     dims           rank * u64
#     payload        prod(dims) * f64, row-major

CHECKPOINT_MAGIC = b"MEDCKPT\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, named: Mapping[str, "Tensor | np.ndarray"]) -> None:
    items = sorted(named.items())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(items)))
        for name, value in items:
            arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<Q", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise NumericsError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<Q", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise NumericsError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<Q", blob, 16)
    offset = 24
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<Q", blob, offset)
        offset += 8
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<Q", blob, offset)
        offset += 8
        dims = struct.unpack_from(f"<{rank}Q", blob, offset) if rank else ()
        offset += 8 * rank
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(dims)
        offset += 8 * n
        out[name] = arr.astype(np.float64)
    if offset != len(blob):
        raise NumericsError("trailing bytes in checkpoint")
    return out
