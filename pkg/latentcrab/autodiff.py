###
# Licensed under the Apache License, Version 2.0 (the "License");
# You may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
# http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
###
"""Dense tensors with tape-based reverse-mode differentiation.

Primitives record themselves on the innermost active GradientTape when at least
one input requires a gradient; outside a tape every op is a plain numpy forward
pass. Backward replays the tape in reverse recording order, which is a reverse
topological order of the computation.
"""

import contextlib
import typing as t

import numpy as np
from scipy.special import expit, logsumexp


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_default_dtype = [np.float32]
_active_tapes: t.List["GradientTape"] = []


def get_default_dtype():
    return _default_dtype[-1]


@contextlib.contextmanager
def default_dtype(dtype):
    # gradient verification runs at float64, training at float32
    _default_dtype.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _default_dtype.pop()


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: t.Optional[str] = None):
        self.data = np.array(data, dtype=get_default_dtype(), order="C")
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        # op outputs keep their computed dtype
        out = cls.__new__(cls)
        out.data = array
        out.requires_grad = False
        out.name = None
        return out

    @property
    def shape(self) -> t.Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(other, scale(self, -1.0))

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class _Record(t.NamedTuple):
    op: str
    inputs: t.Tuple[Tensor, ...]
    output: Tensor
    backward: t.Callable[[np.ndarray], t.Sequence[t.Optional[np.ndarray]]]


class GradientTape:
    """Ordered record of primitive ops and the gradients accumulated from them."""

    def __init__(self):
        self.records: t.List[_Record] = []
        self.gradients: t.Dict[int, np.ndarray] = {}

    def __enter__(self):
        _active_tapes.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _active_tapes.remove(self)
        return False

    def record(self, op, inputs, output, backward_fn):
        self.records.append(_Record(op, tuple(inputs), output, backward_fn))

    def gradient(self, loss: Tensor) -> t.Dict[int, np.ndarray]:
        return backward(loss, self)

    def grad(self, tensor: Tensor) -> t.Optional[np.ndarray]:
        return self.gradients.get(id(tensor))


def _record(op, inputs, out_data, backward_fn) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op} produced non-finite values (shape {list(np.shape(out_data))})")
    out = Tensor._wrap(out_data)
    if _active_tapes and any(x.requires_grad for x in inputs):
        out.requires_grad = True
        _active_tapes[-1].record(op, inputs, out, backward_fn)
    return out


def backward(loss: Tensor, tape: GradientTape) -> t.Dict[int, np.ndarray]:
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if not any(rec.output is loss for rec in tape.records):
        raise ValueError("loss was not produced on this tape")

    grads: t.Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.get(id(rec.output))
        if g is None:
            continue
        for x, gx in zip(rec.inputs, rec.backward(g)):
            if gx is None or not x.requires_grad:
                continue
            if gx.shape != x.shape:
                raise ShapeError(f"{rec.op} backward produced {gx.shape} for input {x.shape}")
            key = id(x)
            if key in grads:
                grads[key] = grads[key] + gx
            else:
                grads[key] = gx
    tape.gradients = grads
    return grads


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _const(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=like.data.dtype))


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {list(a.shape)} x {list(b.shape)}")
    out = np.matmul(a.data, b.data)

    def backward_fn(g):
        da = np.matmul(g, np.swapaxes(b.data, -1, -2))
        db = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(da, a.shape), _unbroadcast(db, b.shape)

    return _record("matmul", (a, b), out, backward_fn)


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _const(a, b)
    b = _const(b, a)
    try:
        out = a.data + b.data
    except ValueError as err:
        raise ShapeError(f"add shapes do not broadcast: {list(a.shape)} + {list(b.shape)}") from err

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), out, backward_fn)


def multiply(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _const(a, b)
    b = _const(b, a)
    try:
        out = a.data * b.data
    except ValueError as err:
        raise ShapeError(f"multiply shapes do not broadcast: {list(a.shape)} * {list(b.shape)}") from err

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("multiply", (a, b), out, backward_fn)


def scale(a: Tensor, factor: float) -> Tensor:
    out = a.data * a.data.dtype.type(factor)

    def backward_fn(g):
        return (g * a.data.dtype.type(factor),)

    return _record("scale", (a,), out, backward_fn)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", (a,), np.asarray(out), backward_fn)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"embedding ids outside [0, {table.shape[0]}): min {ids.min()}, max {ids.max()}")
    out = table.data[ids]

    def backward_fn(g):
        dtable = np.zeros_like(table.data)
        np.add.at(dtable, ids, g)
        return (dtable,)

    return _record("embedding", (table,), out, backward_fn)


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-5) -> Tensor:
    if weight.shape != x.shape[-1:]:
        raise ShapeError(f"rms_norm weight {list(weight.shape)} does not match features {list(x.shape)}")
    rms = np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + x.data.dtype.type(eps))
    xhat = x.data / rms
    out = xhat * weight.data

    def backward_fn(g):
        dweight = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        dxhat = g * weight.data
        dx = (dxhat - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)) / rms
        return dx, dweight

    return _record("rms_norm", (x, weight), out, backward_fn)


def silu(x: Tensor) -> Tensor:
    sig = expit(x.data)
    out = x.data * sig

    def backward_fn(g):
        return (g * sig * (1.0 + x.data * (1.0 - sig)),)

    return _record("silu", (x,), out, backward_fn)


def masked_softmax(scores: Tensor, mask) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.shape[-mask.ndim:]:
        raise ShapeError(f"mask {list(mask.shape)} does not match scores {list(scores.shape)}")
    if not np.all(np.any(mask, axis=-1)):
        rows = np.flatnonzero(~np.any(mask.reshape(-1, mask.shape[-1]), axis=-1))
        raise ValueError(f"masked_softmax: fully-masked rows {rows.tolist()}")
    shifted = np.where(mask, scores.data, -np.inf)
    shifted = shifted - np.max(shifted, axis=-1, keepdims=True)
    exp = np.where(mask, np.exp(shifted), 0.0).astype(scores.data.dtype)
    probs = exp / np.sum(exp, axis=-1, keepdims=True)

    def backward_fn(g):
        return (probs * (g - np.sum(g * probs, axis=-1, keepdims=True)),)

    return _record("masked_softmax", (scores,), probs, backward_fn)


def cross_entropy(logits: Tensor, targets, loss_mask) -> Tensor:
    targets = np.asarray(targets, dtype=np.int64)
    loss_mask = np.asarray(loss_mask, dtype=bool)
    if logits.ndim != 2 or targets.shape != logits.shape[:1] or loss_mask.shape != targets.shape:
        raise ShapeError(
            f"cross_entropy expects logits [T,V] with targets/mask [T]: "
            f"{list(logits.shape)}, {list(targets.shape)}, {list(loss_mask.shape)}"
        )
    count = int(loss_mask.sum())
    if count == 0:
        raise ValueError("no supervised positions")
    vocab = logits.shape[1]
    picked = targets[loss_mask]
    if picked.min() < 0 or picked.max() >= vocab:
        raise ValueError(f"cross_entropy targets outside vocabulary of size {vocab}")

    rows = np.flatnonzero(loss_mask)
    log_probs = logits.data[rows] - logsumexp(logits.data[rows], axis=-1, keepdims=True)
    out = np.asarray(-np.sum(log_probs[np.arange(count), picked]) / count, dtype=logits.data.dtype)

    def backward_fn(g):
        dlogits = np.zeros_like(logits.data)
        probs = np.exp(log_probs)
        probs[np.arange(count), picked] -= 1.0
        dlogits[rows] = probs * (g / count)
        return (dlogits,)

    return _record("cross_entropy", (logits,), out, backward_fn)


def _loss_target(pred: Tensor, target, op: str) -> np.ndarray:
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.shape:
        raise ShapeError(f"{op}: prediction {list(pred.shape)} and target {list(target.shape)} differ")
    return target


def l1_loss(pred: Tensor, target) -> Tensor:
    # target is a constant: no gradient flows into it
    target = _loss_target(pred, target, "l1_loss")
    diff = pred.data - target
    out = np.asarray(np.mean(np.abs(diff)), dtype=pred.data.dtype)

    def backward_fn(g):
        # np.sign(0) == 0 gives the zero subgradient at the kink
        return (np.sign(diff) * (g / diff.size),)

    return _record("l1_loss", (pred,), out, backward_fn)


def mse_loss(pred: Tensor, target) -> Tensor:
    target = _loss_target(pred, target, "mse_loss")
    diff = pred.data - target
    out = np.asarray(np.mean(diff * diff), dtype=pred.data.dtype)

    def backward_fn(g):
        return (diff * (2.0 * g / diff.size),)

    return _record("mse_loss", (pred,), out, backward_fn)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"cannot reshape {list(a.shape)} into {list(shape)}") from err

    def backward_fn(g):
        return (g.reshape(a.shape),)

    return _record("reshape", (a,), out, backward_fn)


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)

    def backward_fn(g):
        return (np.transpose(g, inverse),)

    return _record("transpose", (a,), out, backward_fn)


def concatenate(tensors: t.Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concatenate needs at least one tensor")
    try:
        out = np.concatenate([x.data for x in tensors], axis=axis)
    except ValueError as err:
        raise ShapeError(f"cannot concatenate shapes {[list(x.shape) for x in tensors]}") from err
    bounds = np.cumsum([x.shape[axis] for x in tensors])[:-1]

    def backward_fn(g):
        return np.split(g, bounds, axis=axis)

    return _record("concatenate", tuple(tensors), out, backward_fn)


def slice_(a: Tensor, index) -> Tensor:
    out = np.array(a.data[index])

    def backward_fn(g):
        da = np.zeros_like(a.data)
        np.add.at(da, index, g)
        return (da,)

    return _record("slice", (a,), out, backward_fn)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


def grad_check(
    f: t.Callable[..., Tensor],
    inputs: t.Sequence[Tensor],
    h: float = 1e-3,
    max_elements: t.Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    The error of one element is |analytic - central| / max(1, |central|).
    `max_elements` limits the checked entries per input (sampled without
    replacement) for large composites.
    """
    if not 1e-4 <= h <= 1e-2:
        raise ValueError(f"finite-difference step {h} outside [1e-4, 1e-2]")
    inputs = list(inputs)

    with GradientTape() as tape:
        loss = f(*inputs)
    if loss.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {list(loss.shape)}")
    grads = backward(loss, tape)

    def evaluate() -> float:
        value = float(f(*inputs).data.reshape(-1)[0])
        if not np.isfinite(value):
            raise NonFiniteError("grad_check: function returned a non-finite value")
        return value

    rng = np.random.default_rng(seed)
    worst = 0.0
    for x in inputs:
        analytic = grads.get(id(x), np.zeros_like(x.data))
        flat = x.data.reshape(-1)
        positions = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            positions = rng.choice(flat.size, size=max_elements, replace=False)
        for pos in positions:
            original = flat[pos]
            flat[pos] = original + h
            plus = evaluate()
            flat[pos] = original - h
            minus = evaluate()
            flat[pos] = original
            central = (plus - minus) / (2.0 * h)
            err = abs(float(analytic.reshape(-1)[pos]) - central) / max(1.0, abs(central))
            worst = max(worst, err)
    return worst
