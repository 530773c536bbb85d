"""Dense float64 tensors with reverse-mode differentiation.

Only the operations needed by the sequence transformer and the Q-network are
provided. Each op computes its value with numpy and records a closure mapping
the output gradient to one gradient per parent.
"""
from contextlib import contextmanager
import logging

import numpy as np
from scipy.special import expit

from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

logger = logging.getLogger(__name__)

_grad_enabled = True

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


@contextmanager
def no_grad() -> Iterator[None]:
    """Disables graph recording, e.g. for inference and finite differences."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor(object):
    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        parents: Tuple["Tensor", ...] = (),
        backward_fn: Optional[BackwardFn] = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = parents
        self._backward_fn = backward_fn

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return multiply(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return multiply(other, self)

    def __truediv__(self, other: float) -> "Tensor":
        if isinstance(other, Tensor):
            raise ValueError("Division is only supported by scalars.")
        return multiply(self, 1.0 / float(other))

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, idx) -> "Tensor":
        return index(self, idx)


class Parameter(Tensor):
    """A named leaf tensor that is optimised."""

    def __init__(self, data: ArrayLike, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter('{self.name}', shape={self.shape})"


def _as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, extent in enumerate(shape):
        if extent == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast.")


def backward(loss: Tensor) -> None:
    """Accumulates d(loss)/d(leaf) into `.grad` of every leaf requiring grad.

    Raises:
        ValueError: if `loss` is not a scalar
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}.")
    if not loss.requires_grad:
        logger.debug("backward called on a loss without recorded graph.")
        return

    order: List[Tensor] = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node._backward_fn is None:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        for parent, parent_grad in zip(node._parents, node._backward_fn(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad


def add(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward_fn(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward_fn)


def sub(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward_fn(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward_fn)


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,))


def multiply(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "multiply")

    def backward_fn(g: np.ndarray):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes, leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}.")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}.")

    def backward_fn(g: np.ndarray):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ np.broadcast_to(
                g, a.shape[:-1] + (b.shape[-1],)
            ).reshape(-1, b.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward_fn)


def transpose(x: Tensor, axis1: int, axis2: int) -> Tensor:
    return _make(
        np.swapaxes(x.data, axis1, axis2),
        (x,),
        lambda g: (np.swapaxes(g, axis1, axis2),),
    )


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {x.shape} into {shape}.")
    return _make(data, (x,), lambda g: (g.reshape(x.shape),))


def sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    def backward_fn(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward_fn)


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return multiply(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ValueError(
            f"concat: incompatible shapes {', '.join(str(t.shape) for t in tensors)}."
        )
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g: np.ndarray):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), backward_fn)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis. Rows must hold at least one finite value."""
    shifted = x.data - np.amax(x.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def backward_fn(g: np.ndarray):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _make(y, (x,), backward_fn)


def silu(x: Tensor) -> Tensor:
    s = expit(x.data)

    def backward_fn(g: np.ndarray):
        return (g * s * (1.0 + x.data * (1.0 - s)),)

    return _make(x.data * s, (x,), backward_fn)


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0.0
    return _make(np.where(positive, x.data, 0.0), (x,), lambda g: (g * positive,))


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-8) -> Tensor:
    """x / sqrt(mean(x²) + eps) * gain, normalising the last axis."""
    if gain.shape != x.shape[-1:]:
        raise ValueError(f"rms_norm: gain {gain.shape} does not match input {x.shape}.")
    r = np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    y = x.data / r

    def backward_fn(g: np.ndarray):
        G = g * gain.data
        gx = (G - y * np.mean(G * y, axis=-1, keepdims=True)) / r
        return gx, _unbroadcast(g * y, gain.shape)

    return _make(y * gain.data, (x, gain), backward_fn)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    if np.broadcast_shapes(mask.shape, x.shape) != x.shape:
        raise ValueError(f"masked_fill: mask {mask.shape} does not fit input {x.shape}.")
    return _make(
        np.where(mask, value, x.data), (x,), lambda g: (np.where(mask, 0.0, g),)
    )


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x · W (+ b) applied to the last axis of `x`."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input {x.shape} does not match weight {weight.shape}.")
    if x.ndim == 1:
        out = reshape(matmul(reshape(x, (1, -1)), weight), (weight.shape[1],))
    else:
        out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def dropout(
    x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool = True
) -> Tensor:
    """Inverted dropout, the identity when `p` is 0 or not training."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}.")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: a generator is required when training.")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return multiply(x, keep)


def index(x: Tensor, idx) -> Tensor:
    """Numpy indexing with a scatter-add backward."""
    data = x.data[idx]

    def backward_fn(g: np.ndarray):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(np.array(data), (x,), backward_fn)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-position negative log-likelihood of integer `targets`.

    Args:
        logits: tensor (..., N)
        targets: integer array (...)

    Returns:
        tensor of shape targets.shape
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ValueError(
            f"cross_entropy: logits {logits.shape} do not match targets {targets.shape}."
        )
    if np.any(targets < 0) or np.any(targets >= logits.shape[-1]):
        raise ValueError(f"cross_entropy: targets outside [0, {logits.shape[-1]}).")
    shifted = logits.data - np.amax(logits.data, axis=-1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=-1))
    picked = np.take_along_axis(shifted, targets[..., None], axis=-1)[..., 0]
    nll = log_z - picked

    def backward_fn(g: np.ndarray):
        probs = np.exp(shifted - log_z[..., None])
        np.put_along_axis(
            probs,
            targets[..., None],
            np.take_along_axis(probs, targets[..., None], axis=-1) - 1.0,
            axis=-1,
        )
        return (probs * g[..., None],)

    return _make(nll, (logits,), backward_fn)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-12,
) -> float:
    """Compares reverse-mode gradients with central finite differences.

    Args:
        f: deterministic scalar function of `params`
        params: leaf tensors, perturbed in place
        step: finite difference step h
        max_coords: check a random subset of this many coordinates
        rng: generator for the subset
        floor: lower bound of the relative error denominator

    Returns:
        max |g_ad - g_fd| / max(floor, |g_ad| + |g_fd|)
    """
    for p in params:
        p.grad = None
    backward(f())
    analytic = [
        p.grad.reshape(-1) if p.grad is not None else np.zeros(p.size) for p in params
    ]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng if rng is not None else np.random.default_rng(0)
        chosen = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in np.sort(chosen)]

    worst = 0.0
    with no_grad():
        for i, j in coords:
            flat = params[i].data.reshape(-1)
            original = flat[j]
            flat[j] = original + step
            plus = f().item()
            flat[j] = original - step
            minus = f().item()
            flat[j] = original
            numeric = (plus - minus) / (2.0 * step)
            exact = analytic[i][j]
            error = abs(exact - numeric) / max(floor, abs(exact) + abs(numeric))
            worst = max(worst, error)
    return worst


def adamw_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: Dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> bool:
    """One in-place AdamW update with decoupled weight decay.

    Args:
        params: arrays updated in place
        grads: gradients by parameter name, missing names count as zero
        state: moments and step count, filled on first use
        lr: learning rate
        beta1: first moment decay
        beta2: second moment decay
        eps: denominator term
        weight_decay: decay rate, applied as θ ← θ(1 - lr·wd)

    Returns:
        False if a gradient was non-finite and the step was rejected
    """
    for name, g in grads.items():
        if name not in params:
            raise ValueError(f"Gradient for unknown parameter '{name}'.")
        if g.shape != params[name].shape:
            raise ValueError(
                f"Gradient of '{name}' has shape {g.shape}, expected "
                f"{params[name].shape}."
            )
        if not np.all(np.isfinite(g)):
            logger.warning(f"Non-finite gradient in '{name}', step rejected.")
            return False

    step = state.get("step", 0) + 1
    m = state.setdefault("m", {})
    v = state.setdefault("v", {})
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if name not in m:
            m[name] = np.zeros_like(p)
            v[name] = np.zeros_like(p)
        p *= 1.0 - lr * weight_decay
        m[name] = beta1 * m[name] + (1.0 - beta1) * g
        v[name] = beta2 * v[name] + (1.0 - beta2) * g * g
        m_hat = m[name] / (1.0 - beta1**step)
        v_hat = v[name] / (1.0 - beta2**step)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    state["step"] = step
    return True


class AdamW(object):
    def __init__(
        self,
        params: Dict[str, Parameter],
        lr: float = 1e-3,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: Dict = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: Optional[float] = None) -> bool:
        grads = {
            name: p.grad for name, p in self.params.items() if p.grad is not None
        }
        return adamw_step(
            {name: p.data for name, p in self.params.items()},
            grads,
            self.state,
            self.lr if lr is None else lr,
            self.betas[0],
            self.betas[1],
            self.eps,
            self.weight_decay,
        )
