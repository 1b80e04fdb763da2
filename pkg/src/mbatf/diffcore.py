"""Small reverse-mode autodiff engine over numpy arrays.

The op set is closed: embedding lookup, 1-D / 2-D convolution, masked
max-pool over time, matmul, relu, square, elementwise arithmetic with
trailing broadcasting, reductions, concat/reshape, log-softmax and softmax
cross-entropy. Parameters live in a :class:`ParameterStore` whose entries
carry a role tag (encoder / discriminator / scorer) so that optimizer
steps can be restricted to one role.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ENCODER = "encoder"
DISCRIMINATOR = "discriminator"
SCORER = "scorer"
ROLES = (ENCODER, DISCRIMINATOR, SCORER)

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def record_kinks():
    """Collect the activation pattern of every relu / max-pool evaluated.

    Two evaluations with identical logs took the same piecewise-linear
    branch everywhere, so a central difference across them is valid.
    """
    prev = getattr(_state, "kinks", None)
    log: list[np.ndarray] = []
    _state.kinks = log
    try:
        yield log
    finally:
        _state.kinks = prev


def _log_kink(pattern: np.ndarray) -> None:
    log = getattr(_state, "kinks", None)
    if log is not None:
        log.append(pattern)


class Tensor:
    """Dense array node in a recorded computation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if _grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    return _node(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)),
    )


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _node(xd * xd, (x,), lambda g: (2.0 * xd * g,))


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = x.data > 0
    _log_kink(mask)
    return _node(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


# -- shape ---------------------------------------------------------------


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# -- reductions ----------------------------------------------------------


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _node(np.asarray(x.data.sum(axis=axis)), (x,), backward)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"dot needs equal-length vectors, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _node(np.asarray(ad @ bd), (a, b), lambda g: (g * bd, g * ad))


# -- linear algebra ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul is defined for 2-D operands only")
    ad, bd = a.data, b.data
    return _node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup; `ids` is an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")

    td = table.data

    def backward(g):
        grad = np.zeros_like(td)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, td.shape[1]))
        return (grad,)

    return _node(td[ids], (table,), backward)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Convolution over axis 1 of a (B, L, C_in) input.

    weight has shape (window, C_in, C_out); output is (B, L_out, C_out).
    """
    B, L, C = x.shape
    kw, cin, cout = weight.shape
    if cin != C:
        raise ValueError(f"conv1d channel mismatch: input {C}, weight {cin}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (0, 0)))
    lout = xp.shape[1] - kw + 1
    cols = sliding_window_view(xp, kw, axis=1)  # (B, Lout, C, kw)
    cols2 = cols.reshape(B * lout, C * kw)
    wd = weight.data
    w2 = wd.transpose(1, 0, 2).reshape(C * kw, cout)
    out = (cols2 @ w2).reshape(B, lout, cout)
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(B * lout, cout)
        gw = (cols2.T @ g2).reshape(C, kw, cout).transpose(1, 0, 2)
        gxp = np.zeros_like(xp)
        for k in range(kw):
            gxp[:, k : k + lout, :] += g @ wd[k].T
        gx = gxp[:, padding : padding + L, :]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: tuple[int, int] = (0, 0)) -> Tensor:
    """Convolution of a (B, C_in, H, W) input with (C_out, C_in, kh, kw) kernels."""
    B, C, H, W = x.shape
    cout, cin, kh, kw = weight.shape
    if cin != C:
        raise ValueError(f"conv2d channel mismatch: input {C}, weight {cin}")
    ph, pw = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (B, C, Ho, Wo, kh, kw)
    ho, wo = win.shape[2], win.shape[3]
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d kernel {(kh, kw)} larger than padded input {xp.shape[2:]}")
    wd = weight.data
    out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # (Cout, C, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + ho, j : j + wo] += np.tensordot(
                    g, wd[:, :, i, j], axes=([1], [0])
                ).transpose(0, 3, 1, 2)
        gx = gxp[:, :, ph : ph + H, pw : pw + W]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward)


def masked_max_pool(x: Tensor, lengths: np.ndarray) -> Tensor:
    """Max over the time axis of (B, L, C), restricted to t < lengths[b]."""
    B, L, C = x.shape
    lengths = np.asarray(lengths)
    if np.any(lengths < 1) or np.any(lengths > L):
        raise ValueError("lengths must lie in [1, L]")
    valid = np.arange(L)[None, :, None] < lengths[:, None, None]
    masked = np.where(valid, x.data, -np.inf)
    idx = masked.argmax(axis=1)  # (B, C)
    _log_kink(idx)
    out = np.take_along_axis(x.data, idx[:, None, :], axis=1)[:, 0, :]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[:, None, :], g[:, None, :], axis=1)
        return (gx,)

    return _node(out, (x,), backward)


# -- softmax family ------------------------------------------------------


def log_softmax(logits: Tensor) -> Tensor:
    """Row-wise log-softmax of a (B, C) matrix."""
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return _node(out, (logits,), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of (B, C) logits against integer class labels."""
    labels = np.asarray(labels)
    B = logits.shape[0]
    if B == 0:
        raise ValueError("cross-entropy over an empty batch")
    if labels.shape != (B,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {B}")
    logp = log_softmax(logits)
    picked = _node(
        logp.data[np.arange(B), labels],
        (logp,),
        lambda g: (_scatter_rows(g, labels, logp.data),),
    )
    return mean(mul(picked, -1.0))


def _scatter_rows(g: np.ndarray, labels: np.ndarray, like: np.ndarray) -> np.ndarray:
    out = np.zeros_like(like)
    out[np.arange(len(labels)), labels] = g
    return out


# -- backward ------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: "ParameterStore | None" = None) -> "ParameterStore | None":
    """Populate gradients of a scalar loss.

    When `params` is given every parameter's grad is reset first, so
    parameters the loss does not reach end up with an all-zero grad.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        params.zero_grad()
    if not loss.requires_grad:
        return params
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return params


# -- parameters ----------------------------------------------------------


class ParameterStore:
    """Named, role-tagged trainable tensors."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._roles: dict[str, str] = {}

    def add(self, name: str, value: np.ndarray, role: str) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        t = Tensor(np.array(value), requires_grad=True)
        self._params[name] = t
        self._roles[name] = role
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def role(self, name: str) -> str:
        return self._roles[name]

    def names(self, role: str | None = None) -> list[str]:
        return [n for n in self._params if role is None or self._roles[n] == role]

    @property
    def dtype(self):
        first = next(iter(self._params.values()), None)
        return np.float64 if first is None else first.dtype

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def clone(self) -> "ParameterStore":
        out = ParameterStore()
        for name, t in self._params.items():
            out.add(name, t.data.copy(), self._roles[name])
        return out

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore()
        for name, t in self._params.items():
            out.add(name, t.data.astype(dtype), self._roles[name])
        return out

    def view(self, trainable: Iterable[str] = ROLES) -> dict[str, Tensor]:
        """Name -> Tensor map where roles outside `trainable` are constants."""
        trainable = set(trainable)
        return {
            n: t if self._roles[n] in trainable else Tensor(t.data)
            for n, t in self._params.items()
        }

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}


def sgd_step(params: ParameterStore, role_filter: str, lr: float) -> ParameterStore:
    """Plain SGD on every parameter with the given role; clears their grads."""
    names = params.names(role_filter)
    missing = [n for n in names if params[n].grad is None]
    if missing:
        raise RuntimeError(f"no gradient for {role_filter} parameters: {missing}")
    for n in names:
        p = params[n]
        p.data = (p.data - p.data.dtype.type(lr) * p.grad).astype(p.data.dtype, copy=False)
        p.grad = None
    return params


# -- gradient checking ---------------------------------------------------


@dataclass
class ParamCheck:
    name: str
    role: str
    max_rel_error: float
    n_checked: int
    n_excluded: int
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    epsilon: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    def __getitem__(self, name: str) -> ParamCheck:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)

    def format(self) -> str:
        rows = [f"{'parameter':<34} {'role':<14} {'max rel err':>12} {'checked':>8} {'kinks':>6}  ok"]
        for p in self.params:
            rows.append(
                f"{p.name:<34} {p.role:<14} {p.max_rel_error:>12.3e} {p.n_checked:>8d} "
                f"{p.n_excluded:>6d}  {'yes' if p.passed else 'NO'}"
            )
        return "\n".join(rows)


def finite_difference_check(
    loss_fn: Callable[[ParameterStore], Tensor],
    params: ParameterStore,
    epsilon: float = 1e-4,
    tolerance: float = 1e-3,
    names: Sequence[str] | None = None,
    max_coords: int | None = None,
    seed: int = 0,
    analytic: dict[str, np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with float64 central differences.

    The relative error of a coordinate is |a - n| / max(|a|, |n|, floor),
    with floor = 1e-3 * (largest analytic magnitude in that parameter) so
    that cancellation-sized entries do not dominate. Coordinates where the
    +eps and -eps evaluations take different relu / max-pool branches are
    excluded and counted. `analytic` overrides the gradients under test.
    """
    if analytic is None:
        loss = loss_fn(params)
        backward(loss, params)
        analytic = {n: params[n].grad.astype(np.float64) for n in params}
    probe = params.astype(np.float64)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance, epsilon=epsilon)

    def evaluate():
        with no_grad(), record_kinks() as log:
            value = loss_fn(probe).item()
        return value, log

    for name in names if names is not None else list(params):
        flat = probe[name].data.reshape(-1)
        grad = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        floor = max(1e-3 * float(np.abs(grad).max(initial=0.0)), 1e-12)
        worst, excluded = 0.0, 0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus, k_plus = evaluate()
            flat[i] = orig - epsilon
            f_minus, k_minus = evaluate()
            flat[i] = orig
            if len(k_plus) != len(k_minus) or any(
                not np.array_equal(a, b) for a, b in zip(k_plus, k_minus)
            ):
                excluded += 1
                continue
            numeric = (f_plus - f_minus) / (2 * epsilon)
            err = abs(grad[i] - numeric) / max(abs(grad[i]), abs(numeric), floor)
            worst = max(worst, err)
        report.params.append(
            ParamCheck(name, params.role(name), worst, len(coords) - excluded, excluded, worst <= tolerance)
        )
    return report
