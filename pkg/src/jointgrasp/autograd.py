"""Dense tensors with reverse-mode differentiation.

Only the primitives needed by the dual-branch network and its losses are
provided. Every op works on numpy arrays; a leading batch axis is allowed
wherever the op makes sense, but there is no general broadcasting.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, OracleError

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12

_verify = True


def set_verification(enabled: bool) -> None:
    """Toggle finiteness checks on every op output (leaves are always checked)."""
    global _verify
    _verify = bool(enabled)


def verification_enabled() -> bool:
    return _verify


class Tensor:
    """A node in the computation graph.

    Leaves hold user data; interior nodes remember their parents and a
    closure that maps the output gradient to parent gradients.
    """

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        parents: Sequence["Tensor"] = (),
        op: str = "leaf",
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        dtype=np.float64,
    ):
        arr = np.array(data, dtype=dtype, copy=True) if op == "leaf" else np.asarray(data)
        if (op == "leaf" or _verify) and not np.all(np.isfinite(arr)):
            raise ContractError(f"non-finite values in tensor produced by {op!r}")
        arr.flags.writeable = False
        self.data = arr
        self.op = op
        self.parents = tuple(parents)
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in self.parents)
        self._backward_fn = backward_fn
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, op, backward_fn) -> Tensor:
    return Tensor(data, parents=parents, op=op, backward_fn=backward_fn)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _node(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _node(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a, b) -> Tensor:
    """Elementwise product of equal-shape tensors, or tensor times a Python scalar."""
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        s = float(b)
        return _node(a.data * s, (a,), "scale", lambda g: (g * s,))
    b = as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), "mul", lambda g: (g * bd, g * ad))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(ad * ad, (a,), "square", lambda g: (2.0 * ad * g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


def log(a, floor: float = PROB_FLOOR) -> Tensor:
    """Natural log with inputs floored at ``floor``; no gradient where the floor is active."""
    a = as_tensor(a)
    active = a.data > floor
    clipped = np.maximum(a.data, floor)
    return _node(np.log(clipped), (a,), "log", lambda g: (np.where(active, g / clipped, 0.0),))


def softmax(a) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (a,), "softmax", backward)


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _node(out, (a,), "log_softmax", backward)


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Fused ``-sum(targets * log_softmax(logits))`` over the last axis.

    ``targets`` is a constant array of one-hot or all-zero rows. Returns one
    loss per row (a scalar tensor for 1-D logits).
    """
    logits = as_tensor(logits)
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise DimensionError(f"cross-entropy: targets {t.shape} vs logits {logits.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    p = np.exp(logp)
    tsum = t.sum(axis=-1, keepdims=True)
    loss = -(t * logp).sum(axis=-1)

    def backward(g):
        g = np.asarray(g)[..., None]
        return (g * (p * tsum - t),)

    return _node(loss, (logits,), "softmax_ce", backward)


# ---------------------------------------------------------------- reductions / shape


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _node(out, (a,), "sum", backward)


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.size
    shape = a.shape
    return _node(a.data.mean(), (a,), "mean", lambda g: (np.full(shape, float(g) / n),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(old),))


def flatten(a) -> Tensor:
    """Collapse every axis after the batch axis."""
    a = as_tensor(a)
    return reshape(a, (a.shape[0], -1))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _node(a.data.T, (a,), "transpose", lambda g: (g.T,))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat of an empty list")
    ndim = ts[0].data.ndim
    ax = axis % ndim
    for t in ts:
        if t.data.ndim != ndim or any(t.shape[d] != ts[0].shape[d] for d in range(ndim) if d != ax):
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in ts]}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _node(np.concatenate([t.data for t in ts], axis=ax), ts, "concat", backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data

    def backward(g):
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            return bd @ g, np.outer(ad, g)
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g @ bd.T, ad.T @ g

    return _node(ad @ bd, (a, b), "matmul", backward)


def add_bias(x, b) -> Tensor:
    """Add a bias vector along the last axis of ``x``."""
    x, b = as_tensor(x), as_tensor(b)
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match input {x.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return _node(x.data + b.data, (x, b), "add_bias", lambda g: (g, g.sum(axis=lead)))


def linear(x, weight, bias) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` of shape (out, in)."""
    return add_bias(matmul(x, transpose(weight)), bias)


# ---------------------------------------------------------------- convolution


def conv2d(x, kernels, bias=None, stride: int = 1) -> Tensor:
    """Valid cross-correlation of a (B, C, H, W) batch with (F, C, kh, kw) kernels."""
    x, k = as_tensor(x), as_tensor(kernels)
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernels, got {x.shape} and {k.shape}")
    _, c, h, w = x.shape
    f, kc, kh, kw = k.shape
    if kc != c:
        raise DimensionError(f"conv2d: kernel channels {kc} != input channels {c}")
    if kh > h or kw > w:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than image {h}x{w}")
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be >= 1, got {stride}")
    xd, kd = x.data, k.data
    b = xd.shape[0]
    win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # im2col: rows are (b, h, w) positions, columns are (c, i, j) taps
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    kmat = kd.reshape(f, c * kh * kw)
    out = (cols @ kmat.T).reshape(b, ho, wo, f).transpose(0, 3, 1, 2)
    parents: list[Tensor] = [x, k]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (f,):
            raise DimensionError(f"conv2d: bias {bias.shape} does not match {f} kernels")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, f)
        dk = (gmat.T @ cols).reshape(kd.shape)
        dcols = (gmat @ kmat).reshape(b, ho, wo, c, kh, kw)
        dx = np.zeros_like(xd)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        if bias is None:
            return dx, dk
        return dx, dk, g.sum(axis=(0, 2, 3))

    return _node(out, parents, "conv2d", backward)


def max_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; ``size`` must divide both spatial dims."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise DimensionError(f"max_pool2d expects (B, C, H, W), got {x.shape}")
    b, c, h, w = x.shape
    if h % size or w % size:
        raise DimensionError(f"max_pool2d: window {size} does not divide feature map {h}x{w}")
    ho, wo = h // size, w // size
    blocks = x.data.reshape(b, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, size * size)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        mask = np.zeros_like(blocks)
        np.put_along_axis(mask, idx[..., None], g[..., None], axis=-1)
        return (mask.reshape(b, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w),)

    return _node(out, (x,), "max_pool2d", backward)


def conv_feature_map(x, kernels, stride: int = 1, pool: int | None = None, bias=None) -> Tensor:
    """Convolve a single (C, H, W) image or a batch, then optionally max-pool.

    A 2-D input is treated as one single-channel image and a 2-D kernel as a
    single filter; the output keeps the input's rank.
    """
    x, k = as_tensor(x), as_tensor(kernels)
    squeeze = 0
    if x.data.ndim == 2:
        x, squeeze = reshape(x, (1, 1) + x.shape), 2
    elif x.data.ndim == 3:
        x, squeeze = reshape(x, (1,) + x.shape), 1
    if k.data.ndim == 2:
        k = reshape(k, (1, 1) + k.shape)
    out = conv2d(x, k, bias=bias, stride=stride)
    if pool:
        out = max_pool2d(out, pool)
    if squeeze == 2:
        return reshape(out, out.shape[2:])
    if squeeze == 1:
        return reshape(out, out.shape[1:])
    return out


# ---------------------------------------------------------------- layer stacks

ACTIVATIONS = ("relu", "softmax", "identity")


@dataclass
class Layer:
    weight: Tensor
    bias: Tensor
    activation: str = "relu"


@dataclass
class LayerStack:
    """Fully connected layers ``h[m] = g(W[m] h[m-1] + b[m])``."""

    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        for m, layer in enumerate(self.layers, start=1):
            if layer.activation not in ACTIVATIONS:
                raise DimensionError(f"layer {m}: unknown activation {layer.activation!r}")
            if layer.activation == "softmax" and m != len(self.layers):
                raise DimensionError(f"layer {m}: only the final layer may use softmax")
            w, b = layer.weight.shape, layer.bias.shape
            if len(w) != 2 or b != (w[0],):
                raise DimensionError(f"layer {m}: weight {w} and bias {b} are inconsistent")
            if m > 1 and w[1] != self.layers[m - 2].weight.shape[0]:
                raise DimensionError(
                    f"layer {m}: expects input dim {w[1]}, previous layer outputs {self.layers[m - 2].weight.shape[0]}"
                )

    @property
    def dims(self) -> list[int]:
        if not self.layers:
            return []
        return [self.layers[0].weight.shape[1]] + [layer.weight.shape[0] for layer in self.layers]

    def parameters(self) -> list[Tensor]:
        return [t for layer in self.layers for t in (layer.weight, layer.bias)]


def apply_activation(h: Tensor, name: str) -> Tensor:
    if name == "relu":
        return relu(h)
    if name == "softmax":
        return softmax(h)
    if name == "identity":
        return h
    raise DimensionError(f"unknown activation {name!r}")


def eval_layer_stack(x, stack: LayerStack) -> list[Tensor]:
    """Return every activation ``[h0, h1, ..., hM]`` of the stack for input ``x``."""
    h = as_tensor(x)
    acts = [h]
    for m, layer in enumerate(stack.layers, start=1):
        d_in = layer.weight.shape[1]
        if h.shape[-1] != d_in:
            raise DimensionError(f"layer {m}: expects input dim {d_in}, got {h.shape[-1]}")
        h = apply_activation(linear(h, layer.weight, layer.bias), layer.activation)
        acts.append(h)
    return acts


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Populates ``.grad`` on every node between a trainable leaf and the loss
    and returns ``{leaf: gradient}`` for the reachable leaves created with
    ``requires_grad=True``. Leaves cut off by ``detach`` or built without
    gradients are absent from the map.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g
        if node._backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node._backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
    return {n: n.grad for n in order if n.op == "leaf" and n.grad is not None}


# ---------------------------------------------------------------- finite differences


def finite_diff_grad(
    f: Callable[..., float],
    params: Sequence,
    eps: float = 1e-5,
) -> list[np.ndarray]:
    """Central-difference gradient of ``f(*values)`` with respect to each parameter.

    ``params`` may hold Tensors or arrays; ``f`` is always called with plain
    float64 arrays in the same order.
    """
    if not eps > 0:
        raise ContractError(f"finite_diff_grad: eps must be positive, got {eps}")
    values = [np.array(p.data if isinstance(p, Tensor) else p, dtype=np.float64) for p in params]
    grads = []
    for k, v in enumerate(values):
        g = np.zeros_like(v)
        flat, gflat = v.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(*values))
            flat[i] = orig - eps
            lo = float(f(*values))
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise OracleError(f"objective not finite at parameter {k}, coordinate {i}")
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return grads


def max_relative_error(a: Iterable[np.ndarray], b: Iterable[np.ndarray], floor: float = 1e-6) -> float:
    """Largest ``|a - b| / max(|a|, |b|, floor)`` over all coordinates."""
    worst = 0.0
    for x, y in zip(a, b):
        x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        if x.size:
            worst = max(worst, float(np.max(np.abs(x - y) / denom)))
    return worst
