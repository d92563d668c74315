"""Minimal dense-array reverse-mode autodiff engine.

Values are float64 ndarrays; the graph is a DAG of :class:`Tensor` nodes with
per-node backward closures.  Only the layers the separator and policy need
are provided; no fusion, no broadcasting beyond what those layers use.
"""

from __future__ import annotations

import numpy as np

from ..errors import InputError

#: When true, every op asserts its output (and later its gradient) is finite.
CHECK_FINITE = False


def _check(arr, what="value"):
    if CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite {what} produced by an op")
    return arr


class Tensor:
    """A node in the computation record."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _needs(*tensors) -> bool:
    return any(t.requires_grad for t in tensors)


def _accumulate(t: Tensor, grad) -> None:
    if not t.requires_grad:
        return
    _check(grad, "gradient")
    if t.grad is None:
        t.grad = np.array(grad, dtype=np.float64, copy=True)
    else:
        t.grad += grad


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(_check(a.data + b.data), _needs(a, b), (a, b))

    def backward(grad):
        _accumulate(a, _unbroadcast(grad, a.shape))
        _accumulate(b, _unbroadcast(grad, b.shape))

    out.backward_fn = backward
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(_check(a.data - b.data), _needs(a, b), (a, b))

    def backward(grad):
        _accumulate(a, _unbroadcast(grad, a.shape))
        _accumulate(b, -_unbroadcast(grad, b.shape))

    out.backward_fn = backward
    return out


def multiply(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(_check(a.data * b.data), _needs(a, b), (a, b))

    def backward(grad):
        _accumulate(a, _unbroadcast(grad * b.data, a.shape))
        _accumulate(b, _unbroadcast(grad * a.data, b.shape))

    out.backward_fn = backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[0]:
        raise InputError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(_check(a.data @ b.data), _needs(a, b), (a, b))

    def backward(grad):
        _accumulate(a, grad @ b.data.T)
        _accumulate(b, a.data.T @ grad)

    out.backward_fn = backward
    return out


def concat(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        _needs(*tensors),
        tuple(tensors),
    )
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(grad):
        pieces = np.split(grad, np.cumsum(sizes)[:-1], axis=axis)
        for t, g in zip(tensors, pieces):
            _accumulate(t, g)

    out.backward_fn = backward
    return out


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Tensor(x.data[index], x.requires_grad, (x,))

    def backward(grad):
        full = np.zeros_like(x.data)
        full[index] = grad
        _accumulate(x, full)

    out.backward_fn = backward
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape), x.requires_grad, (x,))

    def backward(grad):
        _accumulate(x, grad.reshape(x.data.shape))

    out.backward_fn = backward
    return out


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0), x.requires_grad, (x,))

    def backward(grad):
        _accumulate(x, grad * mask)

    out.backward_fn = backward
    return out


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, slope * x.data), x.requires_grad, (x,))

    def backward(grad):
        _accumulate(x, grad * np.where(mask, 1.0, slope))

    out.backward_fn = backward
    return out


def sigmoid(x: Tensor) -> Tensor:
    z = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    out = Tensor(_check(y), x.requires_grad, (x,))

    def backward(grad):
        _accumulate(x, grad * y * (1.0 - y))

    out.backward_fn = backward
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y, x.requires_grad, (x,))

    def backward(grad):
        _accumulate(x, grad * (1.0 - y * y))

    out.backward_fn = backward
    return out


# ---------------------------------------------------------------------------
# reductions and losses


def tensor_sum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims), x.requires_grad, (x,))

    def backward(grad):
        g = np.asarray(grad)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.data.shape))

    out.backward_fn = backward
    return out


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    count = x.data.size if axis is None else x.data.shape[axis]
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims), x.requires_grad, (x,))

    def backward(grad):
        g = np.asarray(grad) / count
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.data.shape))

    out.backward_fn = backward
    return out


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise InputError(f"l1 shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = Tensor(np.abs(diff).mean(), _needs(pred, target), (pred, target))

    def backward(grad):
        g = grad * np.sign(diff) / diff.size
        _accumulate(pred, g)
        _accumulate(target, -g)

    out.backward_fn = backward
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(_check(y), x.requires_grad, (x,))

    def backward(grad):
        dot = (grad * y).sum(axis=axis, keepdims=True)
        _accumulate(x, y * (grad - dot))

    out.backward_fn = backward
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - logz
    out = Tensor(y, x.requires_grad, (x,))

    def backward(grad):
        p = np.exp(y)
        _accumulate(x, grad - p * grad.sum(axis=axis, keepdims=True))

    out.backward_fn = backward
    return out


def categorical_log_prob(logits: Tensor, actions) -> Tensor:
    """Log-probability of each action under a categorical over the last axis."""
    actions = np.asarray(actions, dtype=np.int64)
    if actions.shape != logits.shape[:-1]:
        raise InputError(
            f"actions shape {actions.shape} incompatible with logits {logits.shape}"
        )
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    picked = np.take_along_axis(logp, actions[..., None], axis=-1)[..., 0]
    out = Tensor(picked, logits.requires_grad, (logits,))

    def backward(grad):
        p = np.exp(logp)
        g = -p * grad[..., None]
        np.put_along_axis(
            g, actions[..., None],
            np.take_along_axis(g, actions[..., None], axis=-1) + grad[..., None],
            axis=-1,
        )
        _accumulate(logits, g)

    out.backward_fn = backward
    return out


# ---------------------------------------------------------------------------
# convolutions


def _im2col(x, kh, kw, stride, pad):
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    strided = view[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = strided.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(dcols, x_shape, kh, kw, stride, pad, ho, wo):
    b, c, h, w = x_shape
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    d = dcols.reshape(b, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d[..., i, j]
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def conv2d(x: Tensor, weight: Tensor, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """NCHW convolution; weight is (out_ch, in_ch, kh, kw)."""
    if x.data.ndim != 4 or weight.data.ndim != 4 or x.data.shape[1] != weight.data.shape[1]:
        raise InputError(
            f"conv2d shape mismatch: input {x.shape}, weight {weight.shape}"
        )
    b, c, h, w = x.data.shape
    o, _, kh, kw = weight.data.shape
    cols, ho, wo = _im2col(x.data, kh, kw, stride, pad)
    wflat = weight.data.reshape(o, -1)
    out_data = (cols @ wflat.T).reshape(b, ho, wo, o).transpose(0, 3, 1, 2)
    parents = [x, weight]
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]
        parents.append(bias)
    out = Tensor(_check(out_data), _needs(*parents), tuple(parents))

    def backward(grad):
        gflat = grad.transpose(0, 2, 3, 1).reshape(-1, o)
        if weight.requires_grad:
            _accumulate(weight, (gflat.T @ cols).reshape(weight.data.shape))
        if x.requires_grad:
            dcols = gflat @ wflat
            _accumulate(x, _col2im(dcols, x.data.shape, kh, kw, stride, pad, ho, wo))
        if bias is not None:
            _accumulate(bias, grad.sum(axis=(0, 2, 3)))

    out.backward_fn = backward
    return out


def transposed_conv2d(x: Tensor, weight: Tensor, bias=None, stride: int = 2, pad: int = 1) -> Tensor:
    """NCHW transposed convolution; weight is (in_ch, out_ch, kh, kw)."""
    if x.data.ndim != 4 or weight.data.ndim != 4 or x.data.shape[1] != weight.data.shape[0]:
        raise InputError(
            f"transposed_conv2d shape mismatch: input {x.shape}, weight {weight.shape}"
        )
    b, c, h, w = x.data.shape
    _, o, kh, kw = weight.data.shape
    ho = (h - 1) * stride - 2 * pad + kh
    wo = (w - 1) * stride - 2 * pad + kw
    full_h = (h - 1) * stride + kh
    full_w = (w - 1) * stride + kw
    # scatter formulation: the adjoint of a conv2d with the same geometry
    x_mat = x.data.transpose(0, 2, 3, 1).reshape(b * h * w, c)
    wflat = weight.data.reshape(c, o * kh * kw)
    prod = x_mat @ wflat  # (b*h*w, o*kh*kw)
    full = _col2im(prod, (b, o, full_h, full_w), kh, kw, stride, 0, h, w)
    out_data = full[:, :, pad : pad + ho, pad : pad + wo]
    parents = [x, weight]
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]
        parents.append(bias)
    out = Tensor(_check(out_data), _needs(*parents), tuple(parents))

    def backward(grad):
        gfull = np.zeros((b, o, full_h, full_w))
        gfull[:, :, pad : pad + ho, pad : pad + wo] = grad
        gcols, _, _ = _im2col(gfull, kh, kw, stride, 0)  # (b*h*w, o*kh*kw)
        if x.requires_grad:
            dx = (gcols @ wflat.T).reshape(b, h, w, c).transpose(0, 3, 1, 2)
            _accumulate(x, dx)
        if weight.requires_grad:
            _accumulate(weight, (x_mat.T @ gcols).reshape(weight.data.shape))
        if bias is not None:
            _accumulate(bias, grad.sum(axis=(0, 2, 3)))

    out.backward_fn = backward
    return out


# ---------------------------------------------------------------------------
# batch normalization


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running=None,
               training: bool = True, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Channel-wise batch normalization for 2-D (B, C) or 4-D (B, C, H, W) input.

    ``running`` is an optional dict with ``mean`` and ``var`` arrays that is
    updated in place during training and consulted in eval mode.
    """
    if x.data.ndim == 4:
        axes, view = (0, 2, 3), (1, -1, 1, 1)
    elif x.data.ndim == 2:
        axes, view = (0,), (1, -1)
    else:
        raise InputError(f"batch_norm expects 2-D or 4-D input, got {x.shape}")
    n = x.data.size // x.data.shape[1]

    if training:
        m = x.data.mean(axis=axes)
        v = x.data.var(axis=axes)
        if running is not None:
            running["mean"] *= 1.0 - momentum
            running["mean"] += momentum * m
            running["var"] *= 1.0 - momentum
            running["var"] += momentum * v
    else:
        if running is None:
            raise InputError("eval-mode batch_norm needs running statistics")
        m, v = running["mean"], running["var"]

    inv_std = 1.0 / np.sqrt(v + eps)
    xhat = (x.data - m.reshape(view)) * inv_std.reshape(view)
    out_data = gamma.data.reshape(view) * xhat + beta.data.reshape(view)
    out = Tensor(_check(out_data), _needs(x, gamma, beta), (x, gamma, beta))

    def backward(grad):
        _accumulate(gamma, (grad * xhat).sum(axis=axes))
        _accumulate(beta, grad.sum(axis=axes))
        if x.requires_grad:
            dxhat = grad * gamma.data.reshape(view)
            if training:
                s1 = dxhat.sum(axis=axes, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
                dx = (dxhat - s1 / n - xhat * s2 / n) * inv_std.reshape(view)
            else:
                dx = dxhat * inv_std.reshape(view)
            _accumulate(x, dx)

    out.backward_fn = backward
    return out


# ---------------------------------------------------------------------------
# recurrent cell


def gru_cell(x: Tensor, h: Tensor, params: dict) -> Tensor:
    """Standard gated recurrent unit update built from primitive ops.

    ``params`` holds w_update/u_update/b_update, w_reset/u_reset/b_reset and
    w_cand/u_cand/b_cand.  With all-zero parameters the update gate is 0.5 and
    the candidate 0, so the new state is half the old one.
    """
    if x.data.shape[0] != h.data.shape[0]:
        raise InputError(f"gru batch mismatch: {x.shape} vs {h.shape}")
    z = sigmoid(add(add(matmul(x, params["w_update"]), matmul(h, params["u_update"])),
                    params["b_update"]))
    r = sigmoid(add(add(matmul(x, params["w_reset"]), matmul(h, params["u_reset"])),
                    params["b_reset"]))
    cand = tanh(add(add(matmul(x, params["w_cand"]),
                        matmul(multiply(r, h), params["u_cand"])),
                    params["b_cand"]))
    one_minus_z = sub(1.0, z)
    return add(multiply(one_minus_z, cand), multiply(z, h))


# ---------------------------------------------------------------------------
# reverse sweep


def backward(loss: Tensor) -> None:
    """Reverse-topological gradient sweep from a scalar loss.

    Repeated calls without clearing gradients accumulate additively.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise InputError(f"backward expects a scalar loss, got shape {loss.shape}")
    topo, visited, stack = [], set(), [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    # interior grads are transient per sweep; only leaves accumulate across calls
    for node in topo:
        if node.parents:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)
