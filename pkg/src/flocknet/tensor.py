"""Dense n-dimensional tensors with reverse-mode automatic differentiation.

Layout convention is row-major N,H,W,C for image batches. Every operation
checks its output for NaN/Inf and raises :class:`NonFiniteError` on the first
occurrence; silent divergence is never allowed to propagate. All arithmetic
runs in ``DTYPE`` (float64), which keeps central finite-difference gradient
checks meaningful.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

DTYPE = np.float64

# "same" padding splits asymmetric padding with the extra pixel on the
# bottom/right edge.
PADDING_MODES = ("valid", "same")


class NonFiniteError(FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


def _ensure_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {where}")


_grad_enabled = True


class no_grad:
    """Context manager that skips graph recording inside its block."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A numpy array plus an optional gradient slot and a backward closure.

    Tensors are immutable values once created, except that ``grad`` is
    populated during an explicit backward pass. ``requires_grad`` marks
    leaves whose gradient should be kept (parameters, or inputs under a
    gradient check).
    """

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False, _prev: tuple = (),
                 _backward=None, _check: bool = True):
        self.data = np.asarray(data, dtype=DTYPE)
        if _check:
            _ensure_finite(self.data, "tensor construction")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._prev = _prev
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() on tensor of shape {self.shape}")

    def detach(self) -> "Tensor":
        return Tensor(self.data, _check=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, output_grad=None) -> None:
        """Accumulate gradients for every graph node reachable from here.

        ``output_grad`` seeds the pass and must match this tensor's shape;
        a size-1 tensor may omit it (seed 1.0). Calling backward on a tensor
        with no recorded operations is an error.
        """
        if self._backward is None and not self._prev:
            raise RuntimeError("backward called without a recorded forward pass")
        if output_grad is None:
            if self.size != 1:
                raise ValueError("output_grad required for non-scalar backward")
            output_grad = np.ones_like(self.data)
        seed = np.asarray(output_grad.data if isinstance(output_grad, Tensor)
                          else output_grad, dtype=DTYPE)
        if seed.shape != self.shape:
            raise ValueError(f"output_grad shape {seed.shape} != tensor shape {self.shape}")
        _ensure_finite(seed, "backward seed")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = seed if self.grad is None else self.grad + seed
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in topo:
            if node.grad is not None:
                _ensure_finite(node.grad, "backward pass")


class Parameter:
    """A named, optionally trainable tensor belonging to a model."""

    __slots__ = ("name", "value", "trainable")

    def __init__(self, name: str, value, trainable: bool = True):
        self.name = name
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.value.requires_grad = bool(trainable)
        self.trainable = bool(trainable)

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @data.setter
    def data(self, arr) -> None:
        arr = np.asarray(arr, dtype=DTYPE)
        if arr.shape != self.value.data.shape:
            raise ValueError(
                f"parameter {self.name!r}: shape {arr.shape} != {self.value.data.shape}")
        self.value.data = arr

    @property
    def grad(self) -> np.ndarray | None:
        return self.value.grad

    def zero_grad(self) -> None:
        self.value.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape}, trainable={self.trainable})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # Leaves that neither require grad nor have parents are skipped; grads
    # still flow through every interior node.
    if not t.requires_grad and not t._prev:
        return
    t.grad = g if t.grad is None else t.grad + g


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, where: str) -> Tensor:
    _ensure_finite(data, where)
    if _grad_enabled and (backward is not None) and any(
            p.requires_grad or p._prev for p in parents):
        return Tensor(data, _prev=parents, _backward=backward, _check=False)
    return Tensor(data, _check=False)


# ---------------------------------------------------------------------------
# shape helpers

def _same_pads(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    lo = total // 2
    return lo, total - lo


def _pad_input(x: np.ndarray, kh: int, kw: int, stride: int,
               padding: str) -> tuple[np.ndarray, tuple[int, int], tuple[int, int]]:
    if padding not in PADDING_MODES:
        raise ValueError(f"padding must be one of {PADDING_MODES}, got {padding!r}")
    if padding == "valid":
        return x, (0, 0), (0, 0)
    ph = _same_pads(x.shape[1], kh, stride)
    pw = _same_pads(x.shape[2], kw, stride)
    if ph == (0, 0) and pw == (0, 0):
        return x, ph, pw
    return np.pad(x, ((0, 0), ph, pw, (0, 0))), ph, pw


def _patches(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """View of shape [N, Ho, Wo, kh, kw, C] over a padded NHWC array."""
    n, h, w, c = x.shape
    if kh > h or kw > w:
        raise ValueError(f"kernel {kh}x{kw} larger than (padded) input {h}x{w}")
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sn, sh, sw, sc = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (n, ho, wo, kh, kw, c),
        (sn, sh * stride, sw * stride, sh, sw, sc), writeable=False)


def _scatter_patches(dpatches: np.ndarray, padded_shape: tuple[int, ...],
                     stride: int) -> np.ndarray:
    """Inverse of :func:`_patches`: sum patch gradients back into place."""
    n, ho, wo, kh, kw, c = dpatches.shape
    out = np.zeros(padded_shape, dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + ho * stride:stride, j:j + wo * stride:stride, :] += \
                dpatches[:, :, :, i, j, :]
    return out


def _unpad(x: np.ndarray, ph: tuple[int, int], pw: tuple[int, int]) -> np.ndarray:
    h, w = x.shape[1], x.shape[2]
    return x[:, ph[0]:h - ph[1] or None, pw[0]:w - pw[1] or None, :]


def conv2d_output_shape(input_shape: Sequence[int], kernel_shape: Sequence[int],
                        stride: int = 1, padding: str = "valid") -> tuple[int, ...]:
    """Output shape of conv2d, as a pure function of shapes and attributes."""
    n, h, w, cin = input_shape
    kh, kw, kcin, cout = kernel_shape
    if kcin != cin:
        raise ValueError(f"kernel expects {kcin} input channels, input has {cin}")
    if padding == "same":
        return (n, -(-h // stride), -(-w // stride), cout)
    if kh > h or kw > w:
        raise ValueError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    return (n, (h - kh) // stride + 1, (w - kw) // stride + 1, cout)


def pool2d_output_shape(input_shape: Sequence[int], kernel: tuple[int, int],
                        stride: int = 1) -> tuple[int, ...]:
    n, h, w, c = input_shape
    kh, kw = kernel
    if kh > h or kw > w:
        raise ValueError(f"pool kernel {kh}x{kw} larger than input {h}x{w}")
    return (n, (h - kh) // stride + 1, (w - kw) // stride + 1, c)


# ---------------------------------------------------------------------------
# convolution family

def conv2d(x, kernel, stride: int = 1, padding: str = "valid") -> Tensor:
    """Cross-correlate [N,H,W,Cin] with a [kh,kw,Cin,Cout] kernel."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    kh, kw, kcin, cout = kernel.shape
    if kcin != x.shape[3]:
        raise ValueError(
            f"conv2d channel mismatch: input has {x.shape[3]} channels, kernel expects {kcin}")
    if stride < 1:
        raise ValueError("stride must be positive")

    xp, ph, pw = _pad_input(x.data, kh, kw, stride, padding)
    patches = _patches(xp, kh, kw, stride)
    out = np.tensordot(patches, kernel.data, axes=([3, 4, 5], [0, 1, 2]))

    def backward(g):
        _accumulate(kernel, np.tensordot(patches, g, axes=([0, 1, 2], [0, 1, 2])))
        dpatches = np.tensordot(g, kernel.data, axes=([3], [3]))
        _accumulate(x, _unpad(_scatter_patches(dpatches, xp.shape, stride), ph, pw))

    return _make(out, (x, kernel), backward, "conv2d")


def depthwise_conv2d(x, kernel, stride: int = 1, padding: str = "valid") -> Tensor:
    """Per-channel spatial convolution with a [kh,kw,C] kernel.

    Channel c of the output depends only on channel c of the input.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 3:
        raise ValueError(
            f"depthwise_conv2d expects 4-d input and 3-d kernel, got {x.shape} and {kernel.shape}")
    kh, kw, kc = kernel.shape
    if kc != x.shape[3]:
        raise ValueError(
            f"depthwise channel mismatch: input has {x.shape[3]} channels, kernel has {kc}")
    if stride < 1:
        raise ValueError("stride must be positive")

    xp, ph, pw = _pad_input(x.data, kh, kw, stride, padding)
    patches = _patches(xp, kh, kw, stride)
    out = np.einsum("nxyijc,ijc->nxyc", patches, kernel.data)

    def backward(g):
        _accumulate(kernel, np.einsum("nxyijc,nxyc->ijc", patches, g))
        dpatches = np.einsum("nxyc,ijc->nxyijc", g, kernel.data)
        _accumulate(x, _unpad(_scatter_patches(dpatches, xp.shape, stride), ph, pw))

    return _make(out, (x, kernel), backward, "depthwise_conv2d")


def pointwise_conv2d(x, kernel) -> Tensor:
    """1x1 cross-channel convolution: per-pixel multiply by [Cin,Cout]."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 2:
        raise ValueError(
            f"pointwise_conv2d expects 4-d input and 2-d kernel, got {x.shape} and {kernel.shape}")
    if kernel.shape[0] != x.shape[3]:
        raise ValueError(
            f"pointwise channel mismatch: input has {x.shape[3]} channels, "
            f"kernel expects {kernel.shape[0]}")
    out = np.tensordot(x.data, kernel.data, axes=([3], [0]))

    def backward(g):
        _accumulate(kernel, np.tensordot(x.data, g, axes=([0, 1, 2], [0, 1, 2])))
        _accumulate(x, np.tensordot(g, kernel.data, axes=([3], [1])))

    return _make(out, (x, kernel), backward, "pointwise_conv2d")


# ---------------------------------------------------------------------------
# pooling

def pool2d(x, kind: str, kernel: tuple[int, int], stride: int = 1) -> Tensor:
    """Per-patch max or average over valid windows of an NHWC tensor."""
    if kind not in ("max", "average"):
        raise ValueError(f"pool kind must be 'max' or 'average', got {kind!r}")
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"pool2d expects 4-d input, got {x.shape}")
    kh, kw = kernel
    patches = _patches(x.data, kh, kw, stride)
    n, ho, wo = patches.shape[:3]
    c = patches.shape[5]
    flat = patches.transpose(0, 1, 2, 5, 3, 4).reshape(n, ho, wo, c, kh * kw)

    if kind == "max":
        idx = np.argmax(flat, axis=4)
        out = np.take_along_axis(flat, idx[..., None], axis=4)[..., 0]

        def backward(g):
            dflat = np.zeros_like(flat)
            np.put_along_axis(dflat, idx[..., None], g[..., None], axis=4)
            dpatches = dflat.reshape(n, ho, wo, c, kh, kw).transpose(0, 1, 2, 4, 5, 3)
            _accumulate(x, _scatter_patches(dpatches, x.shape, stride))
    else:
        out = flat.mean(axis=4)

        def backward(g):
            dpatches = np.broadcast_to(
                (g / (kh * kw))[..., None, None], (n, ho, wo, c, kh, kw)
            ).transpose(0, 1, 2, 4, 5, 3)
            _accumulate(x, _scatter_patches(dpatches, x.shape, stride))

    return _make(out, (x,), backward, "pool2d")


def global_average_pool(x) -> Tensor:
    """Mean over the spatial dimensions: [N,H,W,C] -> [N,C]."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"global_average_pool expects 4-d input, got {x.shape}")
    n, h, w, c = x.shape
    out = x.data.mean(axis=(1, 2))

    def backward(g):
        _accumulate(x, np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).copy())

    return _make(out, (x,), backward, "global_average_pool")


# ---------------------------------------------------------------------------
# normalization and activations

def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               train: bool, momentum: float = 0.99, eps: float = 1e-3
               ) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalize per channel, scale by gamma, shift by beta.

    Train mode uses batch statistics over all non-channel axes and returns
    running stats updated by exponential moving average; infer mode
    normalizes with the running stats passed in. Returns
    ``(out, running_mean, running_var)``.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"gamma/beta must have shape ({c},), got {gamma.shape} and {beta.shape}")
    axes = tuple(range(x.ndim - 1))
    m = int(np.prod([x.shape[a] for a in axes])) if axes else 1

    if train:
        if m == 0:
            raise ValueError("batch_norm in train mode requires a non-empty batch")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        new_rm = momentum * np.asarray(running_mean, dtype=DTYPE) + (1 - momentum) * mean
        new_rv = momentum * np.asarray(running_var, dtype=DTYPE) + (1 - momentum) * var
    else:
        mean = np.asarray(running_mean, dtype=DTYPE)
        var = np.asarray(running_var, dtype=DTYPE)
        new_rm, new_rv = mean, var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = gamma.data * xhat + beta.data

    if train:
        def backward(g):
            _accumulate(gamma, np.sum(g * xhat, axis=axes))
            _accumulate(beta, np.sum(g, axis=axes))
            dxhat = g * gamma.data
            # standard batch-norm backward through the batch statistics
            dx = (inv_std / m) * (
                m * dxhat
                - np.sum(dxhat, axis=axes)
                - xhat * np.sum(dxhat * xhat, axis=axes))
            _accumulate(x, dx)
    else:
        def backward(g):
            _accumulate(gamma, np.sum(g * xhat, axis=axes))
            _accumulate(beta, np.sum(g, axis=axes))
            _accumulate(x, g * gamma.data * inv_std)

    return _make(out, (x, gamma, beta), backward, "batch_norm"), new_rm, new_rv


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0.0)

    def backward(g):
        _accumulate(x, g * (x.data > 0))

    return _make(out, (x,), backward, "relu")


def relu6(x) -> Tensor:
    """ReLU clamped to [0, 6]."""
    x = _as_tensor(x)
    out = np.clip(x.data, 0.0, 6.0)

    def backward(g):
        _accumulate(x, g * ((x.data > 0) & (x.data < 6)))

    return _make(out, (x,), backward, "relu6")


def softmax(x) -> Tensor:
    """Row-wise softmax of [N,K], computed in max-shifted stable form."""
    x = _as_tensor(x)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValueError(f"softmax expects [N,K] with K >= 1, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = np.sum(g * out, axis=1, keepdims=True)
        _accumulate(x, out * (g - dot))

    return _make(out, (x,), backward, "softmax")


# ---------------------------------------------------------------------------
# arithmetic and shape plumbing

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(out, (a, b), backward, "add")


def scale(x, factor: float) -> Tensor:
    x = _as_tensor(x)
    out = x.data * factor

    def backward(g):
        _accumulate(x, g * factor)

    return _make(out, (x,), backward, "scale")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make(out, (a, b), backward, "matmul")


def bias_add(x, b) -> Tensor:
    """Add a [K] bias to every row of [N,K]."""
    x, b = _as_tensor(x), _as_tensor(b)
    if x.ndim != 2 or b.shape != (x.shape[1],):
        raise ValueError(f"bias_add shape mismatch: {x.shape} + {b.shape}")
    out = x.data + b.data

    def backward(g):
        _accumulate(x, g)
        _accumulate(b, g.sum(axis=0))

    return _make(out, (x, b), backward, "bias_add")


def concat_channels(tensors: Iterable) -> Tensor:
    """Concatenate NHWC tensors along the channel axis."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat_channels needs at least one tensor")
    lead = ts[0].shape[:-1]
    for t in ts[1:]:
        if t.shape[:-1] != lead:
            raise ValueError(
                f"concat_channels leading-shape mismatch: {t.shape} vs {ts[0].shape}")
    out = np.concatenate([t.data for t in ts], axis=-1)
    extents = [t.shape[-1] for t in ts]

    def backward(g):
        start = 0
        for t, width in zip(ts, extents):
            _accumulate(t, g[..., start:start + width])
            start += width

    return _make(out, tuple(ts), backward, "concat_channels")


def reshape(x, new_shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    out = x.data.reshape(new_shape)

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _make(out, (x,), backward, "reshape")


def tensor_sum(x) -> Tensor:
    """Sum of all entries, as a [1] tensor (handy to seed backward passes)."""
    x = _as_tensor(x)
    out = np.array([x.data.sum()])

    def backward(g):
        _accumulate(x, np.full(x.shape, g[0]))

    return _make(out, (x,), backward, "tensor_sum")
