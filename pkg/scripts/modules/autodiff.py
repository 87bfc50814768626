#!/usr/bin/env python
"""Module for dense tensors with reverse-mode automatic differentiation.

Every operation returns a new Tensor that remembers its parents and a
backward rule. Tensor.backward() walks the recorded graph once, in reverse
topological order, and leaves a grad buffer on every tensor that requires
one. The engine covers what the zoo FFNs/CNNs and the weight-space
transformer need:
    matmul(), conv2d(), maxpool2d(), activation(), softmax_cross_entropy()
    softmax(), log_softmax(), layer_norm(), dropout(), l2_normalize()

Training runs in float32. float64_mode() switches tensor creation to 64 bit
for gradient checks.
"""
import contextlib

import numpy as np

from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from scripts.modules.errors import ConfigError, DimensionError, StateError

ACTIVATIONS = ['tanh', 'relu', 'sigmoid', 'gelu']

_DTYPE = [np.float32]


@contextlib.contextmanager
def float64_mode():
    """Create tensors in 64 bit while inside the context."""
    previous = _DTYPE[0]
    _DTYPE[0] = np.float64
    try:
        yield
    finally:
        _DTYPE[0] = previous


def default_dtype():
    return _DTYPE[0]


class Tensor(object):
    """Dense row-major array with an optional gradient buffer.

    Attributes:
        data: ndarray of the current default dtype
        requires_grad: whether backward() should produce a grad for this
        grad: ndarray with the shape of data, or None
    """

    def __init__(self, data, requires_grad=False, _parents=(), _op=''):
        self.data = np.array(data, dtype=_DTYPE[0], copy=True) \
            if not isinstance(data, np.ndarray) or data.dtype != _DTYPE[0] \
            else data
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = None
        self._op = _op
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Run reverse-mode differentiation from this tensor.

        Raises:
            StateError: when called a second time on the same graph, or on
                a non-scalar without an explicit seed gradient
        """
        if self._consumed:
            raise StateError('backward called twice without a new forward pass')
        if grad is None and self.data.size != 1:
            raise StateError('backward on non-scalar tensor of shape %s needs '
                             'a seed gradient' % (self.data.shape,))
        tape = Tape(self)
        tape.backward(grad)
        self._consumed = True
        return tape

    def __repr__(self):
        return 'Tensor(shape=%s, op=%s, requires_grad=%s)' \
            % (self.data.shape, self._op or 'leaf', self.requires_grad)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and type(shape[0]) in [tuple, list]:
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape(object):
    """Operations reachable from a root tensor, in topological order.

    Every node appears after all of its inputs, so a reverse sweep visits
    each node exactly once with its gradient complete.
    """

    def __init__(self, root):
        self.root = root
        self.nodes = _topological_order(root)
        self.touched = 0

    def __len__(self):
        return len(self.nodes)

    def backward(self, grad=None):
        root = self.root
        if grad is None:
            seed = np.ones_like(root.data)
        else:
            seed = np.asarray(grad, dtype=root.data.dtype)
            if seed.shape != root.data.shape:
                raise DimensionError('seed gradient shape %s != %s'
                                     % (seed.shape, root.data.shape))
        root.grad = seed.copy() if root.grad is None else root.grad + seed

        for node in reversed(self.nodes):
            self.touched += 1
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, pgrad in zip(node._parents, parent_grads):
                if pgrad is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(pgrad, dtype=parent.data.dtype)
                else:
                    parent.grad = parent.grad + pgrad


def _topological_order(root):
    order = []
    visited = set()
    stack = [(root, False)]
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
    return order


def as_tensor(value):
    """Wrap non-tensors as constant tensors."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(data, parents, op, backward):
    """Build op output; record graph edges only if an input needs grads."""
    track = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, _parents=parents if track else (),
                 _op=op)
    if track:
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum grad down to shape, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Elementwise arithmetic --------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _result(a.data + b.data, (a, b), 'add', _backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _result(a.data - b.data, (a, b), 'sub', _backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))
    return _result(a.data * b.data, (a, b), 'mul', _backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _result(a.data / b.data, (a, b), 'div', _backward)


def power(a, exponent):
    if type(exponent) not in [int, float]:
        raise TypeError('received exponent arg of type %s' % type(exponent))
    a = as_tensor(a)

    def _backward(g):
        return (g * exponent * a.data ** (exponent - 1),)
    return _result(a.data ** exponent, (a,), 'pow', _backward)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def _backward(g):
        return (g * out_data,)
    return _result(out_data, (a,), 'exp', _backward)


def log(a):
    a = as_tensor(a)

    def _backward(g):
        return (g / a.data,)
    return _result(np.log(a.data), (a,), 'log', _backward)


# Reductions and shape ---------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), 'sum',
                   _backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if type(axis) is tuple else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)

    def _backward(g):
        return (g.reshape(a.shape),)
    return _result(a.data.reshape(shape), (a,), 'reshape', _backward)


def flatten(a):
    """Keep the leading batch axis, flatten the rest channel-major."""
    a = as_tensor(a)
    return reshape(a, (a.shape[0], -1))


def transpose(a, axes):
    a = as_tensor(a)
    inverse = np.argsort(axes)

    def _backward(g):
        return (np.transpose(g, inverse),)
    return _result(np.transpose(a.data, axes), (a,), 'transpose', _backward)


def swapaxes(a, axis1, axis2):
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
    return transpose(a, tuple(axes))


def getitem(a, index):
    a = as_tensor(a)

    def _backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)
    return _result(a.data[index], (a,), 'getitem', _backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def _backward(g):
        return tuple(np.split(g, cuts, axis=axis))
    return _result(np.concatenate([t.data for t in tensors], axis=axis),
                   tuple(tensors), 'concat', _backward)


# Linear algebra ---------------------------------------------------------

def matmul(a, b):
    """Matrix product over the last two axes, leading axes broadcast.

    Raises:
        DimensionError: if either input has fewer than 2 dims or the inner
            dimensions differ
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError('matmul of shapes %s and %s' % (a.shape, b.shape))

    def _backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb
    return _result(a.data @ b.data, (a, b), 'matmul', _backward)


def conv2d(x, k, b=None):
    """Valid 2D convolution with stride 1.

    Args:
        x: Tensor [c_in, h, w] or [n, c_in, h, w]
        k: Tensor [c_out, c_in, kh, kw]
        b: optional Tensor [c_out]

    Returns:
        Tensor [(n,) c_out, h-kh+1, w-kw+1]
    """
    x, k = as_tensor(x), as_tensor(k)
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or k.ndim != 4:
        raise DimensionError('conv2d of shapes %s and %s' % (x.shape, k.shape))
    n, c, h, w = xd.shape
    c_out, c_in, kh, kw = k.shape
    if c_in != c:
        raise DimensionError('conv2d input has %i channels, kernel expects %i'
                             % (c, c_in))
    if kh > h or kw > w:
        raise DimensionError('kernel %ix%i larger than input %ix%i'
                             % (kh, kw, h, w))

    patches = sliding_window_view(xd, (kh, kw), axis=(2, 3))
    out = np.tensordot(patches, k.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    parents = (x, k)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None]
        parents = (x, k, b)

    def _backward(g):
        g4 = g[None] if single else g
        gx = gk = gb = None
        if k.requires_grad:
            gk = np.tensordot(g4, patches, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            padded = np.pad(g4, ((0, 0), (0, 0), (kh - 1, kh - 1),
                                 (kw - 1, kw - 1)))
            windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))
            gx = np.tensordot(windows, k.data[:, :, ::-1, ::-1],
                              axes=([1, 4, 5], [0, 2, 3]))
            gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
            if single:
                gx = gx[0]
        if b is not None:
            gb = g4.sum(axis=(0, 2, 3))
            return gx, gk, gb
        return gx, gk

    if single:
        out = out[0]
    return _result(out, parents, 'conv2d', _backward)


def maxpool2d(x, ks):
    """Non-overlapping max pooling with window and stride ks (floor mode)."""
    x = as_tensor(x)
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    n, c, h, w = xd.shape
    hh, ww = h // ks, w // ks
    if hh == 0 or ww == 0:
        raise DimensionError('pool window %i larger than input %ix%i'
                             % (ks, h, w))
    windows = xd[:, :, :hh * ks, :ww * ks].reshape(n, c, hh, ks, ww, ks)
    windows = windows.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hh, ww, ks * ks)
    arg = windows.argmax(axis=-1)[..., None]
    out = np.take_along_axis(windows, arg, axis=-1)[..., 0]

    def _backward(g):
        g4 = g[None] if single else g
        gwin = np.zeros_like(windows)
        np.put_along_axis(gwin, arg, g4[..., None], axis=-1)
        gwin = gwin.reshape(n, c, hh, ww, ks, ks).transpose(0, 1, 2, 4, 3, 5)
        gx = np.zeros_like(xd)
        gx[:, :, :hh * ks, :ww * ks] = gwin.reshape(n, c, hh * ks, ww * ks)
        return (gx[0] if single else gx,)

    return _result(out[0] if single else out, (x,), 'maxpool2d', _backward)


# Nonlinearities ---------------------------------------------------------

def _std_normal_cdf(x):
    return 0.5 * (1.0 + erf(x / np.sqrt(2.0)))


def activation(x, kind):
    """Elementwise nonlinearity.

    Args:
        x: Tensor
        kind: one of 'tanh', 'relu', 'sigmoid', 'gelu'
    """
    x = as_tensor(x)
    xd = x.data
    if kind == 'tanh':
        out = np.tanh(xd)
        slope = lambda: 1.0 - out * out
    elif kind == 'relu':
        out = np.maximum(xd, 0)
        slope = lambda: (xd > 0).astype(xd.dtype)
    elif kind == 'sigmoid':
        out = 1.0 / (1.0 + np.exp(-xd))
        slope = lambda: out * (1.0 - out)
    elif kind == 'gelu':
        cdf = _std_normal_cdf(xd)
        out = xd * cdf
        slope = lambda: cdf + xd * np.exp(-0.5 * xd * xd) / np.sqrt(2 * np.pi)
    else:
        raise ConfigError('unknown activation %s, expected one of %s'
                          % (kind, ACTIVATIONS))

    def _backward(g):
        return (g * slope(),)
    return _result(out.astype(xd.dtype), (x,), kind, _backward)


def softmax(x):
    """Softmax over the last axis."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)
    return _result(out, (x,), 'softmax', _backward)


def log_softmax(x):
    """Log-softmax over the last axis."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def _backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)
    return _result(out, (x,), 'log_softmax', _backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean and unit variance, then scale."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv

    def _backward(g):
        dxhat = g * gain.data
        gx = (inv / d) * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                          - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return (gx, _unbroadcast(g * xhat, gain.shape),
                _unbroadcast(g, bias.shape))
    return _result(xhat * gain.data + bias.data, (x, gain, bias), 'layer_norm',
                   _backward)


def l2_normalize(x, axis=-1, eps=1e-12):
    """Scale rows to unit Euclidean norm."""
    x = as_tensor(x)
    norm = power(tsum(x * x, axis=axis, keepdims=True) + eps, 0.5)
    return x / norm


def dropout(x, p, training, rng=None):
    """Inverted dropout.

    Args:
        x: Tensor
        p: float drop probability in [0, 1)
        training: bool; eval mode returns x unchanged
        rng: numpy Generator; required when training with p > 0
    """
    if not 0 <= p < 1:
        raise ConfigError('dropout rate %s outside [0, 1)' % p)
    if not training or p == 0:
        return as_tensor(x)
    if rng is None:
        raise ConfigError('dropout in training mode needs an rng stream')
    x = as_tensor(x)
    mask = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return mul(x, Tensor(mask))


# Losses -----------------------------------------------------------------

def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer labels.

    Raises:
        DimensionError: if logits are not [n, c] with n labels
        IndexError: if a label is outside [0, c)
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError('logits %s do not match %s labels'
                             % (logits.shape, labels.shape))
    n, c = logits.shape
    if n and (labels.min() < 0 or labels.max() >= c):
        raise IndexError('labels must lie in [0, %i)' % c)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def _backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)
    return _result(np.asarray(loss), (logits,), 'softmax_cross_entropy',
                   _backward)


# Gradient checking ------------------------------------------------------

def finite_difference_grad(fn, tensors, eps=1e-4):
    """Central finite differences of a scalar function.

    Args:
        fn: callable returning a scalar Tensor, re-run for every probe
        tensors: list of Tensors to perturb in place
        eps: float step

    Returns:
        grads: list of ndarrays shaped like each tensor
    """
    grads = []
    for t in tensors:
        grad = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = fn().item()
            flat[i] = orig - eps
            minus = fn().item()
            flat[i] = orig
            gflat[i] = (plus - minus) / (2 * eps)
        grads.append(grad)
    return grads


def gradient_check(fn, tensors, eps=1e-4):
    """Return max relative error between backward() and finite differences.

    Relative error per tensor is |a - n| / (|a| + |n|) in the 2-norm, with
    0 reported when both gradients vanish.
    """
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    fn().backward()
    analytic = [t.grad.copy() for t in tensors]
    numeric = finite_difference_grad(fn, tensors, eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = np.linalg.norm(a) + np.linalg.norm(n)
        if scale == 0:
            continue
        worst = max(worst, np.linalg.norm(a - n) / scale)
    return worst
