"""A small numpy CNN trainer: layers, loss, backprop, SGD and a cyclic schedule.

Models take ``(N, c, h, w)`` batches and work in NHWC internally. All
parameters live in one flat array; each layer's weights are views into it,
which keeps the optimizer update and checkpointing to a single vector.

Initialization: every conv/dense weight is drawn from
``U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`` and every bias starts at zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class TrainingDiverged(FloatingPointError):
    pass


REFERENCE_ARCH = (
    ("conv", 3, 32, 3, 1),
    ("relu",),
    ("maxpool", 2),
    ("conv", 32, 64, 3, 1),
    ("relu",),
    ("maxpool", 2),
    ("flatten",),
    ("dense", 4096, 256),
    ("relu",),
    ("dense", 256, 10),
)


# -- layers ---------------------------------------------------------------------
# Each layer maps NHWC (or (N, D) after flatten) arrays and keeps whatever
# it needs for the backward pass in a per-call cache. Piecewise-linear
# layers also accept ``fixed``: a ReLU mask or pool selection taken from an
# earlier call, which pins the layer to that linear piece.

class Conv:
    def __init__(self, c_in: int, c_out: int, k: int = 3, pad: int = 1):
        self.c_in, self.c_out, self.k, self.pad = c_in, c_out, k, pad
        self.param_shapes = [(c_out, c_in, k, k), (c_out,)]
        self.fan_in = c_in * k * k

    def out_shape(self, shape):
        h, w, c = shape
        if c != self.c_in:
            raise ValueError(f"conv expects {self.c_in} channels, got {c}")
        return (h + 2 * self.pad - self.k + 1, w + 2 * self.pad - self.k + 1, self.c_out)

    def _wmat(self, weight):
        # rows ordered (kh, kw, c) to match the im2col column layout
        return weight.transpose(0, 2, 3, 1).reshape(self.c_out, -1)

    def forward(self, params, x, fixed=None):
        weight, bias = params
        n, h, w, c = x.shape
        p, k = self.pad, self.k
        ho, wo = h + 2 * p - k + 1, w + 2 * p - k + 1
        xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
        xp[:, p:p + h, p:p + w, :] = x
        win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (n, ho, wo, c, k, k)
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
        cols = cols.reshape(n * ho * wo, -1)
        out = cols @ self._wmat(weight).T
        out += bias
        return out.reshape(n, ho, wo, self.c_out), (cols, x.shape)

    def backward(self, params, cache, dout, grads):
        weight, _ = params
        cols, xshape = cache
        n, h, w, c = xshape
        p, k = self.pad, self.k
        ho, wo = dout.shape[1:3]
        d2 = dout.reshape(-1, self.c_out)
        grads[0][...] = (d2.T @ cols).reshape(self.c_out, k, k, c).transpose(0, 3, 1, 2)
        grads[1][...] = d2.sum(axis=0)
        dcols = (d2 @ self._wmat(weight)).reshape(n, ho, wo, k * k * c)
        dxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                t = i * k + j
                dxp[:, i:i + ho, j:j + wo, :] += dcols[..., t * c:(t + 1) * c]
        return dxp[:, p:p + h, p:p + w, :]

    def kink_state(self, cache):
        return None


class Dense:
    def __init__(self, d_in: int, d_out: int):
        self.d_in, self.d_out = d_in, d_out
        self.param_shapes = [(d_in, d_out), (d_out,)]
        self.fan_in = d_in

    def out_shape(self, shape):
        if shape != (self.d_in,):
            raise ValueError(f"dense expects input of size {self.d_in}, got {shape}")
        return (self.d_out,)

    def forward(self, params, x, fixed=None):
        weight, bias = params
        return x @ weight + bias, x

    def backward(self, params, cache, dout, grads):
        grads[0][...] = cache.T @ dout
        grads[1][...] = dout.sum(axis=0)
        return dout @ params[0].T

    def kink_state(self, cache):
        return None


class ReLU:
    param_shapes: list = []

    def out_shape(self, shape):
        return shape

    def forward(self, params, x, fixed=None):
        if fixed is None:
            mask = x > 0
            return np.maximum(x, 0), mask
        return x * fixed, fixed

    def backward(self, params, mask, dout, grads):
        return dout * mask

    def kink_state(self, cache):
        return cache


class MaxPool:
    """Non-overlapping ``size x size`` max pooling; ties go to the first window element."""

    param_shapes: list = []

    def __init__(self, size: int = 2):
        self.size = size

    def out_shape(self, shape):
        h, w, c = shape
        if h % self.size or w % self.size:
            raise ValueError("pool size does not divide feature map")
        return (h // self.size, w // self.size, c)

    def _parts(self, x):
        n, h, w, c = x.shape
        s = self.size
        parts = []
        for i in range(s):
            rows = x[:, i::s].reshape(n, h // s, w // s, s, c)
            parts.extend(rows[..., j, :] for j in range(s))
        return parts

    def forward(self, params, x, fixed=None):
        parts = self._parts(x)
        if fixed is None:
            out = parts[0]
            arg = np.zeros(out.shape, dtype=np.int8)
            for t, part in enumerate(parts[1:], start=1):
                better = part > out
                out = np.maximum(out, part)
                arg = np.where(better, np.int8(t), arg)
        else:
            arg = fixed
            out = np.zeros(parts[0].shape, dtype=x.dtype)
            for t, part in enumerate(parts):
                np.copyto(out, part, where=arg == t)
        return out, (arg, x.shape)

    def backward(self, params, cache, dout, grads):
        arg, xshape = cache
        s = self.size
        dx = np.zeros(xshape, dtype=dout.dtype)
        for t in range(s * s):
            i, j = divmod(t, s)
            dx[:, i::s, j::s, :] = dout * (arg == t)
        return dx

    def kink_state(self, cache):
        return cache[0]


class Flatten:
    param_shapes: list = []

    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, params, x, fixed=None):
        return x.reshape(len(x), -1), x.shape

    def backward(self, params, shape, dout, grads):
        return dout.reshape(shape)

    def kink_state(self, cache):
        return None


_LAYERS = {"conv": Conv, "dense": Dense, "relu": ReLU, "maxpool": MaxPool, "flatten": Flatten}


def build_layer(spec: Sequence):
    kind, *args = spec
    try:
        return _LAYERS[kind](*args)
    except KeyError:
        raise ValueError(f"unknown layer type {kind!r}") from None


# -- model ----------------------------------------------------------------------

class Model:
    """A sequential network defined by an architecture descriptor.

    ``arch`` is a sequence of tuples such as ``("conv", c_in, c_out, k, pad)``,
    ``("dense", d_in, d_out)``, ``("relu",)``, ``("maxpool", size)`` or
    ``("flatten",)``. ``params`` is the flat parameter vector.
    """

    def __init__(self, arch=REFERENCE_ARCH, input_shape=(3, 32, 32),
                 dtype=np.float32, params: Optional[np.ndarray] = None, seed: int = 0):
        self.arch = tuple(tuple(s) for s in arch)
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        self.layers = [build_layer(s) for s in self.arch]
        c, h, w = self.input_shape
        shape = (h, w, c)
        for layer in self.layers:
            shape = layer.out_shape(shape)
        self.output_shape = shape
        self.shapes = [list(layer.param_shapes) for layer in self.layers]
        self.num_params = sum(int(np.prod(s)) for ss in self.shapes for s in ss)
        if params is None:
            self.params = self._init_params(seed)
        else:
            params = np.asarray(params, dtype=self.dtype)
            if params.shape != (self.num_params,):
                raise ValueError(f"expected {self.num_params} parameters, got {params.shape}")
            self.params = params.copy()
        self.views = self.split(self.params)

    def split(self, flat: np.ndarray) -> list[list[np.ndarray]]:
        """Per-layer views of a flat parameter-shaped vector."""
        views, offset = [], 0
        for ss in self.shapes:
            layer_views = []
            for s in ss:
                size = int(np.prod(s))
                layer_views.append(flat[offset:offset + size].reshape(s))
                offset += size
            views.append(layer_views)
        return views

    def _init_params(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        flat = np.zeros(self.num_params, dtype=self.dtype)
        for layer, views in zip(self.layers, self.split(flat)):
            if views:
                bound = math.sqrt(6.0 / layer.fan_in)
                views[0][...] = rng.uniform(-bound, bound, size=views[0].shape)
        return flat

    def copy(self, dtype=None) -> "Model":
        return Model(self.arch, self.input_shape, dtype or self.dtype, params=self.params)

    def _prepare(self, images) -> np.ndarray:
        x = np.asarray(images, dtype=self.dtype)
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"batch shape {x.shape} does not match model input {self.input_shape}")
        return x.transpose(0, 2, 3, 1)

    def forward(self, images, keep: bool = False, pattern=None):
        """Logits for a batch.

        ``keep=True`` also returns the per-layer caches needed by backprop.
        ``pattern`` (from :meth:`kink_pattern`) pins every ReLU and max-pool
        to the linear piece recorded at another parameter point.
        """
        x = self._prepare(images)
        caches = []
        fixed = pattern or [None] * len(self.layers)
        for layer, params, fx in zip(self.layers, self.views, fixed):
            x, cache = layer.forward(params, x, fx)
            if keep:
                caches.append(cache)
        return (x, caches) if keep else x

    def kink_pattern(self, images) -> list:
        """ReLU masks and pool selections of a forward pass at the current parameters."""
        _, caches = self.forward(images, keep=True)
        return [layer.kink_state(c) for layer, c in zip(self.layers, caches)]

    def loss_and_grad(self, images, labels) -> tuple[float, np.ndarray]:
        loss, grad, _ = self._backprop(images, labels)
        return loss, grad

    def _backprop(self, images, labels):
        logits, caches = self.forward(images, keep=True)
        loss, d = softmax_cross_entropy(logits, labels)
        grad = np.zeros_like(self.params)
        gviews = self.split(grad)
        for layer, params, cache, g in zip(reversed(self.layers), reversed(self.views),
                                           reversed(caches), reversed(gviews)):
            d = layer.backward(params, cache, d, g)
        return loss, grad, logits

    def predict(self, images, batch_size: int = 500) -> np.ndarray:
        out = [np.argmax(self.forward(images[i:i + batch_size]), axis=1)
               for i in range(0, len(images), batch_size)]
        return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


def forward(model: Model, images) -> np.ndarray:
    return model.forward(images)


def cross_entropy(logits, labels) -> float:
    """Mean negative log-softmax of the true class, max-subtracted."""
    return softmax_cross_entropy(logits, labels)[0]


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(logits)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    log_probs = z - np.log(s)
    loss = -float(np.mean(log_probs[np.arange(n), labels], dtype=np.float64))
    d = e / s
    d[np.arange(n), labels] -= 1
    d /= n
    return loss, d.astype(logits.dtype, copy=False)


def backward(model: Model, images, labels) -> np.ndarray:
    """Gradient of the mean cross-entropy loss, shaped like ``model.params``."""
    return model.loss_and_grad(images, labels)[1]


# -- optimization ---------------------------------------------------------------

@dataclass
class OptimState:
    """Momentum buffer plus hyperparameters for classical SGD."""

    buffer: np.ndarray
    momentum: float = 0.9
    weight_decay: float = 5e-4
    max_lr: float = 0.02

    @classmethod
    def for_model(cls, model: Model, **hyper) -> "OptimState":
        return cls(np.zeros_like(model.params), **hyper)


def sgd_step(model: Model, grads: np.ndarray, state: OptimState, lr: float) -> None:
    """In-place update: ``buf = mu*buf + (g + wd*p)``; ``p -= lr*buf``."""
    if grads.shape != model.params.shape or state.buffer.shape != model.params.shape:
        raise ValueError("gradient/buffer shape does not match parameters")
    if not np.all(np.isfinite(grads)):
        raise TrainingDiverged("diverged")
    buf = state.buffer
    buf *= state.momentum
    buf += grads
    if state.weight_decay:
        buf += state.weight_decay * model.params
    model.params -= model.dtype.type(lr) * buf
    if not np.all(np.isfinite(model.params)):
        raise TrainingDiverged("diverged")


def cyclic_lr(step: float, total_steps: int, max_lr: float, peak_frac: float = 0.45) -> float:
    """Single triangular cycle: ``0 -> max_lr`` over ``peak_frac`` of the steps, then back to 0."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if step < 0 or step >= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    peak = peak_frac * total_steps
    if step <= peak:
        return max_lr * step / peak
    return max_lr * (total_steps - step) / (total_steps - peak)


BatchTransform = Callable[[np.ndarray, np.random.Generator], np.ndarray]


@dataclass
class History:
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)


def fit(model: Model, images: np.ndarray, labels: np.ndarray, epochs: int, batch_size: int,
        state: OptimState, seed: int = 0, transform: Optional[BatchTransform] = None,
        log: Optional[Callable[[int, float, float], None]] = None) -> History:
    """Minibatch SGD over ``epochs`` with one cyclic-lr cycle spanning the whole run.

    Every random draw (epoch order, per-batch transform stream) is derived
    from ``seed``, the epoch and the batch number, so a run is reproducible.
    ``transform`` is applied to each minibatch right before the model sees it.
    """
    hist = History()
    n = len(labels)
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if n == 0 or epochs == 0:
        return hist
    n_batches = math.ceil(n / batch_size)
    total = epochs * n_batches
    step = 0
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        loss_sum = 0.0
        correct = 0
        for b in range(n_batches):
            idx = order[b * batch_size:(b + 1) * batch_size]
            x = images[idx]
            if transform is not None:
                x = transform(x, np.random.default_rng([seed, epoch, b, 1]))
            loss, grad, logits = model._backprop(x, labels[idx])
            sgd_step(model, grad, state, cyclic_lr(step, total, state.max_lr))
            step += 1
            loss_sum += loss * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == labels[idx]))
        hist.loss.append(loss_sum / n)
        hist.accuracy.append(correct / n)
        if log is not None:
            log(epoch, hist.loss[-1], hist.accuracy[-1])
    return hist


# -- gradient checking ------------------------------------------------------------

def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``, elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _sample_params(model: Model, n_samples: int, seed: int) -> np.ndarray:
    if model.num_params <= n_samples:
        return np.arange(model.num_params)
    rng = np.random.default_rng(seed)
    sizes = [int(np.prod(s)) for ss in model.shapes for s in ss]
    per = math.ceil(n_samples / len(sizes))
    picks, offset = [], 0
    for size in sizes:
        picks.append(offset + rng.choice(size, size=min(per, size), replace=False))
        offset += size
    idx = np.concatenate(picks)
    short = n_samples - len(idx)
    if short > 0:
        rest = np.setdiff1d(np.arange(model.num_params), idx)
        idx = np.concatenate([idx, rng.choice(rest, size=short, replace=False)])
    return np.sort(idx)


def numeric_gradient(model: Model, images, labels, idx, epsilon: float = 1e-3,
                     freeze_kinks: bool = True) -> np.ndarray:
    """Central differences of the mean loss for the parameters at ``idx``.

    With ``freeze_kinks`` the ReLU masks and pool selections are held at
    their values for the unperturbed parameters. The loss restricted to that
    linear piece has the same gradient at the base point, but no kink can
    fall inside ``[p - eps, p + eps]`` and spoil the difference quotient.
    """
    if not epsilon > 0:
        raise ValueError("degenerate step")
    x = np.asarray(images, dtype=model.dtype)
    pattern = model.kink_pattern(x) if freeze_kinks else None
    out = np.empty(len(idx))
    for t, i in enumerate(idx):
        orig = model.params[i]
        model.params[i] = orig + epsilon
        plus = cross_entropy(model.forward(x, pattern=pattern), labels)
        model.params[i] = orig - epsilon
        minus = cross_entropy(model.forward(x, pattern=pattern), labels)
        model.params[i] = orig
        out[t] = (plus - minus) / (2 * epsilon)
    return out


def grad_check(model: Model, images, labels, epsilon: float = 1e-3,
               n_samples: int = 200, seed: int = 0, freeze_kinks: bool = True) -> float:
    """Max relative error of backprop against central finite differences.

    Works on a 64-bit copy of ``model``. At least ``n_samples`` parameters
    are checked, spread over every weight and bias tensor (all of them if
    the model is smaller than that). See :func:`numeric_gradient` for
    ``freeze_kinks``.
    """
    if not epsilon > 0:
        raise ValueError("degenerate step")
    m = model.copy(dtype=np.float64)
    x = np.asarray(images, dtype=np.float64)
    _, analytic = m.loss_and_grad(x, labels)
    idx = _sample_params(m, n_samples, seed)
    numeric = numeric_gradient(m, x, labels, idx, epsilon, freeze_kinks)
    return float(relative_error(analytic[idx], numeric).max())
