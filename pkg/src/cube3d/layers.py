"""Network layers: 3D convolution, 3D max pooling, batch normalization,
dense, ReLU, dropout and the softmax cross-entropy head.

Every layer follows the same small protocol:

* ``forward(x, mode, rng)`` computes the output and, in ``"train"`` mode,
  caches whatever the backward pass needs.  ``"eval"`` mode caches nothing
  and is a pure function of (parameters, input).
* ``backward(grad_out)`` returns the gradient w.r.t. the layer input and
  stores parameter gradients, retrievable via ``grads()``.
* ``params()`` / ``grads()`` / ``state()`` expose learnable tensors,
  their gradients, and non-learnable persistent state (BN running stats).

Activations are rank-5 ``N x T x H x W x C`` with channels last, except
after flattening where they are rank-2 ``N x features``.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, ShapeError, StateError, ValidationError


class Layer:
    """Minimal base: stateless, parameter-free."""

    def params(self):
        return {}

    def grads(self):
        return {}

    def state(self):
        return {}

    def astype(self, dtype):
        for d in (self.params(), self.state()):
            for k, v in d.items():
                self._set(k, v.astype(dtype))
        return self

    def _set(self, name, value):
        setattr(self, name, value)

    def forward(self, x, mode="train", rng=None):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def output_shape(self, in_shape):
        return tuple(in_shape)


def _check_mode(mode):
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")


class Conv3D(Layer):
    """Same-padded, stride-1 3D convolution over T, H and W.

    Kernel layout is ``kt x kh x kw x c_in x c_out`` with odd spatial and
    temporal extents so that same padding is symmetric.  The forward pass
    accumulates one ``(N*T*H*W, c_in) @ (c_in, c_out)`` product per kernel
    offset, which keeps memory at one input-sized buffer instead of a full
    im2col matrix.
    """

    def __init__(self, c_in, c_out, kernel_size=(3, 3, 3), dtype=np.float32):
        kt, kh, kw = kernel_size
        if kt % 2 == 0 or kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel extents must be odd, got {kernel_size}")
        self.kernel = np.zeros((kt, kh, kw, c_in, c_out), dtype=dtype)
        self.bias = np.zeros(c_out, dtype=dtype)
        self.grad_kernel = None
        self.grad_bias = None
        self._cache = None

    @property
    def c_in(self):
        return self.kernel.shape[3]

    @property
    def c_out(self):
        return self.kernel.shape[4]

    def params(self):
        return {"kernel": self.kernel, "bias": self.bias}

    def grads(self):
        return {"kernel": self.grad_kernel, "bias": self.grad_bias}

    def _pad_input(self, x):
        kt, kh, kw = self.kernel.shape[:3]
        pt, ph, pw = (kt - 1) // 2, (kh - 1) // 2, (kw - 1) // 2
        return np.pad(x, ((0, 0), (pt, pt), (ph, ph), (pw, pw), (0, 0)))

    def forward(self, x, mode="train", rng=None):
        _check_mode(mode)
        if x.ndim != 5:
            raise ShapeError(f"conv3d expects rank-5 input, got rank {x.ndim}")
        if x.shape[4] != self.c_in:
            raise ShapeError(
                f"input has {x.shape[4]} channels, kernel expects {self.c_in}"
            )
        n, t, h, w, _ = x.shape
        kt, kh, kw = self.kernel.shape[:3]
        xp = self._pad_input(x)
        acc = np.zeros((n * t * h * w, self.c_out), dtype=x.dtype)
        for dt in range(kt):
            for dh in range(kh):
                for dw in range(kw):
                    patch = xp[:, dt : dt + t, dh : dh + h, dw : dw + w, :]
                    acc += patch.reshape(-1, self.c_in) @ self.kernel[dt, dh, dw]
        acc += self.bias
        out = acc.reshape(n, t, h, w, self.c_out)
        if mode == "train":
            self._cache = (x.shape, xp)
        return out

    def backward(self, grad_out):
        if self._cache is None:
            raise StateError("conv3d backward without a cached train forward")
        x_shape, xp = self._cache
        n, t, h, w, _ = x_shape
        if grad_out.shape != (n, t, h, w, self.c_out):
            raise ShapeError(
                f"grad_out shape {grad_out.shape} does not match forward "
                f"output {(n, t, h, w, self.c_out)}"
            )
        kt, kh, kw = self.kernel.shape[:3]
        pt, ph, pw = (kt - 1) // 2, (kh - 1) // 2, (kw - 1) // 2
        g2 = grad_out.reshape(-1, self.c_out)
        self.grad_bias = grad_out.sum(axis=(0, 1, 2, 3))
        self.grad_kernel = np.zeros_like(self.kernel)
        gxp = np.zeros_like(xp)
        for dt in range(kt):
            for dh in range(kh):
                for dw in range(kw):
                    patch = xp[:, dt : dt + t, dh : dh + h, dw : dw + w, :]
                    self.grad_kernel[dt, dh, dw] = (
                        patch.reshape(-1, self.c_in).T @ g2
                    )
                    gxp[:, dt : dt + t, dh : dh + h, dw : dw + w, :] += (
                        g2 @ self.kernel[dt, dh, dw].T
                    ).reshape(n, t, h, w, self.c_in)
        return gxp[:, pt : pt + t, ph : ph + h, pw : pw + w, :]

    def output_shape(self, in_shape):
        n, t, h, w, c = in_shape
        if c != self.c_in:
            raise ShapeError(f"channel mismatch: input {c}, kernel {self.c_in}")
        return (n, t, h, w, self.c_out)


def pool_output_extent(n, window, stride, ceil_mode):
    """Output extent of one pooled axis.

    Ceil mode allows a trailing partial window: ``ceil((n - window)/stride)
    + 1``, clamped so the last window still starts inside the input (a
    window lying wholly in padding would be empty, not partial).  Floor
    mode requires the window to fit at least once.
    """
    if ceil_mode:
        ext = -(-(n - window) // stride) + 1
        return max(1, min(ext, (n - 1) // stride + 1))
    if window > n:
        raise ShapeError(f"window {window} exceeds input extent {n} in floor mode")
    return (n - window) // stride + 1


class MaxPool3D(Layer):
    """3D max pooling with an argmax record for exact gradient routing.

    Ceil mode (the default) admits a final partial window per axis, which
    is what produces the 85 -> 43 -> 22 -> 11 -> 6 spatial chain of the
    full network.  Ties go to the lowest flat input index, so backward is
    deterministic.
    """

    def __init__(self, window, stride=None, ceil_mode=True):
        self.window = tuple(int(v) for v in window)
        self.stride = tuple(int(v) for v in (stride or window))
        if any(v < 1 for v in self.window) or any(v < 1 for v in self.stride):
            raise ConfigError(
                f"window {self.window} and stride {self.stride} must be >= 1"
            )
        self.ceil_mode = ceil_mode
        self._cache = None

    def forward(self, x, mode="train", rng=None):
        _check_mode(mode)
        if x.ndim != 5:
            raise ShapeError(f"maxpool3d expects rank-5 input, got rank {x.ndim}")
        n, t, h, w, c = x.shape
        wt, wh, ww = self.window
        st, sh, sw = self.stride
        ot = pool_output_extent(t, wt, st, self.ceil_mode)
        oh = pool_output_extent(h, wh, sh, self.ceil_mode)
        ow = pool_output_extent(w, ww, sw, self.ceil_mode)
        need = ((ot - 1) * st + wt, (oh - 1) * sh + wh, (ow - 1) * sw + ww)
        xp = np.pad(
            x,
            (
                (0, 0),
                (0, max(0, need[0] - t)),
                (0, max(0, need[1] - h)),
                (0, max(0, need[2] - w)),
                (0, 0),
            ),
            mode="constant",
            constant_values=-np.inf,
        )
        best = None
        choice = None
        offsets = [
            (dt, dh, dw)
            for dt in range(wt)
            for dh in range(wh)
            for dw in range(ww)
        ]
        for oid, (dt, dh, dw) in enumerate(offsets):
            sl = xp[
                :,
                dt : dt + (ot - 1) * st + 1 : st,
                dh : dh + (oh - 1) * sh + 1 : sh,
                dw : dw + (ow - 1) * sw + 1 : sw,
                :,
            ]
            if best is None:
                best = sl.copy()
                choice = np.zeros(best.shape, dtype=np.int32)
            else:
                better = sl > best  # strict: ties keep the earliest offset
                np.copyto(best, sl, where=better)
                choice[better] = oid
        # Flat source index into the unpadded input, per output cell.
        off = np.asarray(offsets, dtype=np.int64)
        src_t = np.arange(ot, dtype=np.int64)[None, :, None, None, None] * st
        src_h = np.arange(oh, dtype=np.int64)[None, None, :, None, None] * sh
        src_w = np.arange(ow, dtype=np.int64)[None, None, None, :, None] * sw
        src_t = src_t + off[choice, 0]
        src_h = src_h + off[choice, 1]
        src_w = src_w + off[choice, 2]
        n_idx = np.arange(n, dtype=np.int64)[:, None, None, None, None]
        c_idx = np.arange(c, dtype=np.int64)[None, None, None, None, :]
        argmax = (((n_idx * t + src_t) * h + src_h) * w + src_w) * c + c_idx
        self._cache = (x.shape, best.shape, argmax)
        return best

    def backward(self, grad_out):
        if self._cache is None:
            raise StateError("maxpool3d backward without a cached forward")
        x_shape, out_shape, argmax = self._cache
        if grad_out.shape != out_shape:
            raise ShapeError(
                f"grad_out shape {grad_out.shape} does not match pooled "
                f"output {out_shape}"
            )
        size = int(np.prod(x_shape))
        flat = np.bincount(
            argmax.ravel(), weights=grad_out.ravel(), minlength=size
        )
        return flat.reshape(x_shape).astype(grad_out.dtype, copy=False)

    def output_shape(self, in_shape):
        n, t, h, w, c = in_shape
        return (
            n,
            pool_output_extent(t, self.window[0], self.stride[0], self.ceil_mode),
            pool_output_extent(h, self.window[1], self.stride[1], self.ceil_mode),
            pool_output_extent(w, self.window[2], self.stride[2], self.ceil_mode),
            c,
        )


class BatchNorm(Layer):
    """Per-feature batch normalization over the last axis.

    In train mode the mean and (population) variance are taken across every
    non-feature position of the mini-batch, then running statistics are
    updated with ``running <- (1 - m) * running + m * batch``.  Eval mode
    normalizes with the running statistics.
    """

    def __init__(self, features, epsilon=1e-5, stat_momentum=0.1, dtype=np.float32):
        self.gamma = np.ones(features, dtype=dtype)
        self.beta = np.zeros(features, dtype=dtype)
        self.running_mean = np.zeros(features, dtype=dtype)
        self.running_var = np.ones(features, dtype=dtype)
        self.epsilon = float(epsilon)
        self.stat_momentum = float(stat_momentum)
        self.grad_gamma = None
        self.grad_beta = None
        self._cache = None

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return {"gamma": self.grad_gamma, "beta": self.grad_beta}

    def state(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def _set(self, name, value):
        if name in ("running_mean", "running_var"):
            setattr(self, name, value)
        else:
            super()._set(name, value)

    def forward(self, x, mode="train", rng=None):
        _check_mode(mode)
        if x.shape[-1] != self.gamma.shape[0]:
            raise ShapeError(
                f"feature extent {x.shape[-1]} does not match {self.gamma.shape[0]}"
            )
        axes = tuple(range(x.ndim - 1))
        if mode == "eval":
            inv = 1.0 / np.sqrt(self.running_var + self.epsilon)
            return self.gamma * (x - self.running_mean) * inv + self.beta
        m = int(np.prod(x.shape[:-1]))
        if m < 2:
            raise ValidationError(
                f"batch norm needs >= 2 positions per feature in train mode, got {m}"
            )
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv = 1.0 / np.sqrt(var + self.epsilon)
        xhat = (x - mu) * inv
        mom = self.stat_momentum
        self.running_mean = ((1 - mom) * self.running_mean + mom * mu).astype(
            self.running_mean.dtype
        )
        self.running_var = ((1 - mom) * self.running_var + mom * var).astype(
            self.running_var.dtype
        )
        self._cache = (xhat, inv, m, axes)
        return self.gamma * xhat + self.beta

    def backward(self, grad_out):
        if self._cache is None:
            raise StateError("batch norm backward without a cached train forward")
        xhat, inv, m, axes = self._cache
        if grad_out.shape != xhat.shape:
            raise ShapeError(
                f"grad_out shape {grad_out.shape} does not match forward "
                f"input {xhat.shape}"
            )
        self.grad_beta = grad_out.sum(axis=axes)
        self.grad_gamma = (grad_out * xhat).sum(axis=axes)
        dxhat = grad_out * self.gamma
        grad_x = (
            inv
            / m
            * (
                m * dxhat
                - dxhat.sum(axis=axes)
                - xhat * (dxhat * xhat).sum(axis=axes)
            )
        )
        return grad_x.astype(grad_out.dtype, copy=False)


class Dense(Layer):
    """Fully connected layer ``y = x @ W + b`` on rank-2 input."""

    def __init__(self, in_features, out_features, dtype=np.float32):
        self.weight = np.zeros((in_features, out_features), dtype=dtype)
        self.bias = np.zeros(out_features, dtype=dtype)
        self.grad_weight = None
        self.grad_bias = None
        self._cache = None

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def grads(self):
        return {"weight": self.grad_weight, "bias": self.grad_bias}

    def forward(self, x, mode="train", rng=None):
        _check_mode(mode)
        if x.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise ShapeError(
                f"dense expects N x {self.weight.shape[0]}, got {x.shape}"
            )
        if mode == "train":
            self._cache = x
        return x @ self.weight + self.bias

    def backward(self, grad_out):
        if self._cache is None:
            raise StateError("dense backward without a cached train forward")
        x = self._cache
        if grad_out.shape != (x.shape[0], self.weight.shape[1]):
            raise ShapeError(f"grad_out shape {grad_out.shape} mismatches dense output")
        self.grad_weight = x.T @ grad_out
        self.grad_bias = grad_out.sum(axis=0)
        return grad_out @ self.weight.T

    def output_shape(self, in_shape):
        n, f = in_shape
        if f != self.weight.shape[0]:
            raise ShapeError(f"dense input extent {f} != {self.weight.shape[0]}")
        return (n, self.weight.shape[1])


class ReLU(Layer):
    def forward(self, x, mode="train", rng=None):
        _check_mode(mode)
        if mode == "train":
            self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, grad_out):
        if getattr(self, "_mask", None) is None:
            raise StateError("relu backward without a cached train forward")
        if grad_out.shape != self._mask.shape:
            raise ShapeError("grad_out shape mismatches relu input")
        return grad_out * self._mask


class Flatten(Layer):
    """Collapse T, H, W, C into one feature axis, row-major (T then H then
    W then C), so checkpoints are portable across loaders."""

    def forward(self, x, mode="train", rng=None):
        _check_mode(mode)
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        if getattr(self, "_in_shape", None) is None:
            raise StateError("flatten backward without a forward")
        return grad_out.reshape(self._in_shape)

    def output_shape(self, in_shape):
        return (in_shape[0], int(np.prod(in_shape[1:])))


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time
    so eval needs no rescaling."""

    def __init__(self, rate, seed=0):
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)
        self.seed = int(seed)
        self._mask = None

    def forward(self, x, mode="train", rng=None):
        _check_mode(mode)
        if mode == "eval" or self.rate == 0.0:
            if mode == "train":
                self._mask = np.ones_like(x, dtype=bool)
            return x
        if rng is None:
            rng = np.random.Generator(np.random.PCG64(self.seed))
        self._mask = rng.random(x.shape) >= self.rate
        return x * self._mask / (1.0 - self.rate)

    def backward(self, grad_out):
        if self._mask is None:
            raise StateError("dropout backward without a cached train forward")
        if grad_out.shape != self._mask.shape:
            raise ShapeError("grad_out shape mismatches dropout input")
        return grad_out * self._mask / (1.0 - self.rate)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return grad_out * (x > 0)


def softmax(logits):
    """Row-wise softmax of an ``N x C`` score matrix, C >= 2."""
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"softmax expects N x C with C >= 2, got {logits.shape}")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient w.r.t. the logits.

    Computed in the log domain: ``-log p`` is taken as ``logsumexp(z) - z_y``
    so no probability is ever materialized at 0.  The gradient is the usual
    ``(softmax - onehot) / N``.
    """
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"expected N x C logits with C >= 2, got {logits.shape}")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} mismatches batch {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValidationError(
            f"label outside 0..{c - 1}: {labels.min()}..{labels.max()}"
        )
    zmax = logits.max(axis=1, keepdims=True)
    z = logits - zmax
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(n), labels] - lse
    loss = float(-logp.mean())
    probs = np.exp(z - lse[:, None])
    probs[np.arange(n), labels] -= 1.0
    return loss, probs / n
