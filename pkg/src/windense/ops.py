"""Layer primitives: forward passes that record hand-derived backward closures.

Each operation validates its input, computes the forward value in numpy (or
via the conv kernels), and attaches a closure that maps the output gradient
to input gradients.  Layers with state (conv weights, batch-norm statistics,
dropout rng) are small classes; stateless ops are plain functions.
"""

from typing import Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .tensor import Tensor


class Conv2d:
    """2-D cross-correlation without bias, square kernel, NCHW/OIHW layout."""

    def __init__(self, weight, stride: int = 1, padding: int = 0):
        self.weight = weight if isinstance(weight, Tensor) else Tensor(weight, requires_grad=True)
        if self.weight.data.ndim != 4:
            raise ValueError("Conv2d weight must be OIHW")
        if stride < 1 or padding < 0:
            raise ValueError("Conv2d: stride must be >= 1 and padding >= 0")
        self.stride = stride
        self.padding = padding

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d_forward(self, x)


def conv2d_forward(layer: Conv2d, x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ValueError("conv2d: input must be 4-D NCHW")
    if x.shape[1] != layer.in_channels:
        raise ValueError(
            f"conv2d: input has {x.shape[1]} channels, weight expects {layer.in_channels}"
        )
    w, stride, pad = layer.weight, layer.stride, layer.padding
    kernels.conv_out_size(x.shape[2], w.shape[2], stride, pad)
    kernels.conv_out_size(x.shape[3], w.shape[3], stride, pad)
    y = kernels.conv2d_forward(x.data, w.data, stride, pad)
    out = Tensor(y, _parents=(x, w), _op="conv2d")

    def bwd(g):
        g = np.ascontiguousarray(g)
        dx = kernels.conv2d_input_grad(g, w.data, x.data.shape, stride, pad) \
            if x.requires_grad else None
        dw = kernels.conv2d_weight_grad(g, x.data, w.data.shape, stride, pad) \
            if w.requires_grad else None
        return (dx, dw)

    out._backward = bwd
    return out


class BatchNorm2d:
    """Per-channel batch normalization over N, H, W with learnable scale/shift.

    Train mode standardizes by batch statistics and folds them into the
    running estimates (running <- (1 - rate) * running + rate * batch);
    eval mode standardizes by the running estimates.
    """

    def __init__(self, channels: int, eps: float = 1e-5, running_update_rate: float = 0.1):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.eps = eps
        self.running_update_rate = running_update_rate
        self.training = True

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return batchnorm_forward(self, x)


def batchnorm_forward(layer: BatchNorm2d, x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ValueError("batchnorm: input must be 4-D NCHW")
    if x.shape[1] != layer.channels:
        raise ValueError(f"batchnorm: {x.shape[1]} channels, layer has {layer.channels}")
    if x.shape[0] == 0:
        raise ValueError("batchnorm: empty batch")

    gamma, beta = layer.gamma, layer.beta
    axes = (0, 2, 3)
    if layer.training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)  # biased, matches the standardization below
        r = layer.running_update_rate
        layer.running_mean += r * (mu - layer.running_mean)
        layer.running_var += r * (var - layer.running_var)
    else:
        mu, var = layer.running_mean, layer.running_var

    inv_std = 1.0 / np.sqrt(var + layer.eps)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    out = Tensor(y, _parents=(x, gamma, beta), _op="batchnorm")
    train_stats = layer.training

    def bwd(g):
        dgamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        dbeta = g.sum(axis=axes) if beta.requires_grad else None
        if not x.requires_grad:
            return (None, dgamma, dbeta)
        dxhat = g * gamma.data[None, :, None, None]
        if train_stats:
            # derivative through the batch mean and variance
            mean_dxhat = dxhat.mean(axis=axes)
            mean_dxhat_xhat = (dxhat * xhat).mean(axis=axes)
            dx = inv_std[None, :, None, None] * (
                dxhat
                - mean_dxhat[None, :, None, None]
                - xhat * mean_dxhat_xhat[None, :, None, None]
            )
        else:
            dx = dxhat * inv_std[None, :, None, None]
        return (dx, dgamma, dbeta)

    out._backward = bwd
    return out


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    out = Tensor(np.maximum(x.data, 0.0), _parents=(x,), _op="relu")
    out._backward = lambda g: (g * (x.data > 0.0),)
    return out


def avgpool2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 mean pooling; requires even spatial dims."""
    if x.data.ndim != 4:
        raise ValueError("avgpool2x2: input must be 4-D NCHW")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avgpool2x2: odd spatial dims ({h}, {w})")
    y = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    out = Tensor(y, _parents=(x,), _op="avgpool2x2")

    def bwd(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    out._backward = bwd
    return out


def global_avgpool(x: Tensor) -> Tensor:
    """Full-spatial mean: NCHW -> NC."""
    if x.data.ndim != 4:
        raise ValueError("global_avgpool: input must be 4-D NCHW")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)), _parents=(x,), _op="global_avgpool")

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None], (n, c, h, w)) / (h * w),)

    out._backward = bwd
    return out


class Dropout:
    """Inverted dropout: kept elements scale by 1/keep_prob, eval mode is identity."""

    def __init__(self, keep_prob: float = 1.0, rng: Optional[np.random.Generator] = None):
        if not (0.0 < keep_prob <= 1.0):
            raise ValueError(f"Dropout: keep_prob {keep_prob} not in (0, 1]")
        self.keep_prob = keep_prob
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.training = True

    def __call__(self, x: Tensor) -> Tensor:
        return dropout_forward(self, x)


def dropout_forward(layer: Dropout, x: Tensor) -> Tensor:
    if not layer.training or layer.keep_prob == 1.0:
        return x
    scale = (layer.rng.random(x.shape) < layer.keep_prob) / layer.keep_prob
    out = Tensor(x.data * scale, _parents=(x,), _op="dropout")
    out._backward = lambda g: (g * scale,)
    return out


class Linear:
    """Affine map y = x W^T + b for 2-D inputs (batch, features)."""

    def __init__(self, weight, bias):
        self.weight = weight if isinstance(weight, Tensor) else Tensor(weight, requires_grad=True)
        self.bias = bias if isinstance(bias, Tensor) else Tensor(bias, requires_grad=True)
        if self.weight.data.ndim != 2 or self.bias.data.ndim != 1:
            raise ValueError("Linear: weight must be 2-D, bias 1-D")
        if self.bias.shape[0] != self.weight.shape[0]:
            raise ValueError("Linear: bias length must equal weight row count")

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(self, x)


def linear_forward(layer: Linear, x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError("linear: input must be 2-D (batch, features)")
    if x.shape[1] != layer.in_features:
        raise ValueError(f"linear: {x.shape[1]} features, weight expects {layer.in_features}")
    w, b = layer.weight, layer.bias
    out = Tensor(x.data @ w.data.T + b.data, _parents=(x, w, b), _op="linear")

    def bwd(g):
        dx = g @ w.data if x.requires_grad else None
        dw = g.T @ x.data if w.requires_grad else None
        db = g.sum(axis=0) if b.requires_grad else None
        return (dx, dw, db)

    out._backward = bwd
    return out


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tuple[Tensor, Tensor]:
    """Mean negative log-likelihood of integer labels under softmax(logits).

    Computed with max subtraction for stability.  Returns (scalar loss, probs);
    probs is detached from the graph, gradient flows through the loss only.
    """
    if logits.data.ndim != 2:
        raise ValueError("softmax_cross_entropy: logits must be 2-D (batch, classes)")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"softmax_cross_entropy: expected {n} labels, got {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {c})")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    probs = np.exp(log_probs)
    loss_val = -log_probs[np.arange(n), labels].mean()
    loss = Tensor(loss_val, _parents=(logits,), _op="softmax_xent")

    def bwd(g):
        dlogits = probs.copy()
        dlogits[np.arange(n), labels] -= 1.0
        return (dlogits * (float(g.reshape(())) / n),)

    loss._backward = bwd
    return loss, Tensor(probs)
