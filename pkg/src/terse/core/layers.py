"""Layers with explicit forward/backward passes.

Every layer follows the same protocol::

    y, cache = layer.forward(x)
    dx = layer.backward(dy, cache)

``forward`` never stores per-call state on the layer, so one layer can be
applied several times in the same step (the synthesizer's shared backbone
sees the foreground and the background separately) and each application
is back-propagated with its own cache. ``backward`` accumulates parameter
gradients into ``Param.grad``.

Arrays are NCHW for images and (N, F) for feature vectors. Parameters are
float32 for training; ``Module.astype(np.float64)`` switches a network to
double precision for gradient checking.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import keyed_rng, stream_id


class ShapeError(ValueError):
    pass


class Param:
    """A trainable array with its accumulated gradient and optimizer state."""

    def __init__(self, value):
        self.value = value
        self.grad = np.zeros_like(value)
        self.state = {}

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0

    def astype(self, dtype):
        self.value = self.value.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.state = {k: v.astype(dtype) if isinstance(v, np.ndarray) else v
                      for k, v in self.state.items()}


class Module:
    training = True
    frozen = False

    def children(self):
        return {}

    def own_params(self):
        return {}

    def own_buffers(self):
        return {}

    def named_modules(self, prefix=""):
        yield prefix, self
        for name, child in self.children().items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_params(self):
        for mname, mod in self.named_modules():
            for pname, p in mod.own_params().items():
                yield (f"{mname}.{pname}" if mname else pname), p

    def named_buffers(self):
        for mname, mod in self.named_modules():
            for bname in mod.own_buffers():
                yield (f"{mname}.{bname}" if mname else bname), mod, bname

    def params(self):
        return [p for _, p in self.named_params()]

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def train(self, mode=True):
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self):
        return self.train(False)

    def freeze(self, frozen=True):
        """Skip parameter-gradient work in backward (input gradients still flow)."""
        for _, mod in self.named_modules():
            mod.frozen = frozen
        return self

    def astype(self, dtype):
        for p in self.params():
            p.astype(dtype)
        for _, mod, bname in self.named_buffers():
            setattr(mod, bname, getattr(mod, bname).astype(dtype))
        return self

    def seed_dropout(self, seed):
        """Key every dropout layer's random stream on (seed, layer path)."""
        for name, mod in self.named_modules():
            if isinstance(mod, Dropout):
                mod.seed = seed
                mod.layer_id = stream_id(name)
        return self

    def set_step(self, step):
        """Select the dropout masks used by subsequent training forwards."""
        for _, mod in self.named_modules():
            if isinstance(mod, Dropout):
                mod.step = step
                mod.calls = 0
        return self

    def state_arrays(self):
        """All parameters and buffers by dotted name (checkpoint payload)."""
        out = {name: p.value for name, p in self.named_params()}
        for name, mod, bname in self.named_buffers():
            out[name] = getattr(mod, bname)
        return out

    def load_state_arrays(self, arrays):
        params = dict(self.named_params())
        buffers = {name: (mod, b) for name, mod, b in self.named_buffers()}
        expected = set(params) | set(buffers)
        if set(arrays) != expected:
            missing = sorted(expected - set(arrays))
            extra = sorted(set(arrays) - expected)
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, arr in arrays.items():
            if name in params:
                p = params[name]
                if p.value.shape != arr.shape:
                    raise ShapeError(f"{name}: checkpoint shape {arr.shape} "
                                     f"!= parameter shape {p.value.shape}")
                p.value = arr.astype(p.value.dtype, copy=True)
            else:
                mod, b = buffers[name]
                setattr(mod, b, arr.astype(getattr(mod, b).dtype, copy=True))


def _check_finite(x, where):
    if not np.isfinite(x).all():
        raise FloatingPointError(f"non-finite values after {where}")


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)
        # set False where the input is data, so the first conv skips its dx
        self.input_grad = True

    def children(self):
        return {str(i): layer for i, layer in enumerate(self.layers)}

    def forward(self, x):
        caches = []
        for i, layer in enumerate(self.layers):
            x, cache = layer.forward(x)
            _check_finite(x, f"layer {i} ({type(layer).__name__})")
            caches.append(cache)
        return x, caches

    def backward(self, dy, caches):
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            if k == 0 and not self.input_grad and isinstance(layer, Conv2d):
                return layer.backward(dy, caches[k], need_input_grad=False)
            dy = layer.backward(dy, caches[k])
        return dy


def _pair(v):
    return (v, v) if np.isscalar(v) else tuple(v)


class Conv2d(Module):
    """Cross-correlation over NCHW input, computed with im2col + GEMM."""

    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, dtype=np.float32):
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel = _pair(kernel)
        self.stride = stride
        self.padding = padding
        kh, kw = self.kernel
        self.weight = Param(np.zeros((out_ch, in_ch, kh, kw), dtype))
        self.bias = Param(np.zeros(out_ch, dtype))

    def own_params(self):
        return {"weight": self.weight, "bias": self.bias}

    def output_hw(self, h, w):
        kh, kw = self.kernel
        p, s = self.padding, self.stride
        return (h + 2 * p - kh) // s + 1, (w + 2 * p - kw) // s + 1

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"conv2d: input shape {x.shape} incompatible with "
                             f"weight shape {self.weight.shape}")
        kh, kw = self.kernel
        p, s = self.padding, self.stride
        if x.shape[2] + 2 * p < kh or x.shape[3] + 2 * p < kw:
            raise ShapeError(f"conv2d: input shape {x.shape} smaller than "
                             f"weight shape {self.weight.shape}")
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
        # (N, C, Ho, Wo, kh, kw) -> (N, C*kh*kw, Ho*Wo)
        n, c, ho, wo = win.shape[:4]
        cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)
        w2 = self.weight.value.reshape(self.out_ch, -1)
        y = w2 @ cols + self.bias.value[:, None]
        return y.reshape(n, self.out_ch, ho, wo), (cols, xp.shape)

    def backward(self, dy, cache, need_input_grad=True):
        cols, xp_shape = cache
        kh, kw = self.kernel
        p, s = self.padding, self.stride
        n, _, ho, wo = dy.shape
        dy2 = dy.reshape(n, self.out_ch, ho * wo)
        if not self.frozen:
            self.weight.grad += (dy2 @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(self.weight.shape)
            self.bias.grad += dy2.sum(axis=(0, 2))
        if not need_input_grad:
            return None
        full_size = (ho + kh - 1) * (wo + kw - 1)
        if s == 1 and self.out_ch * full_size < self.in_ch * ho * wo:
            # full correlation of dy with the flipped kernel; cheaper when
            # the layer narrows the channel count
            dyp = np.pad(dy, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            win = sliding_window_view(dyp, (kh, kw), axis=(2, 3))
            hp, wp = win.shape[2:4]
            dcols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, -1, hp * wp)
            wf = self.weight.value[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(self.in_ch, -1)
            dxp = (wf @ dcols).reshape(n, self.in_ch, hp, wp)
        else:
            w2 = self.weight.value.reshape(self.out_ch, -1)
            dcols = (w2.T @ dy2).reshape(n, self.in_ch, kh, kw, ho, wo)
            dxp = np.zeros(xp_shape, dy.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dcols[:, :, i, j]
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return dxp


class MaxPool2d(Module):
    """Max over (window x window) patches; ties route to the first index."""

    def __init__(self, window, stride=None):
        self.window = window
        self.stride = stride or window

    def forward(self, x):
        k, s = self.window, self.stride
        n, c, h, w = x.shape
        if h < k or w < k:
            raise ShapeError(f"maxpool2d: window {k} larger than input {x.shape}")
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        ho, wo = win.shape[2:4]
        flat = win.reshape(n, c, ho, wo, k * k)
        arg = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        # flat index into the (H, W) plane of every selected element
        rows = np.arange(ho)[:, None] * s + arg // k
        cols = np.arange(wo)[None, :] * s + arg % k
        return y, (rows * w + cols, x.shape)

    def backward(self, dy, cache):
        idx, shape = cache
        n, c, h, w = shape
        plane = (np.arange(n * c) * (h * w)).reshape(n, c, 1, 1)
        dx = np.bincount((idx + plane).ravel(), weights=dy.ravel(), minlength=n * c * h * w)
        return dx.reshape(shape).astype(dy.dtype)


class Linear(Module):
    def __init__(self, in_f, out_f, dtype=np.float32):
        self.in_f, self.out_f = in_f, out_f
        self.weight = Param(np.zeros((out_f, in_f), dtype))
        self.bias = Param(np.zeros(out_f, dtype))

    def own_params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_f:
            raise ShapeError(f"linear: input shape {x.shape} incompatible with "
                             f"weight shape {self.weight.shape}")
        return x @ self.weight.value.T + self.bias.value, x

    def backward(self, dy, x):
        if not self.frozen:
            self.weight.grad += dy.T @ x
            self.bias.grad += dy.sum(axis=0)
        return dy @ self.weight.value


class ReLU(Module):
    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, mask):
        return dy * mask


class LeakyReLU(Module):
    def __init__(self, slope=0.2):
        self.slope = slope

    def forward(self, x):
        scale = np.where(x > 0, 1.0, self.slope).astype(x.dtype)
        return x * scale, scale

    def backward(self, dy, scale):
        return dy * scale


class Flatten(Module):
    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, shape):
        return dy.reshape(shape)


class Dropout(Module):
    """Inverted dropout. ``channelwise`` drops whole feature maps (Dropout2d).

    Masks come from a generator keyed on (seed, layer id, step, call index),
    so a given training step always draws the same masks. Evaluation mode
    is the identity.
    """

    def __init__(self, p=0.5, channelwise=False):
        self.p = p
        self.channelwise = channelwise
        self.seed = 0
        self.layer_id = 0
        self.step = 0
        self.calls = 0

    def forward(self, x):
        if not self.training or self.p == 0:
            return x, None
        rng = keyed_rng(self.seed, self.layer_id, self.step, self.calls)
        self.calls += 1
        shape = x.shape[:2] + (1,) * (x.ndim - 2) if self.channelwise else x.shape
        keep = rng.random(shape) >= self.p
        mask = (keep / (1.0 - self.p)).astype(x.dtype)
        return x * mask, mask

    def backward(self, dy, mask):
        return dy if mask is None else dy * mask


class BatchNorm(Module):
    """Batch normalization over (N,) or (N, H, W) with running statistics."""

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        self.eps, self.momentum = eps, momentum
        self.gamma = Param(np.ones(channels, dtype))
        self.beta = Param(np.zeros(channels, dtype))
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)

    def own_params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def own_buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    @staticmethod
    def _axes(x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    @staticmethod
    def _bcast(v, x):
        return v if x.ndim == 2 else v[None, :, None, None]

    def forward(self, x):
        axes = self._axes(x)
        if self.training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = x.size // x.shape[1]
            unbiased = var * m / max(m - 1, 1)
            self.running_mean = ((1 - self.momentum) * self.running_mean
                                 + self.momentum * mean).astype(self.running_mean.dtype)
            self.running_var = ((1 - self.momentum) * self.running_var
                                + self.momentum * unbiased).astype(self.running_var.dtype)
        else:
            mean, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._bcast(mean, x)) * self._bcast(inv, x)
        y = xhat * self._bcast(self.gamma.value, x) + self._bcast(self.beta.value, x)
        return y.astype(x.dtype), (xhat, inv, self.training)

    def backward(self, dy, cache):
        xhat, inv, batch_stats = cache
        axes = self._axes(dy)
        if not self.frozen:
            self.gamma.grad += (dy * xhat).sum(axis=axes)
            self.beta.grad += dy.sum(axis=axes)
        dxhat = dy * self._bcast(self.gamma.value, dy)
        if not batch_stats:
            return dxhat * self._bcast(inv, dy)
        m = dy.size // dy.shape[1]
        s1 = dxhat.sum(axis=axes)
        s2 = (dxhat * xhat).sum(axis=axes)
        dx = (dxhat - self._bcast(s1 / m, dy) - xhat * self._bcast(s2 / m, dy)) * self._bcast(inv, dy)
        return dx.astype(dy.dtype)


class InstanceNorm2d(Module):
    """Per-sample, per-channel normalization without affine parameters."""

    def __init__(self, eps=1e-5):
        self.eps = eps

    def forward(self, x):
        mean = x.mean(axis=(2, 3), keepdims=True)
        var = x.var(axis=(2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        return xhat, (xhat, inv)

    def backward(self, dy, cache):
        xhat, inv = cache
        m = dy.shape[2] * dy.shape[3]
        s1 = dy.sum(axis=(2, 3), keepdims=True)
        s2 = (dy * xhat).sum(axis=(2, 3), keepdims=True)
        return (dy - s1 / m - xhat * s2 / m) * inv
