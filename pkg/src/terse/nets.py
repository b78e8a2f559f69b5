"""Synthesizer, target classifier and discriminator, their losses, and checkpoints."""
import struct
from contextlib import contextmanager

import numpy as np

from .compositor import ClampRanges, compose, compose_backward, squash
from .core import (BatchNorm, Conv2d, Dropout, Flatten, InstanceNorm2d,
                   LeakyReLU, Linear, MaxPool2d, Module, ReLU, Sequential,
                   floored_log, init_network, sigmoid, softmax,
                   softmax_cross_entropy)

SYNTH_FLAT = 1620
TARGET_FLAT = 980
IMAGE_SIZE = 40


def _conv_block(c_in, c_out, k, p_drop):
    return [Conv2d(c_in, c_out, k), ReLU(), BatchNorm(c_out), Dropout(p_drop, channelwise=True)]


def _trace_hw(layers, hw):
    for layer in layers:
        if isinstance(layer, Conv2d):
            hw = layer.output_hw(*hw)
        elif isinstance(layer, MaxPool2d):
            hw = ((hw[0] - layer.window) // layer.stride + 1,
                  (hw[1] - layer.window) // layer.stride + 1)
    return hw


def _dtype_of(net):
    return net.params()[0].value.dtype


def _body_backward(body, dy, cache, input_grad):
    body.input_grad = input_grad
    dx = body.backward(dy, cache)
    return None if dx is None else dx[:, 0]


class SynthesizerNet(Module):
    """Regresses six affine parameters from a foreground mask and a background.

    One backbone is shared by both inputs; each then goes through its own
    branch, and the concatenated 40-channel map feeds the regression head.
    The last linear output is squashed by tanh onto ``ranges``.
    """

    def __init__(self, ranges=None, p_drop=0.5):
        self.ranges = ranges or ClampRanges()
        self.backbone = Sequential(Conv2d(1, 10, 5), MaxPool2d(3, 2), BatchNorm(10), ReLU(),
                                   Dropout(p_drop, channelwise=True))
        self.fg_branch = Sequential(*_conv_block(10, 20, 3, p_drop), *_conv_block(20, 20, 3, p_drop))
        self.bg_branch = Sequential(*_conv_block(10, 20, 3, p_drop), *_conv_block(20, 20, 3, p_drop))
        self.features = Sequential(*_conv_block(40, 20, 3, p_drop), *_conv_block(20, 20, 3, p_drop))
        self.regressor = Sequential(
            Linear(SYNTH_FLAT, 50), ReLU(), BatchNorm(50), Dropout(p_drop),
            Linear(50, 20), ReLU(), BatchNorm(20), Dropout(p_drop),
            Linear(20, 6))
        self.backbone.input_grad = False
        hw = _trace_hw(self.backbone.layers + self.fg_branch.layers + self.features.layers,
                       (IMAGE_SIZE, IMAGE_SIZE))
        flat = self.features.layers[-4].out_ch * hw[0] * hw[1]
        assert flat == SYNTH_FLAT, f"synthesizer flatten size {flat} != {SYNTH_FLAT}"

    def children(self):
        return {"backbone": self.backbone, "fg_branch": self.fg_branch,
                "bg_branch": self.bg_branch, "features": self.features,
                "regressor": self.regressor}

    def forward(self, mask, background):
        """(N, 40, 40) mask and background -> ((N, 6) params, cache)."""
        dt = _dtype_of(self)
        hm, c_bm = self.backbone.forward(np.asarray(mask, dt)[:, None])
        hb, c_bb = self.backbone.forward(np.asarray(background, dt)[:, None])
        fm, c_fg = self.fg_branch.forward(hm)
        fb, c_bg = self.bg_branch.forward(hb)
        h, c_ft = self.features.forward(np.concatenate([fm, fb], axis=1))
        z, c_rg = self.regressor.forward(h.reshape(len(h), -1))
        params, dsq = squash(z, self.ranges)
        return params, (c_bm, c_bb, c_fg, c_bg, c_ft, h.shape, c_rg, dsq)

    def backward(self, dparams, cache):
        """Accumulate weight gradients for an upstream d loss / d params."""
        c_bm, c_bb, c_fg, c_bg, c_ft, h_shape, c_rg, dsq = cache
        dz = (np.asarray(dparams) * dsq).astype(_dtype_of(self))
        dh = self.regressor.backward(dz, c_rg).reshape(h_shape)
        dcat = self.features.backward(dh, c_ft)
        dm = self.fg_branch.backward(dcat[:, :20], c_fg)
        db = self.bg_branch.backward(dcat[:, 20:], c_bg)
        self.backbone.backward(dm, c_bm)
        self.backbone.backward(db, c_bb)

    def predict(self, mask, background):
        return self.forward(mask, background)[0]


class TargetNet(Module):
    """Two 5x5 conv layers (10, 20 channels), each followed by 2x2 max pooling."""

    def __init__(self, p_drop=0.5):
        self.body = Sequential(
            Conv2d(1, 10, 5), ReLU(), MaxPool2d(2),
            Conv2d(10, 20, 5), ReLU(), MaxPool2d(2),
            Dropout(p_drop, channelwise=True), Flatten(),
            Linear(TARGET_FLAT, 50), ReLU(), Linear(50, 10))
        hw = _trace_hw(self.body.layers, (IMAGE_SIZE, IMAGE_SIZE))
        flat = 20 * hw[0] * hw[1]
        assert flat == TARGET_FLAT, f"target flatten size {flat} != {TARGET_FLAT}"

    def children(self):
        return {"body": self.body}

    def forward(self, images):
        """(N, 40, 40) images -> ((N, 10) logits, cache)."""
        return self.body.forward(np.asarray(images, _dtype_of(self))[:, None])

    def backward(self, dlogits, cache, input_grad=True):
        """Returns d loss / d images with shape (N, 40, 40), or None."""
        return _body_backward(self.body, dlogits.astype(_dtype_of(self)), cache, input_grad)

    def predict_proba(self, images, batch=1000):
        """Softmax probabilities in eval mode; the previous mode is restored."""
        with evaluating(self):
            out = [softmax(self.forward(images[i:i + batch])[0])
                   for i in range(0, len(images), batch)]
        return np.concatenate(out) if out else np.empty((0, 10))

    def accuracy(self, split, batch=1000):
        if len(split) == 0:
            return float("nan")
        probs = self.predict_proba(split.images, batch)
        return float(np.mean(probs.argmax(axis=1) == split.labels))


class DiscriminatorNet(Module):
    """Strided-conv real/composite classifier for 40x40 images (one logit each)."""

    def __init__(self):
        self.body = Sequential(
            Conv2d(1, 16, 4, stride=2, padding=1), LeakyReLU(0.2),
            Conv2d(16, 32, 4, stride=2, padding=1), InstanceNorm2d(), LeakyReLU(0.2),
            Conv2d(32, 64, 4, stride=2, padding=1), InstanceNorm2d(), LeakyReLU(0.2),
            Flatten(), Linear(64 * 5 * 5, 1))

    def children(self):
        return {"body": self.body}

    def forward(self, images):
        """(N, 40, 40) -> ((N,) logits, cache)."""
        z, cache = self.body.forward(np.asarray(images, _dtype_of(self))[:, None])
        return z[:, 0], cache

    def backward(self, dlogits, cache, input_grad=True):
        dz = dlogits.astype(_dtype_of(self))[:, None]
        return _body_backward(self.body, dz, cache, input_grad)


NET_KINDS = {SynthesizerNet: 0, TargetNet: 1, DiscriminatorNet: 2}


def build(kind, seed, gain=None, ranges=None, p_drop=0.5):
    """A freshly Xavier-initialized network; ``kind`` is synth, target or disc."""
    if kind == "synth":
        return init_network(SynthesizerNet(ranges, p_drop), 0.4 if gain is None else gain, seed)
    if kind == "target":
        return init_network(TargetNet(), 1.0 if gain is None else gain, seed)
    if kind == "disc":
        return init_network(DiscriminatorNet(), 1.0 if gain is None else gain, seed)
    raise ValueError(f"unknown network kind {kind!r}")


@contextmanager
def evaluating(net):
    """Temporarily switch ``net`` to eval mode."""
    was = net.training
    net.eval()
    try:
        yield net
    finally:
        net.train(was)


def set_mode(net, mode):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return net.train(mode == "train")


# losses

def log_sigmoid(z):
    """log(max(sigmoid(z), 1e-12)), d/dz, and the number of floored entries."""
    s = sigmoid(z)
    logs, dlog, n_floor = floored_log(s)
    return logs, dlog * s * (1 - s), n_floor


def disc_loss(real_logits, fake_logits):
    """-[mean log D(r) + mean log(1 - D(f))] with D = sigmoid(logit).

    Returns ``(loss, d_real_logits, d_fake_logits, saturation_events)``.
    """
    lr, dr, sr = log_sigmoid(real_logits)
    lf, df, sf = log_sigmoid(-fake_logits)  # 1 - sigmoid(z) = sigmoid(-z)
    loss = -(lr.mean() + lf.mean())
    return float(loss), -dr / len(lr), df / len(lf), sr + sf


def generator_adv_loss(fake_logits, saturating=False):
    """Discriminator term of the synthesizer loss.

    Non-saturating form ``-mean log D(f)`` by default; the saturating form
    ``mean log(1 - D(f))`` is kept for fidelity runs.
    """
    if saturating:
        lf, df, sat = log_sigmoid(-fake_logits)
        return float(lf.mean()), -df / len(lf), sat
    lf, df, sat = log_sigmoid(fake_logits)
    return float(-lf.mean()), -df / len(lf), sat


def synth_loss(target_logits, labels, fake_logits=None, lambda_d=0.0, saturating=False):
    """-CE(target on composites) + lambda_d * adversarial term.

    Returns ``(loss, d_target_logits, d_fake_logits or None, saturation_events)``.
    The discriminator is not consulted when ``lambda_d == 0``.
    """
    ce, _, dce = softmax_cross_entropy(target_logits, labels)
    loss, dt = -ce, -dce
    if lambda_d == 0 or fake_logits is None:
        return loss, dt, None, 0
    adv, dfake, sat = generator_adv_loss(fake_logits, saturating)
    return loss + lambda_d * adv, dt, lambda_d * dfake, sat


def synth_objective(synth, target, fg, bg, labels, disc=None, lambda_d=0.0, saturating=False,
                    backward=True):
    """Synthesizer loss through S -> compositor -> T (and D when lambda_d > 0).

    The target and discriminator only pass gradients through; their weight
    gradients are not accumulated. Returns ``(loss, info)`` with the
    composites, params and saturation count in ``info``.
    """
    params, s_cache = synth.forward(fg, bg)
    comp, c_cache = compose(fg, bg, params)
    logits, t_cache = target.forward(comp)
    use_d = lambda_d != 0 and disc is not None
    fake_logits, d_cache = disc.forward(comp) if use_d else (None, None)
    loss, dlogits, dfake, sat = synth_loss(logits, labels, fake_logits, lambda_d, saturating)
    info = {"params": params, "composites": comp, "logits": logits, "saturation": sat}
    if backward:
        with frozen(target):
            dcomp = target.backward(dlogits, t_cache).astype(np.float64)
        if use_d:
            with frozen(disc):
                dcomp = dcomp + disc.backward(dfake, d_cache)
        dparams = compose_backward(dcomp, c_cache)
        synth.backward(dparams, s_cache)
    return loss, info


@contextmanager
def frozen(net):
    was = net.frozen
    net.freeze(True)
    try:
        yield net
    finally:
        net.freeze(was)


# checkpoints

CKPT_MAGIC = b"TERSEckpt"
CKPT_VERSION = 1


def save_checkpoint(path, net):
    """Write parameters and running statistics as little-endian float32."""
    arrays = net.state_arrays()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IBI", CKPT_VERSION, NET_KINDS[type(net)], len(arrays)))
        for name, arr in arrays.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
            fh.write(np.ascontiguousarray(arr, "<f4").tobytes())


def read_checkpoint(path):
    """Returns ``(kind_code, {name: float32 array})``."""
    raw = open(path, "rb").read()
    if not raw.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = len(CKPT_MAGIC)
    version, kind, count = struct.unpack_from("<IBI", raw, pos)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos += struct.calcsize("<IBI")
    arrays = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (ndim,) = struct.unpack_from("<B", raw, pos)
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 1)
            pos += 1 + 4 * ndim
            size = int(np.prod(shape)) * 4
            if pos + size > len(raw):
                raise ValueError(f"{path}: truncated array {name!r}")
            arrays[name] = np.frombuffer(raw, "<f4", int(np.prod(shape)), pos).reshape(shape).copy()
            pos += size
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return kind, arrays


def load_checkpoint(path, net=None, ranges=None):
    """Load into ``net``, or build a network of the stored kind."""
    kind, arrays = read_checkpoint(path)
    if net is None:
        cls = {v: k for k, v in NET_KINDS.items()}[kind]
        net = cls(ranges) if cls is SynthesizerNet else cls()
    elif NET_KINDS[type(net)] != kind:
        raise ValueError(f"{path}: checkpoint holds net kind {kind}, "
                         f"not {type(net).__name__}")
    net.load_state_arrays(arrays)
    return net
