import numpy as np

from .layers import Conv2d, Linear
from .rng import keyed_rng, stream_id


def fans(shape):
    """(fan_in, fan_out) for a linear (out, in) or conv (out, in, kh, kw) weight."""
    if len(shape) < 2:
        raise ValueError(f"fan computation needs >= 2 dims, got {shape}")
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


def xavier_uniform(shape, gain, seed, fan=None, dtype=np.float32):
    """Uniform draw in +-gain*sqrt(6/(fan_in+fan_out)), deterministic per seed."""
    if gain <= 0:
        raise ValueError(f"gain must be positive, got {gain}")
    fan_in, fan_out = fan if fan is not None else fans(shape)
    bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
    rng = keyed_rng(seed) if np.isscalar(seed) else keyed_rng(*seed)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_network(net, gain, seed):
    """Xavier-initialize every conv/linear weight of ``net``; zero the biases."""
    for name, mod in net.named_modules():
        if isinstance(mod, (Conv2d, Linear)):
            w = mod.weight
            w.value = xavier_uniform(w.shape, gain, (seed, stream_id(name)), dtype=w.value.dtype)
            mod.bias.value[...] = 0
    return net
