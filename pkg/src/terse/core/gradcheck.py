"""Central finite-difference oracles for backward passes."""
import numpy as np


def relative_error(analytic, numeric):
    """Norm-wise relative error ``max|a - n| / max(max|a|, max|n|)``.

    Element-wise ratios blow up on coordinates whose true gradient is ~0,
    so the error is measured against the largest gradient in the check.
    """
    a = np.asarray(analytic, np.float64).ravel()
    n = np.asarray(numeric, np.float64).ravel()
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def numerical_gradient(f, x, indices, eps=1e-5):
    """d f / d x at flat ``indices`` by central differences; ``x`` is perturbed in place."""
    flat = x.reshape(-1)
    out = np.empty(len(indices))
    for k, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        out[k] = (fp - fm) / (2 * eps)
    return out


def pick_indices(size, count, rng):
    if size <= count:
        return np.arange(size)
    return np.sort(rng.choice(size, count, replace=False))


def check_module(module, x, rng, n_coords=20, eps=1e-5):
    """Compare a module's backward with finite differences.

    The scalar objective is ``sum(r * module(x))`` for a fixed random ``r``.
    Returns a dict ``{"input": err, "<param name>": err, ...}``. The module
    must already be in float64; stochastic layers must have a fixed step.
    """
    step = [m.step for _, m in module.named_modules() if hasattr(m, "step")]

    def reset():
        if step:
            module.set_step(step[0])

    reset()
    y, cache = module.forward(x)
    r = rng.standard_normal(y.shape)
    module.zero_grad()
    dx = module.backward(r, cache)

    def objective():
        reset()
        return float(np.sum(r * module.forward(x)[0]))

    errors = {}
    idx = pick_indices(x.size, n_coords, rng)
    errors["input"] = relative_error(dx.reshape(-1)[idx], numerical_gradient(objective, x, idx, eps))
    for name, p in module.named_params():
        idx = pick_indices(p.value.size, n_coords, rng)
        num = numerical_gradient(objective, p.value, idx, eps)
        errors[name] = relative_error(p.grad.reshape(-1)[idx], num)
    reset()
    return errors
