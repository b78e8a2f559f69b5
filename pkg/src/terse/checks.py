"""Finite-difference suite behind the ``gradcheck`` subcommand.

Every check runs in float64. Layers must agree with central differences to
LAYER_TOL; chains through the bilinear sampler and the alpha threshold are
piecewise smooth and are held to CHAIN_TOL with a small step.
"""
from dataclasses import dataclass

import numpy as np

from .compositor import (ClampRanges, bilinear_sample, bilinear_sample_backward,
                         blur, compose, compose_backward)
from .core import (BatchNorm, Conv2d, Dropout, Flatten, InstanceNorm2d,
                   LeakyReLU, Linear, MaxPool2d, ReLU, Sequential,
                   softmax_cross_entropy)
from .core.gradcheck import check_module, numerical_gradient, relative_error
from .nets import build, synth_objective

LAYER_TOL = 1e-5
CHAIN_TOL = 1e-2
CHAIN_EPS = 1e-7


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self):
        return bool(self.error < self.tol)

    def line(self):
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}: {self.error:.3e} (< {self.tol:g})"


def _randomize(module, rng):
    for p in module.params():
        p.value = rng.standard_normal(p.shape)
    return module


def _layer_cases():
    return [
        ("conv2d 3x3 s1 p0", lambda: Conv2d(3, 4, 3), (2, 3, 8, 8)),
        ("conv2d 3x3 s2 p1", lambda: Conv2d(3, 4, 3, 2, 1), (2, 3, 8, 8)),
        ("conv2d 5x5 narrowing", lambda: Conv2d(6, 2, 5, 1, 2), (2, 6, 9, 9)),
        ("conv2d 4x4 s2 p1", lambda: Conv2d(2, 3, 4, 2, 1), (2, 2, 10, 10)),
        ("linear", lambda: Linear(7, 5), (4, 7)),
        ("batchnorm1d", lambda: BatchNorm(5), (6, 5)),
        ("batchnorm2d", lambda: BatchNorm(3), (4, 3, 5, 5)),
        ("instancenorm2d", lambda: InstanceNorm2d(), (3, 2, 5, 5)),
        ("leaky relu", lambda: LeakyReLU(0.2), (4, 9)),
        ("linear-relu-dropout stack", lambda: Sequential(Linear(6, 4), ReLU(), Dropout(0.5), Linear(4, 3)),
         (5, 6)),
        ("conv-dropout2d-flatten stack",
         lambda: Sequential(Conv2d(1, 2, 3), Dropout(0.5, True), Flatten(), Linear(18, 2)), (3, 1, 5, 5)),
    ]


def layer_checks(rng, trials=5):
    out = []
    for name, make, shape in _layer_cases():
        worst = 0.0
        for _ in range(trials):
            layer = _randomize(make().astype(np.float64), rng)
            if isinstance(layer, BatchNorm):
                for p in layer.params():
                    p.value = np.abs(p.value) + 0.5
            worst = max(worst, max(check_module(layer, rng.standard_normal(shape), rng).values()))
        out.append(CheckResult(name, worst, LAYER_TOL))
    worst = 0.0
    for window, stride in ((2, 2), (3, 2)):
        for _ in range(trials):
            # distinct values keep every maximum unique under the step
            x = rng.permutation(2 * 3 * 9 * 9).reshape(2, 3, 9, 9).astype(np.float64)
            worst = max(worst, check_module(MaxPool2d(window, stride), x, rng)["input"])
    out.append(CheckResult("maxpool2d", worst, LAYER_TOL))
    return out


def loss_checks(rng, trials=5):
    worst = 0.0
    for _ in range(trials):
        logits = rng.standard_normal((6, 10)) * 3
        labels = rng.integers(0, 10, 6)
        _, _, d = softmax_cross_entropy(logits, labels)
        num = numerical_gradient(lambda: softmax_cross_entropy(logits, labels)[0], logits, range(60))
        worst = max(worst, relative_error(d, num))
    return [CheckResult("softmax cross-entropy", worst, LAYER_TOL)]


def sampler_checks(rng, trials=5):
    worst = 0.0
    for _ in range(trials):
        img = rng.random((1, 6, 6))
        grid = rng.uniform(-1.2, 1.2, (1, 5, 5, 2))
        r = rng.standard_normal((1, 5, 5))
        _, cache = bilinear_sample(img, grid)
        dimg, _ = bilinear_sample_backward(r, cache, need_image_grad=True)
        num = numerical_gradient(lambda: np.sum(r * bilinear_sample(img, grid)[0]), img, range(img.size))
        worst = max(worst, relative_error(dimg, num))
    return [CheckResult("bilinear sampler (image)", worst, LAYER_TOL)]


def _smooth_digits(train, n=16):
    imgs = train.images[:n].astype(np.float64)
    for _ in range(3):
        imgs = blur(imgs)
    return imgs / imgs.reshape(len(imgs), -1).max(axis=1)[:, None, None]


def _alpha_stable(fg, p, eps):
    ref = compose(fg, np.zeros_like(fg), p)[1][5][0]
    for k in range(6):
        for step in (eps, -eps):
            q = p.copy()
            q[0, k] += step
            if not np.array_equal(compose(fg, np.zeros_like(fg), q)[1][5][0], ref):
                return False
    return True


def compositor_checks(train, rng, draws=10):
    """compose(fg, bg, params) w.r.t. params, away from alpha-support changes."""
    digits = _smooth_digits(train)
    ranges = ClampRanges()
    worst, checked, tries = 0.0, 0, 0
    while checked < draws and tries < 20 * draws:
        tries += 1
        fg = digits[tries % len(digits)][None]
        bg = rng.random((1, 40, 40)) * 0.5
        p = ranges.sample(rng, 1)
        if not _alpha_stable(fg, p, CHAIN_EPS):
            continue
        r = rng.standard_normal((1, 40, 40))
        dp = compose_backward(r, compose(fg, bg, p)[1])
        num = numerical_gradient(lambda: float(np.sum(r * compose(fg, bg, p)[0])), p, range(6),
                                 eps=CHAIN_EPS)
        worst = max(worst, relative_error(dp[0], num))
        checked += 1
    if checked < draws:
        worst = float("inf")
    return [CheckResult("compositor (params)", worst, CHAIN_TOL)]


def chain_checks(train, rng, draws=3, n_weights=5):
    """Synthesizer -> compositor -> frozen target (+ discriminator) w.r.t. synth weights."""
    worst = 0.0
    for d in range(draws):
        synth = build("synth", 100 + d).astype(np.float64).seed_dropout(d).set_step(1)
        for name, p in synth.named_params():
            if name.endswith(("bias", "beta")):
                p.value[...] = rng.normal(0, 0.05, p.value.shape)
        target = build("target", 200 + d).astype(np.float64).eval()
        disc = build("disc", 300 + d).astype(np.float64)
        start = 8 * d
        fg = train.images[start:start + 8].astype(np.float64)
        y = train.labels[start:start + 8]
        bg = np.zeros_like(fg)

        def objective():
            synth.set_step(1)
            return synth_objective(synth, target, fg, bg, y, disc, lambda_d=0.5, backward=False)[0]

        synth.set_step(1)
        synth.zero_grad()
        synth_objective(synth, target, fg, bg, y, disc, lambda_d=0.5)
        weights = [p for name, p in synth.named_params() if name.endswith("weight")]
        analytic, numeric = [], []
        for i in rng.choice(len(weights), n_weights, replace=False):
            p = weights[i]
            k = int(rng.integers(p.value.size))
            analytic.append(p.grad.reshape(-1)[k])
            numeric.append(numerical_gradient(objective, p.value, [k], eps=CHAIN_EPS)[0])
        worst = max(worst, relative_error(analytic, numeric))
    return [CheckResult("synthesizer->compositor->target chain", worst, CHAIN_TOL)]


def run_suite(train, seed=0, log=None):
    """All checks; returns the list of CheckResult."""
    rng = np.random.default_rng(seed)
    results = []
    for group in (lambda: layer_checks(rng), lambda: loss_checks(rng), lambda: sampler_checks(rng),
                  lambda: compositor_checks(train, rng), lambda: chain_checks(train, rng)):
        for res in group():
            results.append(res)
            if log:
                log(res.line())
    return results
