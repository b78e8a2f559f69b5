"""Paste-presence probe: do pasted regions tell real images from composites?

A small convolutional detector is trained to tell composites (a digit pasted
over a background by the compositor) from digits drawn directly on the same
kind of background. It is then scored on a balanced set of real images as the
target sees them against composites. With artifact injection the real images
carry pastes too, so the detector should be near chance there.
"""
from dataclasses import dataclass

import numpy as np

from .adversary import backgrounds, real_batch, render_real
from .compositor import compose
from .core import Adam
from .core.rng import keyed_rng, stream_id
from .data import draw_inside_frame
from .nets import build, disc_loss, evaluating


@dataclass
class ProbeResult:
    control_accuracy: float  # clean real vs composite, held out
    probe_accuracy: float    # real as fed to the target vs composite
    n_probe: int


def _composites(train, idx, cfg, bg_offset, seed):
    fg = train.images[idx]
    params = draw_inside_frame(fg, cfg.ranges(), seed, stream_id("probe-params"), first_index=bg_offset)
    out, _ = compose(fg, backgrounds(cfg.background, bg_offset + np.arange(len(idx)), cfg.seed), params)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _clean_reals(train, idx, cfg, bg_offset):
    return render_real(train.images[idx], backgrounds(cfg.background, bg_offset + np.arange(len(idx)),
                                                      cfg.seed))


def _accuracy(net, pos, neg):
    with evaluating(net):
        zp = np.concatenate([net.forward(pos[i:i + 500])[0] for i in range(0, len(pos), 500)])
        zn = np.concatenate([net.forward(neg[i:i + 500])[0] for i in range(0, len(neg), 500)])
    return float((np.sum(zp > 0) + np.sum(zn <= 0)) / (len(zp) + len(zn)))


def paste_probe(train, cfg, n_fit=1000, n_eval=500, steps=300, batch=64, seed=0, log=None):
    """Fit the detector on clean pairs, then score it on the fed-real/composite set.

    ``n_fit`` and ``n_eval`` count images per side; digits for fitting and
    evaluation are disjoint.
    """
    if 2 * (n_fit + n_eval) > len(train):
        raise ValueError(f"need {2 * (n_fit + n_eval)} digits, have {len(train)}")
    order = keyed_rng(seed, stream_id("probe-split")).permutation(len(train))
    fit_pos, fit_neg = order[:n_fit], order[n_fit:2 * n_fit]
    ev = order[2 * n_fit:2 * (n_fit + n_eval)]
    ev_pos, ev_neg = ev[:n_eval], ev[n_eval:]

    pos = _composites(train, fit_pos, cfg, 100_000, seed)
    neg = _clean_reals(train, fit_neg, cfg, 200_000)
    net = build("disc", seed).seed_dropout(seed)
    opt = Adam(net.params(), 1e-3)
    half = batch // 2
    for step in range(steps):
        rng = keyed_rng(seed, stream_id("probe-batch"), step)
        xp, xn = pos[rng.integers(0, n_fit, half)], neg[rng.integers(0, n_fit, half)]
        net.train()
        zr, cr = net.forward(xp)
        zf, cf = net.forward(xn)
        # composites play the "real" (label 1) side of the binary loss
        loss, dr, df, _ = disc_loss(zr.astype(np.float64), zf.astype(np.float64))
        net.backward(dr, cr, input_grad=False)
        net.backward(df, cf, input_grad=False)
        opt.step()
        if log and (step + 1) % 50 == 0:
            log(f"probe step {step + 1}/{steps}: loss {loss:.4f}")

    held_pos = _composites(train, ev_pos, cfg, 300_000, seed)
    control = _accuracy(net, held_pos, _clean_reals(train, ev_neg, cfg, 400_000))
    fed_real = real_batch(train, ev_neg, cfg, (seed, stream_id("probe-real")))
    probe = _accuracy(net, held_pos, fed_real)
    return ProbeResult(control, probe, 2 * n_eval)
