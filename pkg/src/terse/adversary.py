"""Lock-step training of synthesizer and target with a hard-example cache."""
import csv
import hashlib
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .compositor import (blur, compose, foreground_mask,
                         inject_blending_artifact)
from .core import SGD, Adam, softmax, softmax_cross_entropy
from .core.rng import keyed_rng, stream_id
from .data import (CompositeSample, DatasetSplit, draw_inside_frame,
                   export_samples, gen_affine_testset, load_mnist)
from .nets import build, disc_loss, evaluating, frozen, synth_objective

HARD_MARGIN = 0.05

METRIC_COLUMNS = ["cycle", "phase_epochs", "samples_added", "total_synthetic", "acc_mnist",
                  "acc_affine", "mean_hardness", "target_loss", "synth_loss", "disc_loss",
                  "saturation_events"]


class PhaseError(RuntimeError):
    pass


# hard examples

def hard_margin(probs, labels):
    """Best wrong-class probability minus the true-class probability."""
    probs = np.atleast_2d(probs)
    labels = np.atleast_1d(labels)
    rows = np.arange(len(labels))
    true = probs[rows, labels]
    other = probs.copy()
    other[rows, labels] = -np.inf
    return other.max(axis=1) - true


def is_hard_example(probs, label):
    return bool(hard_margin(probs, label)[0] > HARD_MARGIN)


def hardness(probs, labels):
    """1 - p(true class); a scalar for one probability vector."""
    probs = np.asarray(probs)
    if probs.ndim == 1:
        return float(1.0 - probs[int(labels)])
    return 1.0 - probs[np.arange(len(labels)), labels]


@dataclass
class HardExampleCache:
    """Per-class store of hard composites; never evicted."""

    capacity: int
    samples: list = field(default_factory=lambda: [[] for _ in range(10)])
    quota: np.ndarray = field(default_factory=lambda: np.zeros(10, int))

    @property
    def counts(self):
        return np.array([len(s) for s in self.samples])

    def __len__(self):
        return int(self.counts.sum())

    def open_cycle(self):
        """Request ``capacity`` new samples per class for the coming phase."""
        self.quota = self.counts + self.capacity

    def needs(self, label):
        return len(self.samples[label]) < self.quota[label]

    @property
    def filled(self):
        return bool(np.all(self.counts >= self.quota))

    def add(self, sample):
        if not self.needs(sample.label):
            return False
        self.samples[sample.label].append(sample)
        return True

    def all_samples(self):
        return [s for per_class in self.samples for s in per_class]

    def cycle_samples(self, cycle):
        return sorted((s for s in self.all_samples() if s.cycle == cycle), key=lambda s: s.index)

    def as_split(self):
        items = sorted(self.all_samples(), key=lambda s: s.index)
        if not items:
            return DatasetSplit(np.zeros((0, 40, 40), np.float32), np.zeros(0, np.int64), "synthesized")
        return DatasetSplit(np.stack([s.image for s in items]), [s.label for s in items],
                            items[0].provenance)


@dataclass
class CycleMetrics:
    cycle: int
    phase_epochs: float = 0.0
    samples_added: int = 0
    total_synthetic: int = 0
    acc_mnist: float = float("nan")
    acc_affine: float = float("nan")
    mean_hardness: float = float("nan")
    target_loss: float = float("nan")
    synth_loss: float = float("nan")
    disc_loss: float = float("nan")
    saturation_events: int = 0
    filled: bool = True

    def row(self):
        return [self.cycle, f"{self.phase_epochs:.6f}", self.samples_added, self.total_synthetic,
                f"{self.acc_mnist:.6f}", f"{self.acc_affine:.6f}", f"{self.mean_hardness:.6f}",
                f"{self.target_loss:.6f}", f"{self.synth_loss:.6f}", f"{self.disc_loss:.6f}",
                self.saturation_events]


class MetricsWriter:
    """Append-only CSV with a fixed header."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(METRIC_COLUMNS)
        self.last_cycle = -1

    def append(self, m):
        if m.cycle <= self.last_cycle:
            raise ValueError(f"metrics must be appended in cycle order ({m.cycle} after {self.last_cycle})")
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(m.row())
        self.last_cycle = m.cycle


def read_metrics(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: float(v) for k, v in r.items()} for r in rows]


def params_hash(net):
    h = hashlib.sha256()
    for name, arr in net.state_arrays().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# backgrounds and real images

def backgrounds(kind, indices, seed=0):
    """Background per sample index: all black, or a smooth gray texture."""
    indices = np.asarray(indices)
    if kind == "black":
        return np.zeros((len(indices), 40, 40), np.float32)
    out = np.empty((len(indices), 40, 40), np.float32)
    for k, i in enumerate(indices):
        rng = keyed_rng(seed, stream_id("background"), int(i))
        field_ = rng.standard_normal((1, 40, 40))
        for _ in range(4):
            field_ = blur(field_)
        field_ /= np.abs(field_).max() + 1e-12
        out[k] = rng.uniform(0.3, 0.6) + 0.15 * field_[0]
    return np.clip(out, 0.0, 1.0)


def render_real(digits, bgs):
    """A digit drawn directly on a background (no compositing step)."""
    return np.maximum(digits, bgs).astype(np.float32)


def inject_batch(images, bgs_donor, masks, seed):
    """Paste a mask-shaped donor region into every image (seeded per image)."""
    out = np.empty_like(images)
    for k in range(len(images)):
        out[k] = inject_blending_artifact(images[k], bgs_donor[k], masks[k], seed=(*seed, k))
    return out


def real_batch(train, idx, cfg, seed):
    """Real training images as fed to the target/discriminator.

    With a non-black background the digit is drawn on its background. With
    artifact injection every real image also receives a pasted region shaped
    like another digit's mask and filled with what a composite pastes around
    its strokes: the foreground image's own black surround. Pasted regions
    then occur in real and synthetic images alike.
    """
    digits = train.images[idx]
    if cfg.background == "black" and not cfg.inject_artifacts:
        return digits
    images = render_real(digits, backgrounds(cfg.background, idx, cfg.seed))
    if cfg.inject_artifacts:
        rng = keyed_rng(*seed, stream_id("inject"))
        masks = foreground_mask(train.images[rng.integers(0, len(train), len(idx))])
        images = inject_batch(images, np.zeros_like(images), masks, seed)
    return images


# training primitives

def _n_batches(n, batch, epochs):
    return max(1, int(math.ceil(epochs * n / batch)))


def train_target_steps(target, batch_fn, n_steps, opt, step0=0):
    """Generic SGD loop: ``batch_fn(step) -> (images, labels)``; returns mean loss."""
    target.train()
    losses = []
    for s in range(n_steps):
        images, labels = batch_fn(step0 + s)
        target.set_step(step0 + s)
        logits, cache = target.forward(images)
        loss, _, dlogits = softmax_cross_entropy(logits, labels)
        target.backward(dlogits, cache, input_grad=False)
        opt.step()
        losses.append(loss)
    target.eval()
    return float(np.mean(losses)) if losses else float("nan")


def target_optimizer(target, cfg):
    return SGD(target.params(), cfg.target_lr, momentum=cfg.target_momentum,
               weight_decay=cfg.target_weight_decay)


def train_baseline(train, cfg, epochs=None):
    """MNIST-only target (the starting point of every run)."""
    epochs = cfg.baseline_epochs if epochs is None else epochs
    target = build("target", cfg.baseline_seed).seed_dropout(cfg.baseline_seed)
    opt = target_optimizer(target, cfg)
    per_epoch = int(math.ceil(len(train) / cfg.target_batch))

    def batch(step):
        epoch, k = divmod(step, per_epoch)
        order = keyed_rng(cfg.baseline_seed, stream_id("baseline"), epoch).permutation(len(train))
        idx = order[k * cfg.target_batch:(k + 1) * cfg.target_batch]
        return real_batch(train, idx, cfg, (cfg.baseline_seed, step)), train.labels[idx]

    train_target_steps(target, batch, _n_batches(len(train), cfg.target_batch, epochs), opt)
    return target


@dataclass
class PhaseResult:
    epochs: float
    added: int
    mean_hardness: float
    synth_loss: float = float("nan")
    disc_loss: float = float("nan")
    saturation: int = 0
    filled: bool = True


class LockStep:
    """State carried across cycles: nets, optimizers, cache and step counters."""

    def __init__(self, cfg, train, target, synth=None, disc=None):
        self.cfg = cfg
        self.train = train
        self.target = target
        ranges = cfg.ranges()
        self.synth = synth or build("synth", cfg.seed, cfg.synth_gain, ranges, cfg.synth_dropout)
        self.synth.seed_dropout(cfg.seed)
        self.synth_opt = Adam(self.synth.params(), cfg.synth_lr, weight_decay=cfg.synth_weight_decay)
        self.disc = None
        if cfg.discriminator:
            self.disc = disc or build("disc", cfg.seed)
            self.disc_opt = Adam(self.disc.params(), cfg.disc_lr)
        self.target.seed_dropout(cfg.seed)
        self.target_opt = target_optimizer(target, cfg)
        self.cache = HardExampleCache(cfg.capacity)
        self.synth_step = 0
        self.target_step = 0
        self.next_index = 0

    # synthesizer phase

    def synth_phase(self, cycle):
        cfg, train, synth, target = self.cfg, self.train, self.synth, self.target
        t_hash = params_hash(target)
        d_hash = params_hash(self.disc) if self.disc is not None else None
        self.cache.open_cycle()
        n = len(train)
        rng = keyed_rng(cfg.seed, stream_id("synth-phase"), cycle)
        seen, fill_at = 0, None
        losses, sat, all_hardness, added = [], 0, [], 0
        max_batches = _n_batches(n, cfg.synth_batch, cfg.synth_epoch_cap)
        order = np.empty(0, int)
        target.eval()
        if self.disc is not None:
            self.disc.eval()
        for b in range(max_batches):
            if len(order) < cfg.synth_batch:
                order = np.concatenate([order, rng.permutation(n)])
            idx, order = order[:cfg.synth_batch], order[cfg.synth_batch:]
            fg, labels = train.images[idx], train.labels[idx]
            bg = backgrounds(cfg.background, idx, cfg.seed)
            synth.train()
            synth.set_step(self.synth_step)
            loss, info = synth_objective(synth, target, fg, bg, labels, self.disc,
                                         cfg.lambda_effective, cfg.saturating_loss)
            self.synth_opt.step()
            self.synth_step += 1
            probs = softmax(info["logits"].astype(np.float64))
            margin = hard_margin(probs, labels)
            hard_k = hardness(probs, labels)
            losses.append(loss)
            sat += info["saturation"]
            all_hardness.append(hard_k)
            comp = info["composites"]
            for k in range(len(idx)):
                if margin[k] > HARD_MARGIN and self.cache.needs(labels[k]):
                    self.cache.add(CompositeSample(comp[k].copy(), int(labels[k]), "synthesized",
                                                   cycle, self.next_index, float(hard_k[k])))
                    self.next_index += 1
                    added += 1
                    if self.cache.filled:
                        fill_at = seen + k + 1
                        break
            seen += len(idx)
            if fill_at is not None:
                break
        if params_hash(target) != t_hash:
            raise PhaseError(f"cycle {cycle}: target changed during synth_phase")
        if d_hash is not None and params_hash(self.disc) != d_hash:
            raise PhaseError(f"cycle {cycle}: discriminator changed during synth_phase")
        return PhaseResult(epochs=(fill_at if fill_at is not None else seen) / n, added=added,
                           mean_hardness=float(np.mean(np.concatenate(all_hardness))),
                           synth_loss=float(np.mean(losses)), saturation=sat,
                           filled=fill_at is not None)

    # target phase

    def target_phase(self, cycle, extra=None):
        """Fine-tune the target on real data plus every cached (or ``extra``) sample."""
        cfg, train = self.cfg, self.train
        s_hash = params_hash(self.synth)
        synth_pool = extra if extra is not None else self.cache.as_split()
        n_real, n_syn = len(train), len(synth_pool)
        batch = cfg.target_batch
        frac = cfg.synthetic_fraction if n_syn else 0.0
        n_steps = _n_batches(n_real + n_syn, batch, cfg.target_epochs)
        seed = (cfg.seed, stream_id("target-phase"), cycle)

        if frac == 0:
            per_epoch = int(math.ceil((n_real + n_syn) / batch))

            def pick(step):
                epoch, k = divmod(step, per_epoch)
                order = keyed_rng(*seed, epoch).permutation(n_real + n_syn)
                sel = order[k * batch:(k + 1) * batch]
                return sel[sel < n_real], sel[sel >= n_real] - n_real
        else:
            n_s = max(1, int(round(batch * frac)))
            n_r = batch - n_s

            def pick(step):
                rng = keyed_rng(*seed, step)
                return rng.integers(0, n_real, n_r), rng.integers(0, n_syn, n_s)

        disc_losses, sat = [], 0

        def batch_fn(step):
            nonlocal sat
            real_idx, syn_idx = pick(step - self.target_step)
            real = real_batch(train, real_idx, cfg, (*seed, step))
            images = np.concatenate([real, synth_pool.images[syn_idx]])
            labels = np.concatenate([train.labels[real_idx], synth_pool.labels[syn_idx]])
            if self.disc is not None and len(syn_idx) and len(real_idx):
                loss, s = self._disc_step(real, synth_pool.images[syn_idx])
                disc_losses.append(loss)
                sat += s
            return images, labels

        loss = train_target_steps(self.target, batch_fn, n_steps, self.target_opt, self.target_step)
        self.target_step += n_steps
        if params_hash(self.synth) != s_hash:
            raise PhaseError(f"cycle {cycle}: synthesizer changed during target_phase")
        return loss, (float(np.mean(disc_losses)) if disc_losses else float("nan")), sat

    def _disc_step(self, real, fake):
        disc = self.disc
        disc.train()
        zr, cr = disc.forward(real)
        zf, cf = disc.forward(fake)
        loss, dr, df, sat = disc_loss(zr.astype(np.float64), zf.astype(np.float64))
        disc.backward(dr, cr, input_grad=False)
        disc.backward(df, cf, input_grad=False)
        self.disc_opt.step()
        disc.eval()
        return loss, sat


# evaluation and orchestration

@dataclass
class EvalSets:
    mnist: DatasetSplit
    affine: DatasetSplit


def eval_sets(cfg, data_dir=None):
    test = load_mnist(data_dir or cfg.data_dir, "test")
    affine = gen_affine_testset(test, cfg.ranges(), cfg.affine_per_digit, cfg.testset_seed)
    return EvalSets(test, affine)


def evaluate(target, sets, cfg=None):
    mnist = sets.mnist
    if cfg is not None and cfg.background != "black":
        mnist = DatasetSplit(render_real(mnist.images, backgrounds(cfg.background, np.arange(len(mnist)),
                                                                  cfg.testset_seed)), mnist.labels)
    return target.accuracy(mnist), target.accuracy(sets.affine)


def random_samples(train, cfg, cycle, first_index):
    """Class-balanced uniform-random affine composites (the comparator's increment)."""
    rng = keyed_rng(cfg.seed, stream_id("random-augment"), cycle)
    idx = np.concatenate([rng.choice(np.flatnonzero(train.labels == c), cfg.capacity,
                                     replace=cfg.capacity > np.sum(train.labels == c))
                          for c in range(10)])
    idx = idx[rng.permutation(len(idx))]
    fg = train.images[idx]
    params = draw_inside_frame(fg, cfg.ranges(), cfg.seed, stream_id("random-params") + cycle)
    bg = backgrounds(cfg.background, idx, cfg.seed)
    comp, _ = compose(fg, bg, params)
    comp = np.clip(comp, 0.0, 1.0).astype(np.float32)
    return [CompositeSample(comp[k], int(train.labels[idx[k]]), "random-augment", cycle,
                            first_index + k) for k in range(len(idx))]


def baseline_row(target, sets, cfg):
    acc_m, acc_a = evaluate(target, sets, cfg)
    return CycleMetrics(cycle=0, acc_mnist=acc_m, acc_affine=acc_a)


def run_cycles(cfg, target, train=None, sets=None, out=None, log=None, method="terse"):
    """Alternate synth_phase / target_phase for ``cfg.cycles`` cycles.

    ``method="random"`` runs the comparator: each increment is a class-balanced
    batch of uniform-random affine composites, added with the same schedule.
    Returns the list of CycleMetrics (row 0 is the untouched baseline).
    """
    train = train if train is not None else load_mnist(cfg.data_dir, "train")
    sets = sets if sets is not None else eval_sets(cfg)
    out = Path(out) if out is not None else None
    writer = MetricsWriter(out / "metrics.csv") if out is not None else None
    state = LockStep(cfg, train, target)
    metrics = [baseline_row(target, sets, cfg)]
    if writer:
        writer.append(metrics[0])
    random_pool = []
    for cycle in range(1, cfg.cycles + 1):
        t0 = time.time()
        try:
            if method == "terse":
                res = state.synth_phase(cycle)
                new = state.cache.cycle_samples(cycle)
                tl, dl, sat = state.target_phase(cycle)
                total = len(state.cache)
            elif method == "random":
                new = random_samples(train, cfg, cycle, len(random_pool))
                probs = target.predict_proba(np.stack([s.image for s in new]))
                labels = np.array([s.label for s in new])
                h = hardness(probs, labels)
                for s, hk in zip(new, h):
                    s.hardness = float(hk)
                random_pool.extend(new)
                res = PhaseResult(epochs=0.0, added=len(new), mean_hardness=float(h.mean()))
                pool = DatasetSplit(np.stack([s.image for s in random_pool]),
                                    [s.label for s in random_pool], "random-augment")
                tl, dl, sat = state.target_phase(cycle, extra=pool)
                total = len(random_pool)
            else:
                raise ValueError(f"unknown method {method!r}")
        except (FloatingPointError, PhaseError, ValueError) as exc:
            raise PhaseError(f"cycle {cycle}: {exc}") from exc
        acc_m, acc_a = evaluate(target, sets, cfg)
        m = CycleMetrics(cycle, res.epochs, res.added, total, acc_m, acc_a, res.mean_hardness,
                         tl, res.synth_loss, dl, res.saturation + sat, res.filled)
        metrics.append(m)
        if writer:
            writer.append(m)
        if out is not None and cfg.dump_samples:
            export_samples(new, out / "samples" / f"cycle_{cycle:03d}")
        if log:
            log(f"cycle {cycle}: +{res.added} (total {total}) epochs {res.epochs:.3f} "
                f"acc_mnist {acc_m:.4f} acc_affine {acc_a:.4f} ({time.time() - t0:.1f}s)")
    return metrics, state


def random_augment_baseline(cfg, target, **kwargs):
    return run_cycles(cfg, target, method="random", **kwargs)


def hardness_of(target, images, labels):
    return hardness(target.predict_proba(images), np.asarray(labels))


def generate(synth_or_none, train, cfg, n, seed):
    """n composites from the learned synthesizer (eval mode) or uniform-random params."""
    rng = keyed_rng(seed, stream_id("generate"))
    idx = rng.integers(0, len(train), n)
    fg = train.images[idx]
    bg = backgrounds(cfg.background, idx, cfg.seed)
    if synth_or_none is None:
        params = draw_inside_frame(fg, cfg.ranges(), seed, stream_id("generate-random"))
    else:
        with evaluating(synth_or_none), frozen(synth_or_none):
            params = np.concatenate([synth_or_none.predict(fg[i:i + 256], bg[i:i + 256])
                                     for i in range(0, n, 256)])
    comp, _ = compose(fg, bg, params)
    return np.clip(comp, 0.0, 1.0).astype(np.float32), train.labels[idx], params


def train_generator(target, train, cfg, steps, synth=None, log=None):
    """Train a synthesizer against a frozen target for a fixed number of steps."""
    synth = synth or build("synth", cfg.seed, cfg.synth_gain, cfg.ranges(), cfg.synth_dropout)
    synth.seed_dropout(cfg.seed)
    opt = Adam(synth.params(), cfg.synth_lr, weight_decay=cfg.synth_weight_decay)
    t_hash = params_hash(target)
    target.eval()
    for step in range(steps):
        idx = keyed_rng(cfg.seed, stream_id("train-generator"), step).integers(0, len(train), cfg.synth_batch)
        fg = train.images[idx]
        synth.train()
        synth.set_step(step)
        loss, _ = synth_objective(synth, target, fg, backgrounds(cfg.background, idx, cfg.seed),
                                  train.labels[idx])
        opt.step()
        if log and (step + 1) % 10 == 0:
            log(f"generator step {step + 1}/{steps}: loss {loss:.4f}")
    if params_hash(target) != t_hash:
        raise PhaseError("target changed while training the generator")
    synth.eval()
    return synth


def hardness_histogram(h, bins=10):
    """Rows (bin_lo, bin_hi, fraction) over equal-width bins of [0, 1]."""
    h = np.asarray(h, np.float64)
    if h.size == 0:
        raise ValueError("hardness histogram needs at least one sample")
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts, _ = np.histogram(np.clip(h, 0.0, 1.0), edges)
    return [(edges[k], edges[k + 1], counts[k] / h.size) for k in range(bins)]


def write_histogram(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "fraction"])
        for lo, hi, frac in rows:
            w.writerow([f"{lo:.1f}", f"{hi:.1f}", repr(float(frac))])


def hardness_report(target, train, cfg, generator="random", n=2000, seed=0, synth=None):
    """Hardness of n composites from ``generator`` under the frozen target.

    Returns (histogram rows, per-sample hardness).
    """
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    if generator not in ("learned", "random"):
        raise ValueError(f"generator must be learned or random, got {generator!r}")
    if generator == "learned" and synth is None:
        raise ValueError("the learned generator needs a synthesizer")
    with evaluating(target):
        images, labels, _ = generate(synth if generator == "learned" else None, train, cfg, n, seed)
        h = hardness_of(target, images, labels)
    return hardness_histogram(h), h
