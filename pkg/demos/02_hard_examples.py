"""
Learned versus random transforms
================================

Train a digit classifier on plain MNIST, then ask how hard composites are for
it. Random transforms already fool it often. A synthesizer trained against the
frozen classifier pushes nearly all of its composites to the hard end.
"""
import tempfile

from terse import config
from terse.adversary import hardness_report, train_baseline, train_generator
from terse.data import load_mnist, write_bundled_mnist

data = write_bundled_mnist(tempfile.mkdtemp())
cfg = config.load(overrides=dict(data_dir=str(data), baseline_epochs=10, synth_batch=256))
train = load_mnist(data, "train")

target = train_baseline(train, cfg)
print("test accuracy:", target.accuracy(load_mnist(data, "test")))

synth = train_generator(target, train, cfg, steps=40, log=print)

for name, gen in (("random", None), ("learned", synth)):
    rows, h = hardness_report(target, train, cfg, name, n=1000, seed=1, synth=gen)
    print(f"\n{name} generator, mean hardness {h.mean():.3f}")
    for lo, hi, frac in rows:
        print(f"  [{lo:.1f}, {hi:.1f})  {'#' * int(round(60 * frac)):<60s} {frac:.3f}")
