"""
Do pasted regions give composites away?
=======================================

On a textured background a composite carries a trace of the paste: the
foreground image's black surround, blended in with a feathered edge. A probe
trained to spot pastes separates composites from real digits perfectly. When
every real image gets a similar paste, the same probe drops to chance.
"""
import tempfile

from terse import config
from terse.data import load_mnist, write_bundled_mnist
from terse.probe import paste_probe

data = write_bundled_mnist(tempfile.mkdtemp())
train = load_mnist(data, "train")

for inject in (False, True):
    cfg = config.load(overrides=dict(data_dir=str(data), background="gray", inject_artifacts=inject))
    res = paste_probe(train, cfg, steps=200)
    print(f"injection {'on ' if inject else 'off'}: real-vs-composite accuracy {res.probe_accuracy:.3f} "
          f"(clean control {res.control_accuracy:.3f})")
