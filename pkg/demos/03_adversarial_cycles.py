"""
Adversarial cycles against a random-augmentation comparator
===========================================================

Each cycle the synthesizer mines 50 hard composites per class against the
frozen classifier, then the classifier is fine-tuned on real digits plus every
cached composite. The comparator adds the same number of uniformly random
transforms per cycle. Both are scored on a held-out affine test set.
"""
import tempfile

from terse import config
from terse.adversary import eval_sets, run_cycles, train_baseline
from terse.data import load_mnist, write_bundled_mnist
from terse.nets import load_checkpoint, save_checkpoint

data = write_bundled_mnist(tempfile.mkdtemp())
cfg = config.load(overrides=dict(data_dir=str(data), fig7_profile=True, cycles=5, synth_batch=256,
                                 target_epochs=1.0, synthetic_fraction=0.5, dump_samples=False))
train = load_mnist(data, "train")
sets = eval_sets(cfg)

ckpt = f"{tempfile.mkdtemp()}/baseline.ckpt"
save_checkpoint(ckpt, train_baseline(train, cfg))

curves = {}
for method in ("terse", "random"):
    metrics, _ = run_cycles(cfg, load_checkpoint(ckpt), train, sets, log=print, method=method)
    curves[method] = metrics

print("\nsamples  terse   random")
for a, b in zip(curves["terse"], curves["random"]):
    print(f"{a.total_synthetic:7d}  {a.acc_affine:.3f}   {b.acc_affine:.3f}")
print("\nepochs to fill the cache per cycle:", [round(m.phase_epochs, 3) for m in curves["terse"][1:]])
