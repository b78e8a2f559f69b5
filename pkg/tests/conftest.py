import numpy as np
import pytest

from terse.compositor import blur
from terse.data import load_mnist, write_bundled_mnist


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    return write_bundled_mnist(tmp_path_factory.mktemp("mnist"))


@pytest.fixture(scope="session")
def mnist_train(mnist_dir):
    return load_mnist(mnist_dir, "train")


@pytest.fixture(scope="session")
def mnist_test(mnist_dir):
    return load_mnist(mnist_dir, "test")


@pytest.fixture(scope="session")
def blurred_digits(mnist_train):
    """Smooth digits for finite-difference checks through the sampler."""
    imgs = mnist_train.images[:32].astype(np.float64)
    for _ in range(3):
        imgs = blur(imgs)
    return imgs / imgs.reshape(len(imgs), -1).max(axis=1)[:, None, None]


@pytest.fixture(scope="session")
def quick_cfg(mnist_dir):
    from terse import config

    return config.load(overrides=dict(data_dir=str(mnist_dir), baseline_epochs=3.0, synth_batch=64,
                                      synth_epoch_cap=2.0, per_class_capacity=3, target_epochs=0.1,
                                      affine_per_digit=1, cycles=2))


@pytest.fixture(scope="session")
def quick_target_ckpt(tmp_path_factory, mnist_train, quick_cfg):
    """A three-epoch target: accurate enough that hard examples are not free."""
    from terse.adversary import train_baseline
    from terse.nets import save_checkpoint

    path = tmp_path_factory.mktemp("baseline") / "baseline.ckpt"
    save_checkpoint(path, train_baseline(mnist_train, quick_cfg))
    return path


@pytest.fixture
def quick_target(quick_target_ckpt):
    from terse.nets import load_checkpoint

    return load_checkpoint(quick_target_ckpt)


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
