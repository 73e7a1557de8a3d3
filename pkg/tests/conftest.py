import copy

import numpy as np
import pytest
import torch

from salientforget.data import LabeledDataset
from salientforget.model import ArchitectureSpec, build_classifier
from salientforget.synthetic import write_synthetic_cifar10

torch.use_deterministic_algorithms(True)

# small-cnn shrunk to < 1k parameters for finite-difference checks
TINY_SPEC = ArchitectureSpec("small-cnn", num_classes=10, feature_dim=4, channels=(2, 2, 2, 2))


@pytest.fixture
def tiny_spec():
    return TINY_SPEC


@pytest.fixture
def tiny_model():
    # seed 23: all four feature units are active on random inputs (lower seeds leave dead units)
    return build_classifier(TINY_SPEC, seed=23)


@pytest.fixture(scope="session")
def synthetic_dir(tmp_path_factory):
    """CIFAR-10-format files, 30 training and 10 test images per class."""
    d = tmp_path_factory.mktemp("cifar10")
    write_synthetic_cifar10(d, train_per_class=30, test_per_class=10, seed=1)
    return d


def random_dataset(n=60, num_classes=10, seed=0, name="rand"):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(n, 3, 32, 32), dtype=np.uint8)
    labels = np.arange(n) % num_classes
    return LabeledDataset(images, labels, name, num_classes)


@pytest.fixture
def small_data():
    return random_dataset()


def fd_gradient_check(model, loss_of, n_coords=30, h=1e-4, seed=0):
    """Compare float32 autograd gradients against float64 central differences.

    ``loss_of(model)`` must build the scalar loss from ``model``'s parameters
    (inputs cast to the model dtype). Coordinates are drawn among those with a
    non-negligible analytic gradient, skipping any whose +-h interval straddles
    a kink. Returns the relative errors.
    """
    from salientforget.model import compute_grads

    grads = compute_grads(model, loss_of(model))
    ref = copy.deepcopy(model).double()
    params = dict(ref.named_parameters())
    candidates = [(n, i) for n, g in grads.items() for i in torch.nonzero(g.view(-1).abs() > 1e-5).flatten().tolist()]
    rng = np.random.default_rng(seed)
    errors = []
    for k in rng.permutation(len(candidates)):
        if len(errors) == n_coords:
            break
        name, i = candidates[k]
        flat = params[name].data.view(-1)
        with torch.no_grad():
            orig = flat[i].item()
            mid = loss_of(ref).item()
            flat[i] = orig + h
            up = loss_of(ref).item()
            flat[i] = orig - h
            down = loss_of(ref).item()
            flat[i] = orig
        fwd, bwd = (up - mid) / h, (mid - down) / h
        # a ReLU or max-pool kink inside [-h, h] makes the one-sided slopes disagree; skip it
        if abs(fwd - bwd) > 1e-3 * max(abs(fwd), abs(bwd)):
            continue
        fd = (up - down) / (2 * h)
        an = grads[name].view(-1)[i].item()
        errors.append(abs(an - fd) / max(abs(fd), abs(an)))
    return errors


# one line per acceptance criterion, filled by test_acceptance.py and printed at the end of the run
ACCEPTANCE_LINES: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES, key=lambda k: int(k)):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
