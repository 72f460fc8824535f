import hashlib
import logging
import os
from pathlib import Path

import numpy as np
import pytest

from witchcraft.data import load_mnist, write_idx_images, write_idx_labels
from witchcraft.models import AdversarialConfig, TrainConfig, adversarial_train, build_model, train_sgd
from witchcraft.models import load_weights, save_weights

# Training recipe for the MNIST target model. Full radius from the start stalls
# plain SGD at chance level, so the radius ramps up over the first epochs.
ADV_RECIPE = TrainConfig(
    epochs=15, batch_size=50, lr=0.05, seed=0,
    adversarial=AdversarialConfig(epsilon=0.3, steps=7, step_size=0.1, ramp_epochs=8),
)
NATURAL_RECIPE = TrainConfig(epochs=15, batch_size=50, lr=0.05, seed=0)
TRAIN_SIZE = 10_000
TEST_SIZE = 1000

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains and attacks an MNIST model (tens of minutes)")
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")
    config.stash[_RESULTS] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance reporting ----------------------------------------------------------


@pytest.fixture
def criterion(request):
    """Record the measured values behind an acceptance verdict for the summary."""
    marker = request.node.get_closest_marker("criterion")
    entry = request.config.stash[_RESULTS].setdefault(request.node.nodeid, {"marker": marker.args, "detail": ""})

    def record(detail: str) -> None:
        entry["detail"] = detail
        print(f"criterion {marker.args[0]}: {detail}")

    return record


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None and (report.when == "call" or report.failed or report.skipped):
        entry = item.config.stash[_RESULTS].setdefault(item.nodeid, {"marker": marker.args, "detail": ""})
        entry["outcome"] = report.outcome
    return report


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash[_RESULTS]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for entry in sorted(results.values(), key=lambda e: e["marker"][0]):
        number, title = entry["marker"]
        verdict = {"passed": "PASS", "skipped": "SKIP"}.get(entry.get("outcome"), "FAIL")
        detail = f" ({entry['detail']})" if entry["detail"] else ""
        terminalreporter.write_line(f"{verdict}  criterion {number}: {title}{detail}")


# -- MNIST data and models ---------------------------------------------------------


def _sample_idx(directory: Path) -> Path:
    """Write the 5000-image MNIST sample bundled with mlxtend as IDX files.

    The sample is sorted by class, so it is shuffled once with a fixed seed;
    the last TEST_SIZE images become the test split.
    """
    if (directory / "t10k-labels-idx1-ubyte").exists():
        return directory
    mlxtend = pytest.importorskip("mlxtend.data", reason="no MNIST: set WITCHCRAFT_MNIST_DIR or install mlxtend")
    x, y = mlxtend.mnist_data()
    order = np.random.default_rng(0).permutation(len(y))
    x = x[order].reshape(-1, 28, 28).astype(np.uint8)
    y = y[order].astype(np.uint8)
    directory.mkdir(parents=True, exist_ok=True)
    write_idx_images(directory / "train-images-idx3-ubyte", x[:-TEST_SIZE])
    write_idx_labels(directory / "train-labels-idx1-ubyte", y[:-TEST_SIZE])
    write_idx_images(directory / "t10k-images-idx3-ubyte", x[-TEST_SIZE:])
    write_idx_labels(directory / "t10k-labels-idx1-ubyte", y[-TEST_SIZE:])
    return directory


@pytest.fixture(scope="session")
def mnist_dir(request) -> Path:
    """Real MNIST IDX files from WITCHCRAFT_MNIST_DIR, else the mlxtend sample."""
    env = os.environ.get("WITCHCRAFT_MNIST_DIR")
    if env:
        return Path(env)
    return _sample_idx(Path(request.config.cache.mkdir("mnist-sample")))


@pytest.fixture(scope="session")
def mnist(mnist_dir):
    train = load_mnist(mnist_dir, "train", limit=TRAIN_SIZE)
    test = load_mnist(mnist_dir, "test", limit=TEST_SIZE)
    return train, test


def _trained(request, train, recipe: TrainConfig, fn):
    """Train once per (recipe, data) and keep the weights in the pytest cache."""
    key = hashlib.sha256(repr(recipe).encode() + train.images.tobytes() + train.labels.tobytes()).hexdigest()[:16]
    path = Path(request.config.cache.mkdir("mnist-models")) / f"{fn.__name__}-{key}.wts"
    if path.exists():
        return load_weights(path)
    logging.getLogger("witchcraft").setLevel(logging.INFO)
    model = fn(build_model("cnn-2conv", recipe.seed), train, recipe)
    save_weights(model, path)
    return model


@pytest.fixture(scope="session")
def adv_model(request, mnist):
    return _trained(request, mnist[0], ADV_RECIPE, adversarial_train)


@pytest.fixture(scope="session")
def natural_model(request, mnist):
    return _trained(request, mnist[0], NATURAL_RECIPE, train_sgd)


@pytest.fixture(scope="session")
def results_dir(request) -> Path:
    path = Path(request.config.rootpath) / "acceptance-results"
    path.mkdir(exist_ok=True)
    return path
