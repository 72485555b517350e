import numpy as np
import pytest

from prune2edge import nncore, store


def fd_gradients(model, x, y, kind, h=1e-3):
    """Central finite differences of the loss w.r.t. every parameter."""
    def value():
        return nncore.loss(kind, nncore.forward(model, x), y)

    grads = []
    for tensor in [*model.weights, *model.biases]:
        g = np.zeros_like(tensor)
        for i in np.ndindex(tensor.shape):
            keep = tensor[i]
            tensor[i] = keep + h
            up = value()
            tensor[i] = keep - h
            down = value()
            tensor[i] = keep
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def max_rel_error(a, b, floor=1e-6):
    """Largest relative error; differences at or below ``floor`` count as exact."""
    worst = 0.0
    for x, y in zip(a, b):
        diff = np.abs(x - y)
        rel = np.where(diff <= floor, 0.0, diff / np.maximum(np.maximum(np.abs(x), np.abs(y)), 1e-300))
        worst = max(worst, float(np.max(rel)))
    return worst


def blobs(n=200, n_classes=2, seed=0, spread=0.5, n_features=2):
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-4, 4, size=(n_classes, n_features))
    labels = rng.integers(n_classes, size=n)
    x = centers[labels] + rng.normal(0, spread, size=(n, n_features))
    return x.astype(np.float32), labels


@pytest.fixture(scope="session")
def pool_dataset():
    # 27000 samples: enough training steps for a 400-step pruning interval at batch 128 / 3 epochs
    return store.gen_dataset("blobs", 27000, 4, 2.0, seed=11)


@pytest.fixture(scope="session")
def small_pool(tmp_path_factory, pool_dataset):
    from prune2edge import poolgen

    out = tmp_path_factory.mktemp("pool")
    manifest = poolgen.generate_pool(pool_dataset, 6, base_seed=3, out_dir=out)
    return out, manifest


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture(scope="session")
def acceptance_log(request):
    return request.config.stash[_ACCEPTANCE]


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
