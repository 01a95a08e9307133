import os

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

import intriuap.attack as _attack
from intriuap.datasets import FIXTURE_DIR, mnist_fixture
from intriuap.model import build_model, load_model
from intriuap.spectral import layer_singular_pairs

FIXTURE_MODELS = ("smallcnn-mnist", "smallres-mnist")

# every attack run in the suite is logged so the budget invariant can be audited
ATTACK_LOG = []
_run_attack = _attack.run_attack


def _logged_run_attack(*args, **kwargs):
    art = _run_attack(*args, **kwargs)
    ATTACK_LOG.append((art.config.epsilon, list(art.budget_trace), float(np.max(np.abs(art.xi)))))
    return art


_attack.run_attack = _logged_run_attack


def budget_violations():
    return [(eps, b) for eps, trace, final in ATTACK_LOG for b in trace + [final] if b > eps]


def pytest_sessionfinish(session, exitstatus):
    bad = budget_violations()
    print(f"\nbudget audit: {len(ATTACK_LOG)} attack runs, {len(bad)} epochs over budget")
    if bad:
        session.exitstatus = 1


@pytest.fixture(scope="session", autouse=True)
def single_thread():
    with threadpool_limits(1):
        yield


def fixture_path(name):
    return os.path.join(FIXTURE_DIR, name, "model.json")


@pytest.fixture(scope="session")
def fixture_models():
    return {n: load_model(fixture_path(n), np.float64) for n in FIXTURE_MODELS}


@pytest.fixture(scope="session")
def smallcnn(fixture_models):
    return fixture_models["smallcnn-mnist"]


@pytest.fixture(scope="session")
def smallcnn_pairs(smallcnn):
    return layer_singular_pairs(smallcnn)


@pytest.fixture(scope="session")
def mnist_test():
    return mnist_fixture("test")


def linear_model(seed=0, shape=(1, 6, 6), classes=3):
    """Conv -> BN -> flatten -> FC with no nonlinearity."""
    rng = np.random.default_rng(seed)
    c = 2
    specs = [
        dict(id="conv", kind="Conv2d", inputs=["input"],
             params=dict(weight=rng.standard_normal((c, shape[0], 3, 3))),
             attrs=dict(padding={"mode": "zero", "size": 1})),
        dict(id="bn", kind="BatchNorm", inputs=["conv"],
             params=dict(gamma=rng.uniform(0.5, 2, c), beta=rng.standard_normal(c),
                         moving_mean=rng.standard_normal(c), moving_var=rng.uniform(0.5, 2, c))),
        dict(id="flat", kind="Flatten", inputs=["bn"]),
        dict(id="fc", kind="FullyConnected", inputs=["flat"],
             params=dict(weight=rng.standard_normal((classes, c * shape[1] * shape[2])),
                         bias=rng.standard_normal(classes))),
    ]
    return build_model("linear", specs, shape, classes)


def constant_model(shape=(1, 4, 4), classes=3, favored=1):
    """FC with zero weight: every input gets the same logits."""
    bias = np.zeros(classes)
    bias[favored] = 1.0
    specs = [dict(id="flat", kind="Flatten", inputs=["input"]),
             dict(id="fc", kind="FullyConnected", inputs=["flat"],
                  params=dict(weight=np.zeros((classes, int(np.prod(shape)))), bias=bias))]
    return build_model("constant", specs, shape, classes)


@pytest.fixture(scope="session")
def regression():
    import json
    with open(os.path.join(FIXTURE_DIR, "smallcnn-mnist", "regression.json")) as fh:
        return json.load(fh)
