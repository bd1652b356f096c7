import numpy as np
import pytest

from carlab.envs import GridAdversaryEnv
from carlab.mdp_core import TabularMdp, value_iteration
from carlab.tinynet import MlpNet


def pytest_addoption(parser):
    parser.addoption("--quick-acceptance", action="store_true", default=False,
                     help="run the training criteria with one seed instead of five")


@pytest.fixture(scope="session")
def grid_env():
    return GridAdversaryEnv()


@pytest.fixture(scope="session")
def grid_model(grid_env):
    mdp, coords = grid_env.tabularize()
    return mdp, coords, value_iteration(mdp, tol=1e-10)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def chain_mdp(gamma=0.9):
    """Two states: state 0 moves to the absorbing state 1 with reward 1."""
    p = np.zeros((2, 1, 2))
    p[0, 0, 1] = 1.0
    p[1, 0, 1] = 1.0
    return TabularMdp(p, np.array([[1.0], [0.0]]), gamma, np.array([1.0, 0.0]))


def random_mdp(rng, n_s=3, n_a=2, gamma=0.9, sparse_rows=False):
    p = rng.random((n_s, n_a, n_s))
    if sparse_rows:
        p *= rng.random((n_s, n_a, n_s)) < 0.5
        p[np.arange(n_s)[:, None], np.arange(n_a)[None, :], rng.integers(n_s, size=(n_s, n_a))] += 1.0
    p /= p.sum(axis=2, keepdims=True)
    r = rng.normal(size=(n_s, n_a))
    return TabularMdp(p, r, gamma, np.full(n_s, 1.0 / n_s))


def rel_error(a, b):
    a = np.concatenate([np.ravel(x) for x in a]) if isinstance(a, (list, tuple)) else np.ravel(a)
    b = np.concatenate([np.ravel(x) for x in b]) if isinstance(b, (list, tuple)) else np.ravel(b)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-10)
    return float(np.max(np.abs(a - b)) / scale)


def numeric_grads(loss, arrays, h=1e-6):
    """Central differences of ``loss()`` w.r.t. every entry of ``arrays``
    (perturbed in place and restored)."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = arr[i]
            arr[i] = old + h
            up = loss()
            arr[i] = old - h
            down = loss()
            arr[i] = old
            g[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def tabular_q_net(coords, q, spacing):
    """ReLU net that interpolates a Q table on a square grid: one L1 tent of
    radius ``spacing`` per cell, so ``net(coords[k]) == q[k]`` exactly."""
    n, d = coords.shape
    w0 = np.zeros((d, 2 * d * n))
    b0 = np.zeros(2 * d * n)
    w1 = np.zeros((2 * d * n, n))
    for k, c in enumerate(coords):
        for j in range(d):
            for sgn, col in ((1.0, 2 * d * k + 2 * j), (-1.0, 2 * d * k + 2 * j + 1)):
                w0[j, col] = sgn
                b0[col] = -sgn * c[j]
                w1[col, k] = -1.0 / spacing
    b1 = np.ones(n)
    net = MlpNet(d, [2 * d * n, n], q.shape[1])
    net.set_params([w0, b0, w1, b1, np.asarray(q, dtype=float), np.zeros(q.shape[1])])
    return net


ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
