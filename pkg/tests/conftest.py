import math

import numpy as np
import pytest

from spreadmpc.conic import ProgramBuilder
from spreadmpc.network import RateState, SpreadingNetwork, bound_matrices, spectral_radius
from spreadmpc.ocp import OcpInstance


def scalar_network(alpha=0.5, h=1.0, delta=0.5, cost=1.0):
    """Isolated node with ``A = 1 - h delta``."""
    return SpreadingNetwork(
        n=1, rows=[], cols=[], beta_lower=[], beta_upper=[],
        delta_lower=[delta], delta_upper=[0.9], delta_cap=[1.0], cost=[cost],
        edge_weight=[], node_weight=[1.0], h=h, alpha=alpha)


def two_node_network(beta=0.4, beta_lower=0.1, alpha=0.5, cost=(1.0, 1.0)):
    """Node 0 infects node 1: ``A = [[0.5, 0], [beta, 0.5]]`` with ``h = 1``."""
    return SpreadingNetwork(
        n=2, rows=[1], cols=[0], beta_lower=[beta_lower], beta_upper=[beta],
        delta_lower=[0.5, 0.5], delta_upper=[0.9, 0.9], delta_cap=[1.0, 1.0], cost=list(cost),
        edge_weight=[1.0], node_weight=[1.0, 1.0], h=1.0, alpha=alpha)


def random_network(rng, n=None, density=0.3, floor=(0.05, 0.3), margin=0.02, h=0.2):
    """Random directed network that satisfies the step-size and stability assumptions."""
    n = int(rng.integers(2, 9)) if n is None else n
    mask = rng.random((n, n)) < density
    np.fill_diagonal(mask, False)
    rows, cols = np.nonzero(mask)
    beta_up = rng.uniform(0.2, 1.0, len(rows))
    colsum = h * np.bincount(cols, weights=beta_up, minlength=n)
    if colsum.size and colsum.max() >= 0.9:
        beta_up *= 0.9 / colsum.max() * 0.99
    beta_lo = beta_up * rng.uniform(*floor, len(rows))
    delta_lo = rng.uniform(0.1, 0.5, n)
    fields = dict(
        n=n, rows=rows, cols=cols, beta_lower=beta_lo, beta_upper=beta_up,
        delta_lower=delta_lo, delta_upper=delta_lo + rng.uniform(0.1, 0.4, n),
        delta_cap=np.full(n, 1.0), cost=rng.uniform(0.1, 1.0, n),
        edge_weight=rng.uniform(0.5, 2.0, len(rows)), node_weight=rng.uniform(0.5, 2.0, n), h=h)
    probe = SpreadingNetwork(**fields, alpha=1.0)
    rho = spectral_radius(bound_matrices(probe)[1])
    return SpreadingNetwork(**fields, alpha=min(1.0, 1.0 / (margin + rho)))


def random_program(rng, m, blocks=None, linear=True):
    """Random feasible instance on the box [-2, 2]^m, strictly feasible at ``z0``."""
    b = ProgramBuilder()
    z = [b.var(f"z{i}", -2.0, 2.0) for i in range(m)]
    z0 = rng.uniform(-1.0, 1.0, m)
    b.minimize({v: c for v, c in zip(z, rng.normal(size=m))})
    for _ in range(int(rng.integers(1, 4)) if blocks is None else blocks):
        terms = []
        for _ in range(int(rng.integers(1, 4))):
            a = rng.normal(size=m)
            terms.append([{v: w for v, w in zip(z, a)}, float(-a @ z0)])
        # shift offsets so the block value at z0 is -margin
        margin = rng.uniform(0.05, 1.0)
        shift = margin + math.log(len(terms))
        for t in terms:
            t[1] -= shift
        b.lse([tuple(t) for t in terms])
    if linear and rng.random() < 0.5:
        g = rng.normal(size=m)
        b.le({v: w for v, w in zip(z, g)}, float(g @ z0) + rng.uniform(0.05, 1.0))
    return b.build()


def random_instance(rng, L=None):
    """Random OCP whose starting rates sit strictly between the floor and the upper bound."""
    net = random_network(rng, n=int(rng.integers(2, 9)))
    t = rng.uniform(0, 0.5)
    rates = RateState(net.beta_upper + t * (net.beta_lower - net.beta_upper),
                      net.delta_lower + t * (net.delta_upper - net.delta_lower))
    x = rng.random(net.n) * (rng.random(net.n) < 0.8)
    L = int(rng.integers(1, 4)) if L is None else L
    return OcpInstance(net, rates, x, L=L, gamma_bar=float(rng.uniform(0.05, 3.0)))


@pytest.fixture
def scalar_net():
    return scalar_network()


@pytest.fixture
def two_node_net():
    return two_node_network()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance reporting ------------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    number, title = mark.args
    prev = _CRITERIA.get(number, (title, "PASS"))[1]
    _CRITERIA[number] = (title, "FAIL" if rep.failed or prev == "FAIL" else "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, verdict = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {verdict}  {title}")
