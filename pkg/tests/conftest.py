import contextlib
import time

import numpy as np
import pytest

from phgrid.cli import resolve_network
from phgrid.grid import load_network, read_network


def net_text(buses, lines, switches=(), loads=(), ders=()):
    """Assemble network-file text from lists of record strings."""
    parts = ["[buses]", *buses, "[lines]", *lines, "[switches]", *switches,
             "[loads]", *loads, "[ders]", *ders]
    return "\n".join(parts) + "\n"


def make_net(n_buses, edges, *, phases="1", substation=1, loads=(), ders=(), switches=(), r=0.02):
    """Buses 1..n; ``edges`` are (from, to) pairs numbered 1..; ``loads`` (bus, kw)."""
    buses = [f"id={i}, name=b{i}, phases={phases}, substation={'yes' if i == substation else 'no'}"
             for i in range(1, n_buses + 1)]
    lines = [f"id={k}, from={a}, to={b}, r_pu={r}, x_pu=0" for k, (a, b) in enumerate(edges, start=1)]
    sw = [f"line={lid}, kind={kind}" for lid, kind in switches]
    ld = [f"bus={b}, p_kw={kw}, sheddable=yes" for b, kw in loads]
    dr = [f"bus={b}, kw={kw}, mode={mode}" for b, kw, mode in ders]
    return load_network(net_text(buses, lines, sw, ld, dr))


@pytest.fixture(scope="session")
def toy():
    return read_network(resolve_network("toy15"))


@pytest.fixture(scope="session")
def ieee123():
    return read_network(resolve_network("ieee123_modified"))


def random_connected_adjacency(rng, n, p_extra=0.3):
    """Random spanning tree plus extra edges."""
    A = np.zeros((n, n), dtype=np.int8)
    order = rng.permutation(n)
    for k in range(1, n):
        a, b = order[k], order[rng.integers(k)]
        A[a, b] = A[b, a] = 1
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p_extra:
                A[i, j] = A[j, i] = 1
    return A


def policy_gradient_errors(seed=0, n_nodes=6, step=1e-5):
    """Per-tensor relative error of backprop vs central finite differences.

    Relative error of a tensor is ||g_ad - g_fd|| / max(||g_ad||, ||g_fd||).
    The loss mixes a Bernoulli log-probability, entropy and the value head so
    every parameter receives gradient.
    """
    from phgrid.policy import GcapcnConfig, GcapcnPolicy, entropy_tensor, log_prob_tensor
    from phgrid.tda import laplacian

    rng = np.random.default_rng(seed)
    n_lines, n_actions = 7, 5
    cfg = GcapcnConfig(layers=2, embed_dim=4, hidden=(3, 3), p=2, K=2)
    pol = GcapcnPolicy(cfg, n_nodes, n_lines, n_actions, rng)
    A = random_connected_adjacency(rng, n_nodes, 0.3).astype(float)
    L = laplacian(A * rng.uniform(0.2, 1.0, A.shape) * (A + A.T > 0))
    V = rng.uniform(0.9, 1.05, (n_nodes, 3))
    flows = rng.normal(size=n_lines)
    mask = np.array([False, True, False, False, False])
    action = np.array([1.0, 0.0, 0.0, 1.0, 1.0])

    def loss_fn():
        probs, value, _ = pol.forward(V, L, 0.8, 0.01, flows, mask)
        return (log_prob_tensor(probs, action, mask) + entropy_tensor(probs, mask) * 0.3
                + value * 0.7)

    pol.params.zero_grad()
    loss_fn().backward()
    errors = {}
    for name, t in pol.params.items():
        ad = t.grad if t.grad is not None else np.zeros_like(t.data)
        fd = np.zeros_like(t.data)
        for idx in np.ndindex(t.data.shape):
            keep = t.data[idx]
            t.data[idx] = keep + step
            up = loss_fn().item()
            t.data[idx] = keep - step
            down = loss_fn().item()
            t.data[idx] = keep
            fd[idx] = (up - down) / (2 * step)
        scale = max(np.linalg.norm(ad), np.linalg.norm(fd))
        errors[name] = 0.0 if scale == 0 else float(np.linalg.norm(ad - fd) / scale)
    return errors


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE: dict = {}


@pytest.fixture
def criterion():
    """``with criterion(n, title) as note:`` records PASS/FAIL plus ``note(text)`` details."""

    @contextlib.contextmanager
    def record(number, title):
        details = []
        start = time.perf_counter()
        try:
            yield details.append
        except BaseException:
            ACCEPTANCE[number] = ("FAIL", title, details, time.perf_counter() - start)
            raise
        ACCEPTANCE[number] = ("PASS", title, details, time.perf_counter() - start)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, title, details, secs = ACCEPTANCE[number]
        extra = f" ({'; '.join(details)})" if details else ""
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {title} [{secs:.1f}s]{extra}")
