import numpy as np
import pytest

from nbdkalman.blockmat import BlockStructure, NbdMatrix


def random_spd(rng, n, lo=0.5, hi=2.0):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (q * rng.uniform(lo, hi, n)) @ q.T


def random_nbd(rng, s, eps, symmetric=True, p2=False, zero_diag=False):
    p0 = [random_spd(rng, n) for n in s.sizes]
    p1 = rng.standard_normal((s.N, s.N))
    if symmetric:
        p1 = p1 + p1.T
    if zero_diag:
        p1 = s.off_diagonal_part(p1)
    q2 = None
    if p2:
        q2 = rng.standard_normal((s.N, s.N))
        q2 = q2 + q2.T
    return NbdMatrix(s, eps, p0, p1, q2, symmetric)


def indefinite_truncation(delta=-0.2, eps=0.5):
    """P0 = I and eps*P1 with smallest eigenvalue -1 + delta (delta < 0 makes
    P0 + eps*P1 indefinite)."""
    s = BlockStructure([1, 1])
    lam = (-1.0 + delta) / eps
    p1 = np.array([[0.0, lam], [lam, 0.0]])  # eigenvalues +-lam
    return NbdMatrix(s, eps, (np.eye(1), np.eye(1)), p1, None, True)


def halving_ratios(errors):
    errors = np.asarray(errors, dtype=float)
    return errors[:-1] / errors[1:]


EPS_GRID = (0.2, 0.1, 0.05)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_state_space(rng, N=3, m=2, time_varying=False, n_steps=6):
    """Random stable model with PD noise covariances."""
    from nbdkalman.kalman_ref import StateSpaceModel

    def phi():
        a = rng.standard_normal((N, N))
        return a * (0.9 / np.abs(np.linalg.eigvals(a)).max())

    k = n_steps if time_varying else 1
    return StateSpaceModel(
        tuple(phi() for _ in range(k)),
        tuple(np.eye(N) for _ in range(k)),
        tuple(random_spd(rng, N, 0.05, 0.3) for _ in range(k)),
        tuple(rng.standard_normal((m, N)) for _ in range(k)),
        tuple(random_spd(rng, m, 0.2, 1.0) for _ in range(k)),
        rng.standard_normal(N),
        random_spd(rng, N),
    )


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[k])
