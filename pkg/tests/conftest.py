import itertools

import numpy as np
import pytest

from creditrbm.rbm import RbmParameters


def naive_log_partition(params):
    """Double loop over every (v, h) pair; deliberately independent of the
    vectorised enumeration in the package."""
    w, b, c = params.weights, params.visible_bias, params.hidden_bias
    terms = []
    for v in itertools.product((0, 1), repeat=params.n_visible):
        for h in itertools.product((0, 1), repeat=params.n_hidden):
            e = 0.0
            for j in range(params.n_hidden):
                for i in range(params.n_visible):
                    e -= h[j] * w[j, i] * v[i]
            e -= sum(b[i] * v[i] for i in range(params.n_visible))
            e -= sum(c[j] * h[j] for j in range(params.n_hidden))
            terms.append(-e)
    terms = np.array(terms)
    top = terms.max()
    return top + np.log(np.exp(terms - top).sum())


def brute_visible_marginal(params):
    """P(v) by summing exp(-E) over h for each v, in itertools order."""
    w, b, c = params.weights, params.visible_bias, params.hidden_bias
    unnorm = []
    for v in itertools.product((0, 1), repeat=params.n_visible):
        v = np.array(v, dtype=float)
        tot = 0.0
        for h in itertools.product((0, 1), repeat=params.n_hidden):
            h = np.array(h, dtype=float)
            tot += np.exp(h @ w @ v + b @ v + c @ h)
        unnorm.append(tot)
    unnorm = np.array(unnorm)
    return unnorm / unnorm.sum()


@pytest.fixture
def tiny_rbm():
    return RbmParameters.random(4, 3, rng=11, scale=0.8)


ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
