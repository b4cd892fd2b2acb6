"""Small-scale smoke runs of every acceptance runner: shapes and bookkeeping only, no verdicts."""
import pytest

from delaysmp import experiments as X

SMALL = dict(n_paths=200, m_delay=32, levels=4, t0_fracs=(0.3, 0.1))


def _shape(o, criterion):
    assert o.criterion == criterion
    assert o.verdict in ("pass", "fail", "inconclusive")
    assert o.line.startswith("[") and f"{criterion:>2}. " in o.line
    assert o.seconds >= 0.0


def test_spike_rates_small():
    o = X.spike_rates(**SMALL)
    _shape(o, 5)
    assert len(o.ladder) == 5 * 2 * 4


def test_backward_rates_small():
    o6, o7 = X.backward_rates(**SMALL)
    _shape(o6, 6)
    _shape(o7, 7)
    assert len(o6.ladder) == 2 * 4 and len(o7.ladder) == 2 * 2 * 4


@pytest.mark.parametrize("fn,crit", [(X.deterministic_drift, 2), (X.picard_equivalence, 3)])
def test_fast_runners_pass(fn, crit):
    o = fn()
    _shape(o, crit)
    assert o.verdict == "pass"
