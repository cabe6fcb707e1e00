import math

import numpy as np
import pytest

from ddqn_trading.market_data import Bar, PriceSeries

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def series_from_closes(closes, start=1_600_000_000, volume=1000.0, source_id="test"):
    """Bars opening at the previous close, with wicks just outside the body."""
    bars = []
    prev = closes[0]
    for i, c in enumerate(closes):
        o = prev if i else c
        bars.append(Bar(start + 60 * i, float(o), float(max(o, c) * 1.001), float(min(o, c) * 0.999), float(c), volume))
        prev = c
    return PriceSeries.from_bars(bars, source_id=source_id)


def reference_return(closes, start, actions, kappa, scale):
    """Independent accumulator: sum of close-to-close changes while long, minus kappa per leg.

    ``actions`` must cover the whole episode; a position still open at the
    end costs one more leg.
    """
    long = False
    changes, legs = [], 0
    for t, a in enumerate(actions):
        i = start + t
        change = (closes[i + 1] - closes[i]) / closes[i]
        if not long and a == 1:
            long, legs = True, legs + 1
            changes.append(change)
        elif long and a == 2:
            long, legs = False, legs + 1
        elif long:
            changes.append(change)
    if long:
        legs += 1
    return scale * (math.fsum(changes) - kappa * legs), legs


@pytest.fixture
def random_walk_series():
    rng = np.random.default_rng(123)
    closes = 100.0 * np.exp(np.cumsum(rng.normal(0, 0.002, size=400)))
    return series_from_closes(closes)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
