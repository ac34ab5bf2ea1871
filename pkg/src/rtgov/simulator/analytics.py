"""Closed-form exposure arithmetic used as comparators for simulation runs."""

from __future__ import annotations

from fractions import Fraction
from numbers import Rational


def _exact(x) -> Fraction:
    if isinstance(x, (int, Rational)):
        return Fraction(x)
    return Fraction(str(x))


def legacy_exposure(instances: int, recommendations_per_hour: int, latency_days: int) -> int:
    """Actions issued while a policy change waits out a manual rollout."""
    values = (instances, recommendations_per_hour, latency_days)
    if any(_exact(v) < 0 for v in values):
        raise ValueError("exposure inputs must be non-negative")
    total = _exact(instances) * _exact(recommendations_per_hour) * 24 * _exact(latency_days)
    if total.denominator != 1:
        raise ValueError("exposure is not a whole number of actions")
    return int(total)


def flagged_actions(exposure: int, rate: str | Fraction) -> int:
    """Whole actions affected at ``rate`` (a decimal string like ``"0.0003"``)."""
    r = _exact(rate)
    if not 0 <= r <= 1:
        raise ValueError("rate must lie in [0, 1]")
    return int(_exact(exposure) * r)


def esw_bound(actions_per_hour: float, ttl_s: float) -> int:
    """Most actions that can run on a stale policy inside one epoch.

    Time is quantised to whole seconds, so the window is ``ttl_s - 1``.
    """
    lam, ttl = _exact(actions_per_hour), _exact(ttl_s)
    if lam < 0 or ttl <= 0:
        raise ValueError("rate must be non-negative and TTL positive")
    window = max(ttl - 1, Fraction(0))
    return int(lam / 3600 * window)
