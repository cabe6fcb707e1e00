"""Single-instrument, long-only trading environment.

The core is functional: :func:`reset` and :func:`step` take and return an
immutable :class:`EnvState`.  :class:`TradingEnv` wraps them in the familiar
gym-style ``reset()`` / ``step(action)`` object.

Rewards are close-to-close relative changes while a position is open, minus
``commission_rate`` on every open and close leg, multiplied by
``reward_scale`` (100 gives percent units).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigInvalid, SeriesTooShort, SteppedAfterDone
from .market_data import PriceSeries

N_ACTIONS = 3


class Action(enum.IntEnum):
    HOLD = 0
    BUY = 1
    CLOSE = 2


@dataclass(frozen=True)
class EnvConfig:
    window_n: int = 10
    commission_rate: float = 0.01
    episode_len: int = 1000
    random_start: bool = True
    include_volume: bool = False
    reward_scale: float = 100.0

    def __post_init__(self):
        if self.window_n < 1:
            raise ConfigInvalid("env.window_n", "must be >= 1")
        if self.episode_len < 1:
            raise ConfigInvalid("env.episode_len", "must be >= 1")
        if not 0.0 <= self.commission_rate < 1.0:
            raise ConfigInvalid("env.commission_rate", "must lie in [0, 1)")
        if not self.reward_scale > 0:
            raise ConfigInvalid("env.reward_scale", "must be > 0")

    @property
    def n_channels(self) -> int:
        return 4 if self.include_volume else 3

    @property
    def obs_size(self) -> int:
        return self.n_channels * self.window_n + 2


@dataclass(frozen=True)
class EnvState:
    cursor: int
    steps_taken: int = 0
    has_position: bool = False
    entry_price: float | None = None
    episode_done: bool = False


@dataclass(frozen=True)
class Observation:
    """``bars_window`` is a (window_n, 4) array, oldest row first.

    Columns are rel_high, rel_low, rel_close, norm_volume.
    """

    bars_window: np.ndarray
    has_position: bool
    unrealized_pnl: float


@dataclass(frozen=True)
class StepResult:
    observation: Observation
    reward: float
    done: bool
    info: dict


def _observe(state: EnvState, series: PriceSeries, config: EnvConfig) -> Observation:
    lo = state.cursor - config.window_n + 1
    window = series.rel_array[lo : state.cursor + 1]
    if state.has_position:
        pnl = (series.closes[state.cursor] - state.entry_price) / state.entry_price
    else:
        pnl = 0.0
    return Observation(window, state.has_position, float(pnl))


def required_length(config: EnvConfig) -> int:
    return config.window_n + config.episode_len + 1


def reset(series: PriceSeries, config: EnvConfig, rng: np.random.Generator | None = None) -> tuple[EnvState, Observation]:
    n = len(series)
    if n < required_length(config):
        raise SeriesTooShort(
            f"series has {n} bars, need >= window_n + episode_len + 1 = {required_length(config)}"
        )
    cursor = config.window_n - 1
    if config.random_start:
        if rng is None:
            raise ValueError("random_start requires an rng")
        # offset keeps cursor + episode_len inside the series
        cursor += int(rng.integers(0, n - config.episode_len - config.window_n + 1))
    state = EnvState(cursor=cursor)
    return state, _observe(state, series, config)


def step(state: EnvState, action: int, series: PriceSeries, config: EnvConfig) -> tuple[EnvState, StepResult]:
    if state.episode_done:
        raise SteppedAfterDone("episode already finished; call reset()")
    action = Action(action)
    closes = series.closes
    c_now = closes[state.cursor]
    c_next = closes[state.cursor + 1]
    change = (c_next - c_now) / c_now
    kappa = config.commission_rate

    has_position = state.has_position
    entry = state.entry_price
    opened = closed = False
    raw = 0.0
    legs = 0
    if not has_position and action == Action.BUY:
        has_position, entry, opened = True, float(c_now), True
        raw = change
        legs = 1
    elif has_position and action == Action.CLOSE:
        has_position, entry, closed = False, None, True
        legs = 1
    elif has_position:
        raw = change

    cursor = state.cursor + 1
    steps = state.steps_taken + 1
    done = steps >= config.episode_len or cursor >= len(series) - 1
    if done and has_position:
        has_position, entry, closed = False, None, True
        legs += 1

    reward = config.reward_scale * (raw - kappa * legs)
    new_state = EnvState(cursor, steps, has_position, entry, done)
    info = {
        "trade_opened": opened,
        "trade_closed": closed,
        "commission_paid": config.reward_scale * kappa * legs,
        "raw_price_change": raw,
        "legs": legs,
    }
    return new_state, StepResult(_observe(new_state, series, config), float(reward), done, info)


def observation_flat(obs: Observation, config: EnvConfig) -> np.ndarray:
    """Channel-major layout: highs, lows, closes, [volumes], flag, pnl.

    The first ``n_channels * window_n`` entries are exactly
    ``observation_channels(obs).ravel()``, so one flat vector feeds both
    network architectures.
    """
    c = config.n_channels
    out = np.empty(c * config.window_n + 2)
    out[:-2] = obs.bars_window[:, :c].T.ravel()
    out[-2] = 1.0 if obs.has_position else 0.0
    out[-1] = obs.unrealized_pnl
    return out


def observation_channels(obs: Observation, config: EnvConfig) -> np.ndarray:
    """(channels, window_n) matrix; the flag and pnl are not included."""
    return np.ascontiguousarray(obs.bars_window[:, : config.n_channels].T)


class TradingEnv:
    """Stateful wrapper with a gym-like interface."""

    def __init__(self, series: PriceSeries, config: EnvConfig, rng: np.random.Generator | None = None):
        self.series = series
        self.config = config
        self.rng = rng
        self.state: EnvState | None = None

    @property
    def obs_size(self) -> int:
        return self.config.obs_size

    def reset(self) -> np.ndarray:
        self.state, obs = reset(self.series, self.config, self.rng)
        return observation_flat(obs, self.config)

    def step(self, action: int) -> tuple[np.ndarray, float, bool, dict]:
        if self.state is None:
            raise SteppedAfterDone("call reset() first")
        self.state, res = step(self.state, action, self.series, self.config)
        return observation_flat(res.observation, self.config), res.reward, res.done, res.info
