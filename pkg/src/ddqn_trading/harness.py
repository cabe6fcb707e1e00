"""Training loop, greedy evaluation, random baseline and the experiment grid."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .agent import AgentConfig, DDQNAgent, greedy_action
from .errors import CheckpointMismatch, ConfigInvalid
from .market_data import PriceSeries
from .neural import Checkpoint, DuelingNet, NetSpec
from .replay_buffer import ReplayBuffer, Transition
from .trading_env import N_ACTIONS, EnvConfig, TradingEnv, required_length

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
STREAMS = ("init", "env", "agent", "buffer", "baseline")
SCENARIOS = ("no_commission", "with_commission")

METRICS_COLUMNS = ["episode_index", "global_step", "cumulative_reward_pct", "trades", "epsilon", "mean_loss"]


def named_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators per component, all derived from one seed."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(child) for name, child in zip(STREAMS, children)}


@dataclass
class EpisodeMetrics:
    episode_index: int
    global_step: int
    cumulative_reward: float
    trades: int
    steps: int
    epsilon: float
    mean_loss: float
    rewards: list[float] = field(default_factory=list, repr=False)

    def row(self) -> list:
        return [self.episode_index, self.global_step, repr(self.cumulative_reward), self.trades,
                repr(self.epsilon), repr(self.mean_loss)]


@dataclass
class RunSettings:
    total_steps: int = 200_000
    seed: int = 0
    checkpoint_every: int = 0
    eval_every: int = 0
    eval_len: int = 2000
    log_every: int = 1000
    baseline_episodes: int = 10
    out_dir: str | None = None

    def __post_init__(self):
        for name in ("total_steps", "checkpoint_every", "eval_every", "eval_len", "log_every", "baseline_episodes"):
            if getattr(self, name) < 0:
                raise ConfigInvalid(f"run.{name}", "must be >= 0")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[EpisodeMetrics]
    mid_evals: list[dict] = field(default_factory=list)


@dataclass
class EvalReport:
    scenario: str
    arch_tag: str
    batch_size: int | None
    cumulative_reward_curve: list[tuple[int, float]]
    final_return_pct: float
    trades: int
    baseline_random_return_pct: float
    baseline_random_std_pct: float = float("nan")
    step_rewards: list[float] = field(default_factory=list, repr=False)
    actions: list[int] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "scenario": self.scenario,
            "arch_tag": self.arch_tag,
            "batch_size": self.batch_size,
            "final_return_pct": self.final_return_pct,
            "trades": self.trades,
            "baseline_random_return_pct": _json_float(self.baseline_random_return_pct),
            "baseline_random_std_pct": _json_float(self.baseline_random_std_pct),
            "steps": len(self.cumulative_reward_curve),
        }

    def save(self, json_path, curve_path=None) -> None:
        json_path = Path(json_path)
        json_path.parent.mkdir(parents=True, exist_ok=True)
        json_path.write_text(json.dumps(self.to_dict(), indent=2))
        curve_path = Path(curve_path) if curve_path else json_path.with_suffix(".curve.csv")
        with open(curve_path, "w", newline="") as f:
            w = _csv_writer(f, ["step", "cumulative_reward_pct"])
            for s, c in self.cumulative_reward_curve:
                w.writerow([s, repr(c)])


@dataclass
class BaselineSummary:
    mean: float
    std: float
    returns: list[float]


def _json_float(x: float):
    return None if x is None or math.isnan(x) else x


def _csv_writer(f, columns: Sequence[str]):
    f.write(f"# format_version: {FORMAT_VERSION}\n")
    w = csv.writer(f, lineterminator="\n")
    w.writerow(columns)
    return w


def read_versioned_csv(path) -> tuple[list[str], list[dict]]:
    """Column names and rows of a CSV written with a format_version comment."""
    with open(path, newline="") as f:
        lines = [line for line in f if not line.startswith("#")]
    reader = csv.DictReader(lines)
    rows = list(reader)
    return list(reader.fieldnames or []), rows


# ------------------------------------------------------------------ train


def _check_length(series: PriceSeries, env_cfg: EnvConfig) -> None:
    if len(series) < required_length(env_cfg):
        raise ConfigInvalid(
            "env.episode_len",
            f"series of {len(series)} bars is too short for window_n={env_cfg.window_n}, "
            f"episode_len={env_cfg.episode_len}",
        )


def train(
    series: PriceSeries,
    env_cfg: EnvConfig,
    agent_cfg: AgentConfig,
    net_spec: NetSpec,
    total_steps: int,
    seed: int,
    *,
    run: RunSettings | None = None,
    eval_series: PriceSeries | None = None,
) -> TrainResult:
    """Run the DDQN loop for ``total_steps`` environment steps.

    Completed episodes produce one :class:`EpisodeMetrics` each; a trailing
    unfinished episode is dropped.  When ``run.out_dir`` is set, metrics,
    the subsampled loss/epsilon log, periodic checkpoints and the final
    checkpoint are written there.
    """
    run = run or RunSettings(total_steps=total_steps, seed=seed)
    _check_length(series, env_cfg)
    if agent_cfg.replay_start > agent_cfg.buffer_capacity:
        raise ConfigInvalid("agent.replay_start", "exceeds buffer_capacity")

    rngs = named_streams(seed)
    net = DuelingNet.build(net_spec, env_cfg.n_channels, env_cfg.window_n, rngs["init"])
    agent = DDQNAgent(net, agent_cfg)
    buf = ReplayBuffer(agent_cfg.buffer_capacity)
    env = TradingEnv(series, env_cfg, rngs["env"])
    learn_from = max(agent_cfg.batch_size, agent_cfg.replay_start)
    meta = {"batch_size": agent_cfg.batch_size, "env": asdict(env_cfg), "net": asdict(net_spec)}

    out = Path(run.out_dir) if run.out_dir else None
    metrics_file = step_file = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out / "metrics.csv", "w", newline="")
        metrics_writer = _csv_writer(metrics_file, METRICS_COLUMNS)
        if run.log_every:
            step_file = open(out / "steps.csv", "w", newline="")
            step_writer = _csv_writer(step_file, ["global_step", "epsilon", "loss"])

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(agent.online.copy(), seed, step, dict(meta))

    metrics: list[EpisodeMetrics] = []
    mid_evals: list[dict] = []
    eval_slice = None
    if eval_series is not None and run.eval_every:
        n = min(len(eval_series), run.eval_len + env_cfg.window_n + 1)
        eval_slice = PriceSeries(eval_series.bars[:n], eval_series.rel[:n], eval_series.source_id)

    try:
        obs = env.reset() if total_steps > 0 else None
        ep_rewards: list[float] = []
        ep_losses: list[float] = []
        ep_trades = 0
        eps = agent.epsilon(0)
        for step in range(total_steps):
            eps = agent.epsilon(step)
            action = agent.act(obs, eps, rngs["agent"])
            next_obs, reward, done, info = env.step(action)
            buf.push(Transition(obs, action, reward, next_obs, done))
            ep_rewards.append(reward)
            ep_trades += info["legs"]
            loss = float("nan")
            if len(buf) >= learn_from:
                loss = agent.learn(buf, rngs["buffer"])
                ep_losses.append(loss)
            global_step = step + 1
            if global_step % agent_cfg.sync_every == 0:
                agent.sync()
            if step_file and global_step % run.log_every == 0:
                step_writer.writerow([global_step, repr(eps), repr(loss)])
            if done:
                m = EpisodeMetrics(
                    episode_index=len(metrics),
                    global_step=global_step,
                    cumulative_reward=math.fsum(ep_rewards),
                    trades=ep_trades,
                    steps=len(ep_rewards),
                    epsilon=eps,
                    mean_loss=float(np.mean(ep_losses)) if ep_losses else float("nan"),
                    rewards=ep_rewards,
                )
                metrics.append(m)
                if metrics_file:
                    metrics_writer.writerow(m.row())
                ep_rewards, ep_losses, ep_trades = [], [], 0
                obs = env.reset()
            else:
                obs = next_obs
            if out and run.checkpoint_every and global_step % run.checkpoint_every == 0:
                snapshot(global_step).save(out / "checkpoints" / f"step_{global_step:09d}.json")
            if eval_slice is not None and global_step % run.eval_every == 0:
                rep = evaluate(snapshot(global_step), eval_slice, env_cfg, "with_commission", baseline_episodes=0)
                mid_evals.append({"global_step": global_step, "final_return_pct": rep.final_return_pct,
                                  "trades": rep.trades})
                log.info("step %d: eval return %.3f%% (%d legs)", global_step, rep.final_return_pct, rep.trades)
    finally:
        if metrics_file:
            metrics_file.close()
        if step_file:
            step_file.close()

    final = snapshot(total_steps)
    if out:
        final.save(out / "checkpoint.json")
        if mid_evals:
            with open(out / "mid_evals.csv", "w", newline="") as f:
                w = _csv_writer(f, ["global_step", "final_return_pct", "trades"])
                for e in mid_evals:
                    w.writerow([e["global_step"], repr(e["final_return_pct"]), e["trades"]])
    return TrainResult(final, metrics, mid_evals)


# --------------------------------------------------------------- evaluate


def eval_env_config(env_cfg: EnvConfig, series: PriceSeries, scenario: str) -> EnvConfig:
    """One un-randomized pass over the whole series for the given scenario."""
    if scenario not in SCENARIOS:
        raise ConfigInvalid("scenario", f"must be one of {SCENARIOS}")
    episode_len = len(series) - env_cfg.window_n - 1
    if episode_len < 1:
        raise ConfigInvalid("data", f"evaluation series of {len(series)} bars is too short")
    kappa = 0.0 if scenario == "no_commission" else env_cfg.commission_rate
    return replace(env_cfg, random_start=False, episode_len=episode_len, commission_rate=kappa)


def _check_checkpoint(net: DuelingNet, env_cfg: EnvConfig) -> None:
    if net.input_size != env_cfg.obs_size or net.window_n != env_cfg.window_n or net.n_channels != env_cfg.n_channels:
        raise CheckpointMismatch(
            f"checkpoint expects input {net.input_size} (window {net.window_n}, {net.n_channels} channels); "
            f"environment produces {env_cfg.obs_size}"
        )


def run_policy(env: TradingEnv, policy) -> tuple[list[float], list[int], int]:
    """Play one episode; returns step rewards, actions and commission legs."""
    obs = env.reset()
    rewards, actions, legs = [], [], 0
    done = False
    while not done:
        a = policy(obs)
        obs, r, done, info = env.step(a)
        rewards.append(r)
        actions.append(a)
        legs += info["legs"]
    return rewards, actions, legs


def evaluate(
    checkpoint: Checkpoint | DuelingNet,
    series: PriceSeries,
    env_cfg: EnvConfig,
    scenario: str,
    *,
    baseline_episodes: int = 10,
    baseline_seed: int = 0,
) -> EvalReport:
    """Deterministic greedy pass over ``series`` from its first bar."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else Checkpoint(checkpoint)
    net = ckpt.net
    _check_checkpoint(net, env_cfg)
    cfg = eval_env_config(env_cfg, series, scenario)
    env = TradingEnv(series, cfg)
    rewards, actions, legs = run_policy(env, lambda o: greedy_action(net.predict(o)[0]))
    cum = np.cumsum(rewards)
    curve = [(i + 1, float(c)) for i, c in enumerate(cum)]
    final = float(cum[-1]) if len(cum) else 0.0
    base_mean = base_std = float("nan")
    if baseline_episodes > 0:
        base = random_baseline(series, cfg, baseline_seed, baseline_episodes)
        base_mean, base_std = base.mean, base.std
    return EvalReport(
        scenario=scenario,
        arch_tag=net.arch_tag,
        batch_size=ckpt.meta.get("batch_size"),
        cumulative_reward_curve=curve,
        final_return_pct=final,
        trades=legs,
        baseline_random_return_pct=base_mean,
        baseline_random_std_pct=base_std,
        step_rewards=list(rewards),
        actions=actions,
    )


def random_baseline(series: PriceSeries, env_cfg: EnvConfig, seed: int, episodes: int) -> BaselineSummary:
    """Uniform-random policy under ``env_cfg``; mean and sample std of episode returns."""
    if episodes < 1:
        raise ConfigInvalid("episodes", "must be >= 1")
    rngs = named_streams(seed)
    env = TradingEnv(series, env_cfg, rngs["env"])
    policy_rng = rngs["baseline"]
    returns = []
    for _ in range(episodes):
        rewards, _, _ = run_policy(env, lambda o: int(policy_rng.integers(N_ACTIONS)))
        returns.append(math.fsum(rewards))
    std = float(np.std(returns, ddof=1)) if episodes > 1 else 0.0
    return BaselineSummary(float(np.mean(returns)), std, returns)


# ------------------------------------------------------------------ sweep


@dataclass
class SweepResult:
    reports: list[EvalReport]
    summary: list[dict]
    train_results: dict = field(default_factory=dict, repr=False)


SUMMARY_COLUMNS = ["arch", "batch_size", "return_no_commission_pct", "return_with_commission_pct"]


def _run_cell(args) -> tuple[TrainResult, list[EvalReport]]:
    arch, batch, scenarios, train_series, test_series, env_cfg, agent_cfg, net_spec, run = args
    spec = net_spec if net_spec.arch == arch else NetSpec.default(arch)
    cell_cfg = replace(agent_cfg, batch_size=batch)
    cell_dir = str(Path(run.out_dir) / f"{arch}_b{batch}") if run.out_dir else None
    cell_run = replace(run, out_dir=cell_dir)
    result = train(train_series, env_cfg, cell_cfg, spec, run.total_steps, run.seed,
                   run=cell_run, eval_series=test_series)
    reports = []
    for scenario in scenarios:
        rep = evaluate(result.checkpoint, test_series, env_cfg, scenario,
                       baseline_episodes=run.baseline_episodes, baseline_seed=run.seed)
        if cell_dir:
            rep.save(Path(cell_dir) / f"eval_{scenario}.json")
        reports.append(rep)
    return result, reports


def sweep(
    train_series: PriceSeries,
    test_series: PriceSeries,
    env_cfg: EnvConfig,
    agent_cfg: AgentConfig,
    net_spec: NetSpec,
    run: RunSettings,
    archs: Iterable[str] = ("ffdqn", "cnn"),
    batch_sizes: Iterable[int] = (32, 128),
    scenarios: Iterable[str] = SCENARIOS,
    jobs: int = 1,
) -> SweepResult:
    """Train one agent per (arch, batch) cell and evaluate it per scenario."""
    scenarios = tuple(scenarios)
    for s in scenarios:
        if s not in SCENARIOS:
            raise ConfigInvalid("scenario", f"unknown scenario {s!r}")
    cells = [(a, b) for a in archs for b in batch_sizes]
    args = [(a, b, scenarios, train_series, test_series, env_cfg, agent_cfg, net_spec, run) for a, b in cells]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_cell, args))
    else:
        outcomes = [_run_cell(a) for a in args]

    reports: list[EvalReport] = []
    summary = []
    train_results = {}
    for (arch, batch), (result, cell_reports) in zip(cells, outcomes):
        train_results[(arch, batch)] = result
        reports.extend(cell_reports)
        by_scenario = {r.scenario: r.final_return_pct for r in cell_reports}
        summary.append({
            "arch": arch,
            "batch_size": batch,
            "return_no_commission_pct": by_scenario.get("no_commission"),
            "return_with_commission_pct": by_scenario.get("with_commission"),
        })
    if run.out_dir:
        write_summary(summary, Path(run.out_dir) / "summary.csv")
    return SweepResult(reports, summary, train_results)


def write_summary(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = _csv_writer(f, SUMMARY_COLUMNS)
        for r in rows:
            w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                        for c in SUMMARY_COLUMNS])
