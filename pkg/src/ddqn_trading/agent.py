"""Double-DQN learning rule: epsilon-greedy acting, targets and updates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArchitectureMismatch, ConfigInvalid, InsufficientData
from .neural import N_ACTIONS, DuelingNet, make_optimizer, sync_target
from .replay_buffer import ReplayBuffer, Transition, stack_batch


@dataclass(frozen=True)
class EpsilonSchedule:
    eps_start: float = 1.0
    eps_final: float = 0.1
    decay_steps: int = 1_000_000

    def __post_init__(self):
        if not 0.0 <= self.eps_final <= self.eps_start <= 1.0:
            raise ConfigInvalid("agent.schedule", "need 0 <= eps_final <= eps_start <= 1")
        if self.decay_steps < 1:
            raise ConfigInvalid("agent.schedule.decay_steps", "must be >= 1")


@dataclass(frozen=True)
class AgentConfig:
    gamma: float = 0.99
    batch_size: int = 32
    sync_every: int = 1000
    replay_start: int = 10_000
    buffer_capacity: int = 100_000
    schedule: EpsilonSchedule = field(default_factory=EpsilonSchedule)
    optimizer: str = "adam"
    lr: float = 1e-4
    loss: str = "mse"

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigInvalid("agent.gamma", "must lie in [0, 1]")
        for name in ("batch_size", "sync_every", "replay_start", "buffer_capacity"):
            if getattr(self, name) < 1:
                raise ConfigInvalid(f"agent.{name}", "must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigInvalid("agent.optimizer", "must be 'adam' or 'sgd'")
        if not self.lr > 0:
            raise ConfigInvalid("agent.lr", "must be > 0")
        if self.loss not in ("mse", "huber"):
            raise ConfigInvalid("agent.loss", "must be 'mse' or 'huber'")


def epsilon_at(schedule: EpsilonSchedule, step: int) -> float:
    frac = min(step / schedule.decay_steps, 1.0)
    return schedule.eps_start + (schedule.eps_final - schedule.eps_start) * frac


def greedy_action(q_row: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest action code
    return int(np.argmax(q_row))


def select_action(net: DuelingNet, obs: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(N_ACTIONS))
    return greedy_action(net.predict(obs)[0])


def ddqn_targets(
    rewards: np.ndarray,
    next_states: np.ndarray,
    dones: np.ndarray,
    gamma: float,
    online: DuelingNet,
    target: DuelingNet,
) -> np.ndarray:
    """reward + gamma * Q_target(s', argmax_a Q_online(s', a)); terminal rows keep the reward."""
    if not online.same_architecture(target):
        raise ArchitectureMismatch("online and target networks differ")
    rewards = np.asarray(rewards, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    best = np.argmax(online.predict(next_states), axis=1)
    q_eval = target.predict(next_states)[np.arange(len(best)), best]
    return np.where(dones, rewards, rewards + gamma * q_eval)


def ddqn_target(batch: list[Transition], gamma: float, online: DuelingNet, target: DuelingNet) -> np.ndarray:
    _, _, rewards, next_states, dones = stack_batch(batch)
    return ddqn_targets(rewards, next_states, dones, gamma, online, target)


def td_loss_and_grads(
    net: DuelingNet, states: np.ndarray, actions: np.ndarray, targets: np.ndarray, loss: str = "mse"
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss of Q(s, a_taken) against fixed targets, and its parameter gradients."""
    q, cache = net.forward(states)
    rows = np.arange(len(actions))
    err = q[rows, actions] - targets
    b = len(actions)
    if loss == "huber":
        abs_err = np.abs(err)
        value = float(np.mean(np.where(abs_err <= 1.0, 0.5 * err * err, abs_err - 0.5)))
        derr = np.clip(err, -1.0, 1.0) / b
    else:
        value = float(np.mean(err * err))
        derr = 2.0 * err / b
    dq = np.zeros_like(q)
    dq[rows, actions] = derr
    return value, net.backward(cache, dq)


def train_step(
    online: DuelingNet,
    target: DuelingNet,
    buf: ReplayBuffer,
    cfg: AgentConfig,
    rng: np.random.Generator,
    optimizer,
) -> float:
    need = max(cfg.batch_size, cfg.replay_start)
    if len(buf) < need:
        raise InsufficientData(f"buffer holds {len(buf)} transitions, need {need}")
    states, actions, rewards, next_states, dones = stack_batch(buf.sample(cfg.batch_size, rng))
    y = ddqn_targets(rewards, next_states, dones, cfg.gamma, online, target)
    value, grads = td_loss_and_grads(online, states, actions, y, cfg.loss)
    optimizer.step(online, grads)
    return value


class DDQNAgent:
    """Online/target pair plus optimizer state and a global step counter."""

    def __init__(self, online: DuelingNet, cfg: AgentConfig):
        self.cfg = cfg
        self.online = online
        self.target = online.copy()
        self.optimizer = make_optimizer(cfg.optimizer, cfg.lr)
        self.updates = 0

    def epsilon(self, step: int) -> float:
        return epsilon_at(self.cfg.schedule, step)

    def act(self, obs: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
        return select_action(self.online, obs, epsilon, rng)

    def learn(self, buf: ReplayBuffer, rng: np.random.Generator) -> float:
        loss = train_step(self.online, self.target, buf, self.cfg, rng, self.optimizer)
        self.updates += 1
        return loss

    def sync(self) -> None:
        sync_target(self.online, self.target)
