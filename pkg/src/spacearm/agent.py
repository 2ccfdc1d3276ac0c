"""Twin-delayed actor-critic agent with split reward heads.

Two critic pairs score an action from different angles: the capture pair
sees the tracking portion of the state and the capture reward channel,
the obstacle pair (second task only) sees the full state and the
obstacle reward channel.  The actor climbs a weighted sum of the
per-pair minimum critics.  A success-ranked priority buffer mixes
transitions from the best recent episodes into each batch, with the mix
fraction scheduled by the rolling success rate.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .nn import Adam, Mlp, file_sha256, load_checkpoint, save_checkpoint, soft_update
from .errors import DimensionMismatch, InsufficientData


# ---------------------------------------------------------------------------
# replay storage


class ReplayRing:
    """Fixed-capacity transition store with uniform sampling."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        self.capacity = int(capacity)
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards_capture = np.zeros(capacity)
        self.rewards_obstacle = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.terminals = np.zeros(capacity)
        self.size = 0
        self._head = 0

    def __len__(self) -> int:
        return self.size

    def add(self, state, action, reward_capture, reward_obstacle, next_state, terminal):
        i = self._head
        self.states[i] = state
        self.actions[i] = action
        self.rewards_capture[i] = reward_capture
        self.rewards_obstacle[i] = reward_obstacle
        self.next_states[i] = next_state
        self.terminals[i] = 1.0 if terminal else 0.0
        self._head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def add_many(self, record: "EpisodeRecord") -> None:
        for k in range(len(record.rewards_capture)):
            self.add(
                record.states[k],
                record.actions[k],
                record.rewards_capture[k],
                record.rewards_obstacle[k],
                record.next_states[k],
                record.terminals[k],
            )

    def clear(self) -> None:
        self.size = 0
        self._head = 0

    def gather(self, idx: np.ndarray) -> dict:
        return {
            "state": self.states[idx],
            "action": self.actions[idx],
            "reward_capture": self.rewards_capture[idx],
            "reward_obstacle": self.rewards_obstacle[idx],
            "next_state": self.next_states[idx],
            "terminal": self.terminals[idx],
        }

    def sample(self, rng: np.random.Generator, n: int) -> dict:
        if n > self.size:
            raise InsufficientData(f"need {n} transitions, have {self.size}")
        idx = rng.choice(self.size, size=n, replace=False)
        return self.gather(idx)


@dataclasses.dataclass
class EpisodeRecord:
    """One finished episode, kept whole for ranking and transfer."""

    states: np.ndarray
    actions: np.ndarray
    rewards_capture: np.ndarray
    rewards_obstacle: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    success: bool
    episode_return: float


def mix_fraction(psi: float, lambda_max: float) -> float:
    """Priority mix schedule against the rolling success rate.

    Full mixing while success is rare, a linear ramp down across the
    middle band, and none once the policy succeeds most of the time.
    Continuous at both knees.
    """
    if psi < 0.4:
        return lambda_max
    if psi <= 0.8:
        return 2.5 * lambda_max * (0.8 - psi)
    return 0.0


class PerState:
    """Success-ranked prioritized replay around a uniform ring.

    Every transition enters the main ring immediately.  Whole episodes
    accumulate in a window; each `interval` episodes the priority ring is
    rebuilt from the best half of the window (success flag first, then
    return, stable order) and the mix fraction is rescheduled from the
    window's success rate.  Sampling then draws floor(lambda * n) from
    the priority ring, topping up from the main ring and reporting any
    priority shortfall.
    """

    def __init__(
        self,
        capacity: int,
        state_dim: int,
        action_dim: int,
        priority_capacity: int | None = None,
        interval: int = 20,
        lambda_max: float = 0.5,
        enabled: bool = True,
    ):
        self.main = ReplayRing(capacity, state_dim, action_dim)
        self.priority = ReplayRing(
            priority_capacity or capacity, state_dim, action_dim
        )
        self.interval = int(interval)
        self.lambda_max = float(lambda_max)
        self.enabled = bool(enabled)
        self.mix = lambda_max if enabled else 0.0
        self.psi = 0.0
        self._window: list[EpisodeRecord] = []
        self.episodes_seen = 0

    def add_transition(self, *args) -> None:
        self.main.add(*args)

    def finish_episode(self, record: EpisodeRecord) -> dict | None:
        """Register a finished episode; returns interval stats when due."""
        self._window.append(record)
        self.episodes_seen += 1
        if len(self._window) < self.interval:
            return None
        window = self._window
        self._window = []
        self.psi = sum(1.0 for r in window if r.success) / len(window)
        if self.enabled:
            self.mix = mix_fraction(self.psi, self.lambda_max)
        keep = math.ceil(self.interval / 2)
        ranked = sorted(
            window,
            key=lambda r: (1 if r.success else 0, r.episode_return),
            reverse=True,
        )
        transferred = 0
        for record in ranked[:keep]:
            self.priority.add_many(record)
            transferred += len(record.rewards_capture)
        return {
            "episodes": self.episodes_seen,
            "success_rate": self.psi,
            "mix": self.mix,
            "transferred": transferred,
            "priority_size": len(self.priority),
        }

    def sample(self, rng: np.random.Generator, n: int) -> tuple[dict, int]:
        """Mixed batch plus the priority shortfall actually incurred."""
        if n > len(self.main):
            raise InsufficientData(
                f"need {n} transitions, have {len(self.main)}"
            )
        want = int(self.mix * n) if self.enabled else 0
        take = min(want, len(self.priority))
        shortfall = want - take
        parts = []
        if take:
            idx = rng.choice(len(self.priority), size=take, replace=False)
            parts.append(self.priority.gather(idx))
        idx = rng.choice(len(self.main), size=n - take, replace=False)
        parts.append(self.main.gather(idx))
        if len(parts) == 1:
            return parts[0], shortfall
        batch = {
            k: np.concatenate([p[k] for p in parts], axis=0) for k in parts[0]
        }
        return batch, shortfall


# ---------------------------------------------------------------------------
# critics


class CriticPair:
    """Twin critics with their target copies over one reward channel."""

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        hidden,
        lr: float,
        rng: np.random.Generator,
    ):
        sizes = [state_dim + action_dim, *hidden, 1]
        self.q1 = Mlp.create(sizes, rng)
        self.q2 = Mlp.create(sizes, rng)
        self.t1 = self.q1.copy()
        self.t2 = self.q2.copy()
        self.opt1 = Adam(self.q1.parameters(), lr)
        self.opt2 = Adam(self.q2.parameters(), lr)
        self.state_dim = state_dim
        self.frozen = False

    def target_min(self, x: np.ndarray) -> np.ndarray:
        return np.minimum(self.t1.forward(x), self.t2.forward(x))

    def state(self, prefix: str) -> dict:
        out = {}
        out.update(self.q1.state(f"{prefix}q1_"))
        out.update(self.q2.state(f"{prefix}q2_"))
        out.update(self.t1.state(f"{prefix}t1_"))
        out.update(self.t2.state(f"{prefix}t2_"))
        return out

    def load_state(self, arrays: dict, prefix: str) -> None:
        self.q1.load_state(arrays, f"{prefix}q1_")
        self.q2.load_state(arrays, f"{prefix}q2_")
        self.t1.load_state(arrays, f"{prefix}t1_")
        self.t2.load_state(arrays, f"{prefix}t2_")


# ---------------------------------------------------------------------------
# agent


@dataclasses.dataclass(frozen=True)
class AgentConfig:
    """Shapes, bounds and learning constants for the agent."""

    state_dim: int
    action_dim: int
    action_bounds: np.ndarray
    capture_state_dim: int | None = None
    hidden: tuple = (128, 128)
    capture_hidden: tuple | None = None
    obstacle_hidden: tuple | None = None
    gamma: float = 0.98
    tau: float = 0.005
    lr_actor: float = 1e-4
    lr_critic: float = 1e-3
    policy_delay: int = 2
    explore_noise: float = 0.1
    smooth_noise: float = 0.2
    smooth_clip: float = 0.5
    alpha_capture: float = 1.0
    alpha_obstacle: float = 0.0
    obstacle_pair: bool = False

    def resolved_capture_dim(self) -> int:
        return (
            self.capture_state_dim
            if self.capture_state_dim is not None
            else self.state_dim
        )


class Td3Agent:
    """Delayed-policy twin-critic learner over the split reward channels."""

    def __init__(self, config: AgentConfig, rng: np.random.Generator):
        bounds = np.asarray(config.action_bounds, dtype=float)
        if bounds.shape != (config.action_dim,):
            raise DimensionMismatch(
                f"action_bounds shape {bounds.shape} != ({config.action_dim},)"
            )
        self.config = config
        self.bounds = bounds
        self.actor = Mlp.create(
            [config.state_dim, *config.hidden, config.action_dim],
            rng,
            output="bounded",
            output_scale=bounds,
            final_scale=0.1,
        )
        self.actor_target = self.actor.copy()
        self.actor_opt = Adam(self.actor.parameters(), config.lr_actor)
        cap_dim = config.resolved_capture_dim()
        cap_hidden = config.capture_hidden or config.hidden
        obs_hidden = config.obstacle_hidden or config.hidden
        self.capture_pair = CriticPair(
            cap_dim, config.action_dim, cap_hidden, config.lr_critic, rng
        )
        self.obstacle_pair = (
            CriticPair(
                config.state_dim,
                config.action_dim,
                obs_hidden,
                config.lr_critic,
                rng,
            )
            if config.obstacle_pair
            else None
        )
        self.updates = 0
        self.capture_checkpoint_sha = None

    # -- acting ----------------------------------------------------------

    def act(
        self,
        state: np.ndarray,
        rng: np.random.Generator | None = None,
        explore: bool = False,
    ) -> np.ndarray:
        action = self.actor.forward(state)
        if explore:
            if rng is None:
                raise ValueError("exploration requires a generator")
            action = action + rng.normal(size=action.shape) * (
                self.config.explore_noise * self.bounds
            )
        return np.clip(action, -self.bounds, self.bounds)

    # -- learning --------------------------------------------------------

    def _smoothed_next_actions(self, next_states, rng):
        raw = self.actor_target.forward(next_states)
        noise = rng.normal(size=raw.shape) * (self.config.smooth_noise * self.bounds)
        clip = self.config.smooth_clip * self.bounds
        noise = np.clip(noise, -clip, clip)
        return np.clip(raw + noise, -self.bounds, self.bounds)

    def _pair_inputs(self, pair, states, actions):
        return np.concatenate([states[:, : pair.state_dim], actions], axis=1)

    def _critic_update(self, pair, batch, rewards, next_actions) -> float:
        x_next = self._pair_inputs(pair, batch["next_state"], next_actions)
        bootstrap = pair.target_min(x_next)[:, 0]
        y = np.where(
            batch["terminal"] > 0.5,
            rewards,
            rewards + self.config.gamma * bootstrap,
        )[:, None]
        x = self._pair_inputs(pair, batch["state"], batch["action"])
        loss_total = 0.0
        for net, opt in ((pair.q1, pair.opt1), (pair.q2, pair.opt2)):
            q, cache = net.forward_cached(x)
            err = q - y
            loss_total += float(np.mean(err**2))
            grads, _ = net.backward(cache, 2.0 * err / len(err))
            opt.step(net.parameters(), grads)
        return loss_total / 2.0

    def _actor_update(self, batch) -> float:
        states = batch["state"]
        actions, cache = self.actor.forward_cached(states)
        count = len(states)
        action_grad = np.zeros_like(actions)
        objective = 0.0
        pairs = [(self.capture_pair, self.config.alpha_capture)]
        if self.obstacle_pair is not None:
            pairs.append((self.obstacle_pair, self.config.alpha_obstacle))
        for pair, weight in pairs:
            if weight == 0.0:
                continue
            x = self._pair_inputs(pair, states, actions)
            q1, c1 = pair.q1.forward_cached(x)
            q2, c2 = pair.q2.forward_cached(x)
            pick1 = q1 <= q2
            objective += weight * float(np.mean(np.minimum(q1, q2)))
            _, g1 = pair.q1.backward(c1, pick1 / count)
            _, g2 = pair.q2.backward(c2, (~pick1) / count)
            grad_x = g1 + g2
            action_grad += weight * grad_x[:, pair.state_dim :]
        grads, _ = self.actor.backward(cache, -action_grad)
        self.actor_opt.step(self.actor.parameters(), grads)
        return objective

    def train_step(self, batch: dict, rng: np.random.Generator) -> dict:
        """One learning step; the actor and targets move every
        policy_delay-th call."""
        next_actions = self._smoothed_next_actions(batch["next_state"], rng)
        losses = {
            "critic_capture": float("nan"),
            "critic_obstacle": float("nan"),
            "actor_objective": float("nan"),
        }
        if not self.capture_pair.frozen:
            losses["critic_capture"] = self._critic_update(
                self.capture_pair, batch, batch["reward_capture"], next_actions
            )
        if self.obstacle_pair is not None and not self.obstacle_pair.frozen:
            losses["critic_obstacle"] = self._critic_update(
                self.obstacle_pair, batch, batch["reward_obstacle"], next_actions
            )
        self.updates += 1
        if self.updates % self.config.policy_delay == 0:
            losses["actor_objective"] = self._actor_update(batch)
            soft_update(self.actor_target, self.actor, self.config.tau)
            for pair in (self.capture_pair, self.obstacle_pair):
                if pair is None or pair.frozen:
                    continue
                soft_update(pair.t1, pair.q1, self.config.tau)
                soft_update(pair.t2, pair.q2, self.config.tau)
        return losses

    # -- persistence -----------------------------------------------------

    def save(self, path, meta: dict | None = None) -> None:
        arrays = {}
        arrays.update(self.actor.state("actor_"))
        arrays.update(self.actor_target.state("actor_t_"))
        arrays.update(self.capture_pair.state("cap_"))
        if self.obstacle_pair is not None:
            arrays.update(self.obstacle_pair.state("obs_"))
        info = {
            "updates": self.updates,
            "state_dim": self.config.state_dim,
            "capture_state_dim": self.config.resolved_capture_dim(),
            "action_dim": self.config.action_dim,
            "hidden": list(self.config.hidden),
            "capture_hidden": list(self.config.capture_hidden or self.config.hidden),
            "obstacle_hidden": list(self.config.obstacle_hidden or self.config.hidden),
            "obstacle_pair": self.obstacle_pair is not None,
        }
        info.update(meta or {})
        save_checkpoint(path, arrays, info)

    def load(self, path) -> dict:
        arrays, meta = load_checkpoint(path)
        self.actor.load_state(arrays, "actor_")
        self.actor_target.load_state(arrays, "actor_t_")
        self.capture_pair.load_state(arrays, "cap_")
        if self.obstacle_pair is not None and meta.get("obstacle_pair"):
            self.obstacle_pair.load_state(arrays, "obs_")
        self.updates = int(meta.get("updates", 0))
        return meta

    def load_capture_pair(self, path) -> str:
        """Adopt a previously trained capture pair and freeze it.

        Returns the checkpoint digest so runs can record exactly which
        weights were imported.
        """
        arrays, _ = load_checkpoint(path)
        self.capture_pair.load_state(arrays, "cap_")
        self.capture_pair.frozen = True
        self.capture_checkpoint_sha = file_sha256(path)
        return self.capture_checkpoint_sha
