"""Run orchestration: configs, training loops, evaluation and curves.

A run file (YAML) fixes everything about an experiment; training then
fans out over seeds, writing one directory per seed with episode metrics
(CSV), replay interval stats, an episode log (JSONL), checkpoints and a
run summary.  All randomness derives from (seed, stream) pairs, and the
text outputs carry no timestamps, so a rerun with the same config and
seed reproduces every output file byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from pathlib import Path

import numpy as np
import yaml

from . import robot
from .agent import AgentConfig, EpisodeRecord, PerState, Td3Agent
from .env import CaptureEnv, EnvConfig, RewardConfig
from .errors import CheckpointMissing, ConfigInvalid, InsufficientData

SCHEMA_VERSION = 1
CURVE_WINDOW = 20

# offsets defining independent random streams per seed; episode streams
# use the raw episode index, so these start high enough not to collide
STREAM_INIT = 1_000_000
STREAM_WARMUP = 1_000_001
STREAM_NOISE = 1_000_002
STREAM_SAMPLE = 1_000_003
STREAM_SMOOTH = 1_000_004


# ---------------------------------------------------------------------------
# configuration


@dataclasses.dataclass(frozen=True)
class AgentSection:
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


@dataclasses.dataclass(frozen=True)
class ReplaySection:
    capacity: int = 200_000
    priority_capacity: int | None = None
    interval: int = 20
    lambda_max: float = 0.5
    enabled: bool = True


@dataclasses.dataclass(frozen=True)
class TrainingSection:
    episodes: int = 400
    batch_size: int = 64
    warmup_transitions: int = 2000
    updates_per_step: int = 1
    seeds: tuple = (0,)


@dataclasses.dataclass(frozen=True)
class EvalSection:
    episodes: int = 50
    seed_base: int = 777


@dataclasses.dataclass(frozen=True)
class RunConfig:
    run_name: str
    task: int
    model: str
    env: EnvConfig
    agent: AgentSection
    replay: ReplaySection
    training: TrainingSection
    eval: EvalSection
    capture_checkpoint: str | None = None

    def validate(self) -> None:
        self.env.validate()
        if self.training.episodes < 1 or self.training.batch_size < 1:
            raise ConfigInvalid("training.episodes and batch_size must be positive")
        if self.training.updates_per_step < 1:
            raise ConfigInvalid("training.updates_per_step must be at least 1")
        if not self.training.seeds:
            raise ConfigInvalid("training.seeds must not be empty")
        if self.replay.interval < 1:
            raise ConfigInvalid("replay.interval must be at least 1")
        if (
            self.replay.priority_capacity is not None
            and self.replay.priority_capacity < 1
        ):
            raise ConfigInvalid("replay.priority_capacity must be positive")
        if not 0.0 <= self.replay.lambda_max <= 1.0:
            raise ConfigInvalid("replay.lambda_max must lie in [0, 1]")
        if self.agent.gamma <= 0.0 or self.agent.gamma >= 1.0:
            raise ConfigInvalid("agent.gamma must lie in (0, 1)")
        if self.agent.policy_delay < 1:
            raise ConfigInvalid("agent.policy_delay must be at least 1")
        if self.task == 2 and abs(
            self.agent.alpha_capture + self.agent.alpha_obstacle - 1.0
        ) > 1e-9:
            raise ConfigInvalid("critic weights must sum to one in task 2")

    def resolve_model(self) -> robot.ManipulatorModel:
        path = Path(self.model)
        if path.suffix in (".yaml", ".yml") and path.exists():
            return robot.load_model(path)
        return robot.load_model(robot.builtin_model_path(self.model))


def _optional_tuple(value):
    return None if value is None else tuple(value)


def _build_section(cls, raw: dict, name: str, coerce=None):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigInvalid(f"section {name} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigInvalid(f"unknown key {key!r} in section {name}")
        if coerce and key in coerce:
            value = coerce[key](value)
        kwargs[key] = value
    return cls(**kwargs)


def load_run_config(path) -> RunConfig:
    """Parse and screen a YAML run file."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigInvalid(f"run file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"run file {path} is not valid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigInvalid(f"run file {path} must contain a mapping")
    version = raw.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigInvalid(
            f"run file {path}: schema_version {version!r}, expected {SCHEMA_VERSION}"
        )
    known = {
        "run_name",
        "task",
        "model",
        "env",
        "agent",
        "replay",
        "training",
        "eval",
        "capture_checkpoint",
    }
    unknown = set(raw) - known
    if unknown:
        raise ConfigInvalid(f"unknown top-level keys: {sorted(unknown)}")
    task = raw.get("task")
    if task not in (1, 2):
        raise ConfigInvalid(f"task must be 1 or 2, got {task!r}")

    env_raw = dict(raw.get("env") or {})
    rewards_raw = env_raw.pop("rewards", None)
    rewards = _build_section(RewardConfig, rewards_raw, "env.rewards")
    env_cfg = _build_section(
        EnvConfig,
        {**env_raw, "task": task},
        "env",
        coerce={
            "target_distance": tuple,
            "obstacle_half_extents": tuple,
            "obstacle_fraction": tuple,
        },
    )
    env_cfg = dataclasses.replace(env_cfg, rewards=rewards)

    config = RunConfig(
        run_name=raw.get("run_name", path.stem),
        task=task,
        model=raw.get("model", "iiwa_free_floating"),
        env=env_cfg,
        agent=_build_section(
            AgentSection,
            raw.get("agent"),
            "agent",
            coerce={
                "hidden": tuple,
                "capture_hidden": _optional_tuple,
                "obstacle_hidden": _optional_tuple,
            },
        ),
        replay=_build_section(ReplaySection, raw.get("replay"), "replay"),
        training=_build_section(
            TrainingSection, raw.get("training"), "training", coerce={"seeds": tuple}
        ),
        eval=_build_section(EvalSection, raw.get("eval"), "eval"),
        capture_checkpoint=raw.get("capture_checkpoint"),
    )
    config.validate()
    return config


def default_output_root() -> Path:
    return Path(os.environ.get("SPACEARM_OUTPUT_ROOT", "runs"))


def builtin_run_config_path(name: str) -> Path:
    path = Path(__file__).parent / "data" / f"{name}.yaml"
    if not path.exists():
        raise ConfigInvalid(f"no built-in run config named {name!r}")
    return path


# ---------------------------------------------------------------------------
# formatting helpers


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def _write_csv(path: Path, header: list, rows: list) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _reward_channels(info: dict) -> tuple:
    terms = info["reward_terms"]
    capture = (
        terms.get("distance", 0.0)
        + terms.get("capture", 0.0)
        + terms.get("singular", 0.0)
    )
    obstacle = terms.get("proximity", 0.0) + terms.get("collision", 0.0)
    return capture, obstacle


# ---------------------------------------------------------------------------
# training


def _make_agent(config: RunConfig, env: CaptureEnv, rng) -> Td3Agent:
    section = config.agent
    agent_cfg = AgentConfig(
        state_dim=env.state_dim,
        action_dim=env.action_dim,
        action_bounds=env.config.action_bounds,
        capture_state_dim=env.capture_state_dim if config.task == 2 else None,
        hidden=tuple(section.hidden),
        capture_hidden=_optional_tuple(section.capture_hidden),
        obstacle_hidden=_optional_tuple(section.obstacle_hidden),
        gamma=section.gamma,
        tau=section.tau,
        lr_actor=section.lr_actor,
        lr_critic=section.lr_critic,
        policy_delay=section.policy_delay,
        explore_noise=section.explore_noise,
        smooth_noise=section.smooth_noise,
        smooth_clip=section.smooth_clip,
        alpha_capture=section.alpha_capture,
        alpha_obstacle=section.alpha_obstacle,
        obstacle_pair=config.task == 2,
    )
    return Td3Agent(agent_cfg, rng)


def run_seed(config: RunConfig, seed: int, seed_dir: Path) -> dict:
    """Train one seed to completion, writing every artifact under seed_dir."""
    seed_dir.mkdir(parents=True, exist_ok=True)
    model = config.resolve_model()
    env = CaptureEnv(model, config.env)
    init_rng = np.random.default_rng([seed, STREAM_INIT])
    warmup_rng = np.random.default_rng([seed, STREAM_WARMUP])
    noise_rng = np.random.default_rng([seed, STREAM_NOISE])
    sample_rng = np.random.default_rng([seed, STREAM_SAMPLE])
    smooth_rng = np.random.default_rng([seed, STREAM_SMOOTH])

    agent = _make_agent(config, env, init_rng)
    capture_sha = None
    if config.task == 2:
        if not config.capture_checkpoint:
            raise CheckpointMissing(
                "task 2 requires capture_checkpoint pointing at a task 1 run"
            )
        capture_sha = agent.load_capture_pair(config.capture_checkpoint)

    per = PerState(
        capacity=config.replay.capacity,
        state_dim=env.state_dim,
        action_dim=env.action_dim,
        priority_capacity=config.replay.priority_capacity,
        interval=config.replay.interval,
        lambda_max=config.replay.lambda_max,
        enabled=config.replay.enabled,
    )

    bounds = env.config.action_bounds
    warmup = config.training.warmup_transitions
    batch_size = config.training.batch_size
    transitions = 0
    metric_rows = []

    metrics_file = open(seed_dir / "metrics.csv", "w")
    intervals_file = open(seed_dir / "intervals.csv", "w")
    episode_file = open(seed_dir / "episodes.jsonl", "w")
    metrics_file.write(
        "episode,steps,return,success,event,final_distance,"
        "min_manipulability,critic_capture,critic_obstacle,"
        "actor_objective,shortfall\n"
    )
    intervals_file.write("episodes,success_rate,mix,transferred,priority_size\n")

    for ep in range(config.training.episodes):
        state = env.reset(np.random.default_rng([seed, ep]))
        ep_states, ep_actions = [], []
        ep_rc, ep_ro, ep_next, ep_term = [], [], [], []
        ep_return = 0.0
        success = False
        min_lambda = math.inf
        shortfall_total = 0
        last_losses = {
            "critic_capture": float("nan"),
            "critic_obstacle": float("nan"),
            "actor_objective": float("nan"),
        }
        steps = 0
        final_distance = float("nan")
        final_event = "none"
        while True:
            if transitions < warmup:
                action = warmup_rng.uniform(-bounds, bounds)
            else:
                action = agent.act(state, noise_rng, explore=True)
            out = env.step(action)
            r_cap, r_obs = _reward_channels(out.info)
            per.add_transition(
                state, action, r_cap, r_obs, out.state, out.terminal
            )
            ep_states.append(state)
            ep_actions.append(action)
            ep_rc.append(r_cap)
            ep_ro.append(r_obs)
            ep_next.append(out.state)
            ep_term.append(1.0 if out.terminal else 0.0)
            transitions += 1
            steps += 1
            ep_return += out.reward
            success = success or out.event == "capture"
            min_lambda = min(min_lambda, out.info["manipulability"])
            final_distance = out.info["distance"]
            final_event = out.event
            if transitions >= warmup and len(per.main) >= batch_size:
                for _ in range(config.training.updates_per_step):
                    batch, shortfall = per.sample(sample_rng, batch_size)
                    shortfall_total += shortfall
                    losses = agent.train_step(batch, smooth_rng)
                    for key, value in losses.items():
                        if not math.isnan(value):
                            last_losses[key] = value
            state = out.state
            if out.terminal or out.truncated:
                break
        record = EpisodeRecord(
            states=np.array(ep_states),
            actions=np.array(ep_actions),
            rewards_capture=np.array(ep_rc),
            rewards_obstacle=np.array(ep_ro),
            next_states=np.array(ep_next),
            terminals=np.array(ep_term),
            success=success,
            episode_return=ep_return,
        )
        stats = per.finish_episode(record)
        if stats is not None:
            row = [
                stats["episodes"],
                stats["success_rate"],
                stats["mix"],
                stats["transferred"],
                stats["priority_size"],
            ]
            intervals_file.write(",".join(_fmt(v) for v in row) + "\n")
            intervals_file.flush()
        row = [
            ep,
            steps,
            ep_return,
            success,
            final_event,
            final_distance,
            min_lambda,
            last_losses["critic_capture"],
            last_losses["critic_obstacle"],
            last_losses["actor_objective"],
            shortfall_total,
        ]
        metric_rows.append(row)
        metrics_file.write(",".join(_fmt(v) for v in row) + "\n")
        metrics_file.flush()
        episode_file.write(
            json.dumps(
                {
                    "episode": ep,
                    "steps": steps,
                    "return": ep_return,
                    "success": success,
                    "event": final_event,
                },
                sort_keys=True,
            )
            + "\n"
        )
        episode_file.flush()

    metrics_file.close()
    intervals_file.close()
    episode_file.close()

    checkpoint = seed_dir / "checkpoints" / "agent_final.npz"
    agent.save(checkpoint, {"seed": seed, "episodes": config.training.episodes})

    tail = metric_rows[-50:]
    summary = {
        "run_name": config.run_name,
        "task": config.task,
        "seed": seed,
        "episodes": config.training.episodes,
        "transitions": transitions,
        "updates": agent.updates,
        "success_rate_final_50": sum(1 for r in tail if r[3]) / len(tail),
        "return_mean_final_50": sum(r[2] for r in tail) / len(tail),
        "checkpoint": "checkpoints/agent_final.npz",
        "capture_checkpoint_sha256": capture_sha,
        "schema_version": SCHEMA_VERSION,
    }
    (seed_dir / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n"
    )
    return summary


def run_training(config: RunConfig, output_root: Path | None = None) -> list:
    """Train every configured seed; returns the per-seed directories."""
    root = Path(output_root) if output_root else default_output_root()
    run_dir = root / config.run_name
    dirs = []
    for seed in config.training.seeds:
        seed_dir = run_dir / f"seed_{seed}"
        run_seed(config, seed, seed_dir)
        dirs.append(seed_dir)
    return dirs


# ---------------------------------------------------------------------------
# evaluation


def run_eval(
    config: RunConfig,
    checkpoint,
    episodes: int | None = None,
    seed_base: int | None = None,
) -> dict:
    """Greedy rollouts from a checkpoint; reports the success rate."""
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise CheckpointMissing(f"checkpoint not found: {checkpoint}")
    episodes = episodes if episodes is not None else config.eval.episodes
    seed_base = seed_base if seed_base is not None else config.eval.seed_base
    model = config.resolve_model()
    env = CaptureEnv(model, config.env)
    agent = _make_agent(config, env, np.random.default_rng([seed_base, STREAM_INIT]))
    agent.load(checkpoint)
    records = []
    for ep in range(episodes):
        state = env.reset(np.random.default_rng([seed_base, ep]))
        ep_return = 0.0
        success = False
        steps = 0
        while True:
            out = env.step(agent.act(state))
            ep_return += out.reward
            success = success or out.event == "capture"
            steps += 1
            state = out.state
            if out.terminal or out.truncated:
                break
        records.append({"episode": ep, "steps": steps, "return": ep_return,
                        "success": success, "event": out.event})
    rate = sum(1 for r in records if r["success"]) / len(records)
    return {
        "episodes": episodes,
        "success_rate": rate,
        "return_mean": sum(r["return"] for r in records) / len(records),
        "per_episode": records,
    }


# ---------------------------------------------------------------------------
# curves


def _read_csv(path: Path) -> tuple:
    lines = path.read_text().strip().split("\n")
    header = lines[0].split(",")
    rows = [line.split(",") for line in lines[1:]]
    return header, rows


def trailing_mean(values: np.ndarray, window: int) -> np.ndarray:
    """Mean over the trailing window, truncated at the start."""
    out = np.empty(len(values))
    csum = np.concatenate([[0.0], np.cumsum(values)])
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        out[i] = (csum[i + 1] - csum[lo]) / (i + 1 - lo)
    return out


def emit_curves(run_dirs, out_path, window: int = CURVE_WINDOW) -> None:
    """Average smoothed learning curves across seed directories.

    Writes per-episode smoothed return and success to out_path; when all
    directories carry interval files of equal length, the per-interval
    success rates are averaged into a sibling *_intervals.csv.
    """
    run_dirs = [Path(d) for d in run_dirs]
    if not run_dirs:
        raise ConfigInvalid("no run directories given")
    returns, successes = [], []
    for d in run_dirs:
        header, rows = _read_csv(d / "metrics.csv")
        col = {name: k for k, name in enumerate(header)}
        returns.append(np.array([float(r[col["return"]]) for r in rows]))
        successes.append(np.array([float(r[col["success"]]) for r in rows]))
    length = min(len(r) for r in returns)
    ret = np.mean([trailing_mean(r[:length], window) for r in returns], axis=0)
    suc = np.mean([trailing_mean(s[:length], window) for s in successes], axis=0)
    out_path = Path(out_path)
    _write_csv(
        out_path,
        ["episode", "return_smoothed", "success_smoothed"],
        [[i, float(ret[i]), float(suc[i])] for i in range(length)],
    )
    interval_files = [d / "intervals.csv" for d in run_dirs]
    if all(f.exists() for f in interval_files):
        columns = []
        for f in interval_files:
            _, rows = _read_csv(f)
            if rows:
                columns.append(np.array([float(r[1]) for r in rows]))
        if columns and len({len(c) for c in columns}) == 1:
            mean_rate = np.mean(columns, axis=0)
            episodes_col = [
                int(r[0]) for r in _read_csv(interval_files[0])[1]
            ]
            _write_csv(
                out_path.with_name(out_path.stem + "_intervals.csv"),
                ["episodes", "success_rate_mean"],
                [[e, float(v)] for e, v in zip(episodes_col, mean_rate)],
            )
