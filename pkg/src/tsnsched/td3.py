"""Twin delayed deep deterministic policy gradient on top of :mod:`tsnsched.nn`.

States are either plain vectors or graph observations.  With a graph encoder
the replay buffer keeps the raw graphs, each batch is re-encoded with the
current encoder, and the encoder is trained through the critic loss.  The
actor update sees the encoded states as constants.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import gcn as gcn_mod
from .nn import Adam, ParamSet, backward, forward, init_mlp, mse_loss, predict, soft_update

logger = logging.getLogger(__name__)

METRICS_CSV_HEADER = ("epoch", "total_flows", "requested_flows", "admission_rate",
                      "avg_latency_ns", "jitter_std_ns")


class RetrainRequired(ValueError):
    """A checkpoint does not fit the current topology."""


@dataclass(frozen=True)
class Td3Config:
    gamma: float = 0.99
    tau: float = 0.005
    policy_delay: int = 2
    explore_noise: float = 0.1
    target_noise: float = 0.2
    noise_clip: float = 0.5
    batch_size: int = 100
    buffer_size: int = 1_000_000
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    encoder_lr: float = 1e-3
    hidden: tuple[int, ...] = (256, 256)
    warmup: int = 1000
    grad_steps: int = 1
    twin: bool = True
    train_encoder: bool = True
    omega: int = 128

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.tau <= 1.0):
            raise ValueError("gamma and tau must lie in [0, 1]")
        if self.policy_delay < 1:
            raise ValueError("policy_delay must be at least 1")
        if self.noise_clip <= 0:
            raise ValueError("noise_clip must be positive")
        if self.batch_size < 1 or self.buffer_size < 1:
            raise ValueError("batch_size and buffer_size must be at least 1")
        if self.explore_noise < 0 or self.target_noise < 0:
            raise ValueError("noise scales must be non-negative")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @classmethod
    def ddpg(cls, **overrides) -> "Td3Config":
        """Single critic, no target smoothing, actor updated every step."""
        return cls(**{**overrides, "twin": False, "target_noise": 0.0, "policy_delay": 1})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "Td3Config":
        return cls(**{**data, "hidden": tuple(data.get("hidden", (256, 256)))})


@dataclass
class Transition:
    s: Any
    a: np.ndarray
    r: float
    s2: Any
    done: bool

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        if not (np.all(np.isfinite(self.a)) and math.isfinite(self.r)):
            raise ValueError("transition has non-finite entries")
        if np.any(np.abs(self.a) > 1.0):
            raise ValueError("action outside [-1, 1]")


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = capacity
        self.items: list[Transition] = []
        self.head = 0

    def __len__(self):
        return len(self.items)

    def add(self, tr: Transition) -> None:
        if len(self.items) < self.capacity:
            self.items.append(tr)
        else:
            self.items[self.head] = tr
        self.head = (self.head + 1) % self.capacity

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if not self.items:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(0, len(self.items), size=n)

    def sample(self, n: int, rng: np.random.Generator) -> list[Transition]:
        return [self.items[i] for i in self.sample_indices(n, rng)]


def init_actor(state_dim: int, action_dim: int, hidden: Sequence[int], rng) -> ParamSet:
    sizes = [state_dim, *hidden, action_dim]
    return init_mlp(sizes, ["relu"] * len(hidden) + ["tanh"], rng, final_scale=0.01)


def init_critic(state_dim: int, action_dim: int, hidden: Sequence[int], rng) -> ParamSet:
    sizes = [state_dim + action_dim, *hidden, 1]
    return init_mlp(sizes, ["relu"] * len(hidden) + ["linear"], rng)


def q_value(critic: ParamSet, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    return predict(critic, np.concatenate([np.atleast_2d(s), np.atleast_2d(a)], axis=1))[:, 0]


def select_action(actor: ParamSet, s: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Policy output plus Gaussian exploration noise, clipped to [-1, 1]."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != actor.in_dim:
        raise ValueError(f"state has {s.shape[-1]} entries, actor expects {actor.in_dim}")
    a = predict(actor, s)
    if sigma > 0:
        a = a + rng.normal(0.0, sigma, size=a.shape)
    return np.clip(a, -1.0, 1.0)


def compute_target(critic_targets: Sequence[ParamSet], actor_target: ParamSet, s2: np.ndarray,
                   r: np.ndarray, done: np.ndarray, gamma: float, sigma: float, clip: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Bellman targets with clipped double-Q and target policy smoothing."""
    s2 = np.atleast_2d(np.asarray(s2, dtype=np.float64))
    r = np.asarray(r, dtype=np.float64)
    done = np.asarray(done, dtype=np.float64)
    a2 = predict(actor_target, s2)
    if sigma > 0:
        a2 = a2 + np.clip(rng.normal(0.0, sigma, size=a2.shape), -clip, clip)
    a2 = np.clip(a2, -1.0, 1.0)
    q = np.min(np.stack([q_value(c, s2, a2) for c in critic_targets]), axis=0)
    return r + gamma * (1.0 - done) * q


def update_critics(critics: Sequence[ParamSet], optimizers: Sequence[Adam], s: np.ndarray,
                   a: np.ndarray, y: np.ndarray) -> tuple[list[float], np.ndarray]:
    """One Adam step per critic toward ``y``.

    Returns the losses and the summed loss gradient w.r.t. the states, which
    feeds the encoder.
    """
    x = np.concatenate([s, a], axis=1)
    losses, ds = [], np.zeros_like(s)
    for critic, opt in zip(critics, optimizers):
        q, cache = forward(critic, x)
        loss, dq = mse_loss(q[:, 0], y)
        grads, dx = backward(critic, cache, dq[:, None])
        opt.step(critic.arrays(), grads.arrays())
        critic.touch()
        losses.append(loss)
        ds += dx[:, :s.shape[1]]
    return losses, ds


def actor_gradient(actor: ParamSet, critic: ParamSet, s: np.ndarray) -> tuple[ParamSet, float]:
    """Gradient of ``-mean Q(s, pi(s))`` w.r.t. the actor parameters."""
    a, acache = forward(actor, s)
    q, ccache = forward(critic, np.concatenate([s, a], axis=1))
    _, dx = backward(critic, ccache, -np.ones_like(q) / len(q))
    grads, _ = backward(actor, acache, dx[:, s.shape[1]:])
    return grads, -float(q.mean())


def update_actor_and_targets(actor: ParamSet, critics: Sequence[ParamSet], actor_target: ParamSet,
                             critic_targets: Sequence[ParamSet], actor_opt: Adam, s: np.ndarray,
                             t: int, eta: int, tau: float) -> bool:
    """Delayed policy step followed by soft target updates; no-op unless ``t % eta == 0``."""
    if t < 1:
        raise ValueError("step counter starts at 1")
    if t % eta:
        return False
    grads, _ = actor_gradient(actor, critics[0], s)
    actor_opt.step(actor.arrays(), grads.arrays())
    actor.touch()
    for target, online in zip(critic_targets, critics):
        soft_update(target, online, tau)
    soft_update(actor_target, actor, tau)
    return True


class Td3Agent:
    """Actor, critics, their targets and (optionally) the graph encoder."""

    def __init__(self, action_dim: int, config: Td3Config | None = None, seed: int = 0,
                 state_dim: int = gcn_mod.STATE_DIM, use_encoder: bool = True):
        self.config = config or Td3Config()
        self.action_dim = action_dim
        self.state_dim = state_dim
        rng = np.random.default_rng(seed)
        cfg = self.config
        self.actor = init_actor(state_dim, action_dim, cfg.hidden, rng)
        n_critics = 2 if cfg.twin else 1
        self.critics = [init_critic(state_dim, action_dim, cfg.hidden, rng) for _ in range(n_critics)]
        self.actor_target = self.actor.copy()
        self.critic_targets = [c.copy() for c in self.critics]
        self.encoder = gcn_mod.init_gcn(rng, state_dim) if use_encoder else None
        self.actor_opt = Adam(self.actor.arrays(), cfg.actor_lr)
        self.critic_opts = [Adam(c.arrays(), cfg.critic_lr) for c in self.critics]
        self.encoder_opt = Adam(self.encoder.arrays(), cfg.encoder_lr) if self.encoder else None
        self.buffer = ReplayBuffer(cfg.buffer_size)
        self.rng = np.random.default_rng(seed + 1)
        self.steps = 0       # environment steps taken
        self.updates = 0     # gradient steps, drives the policy delay

    # -- acting --------------------------------------------------------

    def encode(self, obs) -> np.ndarray:
        if self.encoder is None:
            return np.asarray(obs, dtype=np.float64)
        return gcn_mod.encode(obs, self.encoder)

    def act(self, obs, explore: bool = True) -> np.ndarray:
        if explore and self.steps < self.config.warmup:
            return self.rng.uniform(-1.0, 1.0, size=self.action_dim)
        sigma = self.config.explore_noise if explore else 0.0
        return select_action(self.actor, self.encode(obs), sigma, self.rng)

    def observe(self, tr: Transition) -> None:
        self.buffer.add(tr)
        self.steps += 1
        if self.steps >= self.config.warmup and len(self.buffer) >= self.config.batch_size:
            for _ in range(self.config.grad_steps):
                self.train_step()

    # -- learning ------------------------------------------------------

    def _states(self, items):
        if self.encoder is None:
            return np.stack([np.asarray(x, dtype=np.float64) for x in items]), None, None
        batch = gcn_mod.stack_obs(items)
        s, cache = gcn_mod.encode_with_cache(batch, self.encoder)
        return s, batch, cache

    def train_step(self) -> dict:
        cfg = self.config
        batch = self.buffer.sample(cfg.batch_size, self.rng)
        s, graphs, cache = self._states([t.s for t in batch])
        s2, _, _ = self._states([t.s2 for t in batch])
        a = np.stack([t.a for t in batch])
        r = np.array([t.r for t in batch])
        d = np.array([float(t.done) for t in batch])
        y = compute_target(self.critic_targets, self.actor_target, s2, r, d, cfg.gamma,
                           cfg.target_noise, cfg.noise_clip, self.rng)
        losses, ds = update_critics(self.critics, self.critic_opts, s, a, y)
        if self.encoder is not None and cfg.train_encoder:
            g = gcn_mod.encode_backward(graphs, self.encoder, cache, ds)
            self.encoder_opt.step(self.encoder.arrays(), g.arrays())
        self.updates += 1
        actor_updated = update_actor_and_targets(self.actor, self.critics, self.actor_target,
                                                 self.critic_targets, self.actor_opt, s,
                                                 self.updates, cfg.policy_delay, cfg.tau)
        return {"critic_loss": losses, "actor_updated": actor_updated}

    # -- persistence ---------------------------------------------------

    def to_dict(self, topology_signature: dict | None = None) -> dict:
        return {"format": "tsnsched-td3/1", "config": self.config.to_dict(),
                "action_dim": self.action_dim, "state_dim": self.state_dim,
                "topology": topology_signature or {},
                "actor": self.actor.to_dict(), "actor_target": self.actor_target.to_dict(),
                "critics": [c.to_dict() for c in self.critics],
                "critic_targets": [c.to_dict() for c in self.critic_targets],
                "encoder": self.encoder.to_dict() if self.encoder else None,
                "steps": self.steps, "updates": self.updates}

    def save(self, path: str | Path, topology_signature: dict | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_dict(topology_signature)))

    @classmethod
    def load(cls, path: str | Path, topology_signature: dict | None = None,
             action_dim: int | None = None) -> "Td3Agent":
        data = json.loads(Path(path).read_text())
        saved = data.get("topology", {})
        if topology_signature is not None and saved.get("bridges") != topology_signature.get("bridges"):
            raise RetrainRequired(
                f"retrain required: checkpoint was trained on {saved.get('bridges')} bridges, "
                f"topology has {topology_signature.get('bridges')}")
        if action_dim is not None and data["action_dim"] != action_dim:
            raise RetrainRequired(f"retrain required: checkpoint action size {data['action_dim']} != {action_dim}")
        agent = cls(data["action_dim"], Td3Config.from_dict(data["config"]), state_dim=data["state_dim"],
                    use_encoder=data["encoder"] is not None)
        agent.actor = ParamSet.from_dict(data["actor"])
        agent.actor_target = ParamSet.from_dict(data["actor_target"])
        agent.critics = [ParamSet.from_dict(c) for c in data["critics"]]
        agent.critic_targets = [ParamSet.from_dict(c) for c in data["critic_targets"]]
        if data["encoder"] is not None:
            agent.encoder = gcn_mod.GcnParams.from_dict(data["encoder"])
        agent.actor_opt = Adam(agent.actor.arrays(), agent.config.actor_lr)
        agent.critic_opts = [Adam(c.arrays(), agent.config.critic_lr) for c in agent.critics]
        agent.encoder_opt = Adam(agent.encoder.arrays(), agent.config.encoder_lr) if agent.encoder else None
        agent.steps, agent.updates = data["steps"], data["updates"]
        return agent


@dataclass
class EpochMetrics:
    epoch: int
    total_flows: int
    requested_flows: int
    admission_rate: float
    avg_latency_ns: float
    jitter_std_ns: float
    extra: dict = field(default_factory=dict, compare=False)

    def csv_row(self) -> list[str]:
        return [str(self.epoch), str(self.total_flows), str(self.requested_flows),
                f"{self.admission_rate:.6f}", f"{self.avg_latency_ns:.3f}", f"{self.jitter_std_ns:.3f}"]


def metrics_csv(log: Sequence[EpochMetrics]) -> str:
    lines = [",".join(METRICS_CSV_HEADER)] + [",".join(m.csv_row()) for m in log]
    return "\n".join(lines) + "\n"


def run_epoch(env, agent: Td3Agent | None, epoch: int, mode: str = "train",
              rng: np.random.Generator | None = None,
              step_hook: Callable[[dict], None] | None = None) -> EpochMetrics:
    """Play requests until the GCL budget is used up (or the request cap hits).

    ``mode`` is ``train`` (explore and learn), ``greedy`` (noise-free policy,
    no learning) or ``random`` (uniform actions).
    """
    env.reset()
    while True:
        obs = env.graph
        if mode == "random":
            a = rng.uniform(-1.0, 1.0, size=env.action_dim)
        else:
            a = agent.act(obs if agent.encoder is not None else env.state, explore=(mode == "train"))
        _, r, done, info = env.step(a)
        if mode == "train":
            s_obs = obs if agent.encoder is not None else info["prev_state"]
            s2_obs = env.graph if agent.encoder is not None else env.state
            agent.observe(Transition(s_obs, a, r, s2_obs, done))
        if step_hook is not None:
            step_hook(info)
        if done or info.get("truncated"):
            break
    summary = env.epoch_summary()
    return EpochMetrics(epoch, summary["total_flows"], summary["requested_flows"],
                        summary["admission_rate"], summary["avg_latency_ns"], summary["jitter_std_ns"],
                        extra=summary)


def train_loop(env, agent: Td3Agent | None, epochs: int, mode: str = "train", seed: int = 0,
               step_hook: Callable[[dict], None] | None = None,
               epoch_hook: Callable[[EpochMetrics], None] | None = None) -> list[EpochMetrics]:
    """Run ``epochs`` epochs and return the per-epoch metric log."""
    if epochs < 1:
        raise ValueError("epochs must be at least 1")
    if mode not in ("train", "greedy", "random"):
        raise ValueError(f"unknown mode {mode!r}")
    if agent is not None and agent.encoder is not None:
        env.encoder = agent.encoder
    rng = np.random.default_rng(seed)
    log = []
    for epoch in range(1, epochs + 1):
        m = run_epoch(env, agent, epoch, mode, rng, step_hook)
        log.append(m)
        logger.info("epoch %d: %d/%d admitted (%.3f)", epoch, m.extra.get("admitted", 0),
                    m.requested_flows, m.admission_rate)
        if epoch_hook is not None:
            epoch_hook(m)
    return log
