"""Clipped-surrogate PPO with GAE for the graph policy.

Determinism holds for a single worker: the trainer owns three named random
streams (``init``, ``rollout``, ``minibatch``) derived from the run seed and
checkpoints their exact states, so a resumed run continues bit-identically.
"""
from __future__ import annotations

import csv
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor, minimum
from .env import GridEnv, Observation
from .policy import (CheckpointError, GcapcnPolicy, entropy_tensor, load_policy,
                     log_prob_tensor, sample_action, save_policy)
from .seeding import stream

log = logging.getLogger(__name__)

CURVE_HEADER = ("step", "episode", "reward", "moving_avg")


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 100_000
    rollout_length: int = 2048
    minibatch_size: int = 256
    epochs: int = 10
    clip_eps: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    lr: float = 3e-4
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    max_grad_norm: float = 0.5
    seed: int = 0
    checkpoint_interval: int = 0   # env steps between checkpoints; 0 = only at the end
    moving_avg_window: int = 100

    def __post_init__(self):
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if not (0 <= self.gamma <= 1 and 0 <= self.gae_lambda <= 1):
            raise ValueError("gamma and gae_lambda must lie in [0, 1]")
        for name in ("total_steps", "rollout_length", "minibatch_size", "epochs", "moving_avg_window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


# ---------------------------------------------------------------- advantages


def gae(rewards, values, dones, gamma: float, lam: float):
    """Generalized advantage estimates.

    ``values`` has one more entry than ``rewards``: the bootstrap value of the
    state after the last transition.  Returns ``(advantages, returns)``.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    d = np.asarray(dones, dtype=float)
    if len(v) != len(r) + 1 or len(d) != len(r):
        raise ValueError("need len(values) == len(rewards) + 1 == len(dones) + 1")
    adv = np.zeros_like(r)
    last = 0.0
    for t in range(len(r) - 1, -1, -1):
        nonterminal = 1.0 - d[t]
        delta = r[t] + gamma * v[t + 1] * nonterminal - v[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv, adv + v[:-1]


def surrogate(ratio: np.ndarray, adv: np.ndarray, eps: float) -> np.ndarray:
    """Per-sample clipped objective ``min(rho*A, clip(rho, 1-eps, 1+eps)*A)``."""
    return np.minimum(ratio * adv, np.clip(ratio, 1 - eps, 1 + eps) * adv)


# ---------------------------------------------------------------- rollouts


@dataclass
class RolloutBuffer:
    obs: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    values: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    last_value: float = 0.0
    finished: list = field(default_factory=list)  # (global step, episode return)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self):
        return len(self.rewards)

    def compute_advantages(self, gamma: float, lam: float) -> None:
        values = np.append(np.asarray(self.values, float), self.last_value)
        self.advantages, self.returns = gae(self.rewards, values, self.dones, gamma, lam)
        if not np.all(np.isfinite(self.advantages)):
            raise NonFiniteLossError("non-finite advantages")


@dataclass
class EpisodeCursor:
    """Where the rollout stream is between calls (kept across updates)."""
    obs: Observation | None = None
    scenario: int = -1
    ep_return: float = 0.0
    steps: int = 0  # global env steps taken so far


def _value_and_probs(policy: GcapcnPolicy, obs: Observation):
    out = policy.act(obs, obs.L)
    return float(out.value), out.probs


def collect_rollouts(env: GridEnv, policy: GcapcnPolicy, length: int, rng: np.random.Generator,
                     scenarios, cursor: EpisodeCursor | None = None) -> RolloutBuffer:
    """Run ``length`` environment steps with sampled actions.

    A new scenario is drawn uniformly from ``scenarios`` on every reset.  The
    cursor carries an unfinished episode over to the next call.
    """
    cursor = EpisodeCursor() if cursor is None else cursor
    buf = RolloutBuffer()
    for _ in range(length):
        if cursor.obs is None:
            cursor.scenario = int(rng.integers(len(scenarios)))
            cursor.obs = env.reset(scenarios[cursor.scenario])
            cursor.ep_return = 0.0
        obs = cursor.obs
        value, probs = _value_and_probs(policy, obs)
        action, logp = sample_action(probs, rng, obs.action_mask)
        try:
            nxt, reward, done, _ = env.step(action)
        except Exception as exc:
            raise RuntimeError(f"environment failed on scenario #{cursor.scenario} "
                               f"(outage {env.outage}) at t={env.t}") from exc
        buf.obs.append(obs)
        buf.actions.append(action)
        buf.log_probs.append(logp)
        buf.rewards.append(reward)
        buf.values.append(value)
        buf.dones.append(done)
        cursor.ep_return += reward
        cursor.steps += 1
        if done:
            buf.finished.append((cursor.steps, cursor.ep_return))
            cursor.obs = None
        else:
            cursor.obs = nxt
    buf.last_value = 0.0 if cursor.obs is None else _value_and_probs(policy, cursor.obs)[0]
    return buf


# ---------------------------------------------------------------- optimizer


class Adam:
    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.t = 0
        self.m = OrderedDict((k, np.zeros_like(v.data)) for k, v in params.items())
        self.v = OrderedDict((k, np.zeros_like(v.data)) for k, v in params.items())

    def step(self, grads) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def tensors(self):
        out = OrderedDict()
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_tensors(self, tensors, t: int) -> None:
        for k in self.params:
            self.m[k] = np.array(tensors[f"adam.m.{k}"])
            self.v[k] = np.array(tensors[f"adam.v.{k}"])
        self.t = t


# ---------------------------------------------------------------- update


def _stack(obs_list, idx):
    sel = [obs_list[i] for i in idx]
    return (np.stack([o.V for o in sel]), np.stack([o.L for o in sel]),
            np.array([o.e_supp for o in sel]), np.array([o.v_viol for o in sel]),
            np.stack([o.flows for o in sel]), np.stack([o.action_mask for o in sel]))


def ppo_loss(policy: GcapcnPolicy, batch, actions, old_logp, adv, returns, cfg: TrainConfig):
    """Scalar PPO loss tensor plus detached diagnostics."""
    V, L, e, vv, flows, mask = batch
    probs, value, _ = policy.forward(V, L, e, vv, flows, mask)
    logp = log_prob_tensor(probs, actions, mask)
    ratio = (logp - old_logp).exp()
    surr = minimum(ratio * adv, ratio.clamp(1 - cfg.clip_eps, 1 + cfg.clip_eps) * adv)
    policy_loss = -surr.mean()
    value_loss = ((value - returns) ** 2).mean()
    entropy = entropy_tensor(probs, mask).mean()
    loss = policy_loss + value_loss * cfg.value_coef - entropy * cfg.entropy_coef
    stats = {
        "ratio": float(ratio.data.mean()),
        "clip_frac": float(np.mean(np.abs(ratio.data - 1) > cfg.clip_eps)),
        "policy_loss": policy_loss.item(),
        "value_loss": value_loss.item(),
        "entropy": entropy.item(),
        "loss": loss.item(),
    }
    return loss, stats


def ppo_update(buffer: RolloutBuffer, policy: GcapcnPolicy, cfg: TrainConfig,
               optimizer: Adam, rng: np.random.Generator) -> dict:
    n = len(buffer)
    adv = buffer.advantages
    adv = (adv - adv.mean()) / max(adv.std(), 1e-8)
    actions = np.array(buffer.actions, dtype=float)
    old_logp = np.array(buffer.log_probs)
    returns = buffer.returns
    totals: dict[str, float] = {}
    batches = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = perm[start:start + cfg.minibatch_size]
            loss, stats = ppo_loss(policy, _stack(buffer.obs, idx), actions[idx], old_logp[idx],
                                   adv[idx], returns[idx], cfg)
            if not math.isfinite(stats["loss"]):
                raise NonFiniteLossError(f"non-finite PPO loss: {stats}")
            policy.params.zero_grad()
            loss.backward()
            grads = OrderedDict((k, p.grad if p.grad is not None else np.zeros_like(p.data))
                                for k, p in policy.params.items())
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if cfg.max_grad_norm and norm > cfg.max_grad_norm:
                scale = cfg.max_grad_norm / norm
                grads = OrderedDict((k, g * scale) for k, g in grads.items())
            optimizer.step(grads)
            for k, v in stats.items():
                totals[k] = totals.get(k, 0.0) + v
            batches += 1
    return {k: v / batches for k, v in totals.items()}


# ---------------------------------------------------------------- trainer


def moving_average(values, window: int) -> np.ndarray:
    """Trailing mean over up to ``window`` previous entries (inclusive)."""
    x = np.asarray(values, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def write_curve(path, episodes, window: int) -> None:
    """``episodes`` is a list of (step, episode return)."""
    ma = moving_average([r for _, r in episodes], window)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for k, ((step, reward), avg) in enumerate(zip(episodes, ma), start=1):
            w.writerow([step, k, repr(float(reward)), repr(float(avg))])


def _rng_state(rng):
    return rng.bit_generator.state


def _set_rng_state(rng, state):
    rng.bit_generator.state = state


class PPOTrainer:
    """Alternates rollouts and updates; owns all state needed to resume."""

    def __init__(self, env: GridEnv, policy: GcapcnPolicy, cfg: TrainConfig, scenarios,
                 meta: dict | None = None):
        if not scenarios:
            raise ValueError("training needs at least one scenario")
        self.env, self.policy, self.cfg = env, policy, cfg
        self.scenarios = list(scenarios)
        self.meta = dict(meta or {})
        self.rollout_rng = stream(cfg.seed, "rollout")
        self.minibatch_rng = stream(cfg.seed, "minibatch")
        self.optimizer = Adam(policy.params, lr=cfg.lr)
        self.cursor = EpisodeCursor()
        self.episodes: list[tuple[int, float]] = []
        self.updates = 0
        self.last_metrics: dict = {}

    @property
    def steps(self) -> int:
        return self.cursor.steps

    def train_until(self, total_steps: int, checkpoint_path=None, curve_path=None) -> None:
        interval = self.cfg.checkpoint_interval
        while self.steps < total_steps:
            length = min(self.cfg.rollout_length, total_steps - self.steps)
            before = self.steps
            buf = collect_rollouts(self.env, self.policy, length, self.rollout_rng,
                                   self.scenarios, self.cursor)
            self.episodes.extend(buf.finished)
            buf.compute_advantages(self.cfg.gamma, self.cfg.gae_lambda)
            self.last_metrics = ppo_update(buf, self.policy, self.cfg, self.optimizer, self.minibatch_rng)
            self.updates += 1
            log.info("update %d  steps %d  episodes %d  %s", self.updates, self.steps,
                     len(self.episodes), {k: round(v, 4) for k, v in self.last_metrics.items()})
            if checkpoint_path and interval and self.steps // interval > before // interval:
                self.save(checkpoint_path)
                if curve_path:
                    write_curve(curve_path, self.episodes, self.cfg.moving_avg_window)
        if checkpoint_path:
            self.save(checkpoint_path)
        if curve_path:
            write_curve(curve_path, self.episodes, self.cfg.moving_avg_window)

    def train(self, checkpoint_path=None, curve_path=None) -> None:
        self.train_until(self.cfg.total_steps, checkpoint_path, curve_path)

    # -- checkpoints ----------------------------------------------------------

    def state(self) -> dict:
        env_state = self.env.state_dict() if self.cursor.obs is not None else None
        return {
            "meta": self.meta,
            "train_config": asdict(self.cfg),
            "env_config": asdict(self.env.cfg),
            "steps": self.steps,
            "updates": self.updates,
            "adam_t": self.optimizer.t,
            "rng": {"rollout": _rng_state(self.rollout_rng),
                    "minibatch": _rng_state(self.minibatch_rng)},
            "cursor": {"scenario": self.cursor.scenario, "ep_return": self.cursor.ep_return,
                       "env": env_state},
            "episodes": [[s, r] for s, r in self.episodes],
        }

    def save(self, path) -> None:
        save_policy(path, self.policy, self.state(), self.optimizer.tensors())

    @classmethod
    def resume(cls, path, env: GridEnv, cfg: TrainConfig, scenarios, meta: dict | None = None):
        """Rebuild a trainer from ``path``; ``meta`` entries must match the stored ones."""
        policy, state, extra = load_policy(path)
        for key, value in (meta or {}).items():
            if state["meta"].get(key) != value:
                raise CheckpointError(f"checkpoint {key} {state['meta'].get(key)!r} != {value!r}")
        if state["env_config"] != asdict(env.cfg):
            raise CheckpointError("checkpoint environment config differs from the current one")
        tr = cls(env, policy, cfg, scenarios, state["meta"])
        tr.optimizer.load_tensors(extra, state["adam_t"])
        _set_rng_state(tr.rollout_rng, state["rng"]["rollout"])
        _set_rng_state(tr.minibatch_rng, state["rng"]["minibatch"])
        tr.updates = state["updates"]
        tr.episodes = [(int(s), float(r)) for s, r in state["episodes"]]
        cur = state["cursor"]
        tr.cursor = EpisodeCursor(None, cur["scenario"], cur["ep_return"], state["steps"])
        if cur["env"] is not None:
            tr.cursor.obs = env.load_state_dict(cur["env"])
        return tr
