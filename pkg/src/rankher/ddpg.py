"""DDPG actor-critic with target networks, Gaussian exploration and input normalization."""

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .nn import Adam, ConfigError, loss_mse, mlp


class TrainingAbort(RuntimeError):
    """Raised when a loss or parameter becomes non-finite."""


@dataclass
class DdpgConfig:
    hidden: tuple = (64, 64, 64)
    gamma: float = 0.98
    tau: float = 0.05
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    batch_size: int = 64
    noise_sigma: float = 0.2
    random_eps: float = 0.3
    action_l2: float = 0.0
    normalize: bool = True
    clip_obs: float = 5.0
    clip_target: bool = True

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if not 0 <= self.gamma < 1:
            raise ConfigError("gamma must lie in [0, 1)")
        if not 0 < self.tau <= 1:
            raise ConfigError("tau must lie in (0, 1]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


@dataclass
class TrainStats:
    critic_loss: float
    actor_loss: float
    mean_q: float
    batch_size: int


class Normalizer:
    """Running mean/std with clipping; stats change only through ``update``."""

    def __init__(self, size, clip=5.0, eps=1e-2):
        self.size, self.clip, self.eps = size, clip, eps
        self.count = 0
        self.sum = np.zeros(size)
        self.sumsq = np.zeros(size)
        self.mean = np.zeros(size)
        self.std = np.ones(size)

    def update(self, x):
        x = np.asarray(x, dtype=float).reshape(-1, self.size)
        self.count += len(x)
        self.sum += x.sum(axis=0)
        self.sumsq += (x ** 2).sum(axis=0)
        self.mean = self.sum / self.count
        var = np.maximum(self.sumsq / self.count - self.mean ** 2, self.eps ** 2)
        self.std = np.sqrt(var)

    def __call__(self, x):
        return np.clip((x - self.mean) / self.std, -self.clip, self.clip)

    def state_dict(self):
        return {"count": self.count, "sum": self.sum.tolist(), "sumsq": self.sumsq.tolist()}

    def load_state_dict(self, d):
        self.count = d["count"]
        self.sum, self.sumsq = np.array(d["sum"]), np.array(d["sumsq"])
        if self.count:
            self.mean = self.sum / self.count
            self.std = np.sqrt(np.maximum(self.sumsq / self.count - self.mean ** 2, self.eps ** 2))


class IdentityNormalizer(Normalizer):
    def update(self, x):
        pass

    def __call__(self, x):
        return x


class DdpgAgent:
    """Deterministic actor pi(s||g) in [-1, 1]^m and critic Q(s||g, a)."""

    def __init__(self, input_dim, action_dim, config=None, rng=None):
        self.config = config or DdpgConfig()
        cfg = self.config
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_dim, self.action_dim = input_dim, action_dim
        self.actor = mlp(input_dim, cfg.hidden, action_dim, rng, out_activation="tanh")
        self.critic = mlp(input_dim + action_dim, cfg.hidden, 1, rng)
        self.actor_target = self.actor.clone()
        self.critic_target = self.critic.clone()
        self.actor_opt = Adam(self.actor, cfg.actor_lr)
        self.critic_opt = Adam(self.critic, cfg.critic_lr)
        norm_cls = Normalizer if cfg.normalize else IdentityNormalizer
        self.normalizer = norm_cls(input_dim, cfg.clip_obs)

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.input_dim:
            raise ConfigError(f"state_goal has dimension {x.shape[-1]}, expected {self.input_dim}")
        return x

    def greedy(self, state_goal):
        x = self._check(state_goal)
        single = x.ndim == 1
        u = self.actor.forward(self.normalizer(np.atleast_2d(x)))
        return u[0] if single else u

    def act(self, state_goal, explore=False, rng=None):
        u = self.greedy(state_goal)
        if not explore:
            return u
        cfg = self.config
        u = np.clip(u + cfg.noise_sigma * rng.standard_normal(u.shape), -1.0, 1.0)
        if cfg.random_eps > 0:
            coin = rng.random(u.shape[:-1] + (1,)) < cfg.random_eps
            uniform = rng.uniform(-1.0, 1.0, u.shape)
            u = np.where(coin, uniform, u)
        return u

    def _q(self, net, x_norm, u):
        return net.forward(np.concatenate([x_norm, u], axis=1))

    def critic_target_value(self, batch):
        cfg = self.config
        xn = self.normalizer(batch["next_state_goal"])
        u = self.actor_target.forward(xn)
        q = self._q(self.critic_target, xn, u)[:, 0]
        y = batch["reward"] + cfg.gamma * q
        if cfg.clip_target:
            y = np.clip(y, -1.0 / (1.0 - cfg.gamma), 0.0)
        return y

    def train_step(self, batch):
        n = len(batch["reward"])
        if n == 0:
            raise ConfigError("empty batch")
        cfg = self.config
        x = self.normalizer(batch["state_goal"])
        y = self.critic_target_value(batch)

        # actor: d(-mean Q)/du through the pre-update critic
        u = self.actor.forward(x)
        q_pi = self._q(self.critic, x, u)
        actor_loss = -float(q_pi.mean()) + cfg.action_l2 * float((u ** 2).mean())
        dq_in = self.critic.backward(np.full((n, 1), -1.0 / n))
        du = dq_in[:, self.input_dim:] + cfg.action_l2 * 2.0 * u / u.size
        self.actor.backward(du)
        self.actor_opt.step()

        q = self._q(self.critic, x, batch["action"])
        critic_loss, g = loss_mse(q[:, 0], y)
        self.critic.backward(g[:, None])
        self.critic_opt.step()

        if not (np.isfinite(critic_loss) and np.isfinite(actor_loss)):
            raise TrainingAbort(f"non-finite loss (critic={critic_loss}, actor={actor_loss}); "
                                "check learning rates and initialization")
        return TrainStats(critic_loss, actor_loss, float(q.mean()), n)

    def soft_update(self, tau=None):
        tau = self.config.tau if tau is None else tau
        if not 0 < tau <= 1:
            raise ConfigError("tau must lie in (0, 1]")
        self.actor_target.copy_from(self.actor, tau)
        self.critic_target.copy_from(self.critic, tau)

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        for name in ("actor", "critic", "actor_target", "critic_target"):
            getattr(self, name).save(os.path.join(directory, f"{name}.rkhn"))
        meta = {"input_dim": self.input_dim, "action_dim": self.action_dim,
                "config": asdict(self.config), "normalizer": self.normalizer.state_dict()}
        with open(os.path.join(directory, "agent.json"), "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, directory):
        from .nn import load_checkpoint
        with open(os.path.join(directory, "agent.json")) as fh:
            meta = json.load(fh)
        agent = cls(meta["input_dim"], meta["action_dim"], DdpgConfig(**meta["config"]))
        for name in ("actor", "critic", "actor_target", "critic_target"):
            net = load_checkpoint(os.path.join(directory, f"{name}.rkhn"))
            getattr(agent, name).copy_from(net)
        agent.normalizer.load_state_dict(meta["normalizer"])
        return agent
