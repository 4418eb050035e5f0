"""Experiment runner: ranked-HER training loop, multi-seed comparisons, curve reports."""

import csv
import dataclasses
import io
import json
import logging
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from .ddpg import DdpgAgent, DdpgConfig, TrainingAbort
from .envs import Episode, make_env, write_episode_log
from .her import CnnRanker, HerConfig, OracleRanker, RankLedger, storage_blocks
from .nn import ConfigError, load_checkpoint
from .replay import ReplayBuffer

log = logging.getLogger(__name__)

VARIANT_ALIASES = {
    "ddpg": "ddpg",
    "her": "her",
    "er-oracle": "her+er-oracle",
    "her+er-oracle": "her+er-oracle",
    "er-cnn": "her+er-cnn",
    "her+er-cnn": "her+er-cnn",
}


def canonical_variant(name):
    try:
        return VARIANT_ALIASES[name]
    except KeyError:
        raise ConfigError(f"unknown variant {name!r}") from None


def rng_stream(seed, name):
    """Independent generator for a named stream derived from one master seed."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(name.encode()),)))


@dataclass
class ExperimentConfig:
    env: str = "bitflip8"
    env_kwargs: dict = field(default_factory=dict)
    variant: str = "her"
    her: HerConfig = field(default_factory=HerConfig)
    ddpg: DdpgConfig = field(default_factory=DdpgConfig)
    epochs: int = 30
    episodes_per_epoch: int = 50
    n_batches: int = 40
    eval_episodes: int = 20
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    ranker_checkpoint: str = None
    buffer_capacity: int = 1_000_000
    warmup_episodes: int = 0
    success_threshold: float = 0.9
    hold_epochs: int = 3
    write_episode_log: bool = True

    def __post_init__(self):
        if isinstance(self.her, dict):
            self.her = HerConfig(**self.her)
        if isinstance(self.ddpg, dict):
            self.ddpg = DdpgConfig(**self.ddpg)
        self.variant = canonical_variant(self.variant)
        if self.variant == "ddpg" and self.her.enabled:
            self.her = dataclasses.replace(self.her, enabled=False)
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.epochs < 0 or self.episodes_per_epoch < 1 or self.eval_episodes < 1:
            raise ConfigError("epochs >= 0, episodes_per_epoch >= 1, eval_episodes >= 1 required")
        if self.variant == "her+er-cnn" and self.ranker_checkpoint is not None \
                and not os.path.isfile(self.ranker_checkpoint):
            raise ConfigError(f"ranker checkpoint {self.ranker_checkpoint!r} is not readable")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def with_variant(self, variant, her=None, **changes):
        """Copy for another variant; ``her`` may hold HerConfig field overrides."""
        variant = canonical_variant(variant)
        her = dataclasses.replace(self.her, enabled=variant != "ddpg", **(her or {}))
        return dataclasses.replace(self, variant=variant, her=her, **changes)


@dataclass
class RunResult:
    seed: int
    variant: str
    success_rates: list
    train_stats: list = field(default_factory=list)
    groups: dict = field(default_factory=dict)
    stored: int = 0


def rollout(env, agent, env_rng, noise_rng=None, explore=False, episode_id=0, seed=0):
    state, goal = env.reset(env_rng)
    T = env.spec.horizon
    states = np.empty((T + 1, env.spec.state_dim))
    achieved = np.empty((T + 1, env.spec.goal_dim))
    actions = np.empty((T, env.spec.action_dim))
    rewards = np.empty(T)
    states[0], achieved[0] = state, env.achieved_goal(state)
    for t in range(T):
        u = agent.act(np.concatenate([state, goal]), explore, noise_rng)
        res = env.step(u)
        actions[t] = env.executed_action(state, u, res.next_state)
        rewards[t] = res.reward
        state = res.next_state
        states[t + 1], achieved[t + 1] = state, res.achieved_goal
    return Episode(episode_id, seed, states, actions, achieved, goal, rewards, env.terminal_summary())


def make_ranker(config, env):
    if config.variant == "her+er-oracle":
        return OracleRanker(env.spec)
    if config.variant == "her+er-cnn":
        if config.ranker_checkpoint is None:
            raise ConfigError("her+er-cnn requires ranker_checkpoint")
        return CnnRanker(load_checkpoint(config.ranker_checkpoint))
    return None


def evaluate(env, agent, rng, episodes):
    wins = 0
    for _ in range(episodes):
        ep = rollout(env, agent, rng)
        wins += ep.rewards[-1] == 0.0
    return wins / episodes


def run_training(config, seed, out_dir=None, ranker=None):
    """Run one seed of ``config``; returns a :class:`RunResult`.

    Streams: ``env`` (training goals/initial states), ``eval``, ``noise``,
    ``her``, ``replay`` and ``init`` all derive from ``seed``, so variants run
    on the same seed see identical environment streams.
    """
    env = make_env(config.env, **config.env_kwargs)
    eval_env = make_env(config.env, **config.env_kwargs)
    streams = {name: rng_stream(seed, name) for name in ("env", "eval", "noise", "her", "replay", "init")}
    spec = env.spec
    agent = DdpgAgent(spec.state_dim + spec.goal_dim, spec.action_dim, config.ddpg, streams["init"])
    buffer = ReplayBuffer(config.buffer_capacity)
    ranker = ranker if ranker is not None else make_ranker(config, env)
    needs_image = getattr(ranker, "needs_image", False)

    ledger = log_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        if config.epochs > 0:
            ledger = RankLedger(os.path.join(out_dir, f"ranks_seed{seed}.csv"))
            if config.write_episode_log:
                log_path = os.path.join(out_dir, f"episodes_seed{seed}.jsonl")
                open(log_path, "w").close()
    ledger = ledger or RankLedger()

    result = RunResult(seed, config.variant, [])
    episode_id = 0
    for epoch in range(config.epochs):
        epoch_eps = []
        for _ in range(config.episodes_per_epoch):
            ep = rollout(env, agent, streams["env"], streams["noise"], True, episode_id, seed)
            rank = None
            if ranker is not None:
                image = env.render_terminal(ep.states[-1]) if needs_image else None
                rank = ranker.rank(ep.summary, image)
                ledger.record(episode_id, rank, ep.summary)
            elif config.her.enabled:
                rank = OracleRanker(spec).rank(ep.summary)
                ledger.record(episode_id, rank, ep.summary)
            if rank is not None:
                result.groups[episode_id] = rank.group
            for cols in storage_blocks(ep, rank if ranker is not None else None, config.her, env, streams["her"]):
                buffer.push_arrays(**cols)
                agent.normalizer.update(cols["state_goal"])
                result.stored += len(cols["reward"])
            if log_path is not None:
                epoch_eps.append(ep)
            episode_id += 1
            if episode_id <= config.warmup_episodes:
                continue
            for _ in range(config.n_batches):
                batch = buffer.sample(config.ddpg.batch_size, streams["replay"])
                try:
                    stats = agent.train_step(batch)
                except TrainingAbort as exc:
                    raise TrainingAbort(f"seed {seed}, epoch {epoch}: {exc}") from None
            if config.n_batches:
                result.train_stats.append(stats)
            agent.soft_update()
        if log_path is not None:
            write_episode_log(log_path, epoch_eps, mode="a")
        rate = evaluate(eval_env, agent, streams["eval"], config.eval_episodes)
        result.success_rates.append(rate)
        log.info("%s seed=%d epoch=%d success=%.3f", config.variant, seed, epoch, rate)
    result.agent = agent
    result.buffer = buffer
    result.ledger = ledger
    return result


def epochs_to_threshold(curve, threshold=0.9, hold=3):
    """1-based epoch at which ``curve`` first reaches ``threshold`` and stays there for ``hold`` epochs.

    Returns None when that never happens within the curve.
    """
    curve = list(curve)
    for i in range(len(curve) - hold + 1):
        if all(v >= threshold for v in curve[i:i + hold]):
            return i + 1
    return None


@dataclass
class LearningCurve:
    variant: str
    seeds: list
    raw: list                       # raw[seed_index][epoch]
    failed: str = None

    @property
    def median(self):
        if not self.raw or not self.raw[0]:
            return []
        return [float(v) for v in np.median(np.asarray(self.raw, dtype=float), axis=0)]

    def epochs_to(self, threshold=0.9, hold=3):
        return epochs_to_threshold(self.median, threshold, hold)


def speedup(baseline_epochs, variant_epochs):
    """baseline / variant epochs-to-threshold; a run that never converges counts as infinite."""
    b = float("inf") if baseline_epochs is None else baseline_epochs
    v = float("inf") if variant_epochs is None else variant_epochs
    if b == v:
        return 1.0
    return b / v


def compare_variants(config, variants, seeds=None, out_dir=None, rankers=None):
    """Run every variant on the same seeds; returns ``({variant: LearningCurve}, report)``."""
    seeds = list(seeds if seeds is not None else config.seeds)
    rankers = rankers or {}
    curves = {}
    for name in variants:
        variant = canonical_variant(name)
        cfg = config.with_variant(variant)
        raw = []
        try:
            for seed in seeds:
                sub = os.path.join(out_dir, variant) if out_dir else None
                raw.append(run_training(cfg, seed, sub, rankers.get(variant)).success_rates)
            curves[variant] = LearningCurve(variant, seeds, raw)
        except (TrainingAbort, ConfigError, OSError) as exc:
            log.error("variant %s failed: %s", variant, exc)
            curves[variant] = LearningCurve(variant, seeds, [], failed=str(exc))
    report = speedup_report(curves, config.success_threshold, config.hold_epochs)
    return curves, report


def speedup_report(curves, threshold=0.9, hold=3, baseline="her"):
    ok = {k: c for k, c in curves.items() if c.failed is None}
    if not ok:
        return {}
    base = baseline if baseline in ok else next(iter(ok))
    base_epochs = ok[base].epochs_to(threshold, hold)
    report = {}
    for name, c in curves.items():
        e = c.epochs_to(threshold, hold) if c.failed is None else None
        report[name] = {"epochs_to_threshold": e, "failed": c.failed,
                        "speedup": speedup(base_epochs, e) if c.failed is None else None,
                        "baseline": base}
    return report


RAW_HEADER = ["variant", "seed", "epoch", "success_rate"]
MEDIAN_HEADER = ["variant", "epoch", "median"]


def curves_to_csv(curves):
    raw, med = io.StringIO(), io.StringIO()
    rw, mw = csv.writer(raw, lineterminator="\n"), csv.writer(med, lineterminator="\n")
    rw.writerow(RAW_HEADER)
    mw.writerow(MEDIAN_HEADER)
    for name, c in curves.items():
        for seed, rates in zip(c.seeds, c.raw):
            for epoch, r in enumerate(rates, 1):
                rw.writerow([name, seed, epoch, repr(float(r))])
        for epoch, m in enumerate(c.median, 1):
            mw.writerow([name, epoch, repr(float(m))])
    return raw.getvalue(), med.getvalue()


def read_curves_csv(path):
    """Rebuild curves from a raw ``variant,seed,epoch,success_rate`` file."""
    rows = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            per_seed = rows.setdefault(row["variant"], {})
            per_seed.setdefault(int(row["seed"]), []).append((int(row["epoch"]), float(row["success_rate"])))
    curves = {}
    for variant, per_seed in rows.items():
        seeds = list(per_seed)
        raw = [[r for _, r in sorted(per_seed[s])] for s in seeds]
        curves[variant] = LearningCurve(variant, seeds, raw)
    return curves


def emit_report(curves, out_dir, figure=True):
    """Write curves.csv, curves_median.csv, curves.svg (and curves.png); returns the paths."""
    from .plotting import curves_svg, plot_curves

    if not curves:
        raise ValueError("no curves to report")
    os.makedirs(out_dir, exist_ok=True)
    raw, med = curves_to_csv(curves)
    paths = {"csv": os.path.join(out_dir, "curves.csv"),
             "median_csv": os.path.join(out_dir, "curves_median.csv"),
             "svg": os.path.join(out_dir, "curves.svg")}
    with open(paths["csv"], "w") as fh:
        fh.write(raw)
    with open(paths["median_csv"], "w") as fh:
        fh.write(med)
    with open(paths["svg"], "w") as fh:
        fh.write(curves_svg(curves))
    if figure:
        paths["png"] = os.path.join(out_dir, "curves.png")
        plot_curves(curves, paths["png"])
    return paths
