"""Deterministic goal-conditioned environments with sparse {-1, 0} rewards.

Every environment follows the same small protocol: ``reset(rng)`` returns
``(state, desired_goal)``, ``step(action)`` returns a :class:`StepResult`, and
``compute_reward`` is a pure function of achieved/desired goals. Actions are
normalized to ``[-1, 1]`` per dimension; out-of-range actions are clamped.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .nn import UsageError


@dataclass(frozen=True)
class GoalEnvSpec:
    name: str
    state_dim: int
    action_dim: int
    goal_dim: int
    horizon: int
    success_epsilon: float
    workspace_diameter: float
    action_low: float = -1.0
    action_high: float = 1.0

    def __post_init__(self):
        if not self.success_epsilon < self.workspace_diameter:
            raise ValueError("success_epsilon must be smaller than workspace_diameter")
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2")


@dataclass
class StepResult:
    next_state: np.ndarray
    achieved_goal: np.ndarray
    reward: float
    done: bool
    clamped: bool = False


@dataclass
class TerminalSummary:
    hinge_angle: float
    ee_handle_distance: float
    final_achieved_goal: np.ndarray
    goal_distance: float = 0.0
    success: bool = False


def goal_distance(a, b):
    return float(np.linalg.norm(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))


class GoalEnv:
    """Base class; subclasses implement ``_sample``, ``_dynamics``, ``achieved_goal``."""

    spec: GoalEnvSpec

    def __init__(self):
        self.state = None
        self.goal = None
        self.t = 0
        self.clamp_count = 0

    def compute_reward(self, achieved, desired):
        achieved = np.asarray(achieved, dtype=float)
        desired = np.asarray(desired, dtype=float)
        if achieved.shape[-1] != desired.shape[-1]:
            raise ValueError(f"goal dims differ: {achieved.shape} vs {desired.shape}")
        d = np.linalg.norm(achieved - desired, axis=-1)
        r = np.where(d < self.spec.success_epsilon, 0.0, -1.0)
        return float(r) if r.ndim == 0 else r

    def reset(self, rng):
        self.state, self.goal = self._sample(rng)
        self.t = 0
        return self.state.copy(), self.goal.copy()

    def step(self, action):
        if self.state is None:
            raise UsageError("reset before step")
        if self.t >= self.spec.horizon:
            raise UsageError("step after episode end")
        action = np.asarray(action, dtype=float)
        lo, hi = self.spec.action_low, self.spec.action_high
        clipped = np.clip(action, lo, hi)
        clamped = bool(np.any(clipped != action))
        self.clamp_count += clamped
        self.state = self._dynamics(self.state, clipped)
        self.t += 1
        ag = self.achieved_goal(self.state)
        return StepResult(self.state.copy(), ag, self.compute_reward(ag, self.goal),
                          self.t == self.spec.horizon, clamped)

    @property
    def done(self):
        return self.t >= self.spec.horizon

    def terminal_summary(self):
        if not self.done:
            raise UsageError("terminal_summary called before the episode is done")
        return self.summarize(self.state, self.goal)

    def summarize(self, state, goal):
        ag = self.achieved_goal(state)
        d = goal_distance(ag, goal)
        return TerminalSummary(0.0, self.effector_distance(state), ag, d,
                               d < self.spec.success_epsilon)

    def effector_distance(self, state):
        return 0.0

    def executed_action(self, state, action, next_state):
        """A canonical action producing ``state -> next_state``; this is what replay stores."""
        return np.clip(action, self.spec.action_low, self.spec.action_high)

    def render_terminal(self, state=None, size=32):
        raise NotImplementedError


# --- rendering helpers -------------------------------------------------------

def _blob(img, r, c, sigma, value):
    h, w = img.shape
    rr, cc = np.mgrid[0:h, 0:w]
    b = value * np.exp(-((rr - r) ** 2 + (cc - c) ** 2) / (2 * sigma ** 2))
    np.maximum(img, b, out=img)


def _segment(img, r0, c0, r1, c1, value, width=0.6):
    h, w = img.shape
    rr, cc = np.mgrid[0:h, 0:w]
    dr, dc = r1 - r0, c1 - c0
    L2 = dr * dr + dc * dc
    u = np.clip(((rr - r0) * dr + (cc - c0) * dc) / L2, 0, 1) if L2 > 0 else 0.0
    d2 = (rr - r0 - u * dr) ** 2 + (cc - c0 - u * dc) ** 2
    np.maximum(img, value * np.exp(-d2 / (2 * width ** 2)), out=img)


def _finish(img):
    img[img < 1e-3] = 0.0
    return np.clip(img, 0.0, 1.0)


# --- bit flipping ------------------------------------------------------------

class BitFlip(GoalEnv):
    """n-bit flipping with a continuous "desired bit value" action.

    ``a[i] > 0`` asks for bit i to be 1, ``a[i] < 0`` for it to be 0. Each step
    flips the one bit whose request most strongly disagrees with its current
    value; if no request disagrees, nothing flips.
    """

    def __init__(self, n=8, canonical_actions=True):
        super().__init__()
        self.n = n
        self.canonical_actions = canonical_actions
        self.spec = GoalEnvSpec(f"bitflip{n}", n, n, n, max(n, 2), 0.5, math.sqrt(n) + 1e-9)

    def _sample(self, rng):
        return (rng.integers(0, 2, self.n).astype(float), rng.integers(0, 2, self.n).astype(float))

    def chosen_bit(self, state, action):
        """Index of the bit the action flips, or None for a no-op."""
        desire = np.asarray(action, dtype=float) * (1.0 - 2.0 * np.asarray(state))
        i = int(np.argmax(desire))
        return i if desire[i] > 0 else None

    def executed_action(self, state, action, next_state):
        # requesting every bit's next value reproduces exactly the same flip (or no-op)
        if not self.canonical_actions:
            return super().executed_action(state, action, next_state)
        return 2.0 * np.asarray(next_state, dtype=float) - 1.0

    def _dynamics(self, state, action):
        i = self.chosen_bit(state, action)
        s = state.copy()
        if i is not None:
            s[i] = 1.0 - s[i]
        return s

    def achieved_goal(self, state):
        return np.asarray(state, dtype=float).copy()

    def render_terminal(self, state=None, size=32):
        state = self.state if state is None else state
        img = np.zeros((size, size))
        cell = size / self.n
        for i, bit in enumerate(state):
            if bit:
                img[size // 3: 2 * size // 3, int(i * cell): max(int((i + 1) * cell) - 1, int(i * cell) + 1)] = 1.0
        return img


# --- planar tasks -----------------------------------------------------------

class _Planar(GoalEnv):
    STEP = 0.05
    HALF = 0.3
    EFFECTOR_R = 0.02
    OBJECT_R = 0.03

    def __init__(self, name, state_dim, horizon=50, epsilon=0.05):
        super().__init__()
        self.spec = GoalEnvSpec(name, state_dim, 2, 2, horizon, epsilon, 2 * self.HALF * math.sqrt(2))

    def _to_px(self, p, size):
        # x -> column, y -> row (row 0 at +y)
        col = (p[0] + self.HALF) / (2 * self.HALF) * (size - 1)
        row = (self.HALF - p[1]) / (2 * self.HALF) * (size - 1)
        return row, col

    def _move_effector(self, e, action):
        return np.clip(e + self.STEP * action, -self.HALF, self.HALF)


class PlanarReach(_Planar):
    def __init__(self, horizon=50, epsilon=0.05):
        super().__init__("planar_reach", 2, horizon, epsilon)

    def _sample(self, rng):
        return np.zeros(2), rng.uniform(-0.15, 0.15, 2)

    def _dynamics(self, state, action):
        return self._move_effector(state, action)

    def achieved_goal(self, state):
        return np.asarray(state[:2], dtype=float).copy()

    def effector_distance(self, state):
        return 0.0

    def render_terminal(self, state=None, size=32):
        state = self.state if state is None else state
        img = np.zeros((size, size))
        _blob(img, *self._to_px(state[:2], size), 0.8, 1.0)
        return _finish(img)


class PlanarPush(_Planar):
    """Effector pushes a disc by overlap displacement. State: e(2), o(2), o-e(2).

    Each step is split into ``SUBSTEPS`` moves so the effector cannot jump
    across the disc.
    """

    SUBSTEPS = 5
    OBJECT_RANGE = 0.1
    OBJECT_MIN_GAP = 0.06

    def __init__(self, horizon=50, epsilon=0.05, name="planar_push"):
        super().__init__(name, 6, horizon, epsilon)

    def _sample(self, rng):
        e = np.zeros(2)
        while True:
            o = rng.uniform(-self.OBJECT_RANGE, self.OBJECT_RANGE, 2)
            if np.linalg.norm(o - e) >= self.OBJECT_MIN_GAP:
                break
        g = rng.uniform(-0.15, 0.15, 2)
        return self._pack(e, o), g

    def _pack(self, e, o):
        return np.concatenate([e, o, o - e])

    def _dynamics(self, state, action):
        e, o = state[:2], state[2:4].copy()
        target = self._move_effector(e, action)
        for i in range(1, self.SUBSTEPS + 1):
            o = self._push(e + (target - e) * (i / self.SUBSTEPS), o)
        return self._pack(target, o)

    def _push(self, e, o):
        contact = self.EFFECTOR_R + self.OBJECT_R
        d = o - e
        n = np.linalg.norm(d)
        if n < contact:
            direction = d / n if n > 1e-12 else np.array([1.0, 0.0])
            o = e + direction * contact
        return np.clip(o, -self.HALF, self.HALF)

    def achieved_goal(self, state):
        return np.asarray(state[2:4], dtype=float).copy()

    def effector_distance(self, state):
        return goal_distance(state[:2], state[2:4])

    def render_terminal(self, state=None, size=32):
        state = self.state if state is None else state
        img = np.zeros((size, size))
        _blob(img, *self._to_px(state[2:4], size), 1.2, 0.6)
        _blob(img, *self._to_px(state[:2], size), 0.7, 1.0)
        return _finish(img)


class PlanarPickPlace(PlanarPush):
    """Planar transport: the object attaches to the effector once touched."""

    def __init__(self, horizon=50, epsilon=0.05):
        super().__init__(horizon, epsilon, name="planar_pick_place")
        self.spec = GoalEnvSpec("planar_pick_place", 7, 2, 2, horizon, epsilon,
                                2 * self.HALF * math.sqrt(2))

    def _pack(self, e, o, held=0.0):
        return np.concatenate([e, o, o - e, [held]])

    def _dynamics(self, state, action):
        e, o, held = state[:2], state[2:4].copy(), state[6]
        e = self._move_effector(e, action)
        if held:
            o = e.copy()
        elif np.linalg.norm(o - e) < self.EFFECTOR_R + self.OBJECT_R:
            o, held = e.copy(), 1.0
        return self._pack(e, o, held)


class PlanarSlide(PlanarPush):
    """Puck with per-step velocity decay; the effector stays on its side of the midline.

    State: e(2), o(2), o-e(2), puck velocity(2).
    """

    DECAY = 0.95
    MIDLINE = 0.0

    def __init__(self, horizon=50, epsilon=0.05):
        super().__init__(horizon, epsilon, name="planar_slide")
        self.spec = GoalEnvSpec("planar_slide", 8, 2, 2, horizon, epsilon,
                                2 * self.HALF * math.sqrt(2))

    def _pack(self, e, o, v=(0.0, 0.0)):
        return np.concatenate([e, o, o - e, v])

    def _sample(self, rng):
        e = np.array([0.0, -0.25])
        o = np.array([rng.uniform(-0.1, 0.1), -0.15])
        g = np.array([rng.uniform(-0.2, 0.2), rng.uniform(0.05, 0.25)])
        return self._pack(e, o), g

    def _dynamics(self, state, action):
        e_old, o, v = state[:2], state[2:4].copy(), state[6:8].copy()
        e = self._move_effector(e_old, action)
        e[1] = min(e[1], self.MIDLINE - self.EFFECTOR_R)
        contact = self.EFFECTOR_R + self.OBJECT_R
        if np.linalg.norm(o - e) < contact:
            o = self._push(e, o)
            v = e - e_old
        o = o + v
        v = v * self.DECAY
        for axis in range(2):
            if abs(o[axis]) > self.HALF:
                o[axis] = np.sign(o[axis]) * self.HALF
                v[axis] = 0.0
        return self._pack(e, o, v)


# --- door ------------------------------------------------------------------

class DoorPush(GoalEnv):
    """Effector in 3-space pushing a hinged door open; the goal is the hinge angle.

    The handle is sampled inside a cube around a fixed centre; the hinge sits
    ``DOOR_WIDTH`` along -y of the closed handle. The handle is a vertical bar
    and the effector a sphere; contact means the gap between their surfaces,
    swept over the step, is under ``CONTACT_RADIUS``. In contact, forward (+x)
    motion turns the hinge by ``dx / DOOR_WIDTH``.
    State: e(3), handle(3), handle-e(3), angle(1).
    """

    STEP = 0.05
    CONTACT_RADIUS = 0.03
    EFFECTOR_RADIUS = 0.03
    HANDLE_RADIUS = 0.015
    HANDLE_HALF_HEIGHT = 0.08
    DOOR_WIDTH = 0.2
    CUBE_CENTER = np.array([0.2, 0.0, 0.0])
    CUBE_SIDE = 0.30
    HOME = np.array([0.0, 0.0, 0.0])
    LOW = np.array([-0.1, -0.3, -0.3])
    HIGH = np.array([0.5, 0.3, 0.3])
    GOAL_RANGE = (0.15, 0.45)

    def __init__(self, horizon=50, epsilon=0.05, contact_radius=None, goal_range=None):
        super().__init__()
        self.spec = GoalEnvSpec("door_push_1d", 10, 3, 1, horizon, epsilon, 0.4)
        if contact_radius is not None:
            self.CONTACT_RADIUS = contact_radius
        if goal_range is not None:
            self.GOAL_RANGE = tuple(goal_range)
        self.closed_handle = self.CUBE_CENTER.copy()

    def _sample(self, rng):
        half = self.CUBE_SIDE / 2
        self.closed_handle = self.CUBE_CENTER + rng.uniform(-half, half, 3)
        goal = np.array([rng.uniform(*self.GOAL_RANGE)])
        return self._pack(self.HOME.copy(), self.closed_handle, 0.0), goal

    def hinge(self, handle, angle):
        return handle - self.DOOR_WIDTH * np.array([math.sin(angle), math.cos(angle), 0.0])

    def handle_at(self, hinge, angle):
        return hinge + self.DOOR_WIDTH * np.array([math.sin(angle), math.cos(angle), 0.0])

    def _pack(self, e, handle, angle):
        return np.concatenate([e, handle, handle - e, [angle]])

    def _dynamics(self, state, action):
        e, handle, angle = state[:3], state[3:6], state[9]
        hinge = self.hinge(handle, angle)
        step = self.STEP * action
        e_next = np.clip(e + step, self.LOW, self.HIGH)
        if step[0] > 0 and self.surface_gap(e, e_next, handle) < self.CONTACT_RADIUS:
            angle = min(max(angle + step[0] / self.DOOR_WIDTH, 0.0), math.pi / 2)
        e = e_next
        return self._pack(e, self.handle_at(hinge, angle), angle)

    _SWEEP = np.linspace(0.0, 1.0, 9)[:, None]

    def surface_gap(self, e0, e1, handle):
        """Smallest effector-to-handle surface gap along the step from ``e0`` to ``e1``."""
        path = e0 + self._SWEEP * (e1 - e0) - handle
        dz = np.maximum(np.abs(path[:, 2]) - self.HANDLE_HALF_HEIGHT, 0.0)
        d = np.sqrt(path[:, 0] ** 2 + path[:, 1] ** 2 + dz ** 2)
        return float(d.min()) - self.EFFECTOR_RADIUS - self.HANDLE_RADIUS

    def achieved_goal(self, state):
        return np.array([state[9]], dtype=float)

    def effector_distance(self, state):
        return goal_distance(state[:3], state[3:6])

    def summarize(self, state, goal):
        s = super().summarize(state, goal)
        s.hinge_angle = float(state[9])
        return s

    def _px(self, p, size, vertical_axis):
        """Top half: x across, y down; bottom half: x across, z down."""
        half_rows = size // 2
        col = (p[0] - self.LOW[0]) / (self.HIGH[0] - self.LOW[0]) * (size - 1)
        lo, hi = self.LOW[vertical_axis], self.HIGH[vertical_axis]
        row = (hi - p[vertical_axis]) / (hi - lo) * (half_rows - 1)
        return row + (half_rows if vertical_axis == 2 else 0), col

    def render_terminal(self, state=None, size=32):
        state = self.state if state is None else state
        e, handle, angle = state[:3], state[3:6], state[9]
        hinge = self.hinge(handle, angle)
        img = np.zeros((size, size))
        for axis in (1, 2):
            hr, hc = self._px(hinge, size, axis)
            dr, dc = self._px(handle, size, axis)
            if axis == 1:
                _segment(img, hr, hc, dr, dc, 0.35)
            else:
                top = self._px(handle + [0, 0, self.HANDLE_HALF_HEIGHT], size, 2)
                bot = self._px(handle - [0, 0, self.HANDLE_HALF_HEIGHT], size, 2)
                _segment(img, top[0], top[1], bot[0], bot[1], 0.35)
            _blob(img, dr, dc, 0.7, 0.65)
            _blob(img, *self._px(e, size, axis), 0.7, 1.0)
        return _finish(img)


ENVIRONMENTS = {
    "bitflip": BitFlip,
    "planar_reach": PlanarReach,
    "planar_push": PlanarPush,
    "planar_slide": PlanarSlide,
    "planar_pick_place": PlanarPickPlace,
    "door_push_1d": DoorPush,
}


def make_env(name, **kwargs):
    """``make_env("bitflip12")`` / ``make_env("bitflip", n=12)`` / ``make_env("planar_push")``."""
    if name.startswith("bitflip") and name != "bitflip":
        kwargs.setdefault("n", int(name[len("bitflip"):].strip("()")))
        name = "bitflip"
    if name not in ENVIRONMENTS:
        raise ValueError(f"unknown environment {name!r}")
    return ENVIRONMENTS[name](**kwargs)


# --- files ------------------------------------------------------------------

def write_pgm(path, img):
    img = np.asarray(img, dtype=float)
    h, w = img.shape
    data = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pix = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos + 1)
    return pix.reshape(h, w).astype(float) / maxval


@dataclass
class Episode:
    episode_id: int
    seed: int
    states: np.ndarray       # (T+1, state_dim)
    actions: np.ndarray      # (T, action_dim)
    achieved: np.ndarray     # (T+1, goal_dim)
    goal: np.ndarray
    rewards: np.ndarray      # (T,)
    summary: TerminalSummary
    image: np.ndarray = field(default=None, repr=False)

    @property
    def horizon(self):
        return len(self.actions)

    def to_record(self):
        s = self.summary
        transitions = [
            {"s": self.states[t].tolist(), "a": self.actions[t].tolist(),
             "r": float(self.rewards[t]), "s_next": self.states[t + 1].tolist()}
            for t in range(self.horizon)
        ]
        return {"episode_id": int(self.episode_id), "seed": int(self.seed),
                "goal": self.goal.tolist(), "transitions": transitions,
                "summary": {"hinge_angle": s.hinge_angle, "distance": s.ee_handle_distance,
                            "achieved": np.asarray(s.final_achieved_goal).tolist()}}


def write_episode_log(path, episodes, mode="w"):
    with open(path, mode) as fh:
        for ep in episodes:
            fh.write(json.dumps(ep.to_record()) + "\n")


def read_episode_log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
