"""The Mountain Hike benchmark: 2-D continuous control on a 20x20 map.

The agent's position evolves as s' = clamp(s + a + eps_a) with Gaussian
transition noise; it observes its position through Gaussian noise, with
an extra vector of `l` uniform draws appended that carries no
information at all. Episodes last exactly 75 steps. The reward surface
is either the built-in analytic bowl or a grid file with bilinear
interpolation, so a different surface can be swapped in without touching
the dynamics.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import ENV_BASE, RngStream
from .errors import ConfigError, ContractError

MAP_LO = -10.0
MAP_HI = 10.0
EPISODE_LEN = 75
TRANS_STD = 0.5        # eps_a ~ N(0, 0.25 I)
OBS_STD = 1.0          # eps_s ~ N(0, 1 I)
RESET_STD = 0.5        # start jitter ~ N(0, 0.25 I)
ACTION_COST = 0.01


class RewardMap:
    """Evaluator of the reward surface r(x, y) over the map square."""

    def __init__(self, goal=(7.0, 7.0)):
        self.goal = np.asarray(goal, dtype=np.float64)
        self._grid = None

    @classmethod
    def from_grid(cls, path: str) -> "RewardMap":
        """Load a surface from a plain-text grid file.

        Line 1: `nx ny xmin xmax ymin ymax`; then nx*ny values, row-major
        with x as the slow index: value k = r(x_{k // ny}, y_{k % ny}).
        The grid must cover the full map bounds. Evaluation is bilinear.
        """
        with open(path) as fh:
            tokens = fh.read().split()
        if len(tokens) < 6:
            raise ConfigError(f"reward grid {path}: missing header")
        nx, ny = int(tokens[0]), int(tokens[1])
        xmin, xmax, ymin, ymax = (float(t) for t in tokens[2:6])
        vals = np.asarray([float(t) for t in tokens[6:]], dtype=np.float64)
        if vals.size != nx * ny:
            raise ConfigError(
                f"reward grid {path}: expected {nx * ny} values, got {vals.size}"
            )
        if nx < 2 or ny < 2:
            raise ConfigError(f"reward grid {path}: need at least a 2x2 grid")
        if xmin > MAP_LO or xmax < MAP_HI or ymin > MAP_LO or ymax < MAP_HI:
            raise ConfigError(
                f"reward grid {path}: bounds [{xmin},{xmax}]x[{ymin},{ymax}] "
                f"do not cover the map [{MAP_LO},{MAP_HI}]^2"
            )
        if not np.all(np.isfinite(vals)):
            raise ConfigError(f"reward grid {path}: non-finite values")
        rm = cls()
        rm._grid = (vals.reshape(nx, ny), xmin, xmax, ymin, ymax)
        return rm

    def __call__(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if self._grid is None:
            d2 = (x - self.goal[0]) ** 2 + (y - self.goal[1]) ** 2
            return 2.0 * np.exp(-d2 / 18.0) - 1.0
        grid, xmin, xmax, ymin, ymax = self._grid
        nx, ny = grid.shape
        fx = np.clip((x - xmin) / (xmax - xmin) * (nx - 1), 0, nx - 1)
        fy = np.clip((y - ymin) / (ymax - ymin) * (ny - 1), 0, ny - 1)
        i0 = np.minimum(fx.astype(int), nx - 2)
        j0 = np.minimum(fy.astype(int), ny - 2)
        tx = fx - i0
        ty = fy - j0
        return (
            grid[i0, j0] * (1 - tx) * (1 - ty)
            + grid[i0 + 1, j0] * tx * (1 - ty)
            + grid[i0, j0 + 1] * (1 - tx) * ty
            + grid[i0 + 1, j0 + 1] * tx * ty
        )


@dataclass
class HikeConfig:
    noise_len: int = 0
    start: tuple = (-8.5, -8.5)
    deterministic: bool = False       # zero every noise source (test hook)
    reward_map: RewardMap = field(default_factory=RewardMap)

    @property
    def obs_dim(self) -> int:
        return 2 + self.noise_len


class MountainHike:
    """One environment instance with its own random stream."""

    def __init__(self, cfg: HikeConfig, rng: RngStream):
        self.cfg = cfg
        self.rng = rng
        self.position = np.zeros(2)
        self.step_count = 0
        self._active = False

    def _observe(self, gen) -> np.ndarray:
        obs = np.empty(self.cfg.obs_dim)
        if self.cfg.deterministic:
            obs[:2] = self.position
            obs[2:] = 0.0
        else:
            obs[:2] = self.position + OBS_STD * gen.standard_normal(2)
            obs[2:] = gen.uniform(MAP_LO, MAP_HI, self.cfg.noise_len)
        return obs

    def reset(self) -> np.ndarray:
        gen = self.rng.generator()
        start = np.asarray(self.cfg.start, dtype=np.float64)
        if self.cfg.deterministic:
            self.position = start.copy()
        else:
            self.position = start + RESET_STD * gen.standard_normal(2)
        self.position = np.clip(self.position, MAP_LO, MAP_HI)
        self.step_count = 0
        self._active = True
        return self._observe(gen)

    def step(self, action: np.ndarray):
        """Advance one step; returns (observation, reward, done)."""
        if not self._active:
            raise ContractError("step() on a finished episode; call reset()")
        action = np.asarray(action, dtype=np.float64)
        gen = self.rng.generator()
        if self.cfg.deterministic:
            eps_a = np.zeros(2)
        else:
            eps_a = TRANS_STD * gen.standard_normal(2)
        self.position = np.clip(self.position + action + eps_a, MAP_LO, MAP_HI)
        obs = self._observe(gen)
        reward = float(
            self.cfg.reward_map(self.position[0], self.position[1])
            - ACTION_COST * np.linalg.norm(action)
        )
        self.step_count += 1
        done = self.step_count >= EPISODE_LEN
        if done:
            self._active = False
        return obs, reward, done


class HikeVectorEnv:
    """n independent instances stepped as a batch, with auto-reset.

    Stepping the batch is bit-identical to stepping the instances one by
    one because every instance owns its own counter-based stream.
    """

    def __init__(self, n: int, cfg: HikeConfig, seed: int):
        if n < 1:
            raise ConfigError(f"need at least one environment, got {n}")
        self.cfg = cfg
        self.envs = [
            MountainHike(cfg, RngStream(seed, ENV_BASE + i)) for i in range(n)
        ]
        self.episode_return = np.zeros(n)

    @property
    def n(self) -> int:
        return len(self.envs)

    def reset(self) -> np.ndarray:
        self.episode_return[:] = 0.0
        return np.stack([env.reset() for env in self.envs])

    def step(self, actions: np.ndarray):
        """Batched step. Environments whose episode ends are reset in
        place and their returned observation is the fresh episode's first
        one; their accumulated return is reported in `completed`.
        """
        obs = np.empty((self.n, self.cfg.obs_dim))
        rewards = np.empty(self.n)
        dones = np.zeros(self.n, dtype=bool)
        completed: list[tuple[int, float]] = []
        for i, env in enumerate(self.envs):
            o, r, d = env.step(actions[i])
            self.episode_return[i] += r
            rewards[i] = r
            dones[i] = d
            if d:
                completed.append((i, float(self.episode_return[i])))
                self.episode_return[i] = 0.0
                o = env.reset()
            obs[i] = o
        return obs, rewards, dones, completed
