"""Kinematic closed-loop rollouts of a planner in the toy corridor world."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .driving import GRID, DatasetConfig, Scenario, decode_plan, expert_plan, rasterize, \
    sample_feasible_scenario
from .errors import ContractError, InfeasibleScenarioError
from .pipeline import Pipeline, forward_with_noise
from .trainer import Checkpoint


def _world_defaults() -> DatasetConfig:
    # episodes start near the corridor entrance so the target distance fits the grid
    return DatasetConfig(n_scenarios=1, ego_x_range=(1.0, 3.0))


@dataclass
class SimConfig:
    episode_length: int = 40
    n_episodes: int = 50
    seed: int = 0
    collision_radius: float = 1.5
    target_distance: float = 24.0
    speed_cap: float = 2.0
    delta: np.ndarray | None = None  # universal image perturbation (4, 32, 32)
    epsilon: float | None = None  # l_inf budget the delta must respect
    world: DatasetConfig = field(default_factory=_world_defaults)

    def __post_init__(self):
        if self.episode_length < 1 or self.n_episodes < 1:
            raise ContractError("episode_length and n_episodes must be positive")
        if self.collision_radius <= 0 or self.target_distance <= 0 or self.speed_cap <= 0:
            raise ContractError("radius, target distance and speed cap must be positive")
        if self.delta is not None:
            self.delta = np.asarray(self.delta, dtype=np.float64).reshape(4, GRID, GRID)
            if self.epsilon is None:
                raise ContractError("an attack delta needs its budget epsilon")
            if np.max(np.abs(self.delta)) > self.epsilon + 1e-9:
                raise ContractError("attack delta exceeds its l_inf budget")


@dataclass
class Episode:
    index: int
    completion: float
    collisions: int
    off_corridor: int
    steps: int
    failed: bool
    trace: list  # (step, x, y, collision flag)

    @property
    def score(self) -> float:
        return self.completion * 0.5 ** self.collisions


@dataclass
class SimResult:
    episodes: list

    @property
    def driving_score(self) -> float:
        return float(np.mean([e.score for e in self.episodes]))

    @property
    def completion_rate(self) -> float:
        return float(np.mean([e.completion for e in self.episodes]))

    @property
    def collision_rate(self) -> float:
        return float(np.mean([e.collisions > 0 for e in self.episodes]))

    @property
    def failures(self) -> int:
        return sum(e.failed for e in self.episodes)

    def summary(self) -> dict:
        return {"driving_score": self.driving_score, "completion_rate": self.completion_rate,
                "collision_rate": self.collision_rate, "failures": self.failures,
                "episodes": len(self.episodes)}


class ExpertPlanner:
    """Oracle stub: returns the rule-based expert's waypoints for the true world."""

    def __call__(self, scenario: Scenario, raster: np.ndarray) -> np.ndarray:
        return expert_plan(scenario)


class ModelPlanner:
    def __init__(self, model: Pipeline):
        self.model = model
        model.set_requires_grad(False)

    def __call__(self, scenario: Scenario, raster: np.ndarray) -> np.ndarray:
        heads, _ = forward_with_noise(self.model, raster[None], None)
        return decode_plan(heads["Plan"].data, scenario.ego[None, :2])[0]


def as_planner(victim):
    if isinstance(victim, Checkpoint):
        return ModelPlanner(victim.to_pipeline())
    if isinstance(victim, Pipeline):
        return ModelPlanner(victim)
    if callable(victim):
        return victim
    raise ContractError("victim must be a Checkpoint, Pipeline or planner callable")


def _world_state(start: Scenario, ego: np.ndarray, t: int) -> Scenario:
    return Scenario(start.center, start.bend_x, start.slope, ego.copy(),
                    start.obstacles_at(t), start.obstacle_vel.copy(), start.horizon)


def run_episode(planner, start: Scenario, cfg: SimConfig, index: int = 0) -> Episode:
    ego = start.ego.copy()
    x0 = ego[0]
    collisions = off = 0
    was_colliding = False
    trace = [(0, float(ego[0]), float(ego[1]), 0)]
    failed = False
    t = 0
    while t < cfg.episode_length:
        world = _world_state(start, ego, t)
        raster = rasterize(world)
        if cfg.delta is not None:
            raster = np.clip(raster + cfg.delta, 0.0, 1.0)
        try:
            plan = np.asarray(planner(world, raster), dtype=np.float64)
        except (FloatingPointError, ArithmeticError, InfeasibleScenarioError):
            plan = np.full((3, 2), np.nan)
        if not np.all(np.isfinite(plan)):
            failed = True
            collisions += 1
            break
        move = plan[0] - ego[:2]
        length = float(np.hypot(*move))
        if length > cfg.speed_cap:
            move *= cfg.speed_cap / length
        ego[:2] += move
        t += 1
        obstacles = start.obstacles_at(t)
        hit = bool(len(obstacles)) and bool(
            np.any(np.hypot(obstacles[:, 0] - ego[0], obstacles[:, 1] - ego[1]) < cfg.collision_radius))
        outside = not bool(world.in_corridor(ego[0], ego[1]))
        off += outside
        colliding = hit or outside
        collisions += colliding and not was_colliding  # count contact events, not contact steps
        was_colliding = colliding
        trace.append((t, float(ego[0]), float(ego[1]), int(colliding)))
        if ego[0] - x0 >= cfg.target_distance or ego[0] >= GRID - 1:
            break
    completion = float(np.clip((ego[0] - x0) / cfg.target_distance, 0.0, 1.0))
    return Episode(index, completion, int(collisions), int(off), t, failed, trace)


def episode_worlds(cfg: SimConfig) -> list:
    world = dataclasses.replace(cfg.world, seed=cfg.seed)
    return [sample_feasible_scenario(world, i) for i in range(cfg.n_episodes)]


def run_closed_loop(victim, cfg: SimConfig) -> SimResult:
    """Roll out ``cfg.n_episodes`` worlds; a pure function of (victim, cfg)."""
    planner = as_planner(victim)
    return SimResult([run_episode(planner, w, cfg, i) for i, w in enumerate(episode_worlds(cfg))])


def compare_defenses(checkpoints: dict, cfg: SimConfig) -> list:
    """Rows ``(name, condition, summary)`` for every checkpoint clean and attacked."""
    if cfg.delta is None:
        raise ContractError("compare_defenses needs an attack delta in cfg")
    clean_cfg = dataclasses.replace(cfg, delta=None, epsilon=None)
    rows = []
    for name, ck in checkpoints.items():
        rows.append((name, "clean", run_closed_loop(ck, clean_cfg).summary()))
        rows.append((name, "attacked", run_closed_loop(ck, cfg).summary()))
    return rows


def write_trace_csv(path, result: SimResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["episode", "step", "ego_x", "ego_y", "collision"])
        for ep in result.episodes:
            for step, x, y, flag in ep.trace:
                writer.writerow([ep.index, step, repr(x), repr(y), flag])
