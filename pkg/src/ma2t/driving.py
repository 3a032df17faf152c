"""Synthetic corridor-driving task: scenarios, rasters, expert, model, metrics.

Coordinates are in grid cells, ``x`` along the corridor (raster column) and
``y`` across it (raster row). The corridor is a band of continuous width 8
around a centre line ``c(x)`` that is either straight or bends once.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, InfeasibleScenarioError
from .pipeline import InjectionSite, ModuleNode, Pipeline, SITE_IDS
from .rng import Stream

GRID = 32
HORIZON = 3
MAX_OBSTACLES = 3
SENTINEL = -1.0
HALF_WIDTH = 4.0
CLEARANCE = 2.0
OFFSETS = tuple(range(-6, 7))
FEATURE = 64

# normalisation of regression targets (cells per unit of network output)
POSITION_SCALE = 16.0
DISPLACEMENT_SCALE = 2.0
PLAN_SCALE = 4.0

DEFAULT_BUDGETS = {"Images": 0.8, "TrackMotion": 0.1, "MapMotion": 0.1,
                   "MotionOcc": 0.1, "MotionPlan": 0.1}


@dataclass
class DatasetConfig:
    seed: int = 0
    n_scenarios: int = 2000
    obstacle_count_probs: tuple = (0.1, 0.3, 0.35, 0.25)
    ego_speed_range: tuple = (1.5, 1.5)
    ego_x_range: tuple = (1.0, 24.0)
    ego_lateral_range: tuple = (-2.5, 2.5)
    obstacle_speed_range: tuple = (-0.5, 1.0)
    obstacle_lateral_speed_range: tuple = (-0.3, 0.3)
    obstacle_ahead_range: tuple = (3.0, 12.0)
    bend_probability: float = 0.5
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.n_scenarios <= 0:
            raise ContractError("n_scenarios must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ContractError("val_fraction must lie in (0, 1)")
        probs = np.asarray(self.obstacle_count_probs, dtype=np.float64)
        if probs.ndim != 1 or len(probs) > MAX_OBSTACLES + 1 or np.any(probs < 0) \
                or not np.isclose(probs.sum(), 1.0):
            raise ContractError("obstacle_count_probs must be a distribution over 0..3")
        for name in ("ego_speed_range", "ego_x_range", "ego_lateral_range", "obstacle_speed_range",
                     "obstacle_lateral_speed_range", "obstacle_ahead_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ContractError(f"{name} must be (low, high) with low <= high")


@dataclass
class Scenario:
    center: float  # centre line at x = 0
    bend_x: float
    slope: float  # lateral drift per cell after bend_x (0 for straight)
    ego: np.ndarray  # (x, y, v)
    obstacle_pos: np.ndarray  # (k, 2)
    obstacle_vel: np.ndarray  # (k, 2)
    horizon: int = HORIZON

    def centerline(self, x):
        return self.center + self.slope * np.maximum(0.0, np.asarray(x, dtype=np.float64) - self.bend_x)

    def in_corridor(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        return (x >= 0) & (x <= GRID - 1) & (np.abs(y - self.centerline(x)) < HALF_WIDTH)

    def corridor_mask(self) -> np.ndarray:
        cols = np.arange(GRID, dtype=np.float64)
        rows = np.arange(GRID, dtype=np.float64)[:, None]
        return (np.abs(rows - self.centerline(cols)[None, :]) < HALF_WIDTH).astype(np.float64)

    def obstacles_at(self, step: float) -> np.ndarray:
        return self.obstacle_pos + step * self.obstacle_vel

    @property
    def n_obstacles(self) -> int:
        return len(self.obstacle_pos)

    def check(self) -> None:
        if self.n_obstacles > MAX_OBSTACLES:
            raise ContractError("too many obstacles")
        if not self.in_corridor(self.ego[0], self.ego[1]):
            raise ContractError("ego starts outside the corridor")
        for x, y in self.obstacle_pos:
            if not self.in_corridor(x, y):
                raise ContractError("obstacle starts outside the corridor")


def generate_scenario(seed: int, cfg: DatasetConfig, *stream_ids: int) -> Scenario:
    """Sample one scenario; a pure function of ``(seed, cfg, stream_ids)``."""
    rs = Stream(seed, "data", *stream_ids)
    center = float(rs.integers(8, 24)) + 0.5
    if rs.uniform() < cfg.bend_probability:
        bend_x = float(rs.uniform((), 8.0, 22.0))
        magnitude = float(rs.uniform((), 0.15, 0.4))
        direction = 1.0 if rs.uniform() < 0.5 else -1.0
        # keep the whole band on the grid
        room = (GRID - 1 - HALF_WIDTH - center) if direction > 0 else (center - HALF_WIDTH)
        slope = direction * min(magnitude, max(room, 0.0) / (GRID - 1 - bend_x))
    else:
        bend_x, slope = 0.0, 0.0
        rs.uniform((3,))  # keep the stream aligned across corridor kinds
    ego_x = float(rs.uniform((), *cfg.ego_x_range)) if cfg.ego_x_range[0] < cfg.ego_x_range[1] \
        else float(cfg.ego_x_range[0])
    lateral = float(rs.uniform((), *cfg.ego_lateral_range)) \
        if cfg.ego_lateral_range[0] < cfg.ego_lateral_range[1] else float(cfg.ego_lateral_range[0])
    ego_v = float(rs.uniform((), *cfg.ego_speed_range)) \
        if cfg.ego_speed_range[0] < cfg.ego_speed_range[1] else float(cfg.ego_speed_range[0])
    scen = Scenario(center, bend_x, slope, np.zeros(3), np.zeros((0, 2)), np.zeros((0, 2)))
    ego_y = float(scen.centerline(ego_x)) + lateral
    scen.ego = np.array([ego_x, ego_y, ego_v])

    probs = np.asarray(cfg.obstacle_count_probs, dtype=np.float64)
    k = int(np.searchsorted(np.cumsum(probs), rs.uniform(), side="right"))
    k = min(k, len(probs) - 1)
    pos, vel = [], []
    for _ in range(k):
        ox = min(ego_x + float(rs.uniform((), *cfg.obstacle_ahead_range)), GRID - 1.0)
        oy = float(scen.centerline(ox)) + float(rs.uniform((), -3.0, 3.0))
        vx = float(rs.uniform((), *cfg.obstacle_speed_range))
        vy = float(rs.uniform((), *cfg.obstacle_lateral_speed_range))
        pos.append((ox, oy))
        vel.append((vx, vy))
    scen.obstacle_pos = np.array(pos, dtype=np.float64).reshape(-1, 2)
    scen.obstacle_vel = np.array(vel, dtype=np.float64).reshape(-1, 2)
    return scen


def _paint(channel: np.ndarray, points: np.ndarray) -> None:
    for x, y in np.asarray(points).reshape(-1, 2):
        col, row = int(np.floor(x + 0.5)), int(np.floor(y + 0.5))
        if 0 <= row < GRID and 0 <= col < GRID:
            channel[row, col] = 1.0


def rasterize(scenario: Scenario) -> np.ndarray:
    """4x32x32 raster: corridor, ego, obstacles now, obstacles one step ago."""
    raster = np.zeros((4, GRID, GRID))
    raster[0] = scenario.corridor_mask()
    _paint(raster[1], scenario.ego[:2])
    _paint(raster[2], scenario.obstacle_pos)
    _paint(raster[3], scenario.obstacles_at(-1.0))
    return raster


def expert_plan(scenario: Scenario) -> np.ndarray:
    """Three waypoints ``(x, y)`` from the rule-based lateral-offset expert."""
    ego_x, _, v = scenario.ego
    waypoints = np.zeros((HORIZON, 2))
    for s in range(1, HORIZON + 1):
        x = ego_x + s * v
        obstacles = scenario.obstacles_at(s)
        best = None
        for o in sorted(OFFSETS, key=lambda o: (abs(o), o)):
            y = float(scenario.centerline(x)) + o
            if not scenario.in_corridor(x, y):
                continue
            blocked = bool(len(obstacles)) and bool(
                np.any(np.hypot(obstacles[:, 0] - x, obstacles[:, 1] - y) <= CLEARANCE))
            cost = 1000.0 * blocked + o * o
            if best is None or cost < best[0]:
                best = (cost, y)
        if best is None:
            raise InfeasibleScenarioError(f"no in-corridor candidate at step {s}")
        waypoints[s - 1] = (x, best[1])
    return waypoints


@dataclass
class Labels:
    """Batched or single-sample targets; leading batch axis when batched."""

    obstacle_positions: np.ndarray  # (..., 3, 2)
    valid: np.ndarray  # (..., 3)
    drivable_mask_16: np.ndarray  # (..., 16, 16)
    future_displacements: np.ndarray  # (..., 3, 3, 2)
    future_occupancy: np.ndarray  # (..., 3, 8, 8)
    expert_waypoints: np.ndarray  # (..., 3, 2)
    ego: np.ndarray  # (..., 2)

    FIELDS = ("obstacle_positions", "valid", "drivable_mask_16", "future_displacements",
              "future_occupancy", "expert_waypoints", "ego")

    def take(self, index) -> "Labels":
        return Labels(*(getattr(self, f)[index] for f in self.FIELDS))

    @staticmethod
    def stack(items) -> "Labels":
        return Labels(*(np.stack([getattr(it, f) for it in items]) for f in Labels.FIELDS))


def future_occupancy(scenario: Scenario) -> np.ndarray:
    occ = np.zeros((HORIZON, 8, 8))
    for s in range(1, HORIZON + 1):
        for x, y in scenario.obstacles_at(s):
            col, row = int(np.floor(x + 0.5)), int(np.floor(y + 0.5))
            if 0 <= row < GRID and 0 <= col < GRID:
                occ[s - 1, row // 4, col // 4] = 1.0
    return occ


def make_labels(scenario: Scenario) -> Labels:
    k = scenario.n_obstacles
    positions = np.full((MAX_OBSTACLES, 2), SENTINEL)
    displacements = np.full((MAX_OBSTACLES, HORIZON, 2), SENTINEL)
    valid = np.zeros(MAX_OBSTACLES)
    positions[:k] = scenario.obstacle_pos
    steps = np.arange(1, HORIZON + 1, dtype=np.float64)[None, :, None]
    displacements[:k] = steps * scenario.obstacle_vel[:, None, :]
    valid[:k] = 1.0
    mask = scenario.corridor_mask()
    mask16 = (mask.reshape(16, 2, 16, 2).mean(axis=(1, 3)) >= 0.5).astype(np.float64)
    return Labels(positions, valid, mask16, displacements, future_occupancy(scenario),
                  expert_plan(scenario), scenario.ego[:2].copy())


# --------------------------------------------------------------------- dataset

@dataclass
class Dataset:
    observations: np.ndarray  # (N, 4, 32, 32)
    labels: Labels
    scenarios: dict  # arrays describing each scenario, see scenario_arrays
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.observations)

    def batch(self, index):
        return self.observations[index], self.labels.take(index)

    def scenario(self, i: int) -> Scenario:
        s = self.scenarios
        k = int(s["n_obstacles"][i])
        return Scenario(float(s["corridor"][i, 0]), float(s["corridor"][i, 1]),
                        float(s["corridor"][i, 2]), s["ego"][i].copy(),
                        s["obstacle_pos"][i, :k].copy(), s["obstacle_vel"][i, :k].copy())

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.observations[index], self.labels.take(index),
                       {k: v[index] for k, v in self.scenarios.items()}, dict(self.meta))


def scenario_arrays(scenarios) -> dict:
    n = len(scenarios)
    out = {
        "corridor": np.zeros((n, 3)),
        "ego": np.zeros((n, 3)),
        "obstacle_pos": np.full((n, MAX_OBSTACLES, 2), SENTINEL),
        "obstacle_vel": np.full((n, MAX_OBSTACLES, 2), SENTINEL),
        "n_obstacles": np.zeros(n, dtype=np.int64),
    }
    for i, sc in enumerate(scenarios):
        out["corridor"][i] = (sc.center, sc.bend_x, sc.slope)
        out["ego"][i] = sc.ego
        out["obstacle_pos"][i, :sc.n_obstacles] = sc.obstacle_pos
        out["obstacle_vel"][i, :sc.n_obstacles] = sc.obstacle_vel
        out["n_obstacles"][i] = sc.n_obstacles
    return out


def sample_feasible_scenario(cfg: DatasetConfig, index: int, max_attempts: int = 1000) -> Scenario:
    for attempt in range(max_attempts):
        scen = generate_scenario(cfg.seed, cfg, index, attempt)
        try:
            expert_plan(scen)
        except InfeasibleScenarioError:
            continue
        return scen
    raise InfeasibleScenarioError(f"no feasible scenario for index {index}")


def dataset_from_scenarios(scenarios, meta=None) -> Dataset:
    obs = np.stack([rasterize(s) for s in scenarios])
    labels = Labels.stack([make_labels(s) for s in scenarios])
    return Dataset(obs, labels, scenario_arrays(scenarios), dict(meta or {}))


def build_dataset(cfg: DatasetConfig) -> tuple[Dataset, Dataset]:
    """Generate ``cfg.n_scenarios`` feasible scenarios and split train/val."""
    scenarios = [sample_feasible_scenario(cfg, i) for i in range(cfg.n_scenarios)]
    n_val = max(1, int(round(cfg.val_fraction * cfg.n_scenarios)))
    n_train = cfg.n_scenarios - n_val
    if n_train < 1:
        raise ContractError("split leaves no training scenarios")
    meta = {"config": _jsonable(asdict(cfg))}
    train = dataset_from_scenarios(scenarios[:n_train], {**meta, "split": "train"})
    val = dataset_from_scenarios(scenarios[n_train:], {**meta, "split": "val"})
    return train, val


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


DATASET_FORMAT = "ma2t-dataset"
DATASET_VERSION = 1


def save_dataset(path, ds: Dataset) -> None:
    """Write one split as an uncompressed ``.npz`` archive.

    Members: ``header`` (UTF-8 JSON bytes with format, version, count and
    metadata), ``observations`` (uint8, the raster is exactly 0/1), every
    :class:`Labels` field as ``labels_<name>`` (float64) and every scenario
    array as ``scenario_<name>``.
    """
    if not np.array_equal(ds.observations, ds.observations.astype(np.uint8)):
        raise ContractError("observations must be binary to serialise")
    header = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "n": len(ds), "meta": ds.meta}
    arrays = {"header": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
              "observations": ds.observations.astype(np.uint8)}
    for f in Labels.FIELDS:
        arrays[f"labels_{f}"] = np.ascontiguousarray(getattr(ds.labels, f), dtype="<f8")
    for k, v in ds.scenarios.items():
        arrays[f"scenario_{k}"] = v
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_dataset(path) -> Dataset:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(z["header"].tobytes().decode())
        if header.get("format") != DATASET_FORMAT or header.get("version") != DATASET_VERSION:
            raise ContractError(f"{path}: not a version-{DATASET_VERSION} dataset file")
        obs = z["observations"].astype(np.float64)
        labels = Labels(*(z[f"labels_{f}"].astype(np.float64) for f in Labels.FIELDS))
        scen = {k[len("scenario_"):]: z[k] for k in z.files if k.startswith("scenario_")}
    return Dataset(obs, labels, scen, header["meta"])


# ----------------------------------------------------------------------- model

ARCH = "toy-uniad-v1"


def _init_linear(rs: Stream, fan_in: int, fan_out: int) -> dict:
    bound = 1.0 / np.sqrt(fan_in)
    return {"w": Tensor(rs.uniform((fan_in, fan_out), -bound, bound), requires_grad=True),
            "b": Tensor(rs.uniform((fan_out,), -bound, bound), requires_grad=True)}


def _init_conv(rs: Stream, c_in: int, c_out: int, k: int = 3) -> dict:
    fan_in = c_in * k * k
    bound = 1.0 / np.sqrt(fan_in)
    return {"w": Tensor(rs.uniform((c_out, c_in, k, k), -bound, bound), requires_grad=True),
            "b": Tensor(rs.uniform((c_out,), -bound, bound), requires_grad=True)}


def _prefixed(prefix: str, layer: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in layer.items()}


def _encoder_params(rs: Stream, head_out: int) -> dict:
    p = {}
    p.update(_prefixed("conv1", _init_conv(rs, 4, 8)))
    p.update(_prefixed("conv2", _init_conv(rs, 8, 16)))
    p.update(_prefixed("fc", _init_linear(rs, 16 * 8 * 8, FEATURE)))
    p.update(_prefixed("head", _init_linear(rs, FEATURE, head_out)))
    return p


def _lin(p, name, x):
    return ad.linear(x, p[f"{name}.w"], p[f"{name}.b"])


def _encoder_forward(p, x):
    h = ad.relu(ad.conv2d(x, p["conv1.w"], p["conv1.b"], stride=2, padding=1))
    h = ad.relu(ad.conv2d(h, p["conv2.w"], p["conv2.b"], stride=2, padding=1))
    feat = ad.tanh(_lin(p, "fc", ad.flatten(h)))
    return feat, _lin(p, "head", feat)


def _motion_forward(p, inputs):
    h = ad.relu(_lin(p, "fc1", ad.concat(inputs, axis=1)))
    feat = ad.tanh(_lin(p, "fc2", h))
    return feat, _lin(p, "head", feat)


def _occ_forward(p, x):
    h = ad.relu(_lin(p, "fc1", x))
    feat = ad.tanh(_lin(p, "fc2", h))
    return feat, _lin(p, "head", feat)


def _plan_forward(p, x):
    h = ad.relu(_lin(p, "fc1", x))
    return None, _lin(p, "fc2", h)


def _batch_size(labels: Labels) -> int:
    return labels.expert_waypoints.shape[0]


def track_loss(head, labels: Labels):
    b = _batch_size(labels)
    target = ((labels.obstacle_positions - POSITION_SCALE) / POSITION_SCALE).reshape(b, -1)
    mask = np.repeat(labels.valid, 2, axis=-1).reshape(b, -1)
    return ad.mse_loss(head, np.where(mask > 0, target, 0.0), mask=mask, reduction="none")


def map_loss(head, labels: Labels):
    b = _batch_size(labels)
    return ad.bce_with_logits_loss(head, labels.drivable_mask_16.reshape(b, -1), reduction="none")


def motion_loss(head, labels: Labels):
    b = _batch_size(labels)
    target = (labels.future_displacements / DISPLACEMENT_SCALE).reshape(b, -1)
    mask = np.repeat(labels.valid, HORIZON * 2, axis=-1).reshape(b, -1)
    return ad.mse_loss(head, np.where(mask > 0, target, 0.0), mask=mask, reduction="none")


def occ_loss(head, labels: Labels):
    b = _batch_size(labels)
    return ad.bce_with_logits_loss(head, labels.future_occupancy.reshape(b, -1), reduction="none")


def plan_loss(head, labels: Labels):
    b = _batch_size(labels)
    rel = (labels.expert_waypoints - labels.ego[:, None, :]) / PLAN_SCALE
    return ad.mse_loss(head, rel.reshape(b, -1), reduction="none")


def build_reference_model(seed: int) -> Pipeline:
    """The fixed five-module reference architecture, seeded initialisation."""
    rs = Stream(seed, "init")
    track = _encoder_params(rs, 2 * MAX_OBSTACLES)
    mapp = _encoder_params(rs, 16 * 16)
    motion = {}
    motion.update(_prefixed("fc1", _init_linear(rs, 2 * FEATURE, 128)))
    motion.update(_prefixed("fc2", _init_linear(rs, 128, FEATURE)))
    motion.update(_prefixed("head", _init_linear(rs, FEATURE, MAX_OBSTACLES * HORIZON * 2)))
    occ = {}
    occ.update(_prefixed("fc1", _init_linear(rs, FEATURE, 128)))
    occ.update(_prefixed("fc2", _init_linear(rs, 128, FEATURE)))
    occ.update(_prefixed("head", _init_linear(rs, FEATURE, HORIZON * 8 * 8)))
    plan = {}
    plan.update(_prefixed("fc1", _init_linear(rs, FEATURE, 64)))
    plan.update(_prefixed("fc2", _init_linear(rs, 64, HORIZON * 2)))
    modules = {
        "Track": ModuleNode("Track", track, _encoder_forward, track_loss),
        "Map": ModuleNode("Map", mapp, _encoder_forward, map_loss),
        "Motion": ModuleNode("Motion", motion, _motion_forward, motion_loss),
        "Occ": ModuleNode("Occ", occ, _occ_forward, occ_loss),
        "Plan": ModuleNode("Plan", plan, _plan_forward, plan_loss),
    }
    shapes = {"Images": (4, GRID, GRID)}
    sites = [InjectionSite(sid, shapes.get(sid, (FEATURE,)), DEFAULT_BUDGETS[sid],
                           (0.0, 1.0) if sid == "Images" else None) for sid in SITE_IDS]
    return Pipeline(modules, sites, ARCH)


PARAMETER_COUNT = 2 * (296 + 1168 + 65600) + 390 + 16640 + (16512 + 8256 + 1170) \
    + (8320 + 8256 + 12480) + (4160 + 390)


# ------------------------------------------------------------------- decoding

def decode_plan(plan_head: np.ndarray, ego: np.ndarray) -> np.ndarray:
    """Network plan output -> absolute waypoints ``(batch, 3, 2)``."""
    b = plan_head.shape[0]
    return ego[:, None, :] + PLAN_SCALE * plan_head.reshape(b, HORIZON, 2)


def decode_positions(track_head: np.ndarray) -> np.ndarray:
    b = track_head.shape[0]
    return POSITION_SCALE + POSITION_SCALE * track_head.reshape(b, MAX_OBSTACLES, 2)


def decode_displacements(motion_head: np.ndarray) -> np.ndarray:
    b = motion_head.shape[0]
    return DISPLACEMENT_SCALE * motion_head.reshape(b, MAX_OBSTACLES, HORIZON, 2)


# -------------------------------------------------------------------- metrics

def metric_avg_l2(pred_waypoints, expert_waypoints):
    """Mean over the horizon of the Euclidean waypoint error (per sample)."""
    diff = np.asarray(pred_waypoints, dtype=np.float64) - np.asarray(expert_waypoints, dtype=np.float64)
    return np.sqrt((diff * diff).sum(axis=-1)).mean(axis=-1)


def _iou(pred: np.ndarray, true: np.ndarray, axes) -> np.ndarray:
    inter = np.logical_and(pred, true).sum(axis=axes)
    union = np.logical_or(pred, true).sum(axis=axes)
    # an empty prediction of an empty mask is a perfect match
    return np.where(union > 0, inter / np.maximum(union, 1), 1.0)


def metric_iou(pred_mask_logits, true_mask, threshold: float = 0.5) -> float:
    logits = np.asarray(pred_mask_logits, dtype=np.float64)
    pred = 1.0 / (1.0 + np.exp(-logits)) > threshold
    return float(_iou(pred, np.asarray(true_mask) > 0.5, axes=None))


def iou_per_sample(pred_mask_logits, true_mask, threshold: float = 0.5) -> np.ndarray:
    logits = np.asarray(pred_mask_logits, dtype=np.float64)
    b = logits.shape[0]
    pred = (1.0 / (1.0 + np.exp(-logits)) > threshold).reshape(b, -1)
    return _iou(pred, np.asarray(true_mask).reshape(b, -1) > 0.5, axes=1)


def _valid_from_sentinel(true: np.ndarray, event_axes: int) -> np.ndarray:
    axes = tuple(range(true.ndim - event_axes, true.ndim))
    return ~np.all(true == SENTINEL, axis=axes)


def metric_min_ade(pred_displacements, true_displacements, valid=None) -> tuple[float, bool]:
    """Single-mode displacement error over valid obstacles and steps.

    Returns ``(error, has_valid)``; with no valid obstacle the error is 0.
    """
    pred = np.asarray(pred_displacements, dtype=np.float64)
    true = np.asarray(true_displacements, dtype=np.float64)
    if valid is None:
        valid = _valid_from_sentinel(true, 2)
    valid = np.asarray(valid) > 0
    if not valid.any():
        return 0.0, False
    err = np.sqrt(((pred[valid] - true[valid]) ** 2).sum(axis=-1))
    return float(err.mean()), True


def metric_det_err(pred_positions, true_positions, valid=None) -> tuple[float, bool]:
    """Mean position error over non-sentinel obstacles, ``(error, has_valid)``."""
    pred = np.asarray(pred_positions, dtype=np.float64)
    true = np.asarray(true_positions, dtype=np.float64)
    if valid is None:
        valid = _valid_from_sentinel(true, 1)
    valid = np.asarray(valid) > 0
    if not valid.any():
        return 0.0, False
    return float(np.sqrt(((pred[valid] - true[valid]) ** 2).sum(axis=-1)).mean()), True


METRICS = ("avg_l2", "iou_map", "min_ade", "iou_occ", "det_err")


def sample_metrics(heads: dict, labels: Labels) -> dict:
    """Per-sample metric arrays; NaN marks samples without valid obstacles."""
    h = {k: v.data for k, v in heads.items()}
    b = h["Plan"].shape[0]
    plan = decode_plan(h["Plan"], labels.ego)
    positions = decode_positions(h["Track"])
    disp = decode_displacements(h["Motion"])
    ade = np.full(b, np.nan)
    det = np.full(b, np.nan)
    for i in range(b):
        value, ok = metric_min_ade(disp[i], labels.future_displacements[i], labels.valid[i])
        if ok:
            ade[i] = value
        value, ok = metric_det_err(positions[i], labels.obstacle_positions[i], labels.valid[i])
        if ok:
            det[i] = value
    return {
        "avg_l2": metric_avg_l2(plan, labels.expert_waypoints),
        "iou_map": iou_per_sample(h["Map"], labels.drivable_mask_16),
        "min_ade": ade,
        "iou_occ": iou_per_sample(h["Occ"], labels.future_occupancy),
        "det_err": det,
    }
