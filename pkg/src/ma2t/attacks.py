"""Perturbation generation against the pipeline.

All attacks share one engine: per-sample, per-site perturbations kept inside
an lp ball, gradients of a chosen objective w.r.t. those perturbations, and
norm-specific ascent steps. The input-raster perturbation is additionally kept
so that ``x + delta`` stays inside the raster's clamp range.
"""

from __future__ import annotations

import contextlib
import dataclasses
import json
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .driving import DEFAULT_BUDGETS, GRID, Labels
from .errors import ContractError, NumericError
from .pipeline import MODULE_IDS, SITE_CONSUMER, SITE_IDS, Pipeline, forward_with_noise
from .rng import Stream

NORMS = ("l1", "l2", "linf")
METHODS = ("fgsm", "mifgsm", "pgd")
OBJECTIVES = ("total_loss", "sub_loss", "plan_loss")


def image_budget(eps_linf: float, norm: str, height: int = GRID, width: int = GRID) -> float:
    """Raster budget for ``norm`` derived from an l-infinity budget.

    l1 -> eps * sqrt(H*W), l2 -> eps * H*W. Note that this makes the l2 ball
    larger than the l1 ball, the reverse of the usual containment.
    """
    if norm == "linf":
        return eps_linf
    if norm == "l1":
        return eps_linf * np.sqrt(height * width)
    if norm == "l2":
        return eps_linf * height * width
    raise ContractError(f"unknown norm {norm!r}")


@dataclass
class AttackConfig:
    method: str = "pgd"
    norm: str = "linf"
    budgets: dict = field(default_factory=lambda: dict(DEFAULT_BUDGETS))
    steps: int = 5
    step_size: dict | None = None  # per site; default eps / 5
    restarts: int = 5
    momentum: float = 1.0
    objective: str = "total_loss"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown attack method {self.method!r}")
        if self.norm not in NORMS:
            raise ContractError(f"unknown norm {self.norm!r}")
        if self.objective not in OBJECTIVES:
            raise ContractError(f"unknown objective {self.objective!r}")
        unknown = set(self.budgets) - set(SITE_IDS)
        if unknown:
            raise ContractError(f"unknown injection sites {sorted(unknown)}")
        for site, eps in self.budgets.items():
            if not eps >= 0:
                raise ContractError(f"budget for {site} must be non-negative")
        if self.steps < 0 or self.restarts < 1:
            raise ContractError("steps must be >= 0 and restarts >= 1")
        if self.step_size is not None:
            for site, alpha in self.step_size.items():
                if not alpha > 0:
                    raise ContractError(f"step size for {site} must be positive")
                if alpha > 2 * self.budgets.get(site, 0.0) and self.budgets.get(site, 0.0) > 0:
                    raise ContractError(f"step size for {site} exceeds twice its budget")

    def alpha(self, site: str) -> float:
        if self.step_size and site in self.step_size:
            return self.step_size[site]
        return self.budgets[site] / 5.0

    def active_sites(self) -> list:
        return [s for s in SITE_IDS if self.budgets.get(s, 0.0) > 0]

    def replace(self, **changes) -> "AttackConfig":
        return dataclasses.replace(self, **changes)

    def describe(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class PerturbationSet:
    """Per-site perturbations with a leading batch axis."""

    deltas: dict
    budgets: dict
    norm: str
    flags: dict = field(default_factory=dict)

    def as_noise(self) -> dict:
        return {s: Tensor._wrap(d) for s, d in self.deltas.items()}

    def norms(self) -> dict:
        return {s: batch_norm(d, self.norm) for s, d in self.deltas.items()}

    def check_budgets(self, tol: float = 1e-9) -> bool:
        return all(np.all(n <= self.budgets[s] + tol) for s, n in self.norms().items())


# ----------------------------------------------------------------- projection

def _project_l1_rows(v: np.ndarray, eps: float) -> np.ndarray:
    """Euclidean projection of each row onto the l1 ball (sort and threshold)."""
    out = v.copy()
    a = np.abs(v)
    outside = a.sum(axis=1) > eps
    if not np.any(outside):
        return out
    u = -np.sort(-a[outside], axis=1)
    css = np.cumsum(u, axis=1)
    k = np.arange(1, u.shape[1] + 1)
    cond = u - (css - eps) / k > 0
    rho = cond.shape[1] - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = (css[np.arange(len(rho)), rho] - eps) / (rho + 1)
    out[outside] = np.sign(v[outside]) * np.maximum(a[outside] - theta[:, None], 0.0)
    return out


def project(delta, p: str, eps: float) -> np.ndarray:
    """Project onto ``{d : ||d||_p <= eps}`` treating ``delta`` as one vector."""
    arr = np.asarray(delta, dtype=np.float64)
    return project_batch(arr.reshape(1, -1), p, eps).reshape(arr.shape)


def project_batch(delta: np.ndarray, p: str, eps: float) -> np.ndarray:
    """Row-wise projection: the first axis indexes independent samples."""
    if eps < 0:
        raise ContractError("budget must be non-negative")
    shape = delta.shape
    flat = delta.reshape(shape[0], -1)
    if eps == 0:
        return np.zeros(shape)
    if p == "linf":
        out = np.clip(flat, -eps, eps)
    elif p == "l2":
        norms = np.sqrt((flat * flat).sum(axis=1))
        scale = np.where(norms > eps, eps / np.where(norms > 0, norms, 1.0), 1.0)
        out = flat * scale[:, None]
    elif p == "l1":
        out = _project_l1_rows(flat, eps)
    else:
        raise ContractError(f"unknown norm {p!r}")
    return out.reshape(shape)


def batch_norm(delta: np.ndarray, p: str) -> np.ndarray:
    flat = delta.reshape(delta.shape[0], -1)
    if p == "linf":
        return np.abs(flat).max(axis=1) if flat.shape[1] else np.zeros(len(flat))
    if p == "l2":
        return np.sqrt((flat * flat).sum(axis=1))
    if p == "l1":
        return np.abs(flat).sum(axis=1)
    raise ContractError(f"unknown norm {p!r}")


# ------------------------------------------------------------------ objective

def _objective_modules(objective: str, sites) -> dict:
    """Which module losses drive each site's gradient."""
    if objective == "total_loss":
        return {s: MODULE_IDS for s in sites}
    if objective == "plan_loss":
        return {s: ("Plan",) for s in sites}
    return {s: (SITE_CONSUMER[s],) for s in sites}


def evaluate_objective(pipeline: Pipeline, obs, labels: Labels, deltas: Mapping, cfg: AttackConfig,
                       with_grad: bool = True):
    """Per-sample objective values and per-site gradients at ``deltas``.

    Per-sample losses are summed over the batch before differentiation so each
    sample's gradient is unscaled by the batch size.
    """
    sites = list(deltas)
    groups = _objective_modules(cfg.objective, sites)
    selection = sorted({m for mods in groups.values() for m in mods}, key=MODULE_IDS.index)
    with _parameters_constant(pipeline), ad.Tape() as tape:
        noise = {s: Tensor._wrap(np.array(d, dtype=np.float64), requires_grad=with_grad)
                 for s, d in deltas.items()}
        _, breakdown = forward_with_noise(pipeline, obs, labels, noise)
        per_sample = sum(breakdown.per_sample[m].data for m in selection)
        if not with_grad:
            return per_sample, {}
        grads = {}
        cache = {}
        for s in sites:
            mods = groups[s]
            if mods not in cache:
                objective = None
                for m in mods:
                    term = ad.sum_(breakdown.per_sample[m])
                    objective = term if objective is None else ad.add(objective, term)
                cache[mods] = ad.backward(objective, tape)
            g = cache[mods]
            grads[s] = g[noise[s]].data if noise[s] in g else np.zeros_like(noise[s].data)
    for s, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient at site {s}")
    return per_sample, grads


@contextlib.contextmanager
def _parameters_constant(pipeline: Pipeline):
    params = pipeline.parameters()
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, flags):
            p.requires_grad = flag


def _fit_image(delta: np.ndarray, obs: np.ndarray, site: str, pipeline: Pipeline) -> np.ndarray:
    rng = pipeline.site(site).clamp_range
    if rng is None:
        return delta
    return np.clip(obs + delta, *rng) - obs


def _init_zero(pipeline: Pipeline, sites, batch: int) -> dict:
    return {s: np.zeros((batch,) + tuple(pipeline.site(s).shape)) for s in sites}


def _ascent_direction(grad: np.ndarray, norm: str, flags: dict, site: str) -> np.ndarray:
    b = grad.shape[0]
    if norm == "linf":
        return np.sign(grad)
    scale = batch_norm(grad, "l2" if norm == "l2" else "l1")
    tiny = scale < 1e-12
    if np.any(tiny):
        flags.setdefault("zero_gradient", set()).add(site)
    safe = np.where(tiny, 1.0, scale).reshape((b,) + (1,) * (grad.ndim - 1))
    return grad / safe


def _finish(deltas: dict, cfg: AttackConfig, flags: dict) -> PerturbationSet:
    out_flags = {k: sorted(v) if isinstance(v, set) else v for k, v in flags.items()}
    return PerturbationSet(deltas, {s: cfg.budgets[s] for s in deltas}, cfg.norm, out_flags)


def _empty(pipeline: Pipeline, obs, cfg: AttackConfig) -> PerturbationSet:
    batch = np.asarray(obs).shape[0]
    sites = [s for s in cfg.budgets if s in SITE_IDS]
    return _finish(_init_zero(pipeline, sites, batch), cfg, {})


# -------------------------------------------------------------------- attacks

def fgsm(pipeline: Pipeline, obs, labels: Labels, cfg: AttackConfig) -> PerturbationSet:
    """One signed step of size eps from zero, then projection."""
    obs = np.asarray(obs, dtype=np.float64)
    sites = cfg.active_sites()
    result = _empty(pipeline, obs, cfg)
    if not sites:
        return result
    flags: dict = {}
    zero = _init_zero(pipeline, sites, obs.shape[0])
    _, grads = evaluate_objective(pipeline, obs, labels, zero, cfg)
    for s in sites:
        g = grads[s]
        if not np.any(g):
            flags.setdefault("zero_gradient", set()).add(s)
            warnings.warn(f"FGSM: zero gradient at site {s}", RuntimeWarning, stacklevel=2)
        step = cfg.budgets[s] * _ascent_direction(g, cfg.norm, flags, s)
        d = project_batch(step, cfg.norm, cfg.budgets[s])
        result.deltas[s] = _fit_image(d, obs, s, pipeline)
    result.flags = {k: sorted(v) for k, v in flags.items()}
    return result


def mifgsm(pipeline: Pipeline, obs, labels: Labels, cfg: AttackConfig) -> PerturbationSet:
    """Momentum iterative FGSM from zero with l1-normalised gradient accumulation."""
    obs = np.asarray(obs, dtype=np.float64)
    sites = cfg.active_sites()
    result = _empty(pipeline, obs, cfg)
    if not sites:
        return result
    flags: dict = {}
    b = obs.shape[0]
    deltas = _init_zero(pipeline, sites, b)
    momentum = {s: np.zeros_like(deltas[s]) for s in sites}
    for _ in range(cfg.steps):
        _, grads = evaluate_objective(pipeline, obs, labels, deltas, cfg)
        for s in sites:
            g = grads[s]
            n1 = batch_norm(g, "l1")
            tiny = n1 < 1e-12
            if np.any(tiny):
                flags.setdefault("unnormalised_momentum", set()).add(s)
            safe = np.where(tiny, 1.0, n1).reshape((b,) + (1,) * (g.ndim - 1))
            momentum[s] = cfg.momentum * momentum[s] + g / safe
            d = deltas[s] + cfg.alpha(s) * np.sign(momentum[s])
            deltas[s] = _fit_image(project_batch(d, cfg.norm, cfg.budgets[s]), obs, s, pipeline)
    result.deltas.update(deltas)
    result.flags = {k: sorted(v) for k, v in flags.items()}
    return result


def _random_start(pipeline: Pipeline, obs, sites, cfg: AttackConfig, rs: Stream) -> dict:
    b = obs.shape[0]
    deltas = {}
    for s in sites:
        eps = cfg.budgets[s]
        d = rs.uniform((b,) + tuple(pipeline.site(s).shape), -eps, eps)
        deltas[s] = _fit_image(project_batch(d, cfg.norm, eps), obs, s, pipeline)
    return deltas


def pgd(pipeline: Pipeline, obs, labels: Labels, cfg: AttackConfig, stream: Stream | None = None,
        return_history: bool = False):
    """Projected gradient ascent with random restarts.

    Each sample keeps the best iterate (by objective) over all restarts and all
    steps, so adding steps or restarts never lowers the returned objective.
    """
    obs = np.asarray(obs, dtype=np.float64)
    sites = cfg.active_sites()
    result = _empty(pipeline, obs, cfg)
    if not sites:
        return (result, []) if return_history else result
    rs = stream if stream is not None else Stream(cfg.seed, "attack")
    flags: dict = {}
    b = obs.shape[0]
    best_val = np.full(b, -np.inf)
    best = _init_zero(pipeline, sites, b)
    history = []

    def keep(values, deltas):
        better = values > best_val
        best_val[better] = values[better]
        for s in sites:
            best[s][better] = deltas[s][better]

    for _ in range(cfg.restarts):
        deltas = _random_start(pipeline, obs, sites, cfg, rs)
        restart_best = np.full(b, -np.inf)
        for _ in range(cfg.steps):
            values, grads = evaluate_objective(pipeline, obs, labels, deltas, cfg)
            keep(values, deltas)
            restart_best = np.maximum(restart_best, values)
            for s in sites:
                step = cfg.alpha(s) * _ascent_direction(grads[s], cfg.norm, flags, s)
                d = project_batch(deltas[s] + step, cfg.norm, cfg.budgets[s])
                deltas[s] = _fit_image(d, obs, s, pipeline)
        values, _ = evaluate_objective(pipeline, obs, labels, deltas, cfg, with_grad=False)
        keep(values, deltas)
        history.append(np.maximum(restart_best, values))
    result.deltas.update(best)
    result.flags = {k: sorted(v) for k, v in flags.items()}
    result.flags["objective"] = best_val.tolist()
    return (result, history) if return_history else result


def pgd_vector(value_and_grad, dim: int, norm: str, eps: float, steps: int = 5, restarts: int = 5,
               alpha: float | None = None, stream: Stream | None = None, batch: int = 1) -> tuple:
    """PGD on a plain objective over ``(batch, dim)`` perturbations.

    ``value_and_grad(delta)`` returns per-row values and gradients. Same
    start, step and best-iterate rules as :func:`pgd`. Returns
    ``(best_delta, best_value)``.
    """
    rs = stream if stream is not None else Stream(0, "attack")
    alpha = eps / 5.0 if alpha is None else alpha
    flags: dict = {}
    best_val = np.full(batch, -np.inf)
    best = np.zeros((batch, dim))
    for _ in range(restarts):
        delta = project_batch(rs.uniform((batch, dim), -eps, eps), norm, eps)
        for k in range(steps + 1):
            values, grad = value_and_grad(delta)
            values = np.asarray(values, dtype=np.float64)
            better = values > best_val
            best_val[better] = values[better]
            best[better] = delta[better]
            if k < steps:
                step = alpha * _ascent_direction(np.asarray(grad, dtype=np.float64), norm, flags, "x")
                delta = project_batch(delta + step, norm, eps)
    return best, best_val


def run_attack(pipeline: Pipeline, obs, labels: Labels, cfg: AttackConfig,
               stream: Stream | None = None) -> PerturbationSet:
    if cfg.method == "fgsm":
        return fgsm(pipeline, obs, labels, cfg)
    if cfg.method == "mifgsm":
        return mifgsm(pipeline, obs, labels, cfg)
    return pgd(pipeline, obs, labels, cfg, stream)


def module_wise_attack(pipeline, obs, labels, cfg: AttackConfig | None = None, stream=None):
    """Joint attack on all five sites against the unweighted total loss."""
    cfg = cfg or AttackConfig()
    budgets = {s: cfg.budgets.get(s, 0.0) for s in SITE_IDS}
    return run_attack(pipeline, obs, labels, cfg.replace(objective="total_loss", budgets=budgets), stream)


def sub_loss_attack(pipeline, obs, labels, cfg: AttackConfig | None = None, stream=None):
    """Each site's perturbation ascends the loss of the module it feeds."""
    cfg = cfg or AttackConfig()
    return run_attack(pipeline, obs, labels, cfg.replace(objective="sub_loss"), stream)


def plan_targeted_attack(pipeline, obs, labels, cfg: AttackConfig | None = None, stream=None):
    """All sites ascend the planning loss."""
    cfg = cfg or AttackConfig()
    return run_attack(pipeline, obs, labels, cfg.replace(objective="plan_loss"), stream)


def transfer_attack(surrogate: Pipeline, victim: Pipeline, obs, labels, cfg: AttackConfig, stream=None):
    """Image-only perturbation crafted on ``surrogate`` and replayed on ``victim``.

    Returns ``(victim heads, victim LossBreakdown, PerturbationSet)``.
    """
    if set(s for s, e in cfg.budgets.items() if e > 0) - {"Images"}:
        raise ContractError("transfer attacks perturb the Images site only")
    pert = run_attack(surrogate, obs, labels, cfg, stream)
    heads, breakdown = forward_with_noise(victim, obs, labels, pert.as_noise())
    return heads, breakdown, pert


def universal_noise(pipeline: Pipeline, dataset, eps: float, epochs: int = 5, batch_size: int = 32,
                    step_size: float | None = None, seed: int = 0, callback=None) -> np.ndarray:
    """One raster perturbation (4x32x32) shared by every frame, l-infinity bounded.

    Sign-gradient ascent on the mean total loss over shuffled batches; the
    perturbed raster is clamped inside the forward pass.
    """
    if len(dataset) == 0:
        raise ContractError("universal noise needs a non-empty dataset")
    shape = tuple(pipeline.site("Images").shape)
    if eps == 0:
        return np.zeros(shape)
    alpha = step_size if step_size is not None else eps / 5.0
    rs = Stream(seed, "universal")
    delta = rs.uniform(shape, -eps, eps)
    for epoch in range(epochs):
        order = rs.permutation(len(dataset))
        for start in range(0, len(order), batch_size):
            obs, labels = dataset.batch(order[start:start + batch_size])
            with _parameters_constant(pipeline), ad.Tape() as tape:
                d = Tensor._wrap(delta[None].copy(), requires_grad=True)
                _, breakdown = forward_with_noise(pipeline, obs, labels, {"Images": d})
                g = ad.backward(breakdown.total, tape)
            grad = g[d].data[0] if d in g else np.zeros(shape)
            delta = np.clip(delta + alpha * np.sign(grad), -eps, eps)
        if callback is not None:
            callback(epoch, delta)
    return delta


# --------------------------------------------------------------- serialization

PERTURBATION_MAGIC = b"MA2TPERT"
PERTURBATION_VERSION = 1


def save_perturbation(path, pert: PerturbationSet) -> None:
    """Binary layout: magic, u32 version, u32 header length, JSON header, f64 data.

    The header lists sites in order with their shapes and budgets; the data
    section is each site's array as little-endian float64, concatenated.
    """
    sites = list(pert.deltas)
    header = {"norm": pert.norm,
              "sites": [{"id": s, "shape": list(pert.deltas[s].shape), "budget": pert.budgets[s]}
                        for s in sites]}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(PERTURBATION_MAGIC)
        fh.write(np.array([PERTURBATION_VERSION, len(blob)], dtype="<u4").tobytes())
        fh.write(blob)
        for s in sites:
            fh.write(np.ascontiguousarray(pert.deltas[s], dtype="<f8").tobytes())


def load_perturbation(path) -> PerturbationSet:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != PERTURBATION_MAGIC:
        raise ContractError(f"{path}: not a perturbation file")
    version, length = np.frombuffer(raw[8:16], dtype="<u4")
    if version != PERTURBATION_VERSION:
        raise ContractError(f"{path}: unsupported perturbation version {version}")
    header = json.loads(raw[16:16 + length].decode())
    offset = 16 + length
    deltas, budgets = {}, {}
    for entry in header["sites"]:
        n = int(np.prod(entry["shape"]))
        deltas[entry["id"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=offset) \
            .reshape(entry["shape"]).astype(np.float64)
        budgets[entry["id"]] = entry["budget"]
        offset += 8 * n
    return PerturbationSet(deltas, budgets, header["norm"])
