"""Modular driving pipeline with named noise-injection sites.

Topology is fixed: ``Track, Map -> Motion -> Occ, Plan``. A perturbation can be
added at five places: the input raster and the four inter-module feature
links. Feature links carry ``tanh`` outputs, so they live in ``(-1, 1)``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError

MODULE_IDS = ("Track", "Map", "Motion", "Occ", "Plan")
SITE_IDS = ("Images", "TrackMotion", "MapMotion", "MotionOcc", "MotionPlan")

# module each site feeds, used by the sub-loss attack
SITE_CONSUMER = {
    "Images": "Track",
    "TrackMotion": "Motion",
    "MapMotion": "Motion",
    "MotionOcc": "Occ",
    "MotionPlan": "Plan",
}


@dataclass
class InjectionSite:
    id: str
    shape: tuple
    default_budget: float
    clamp_range: tuple | None = None


@dataclass
class ModuleNode:
    """One pipeline stage.

    ``forward(params, x)`` returns ``(feature, head_output)``; ``loss(head,
    labels)`` returns per-sample losses of shape ``(batch,)``.
    """

    id: str
    parameters: dict
    forward: Callable
    loss: Callable
    frozen: bool = False


@dataclass
class LossBreakdown:
    per_module: dict  # module id -> scalar Tensor (batch mean)
    per_sample: dict  # module id -> Tensor of shape (batch,)
    total: Tensor

    def values(self) -> dict:
        return {k: v.item() for k, v in self.per_module.items()}


@dataclass
class Pipeline:
    modules: dict
    sites: list = field(default_factory=list)
    arch: str = "toy-uniad-v1"

    def __post_init__(self):
        if tuple(self.modules) != MODULE_IDS:
            raise ContractError(f"pipeline modules must be {MODULE_IDS}")
        if tuple(s.id for s in self.sites) != SITE_IDS:
            raise ContractError(f"pipeline sites must be {SITE_IDS}")

    def site(self, site_id: str) -> InjectionSite:
        for s in self.sites:
            if s.id == site_id:
                return s
        raise ContractError(f"unknown injection site {site_id!r}")

    def named_parameters(self, trainable_only: bool = False):
        """Yield ``("Module.name", Tensor)`` in a fixed order."""
        for mid, module in self.modules.items():
            if trainable_only and module.frozen:
                continue
            for name, p in module.parameters.items():
                yield f"{mid}.{name}", p

    def parameters(self, trainable_only: bool = False) -> list:
        return [p for _, p in self.named_parameters(trainable_only)]

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Mapping) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            raise ContractError("state dict does not match pipeline parameters")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ContractError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


def list_injection_sites(pipeline: Pipeline) -> list:
    return list(pipeline.sites)


def freeze_modules(pipeline: Pipeline, ids) -> Pipeline:
    """Mark modules frozen (excluded from optimizer updates); others unfrozen."""
    ids = set(ids)
    unknown = ids - set(MODULE_IDS)
    if unknown:
        raise ContractError(f"unknown module ids: {sorted(unknown)}")
    for mid, module in pipeline.modules.items():
        module.frozen = mid in ids
    return pipeline


def _inject(site: InjectionSite, x: Tensor, noise: Mapping | None) -> Tensor:
    if not noise or site.id not in noise:
        return x
    delta = ad.as_tensor(noise[site.id])
    if (delta.ndim != x.ndim or tuple(delta.shape[1:]) != tuple(site.shape)
            or delta.shape[0] not in (1, x.shape[0])):
        raise ContractError(f"noise at {site.id} has shape {delta.shape}, site expects "
                            f"(batch, *{site.shape})")
    x = ad.add(x, delta)
    if site.clamp_range is not None:
        x = ad.clamp(x, *site.clamp_range)
    return x


def forward_with_noise(pipeline: Pipeline, observation, labels, noise: Mapping | None = None,
                       probe: dict | None = None):
    """Run every module with per-site noise added and return heads and losses.

    ``noise`` maps site id to a Tensor of shape ``(batch, *site.shape)`` (or a
    leading 1 to share it across the batch). ``probe`` (if given) receives the
    tensor shape seen at each site. Without ``labels`` the loss breakdown is None.
    """
    m = pipeline.modules
    x = ad.as_tensor(observation)
    seen = {}

    def site(site_id, value):
        seen[site_id] = tuple(value.shape[1:])
        return _inject(pipeline.site(site_id), value, noise)

    x = site("Images", x)
    track_feat, track_head = m["Track"].forward(m["Track"].parameters, x)
    map_feat, map_head = m["Map"].forward(m["Map"].parameters, x)
    tm = site("TrackMotion", track_feat)
    mm = site("MapMotion", map_feat)
    motion_feat, motion_head = m["Motion"].forward(m["Motion"].parameters, (tm, mm))
    mo = site("MotionOcc", motion_feat)
    mp = site("MotionPlan", motion_feat)
    _, occ_head = m["Occ"].forward(m["Occ"].parameters, mo)
    _, plan_head = m["Plan"].forward(m["Plan"].parameters, mp)

    heads = {"Track": track_head, "Map": map_head, "Motion": motion_head,
             "Occ": occ_head, "Plan": plan_head}
    if probe is not None:
        probe.update(seen)
    if labels is None:
        return heads, None
    per_sample = {mid: m[mid].loss(heads[mid], labels) for mid in MODULE_IDS}
    per_module = {mid: ad.mean(v) for mid, v in per_sample.items()}
    breakdown = LossBreakdown(per_module, per_sample, total_loss_from(per_module))
    return heads, breakdown


def total_loss_from(per_module: Mapping, weights=None) -> Tensor:
    if weights is None:
        weights = np.ones(len(MODULE_IDS))
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(MODULE_IDS),):
        raise ContractError("weights must have one entry per module")
    if np.any(weights <= 0):
        raise ContractError("module weights must be positive")
    total = None
    for w, mid in zip(weights, MODULE_IDS):
        term = per_module[mid] if w == 1.0 else ad.mul(per_module[mid], float(w))
        total = term if total is None else ad.add(total, term)
    return total


def total_loss(breakdown: LossBreakdown, weights=None) -> Tensor:
    """Weighted sum of module losses; unit weights give the plain sum."""
    return total_loss_from(breakdown.per_module, weights)
