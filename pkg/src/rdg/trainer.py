"""Optimization loop: render, loss stack, backward, per-group Adam, densification."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .densifier import AdaptiveView, DensifyConfig, DensifyStats, schedule_step
from .guidance import GuidanceParams, bias_schedule, rdg_objective
from .losses import LossReport, LossWeights, color_loss, local_depth_loss, metrics, pearson_loss, schedule_weight, total_loss
from .scene import Camera, GaussianSet
from .splatter import GradientSet, backward, render

log = logging.getLogger(__name__)

GROUPS = ("positions", "opacity_logits", "log_scales", "rotations", "colors")


class NonFiniteLoss(FloatingPointError):
    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class LearningRates:
    positions: float = 0.0002
    opacity_logits: float = 0.003
    log_scales: float = 0.06
    rotations: float = 0.005
    colors: float = 0.002

    def __post_init__(self):
        if min(asdict(self).values()) < 0:
            raise ValueError("learning rates must be non-negative")


@dataclass
class TrainConfig:
    total_steps: int = 2000
    lr: LearningRates = field(default_factory=LearningRates)
    weights: LossWeights = field(default_factory=LossWeights)
    guidance: GuidanceParams = field(default_factory=GuidanceParams)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    use_depth: bool = True
    use_rdg: bool = True
    omega_schedule: str = "per_step"
    eval_every: int = 500
    seed: int = 0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-15

    def __post_init__(self):
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")

    @property
    def depth_warmup(self) -> int:
        return self.weights.depth_warmup

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        sub = {
            "lr": LearningRates,
            "weights": LossWeights,
            "guidance": GuidanceParams,
            "densify": DensifyConfig,
        }
        for key, typ in sub.items():
            if key in d and isinstance(d[key], dict):
                d[key] = typ(**d[key])
        if "densify" in d and isinstance(d["densify"].opacity_reset_steps, list):
            d["densify"].opacity_reset_steps = tuple(d["densify"].opacity_reset_steps)
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)


@dataclass
class TrainView:
    camera: Camera
    image: np.ndarray
    depth_ref: np.ndarray | None  # refined (or coarse) depth supervision


@dataclass
class EvalView:
    camera: Camera
    image: np.ndarray
    depth: np.ndarray | None = None


@dataclass
class Adam:
    """Per-group first/second moments for the primitive arrays."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    steps: int = 0

    @classmethod
    def for_set(cls, gset: GaussianSet) -> "Adam":
        return cls({g: np.zeros_like(getattr(gset, g)) for g in GROUPS}, {g: np.zeros_like(getattr(gset, g)) for g in GROUPS})

    def update(self, gset: GaussianSet, grads: GradientSet, lr: LearningRates, betas, eps) -> None:
        self.steps += 1
        b1, b2 = betas
        c1 = 1.0 - b1**self.steps
        c2 = 1.0 - b2**self.steps
        for g in GROUPS:
            grad = getattr(grads, g)
            self.m[g] = b1 * self.m[g] + (1 - b1) * grad
            self.v[g] = b2 * self.v[g] + (1 - b2) * grad * grad
            step = getattr(lr, g) * (self.m[g] / c1) / (np.sqrt(self.v[g] / c2) + eps)
            setattr(gset, g, getattr(gset, g) - step)

    def remap(self, origin: np.ndarray) -> None:
        """Carry moments over a densification; copies and new primitives start at zero."""
        keep = np.zeros(origin.size, dtype=bool)
        src = np.where(origin >= 0, origin, 0)
        if origin.size:
            valid = np.flatnonzero(origin >= 0)
            _, first = np.unique(origin[valid], return_index=True)
            keep[valid[first]] = True
        for g in GROUPS:
            for store in (self.m, self.v):
                moved = store[g][src] if store[g].shape[0] else np.zeros((origin.size,) + store[g].shape[1:])
                moved[~keep] = 0.0
                store[g] = moved


@dataclass
class TrainState:
    step: int
    gset: GaussianSet
    adam: Adam
    stats: DensifyStats
    b: float
    omega: float
    history: list[dict] = field(default_factory=list)
    extent: float = 1.0


def init_state(gset: GaussianSet, cfg: TrainConfig, extent: float = 1.0) -> TrainState:
    g = gset.copy()
    return TrainState(0, g, Adam.for_set(g), DensifyStats.zeros(len(g)), cfg.guidance.b0, cfg.weights.omega0, extent=extent)


def _check_finite(report: LossReport, state: TrainState) -> None:
    values = report.as_dict()
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    if bad:
        dump = {
            "step": state.step,
            "losses": values,
            "primitive_count": len(state.gset),
            "b": state.b,
            "omega": state.omega,
            "max_abs_position": float(np.abs(state.gset.positions).max(initial=0.0)),
            "max_log_scale": float(state.gset.log_scales.max(initial=0.0)),
        }
        raise NonFiniteLoss(f"non-finite loss terms {bad} at step {state.step}", dump)


def view_losses(state: TrainState, view: TrainView, cfg: TrainConfig, t: int, omega: float, b: float):
    """Render one view and return its loss report, gradients and per-patch depth loss."""
    gset = state.gset
    out = render(gset, view.camera)
    w = cfg.weights
    lc, g_img = color_loss(out.image, view.image, w.beta)
    g_depth = np.zeros_like(out.depth)
    lg = ll = lr_ = 0.0
    per_patch = None
    active = t > w.depth_warmup
    if view.depth_ref is not None and (cfg.use_depth or cfg.densify.adaptive_sampling):
        ll, gl, per_patch = local_depth_loss(view.depth_ref, out.depth, eps=w.eps)
        if cfg.use_depth and active:
            lg, gg = pearson_loss(view.depth_ref, out.depth, w.eps)
            g_depth = g_depth + gg + w.lam * gl
        else:
            ll = 0.0
    if cfg.use_rdg and active:
        lr_, d_img, d_dep = rdg_objective(out.image, out.depth, b, cfg.guidance)
        g_img = g_img + omega * d_img
        g_depth = g_depth + omega * d_dep
    report = total_loss(lc, lg, ll, lr_, w, t, omega, per_patch)
    grads = backward(out, gset, view.camera, g_img, g_depth)
    return report, grads, per_patch, out


def train_step(state: TrainState, views: list[TrainView], cfg: TrainConfig) -> TrainState:
    """One optimization step over all training views, then the densification schedule."""
    t = state.step + 1
    n = len(views)
    grads = GradientSet.zeros(len(state.gset))
    reports = []
    adaptive = []
    for view in views:
        report, g, per_patch, out = view_losses(state, view, cfg, t, state.omega, state.b)
        _check_finite(report, state)
        state.stats.add(g)
        grads += g
        reports.append(report)
        if per_patch is not None:
            adaptive.append(AdaptiveView(view.camera, view.image, per_patch, out.depth))
    for name in GROUPS:
        setattr(grads, name, getattr(grads, name) / n)
    state.adam.update(state.gset, grads, cfg.lr, cfg.adam_betas, cfg.adam_eps)
    state.gset.normalize_rotations()
    np.clip(state.gset.colors, 0.0, 1.0, out=state.gset.colors)

    ds = cfg.densify
    result = schedule_step(
        state.gset,
        state.stats,
        t,
        ds,
        extent=state.extent,
        views=adaptive if (ds.adaptive_sampling and t >= ds.sample_from) else None,
        rng=np.random.default_rng([cfg.seed, t]),
    )
    if result.gset is not state.gset:
        n_old = len(state.gset)
        if len(result.origin) != n_old or np.any(result.origin != np.arange(n_old)):
            state.adam.remap(result.origin)
        if result.report.opacity_reset:
            state.adam.m["opacity_logits"][:] = 0.0
            state.adam.v["opacity_logits"][:] = 0.0
        state.gset = result.gset
    if t % ds.interval == 0 or len(state.stats.count) != len(state.gset):
        state.stats = DensifyStats.zeros(len(state.gset))

    def mean(key):
        return float(np.mean([getattr(r, key) for r in reports]))

    losses = {k: mean(k) for k in ("l_color", "l_g", "l_l", "l_depth", "l_rdg", "total")}
    state.history.append({"step": t, "losses": losses, "primitive_count": len(state.gset), "b": state.b, "omega": state.omega})
    state.b = bias_schedule(state.b, t, cfg.guidance)
    state.omega = schedule_weight(state.omega, t, cfg.weights.m, cfg.omega_schedule)
    state.step = t
    return state


def evaluate(gset: GaussianSet, views: list[EvalView]) -> dict:
    per_view = []
    for v in views:
        out = render(gset, v.camera)
        per_view.append(metrics(out.image, v.image, out.depth if v.depth is not None else None, v.depth))
    keys = per_view[0].keys() if per_view else []
    mean = {k: float(np.mean([m[k] for m in per_view])) for k in keys}
    return {"per_view": per_view, "mean": mean}


@dataclass
class FitResult:
    gset: GaussianSet
    metrics: dict  # step -> evaluation
    log: list[dict]


def fit(
    gset: GaussianSet,
    train_views: list[TrainView],
    eval_views: list[EvalView],
    cfg: TrainConfig,
    *,
    extent: float = 1.0,
    on_record: Callable[[dict], None] | None = None,
) -> FitResult:
    """Run ``cfg.total_steps`` steps, evaluating every ``cfg.eval_every`` steps and at the end."""
    if not train_views or not eval_views:
        raise ValueError("need at least one train view and one eval view")
    state = init_state(gset, cfg, extent)
    evals = {0: evaluate(state.gset, eval_views)}
    for _ in range(cfg.total_steps):
        train_step(state, train_views, cfg)
        if on_record is not None:
            on_record(state.history[-1])
        if cfg.eval_every and state.step % cfg.eval_every == 0:
            evals[state.step] = evaluate(state.gset, eval_views)
            log.info("step %d: eval %s, %d primitives", state.step, evals[state.step]["mean"], len(state.gset))
    if cfg.total_steps not in evals:
        evals[cfg.total_steps] = evaluate(state.gset, eval_views)
    return FitResult(state.gset, evals, state.history)


def dumps_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def random_init(n: int, half_width: float, seed: int, opacity: float = 0.1) -> GaussianSet:
    """``n`` grey isotropic primitives uniform in a cube; scale is the mean 3-NN distance."""
    from .densifier import _local_scale

    rng = np.random.default_rng(seed)
    pos = rng.uniform(-half_width, half_width, (n, 3))
    scale = np.empty(n)
    for i in range(n):
        others = np.delete(pos, i, axis=0)
        scale[i] = _local_scale(pos[i : i + 1], others, fallback=0.1 * half_width)[0]
    return GaussianSet(
        pos,
        np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        np.repeat(np.log(scale)[:, None], 3, axis=1),
        np.full(n, float(np.log(opacity / (1 - opacity)))),
        np.full((n, 3), 0.5),
    )
