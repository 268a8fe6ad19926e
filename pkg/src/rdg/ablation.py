"""Four-configuration ablation on a synthetic scene: baseline, refined-depth
supervision, refined depth plus relative depth guidance, and adaptive sampling."""

from __future__ import annotations

import copy
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .densifier import DensifyConfig
from .refiner import COARSE, FINE, EnergyParams, refine
from .synth import CorruptionModel, SceneSpec, SyntheticScene, corrupt_depth, make_scene
from .trainer import EvalView, FitResult, TrainConfig, TrainView, fit, random_init

log = logging.getLogger(__name__)

# name -> (use_depth, use_rdg, adaptive_sampling)
CONFIGS = {
    "baseline": (False, False, False),
    "refined_depth": (True, False, False),
    "refined_depth_rdg": (True, True, False),
    "adaptive_sampling": (False, False, True),
}


@dataclass
class AblationSetup:
    scene: SceneSpec = field(default_factory=SceneSpec)
    depth_scale: float = 0.6
    depth_shift: float = 0.8
    blur_sigma: float = 2.0
    noise_fraction: float = 0.05  # noise sigma as a fraction of the depth range
    init_points: int = 100
    init_half_width: float = 1.3
    init_scale_factor: float = 0.5
    # the primitive cap bounds clone/split growth so a run stays within a few minutes
    train: TrainConfig = field(default_factory=lambda: TrainConfig(densify=DensifyConfig(max_primitives=300)))
    coarse: EnergyParams = COARSE
    fine: EnergyParams = FINE
    refine_depth: bool = True  # False supervises with the coarse depth directly


@dataclass
class PreparedScene:
    scene: SyntheticScene
    coarse_depths: list[np.ndarray]
    refined_depths: list[np.ndarray]
    train_views: list[TrainView]
    eval_views: list[EvalView]


def coarse_depth_for(depth_gt: np.ndarray, setup: AblationSetup, seed: int) -> np.ndarray:
    spread = float(depth_gt.max() - depth_gt.min())
    model = CorruptionModel(setup.depth_scale, setup.depth_shift, setup.blur_sigma, setup.noise_fraction * spread, seed)
    return corrupt_depth(depth_gt, model)


def prepare(setup: AblationSetup) -> PreparedScene:
    """Render the scene, corrupt each training depth, and refine it once."""
    scene = make_scene(setup.scene)
    coarse, refined, train = [], [], []
    for i, (cam, img, depth) in enumerate(scene.train_views()):
        dc = coarse_depth_for(depth, setup, setup.scene.seed * 1000 + i)
        dr = refine(dc, img, setup.coarse, setup.fine) if setup.refine_depth else dc
        coarse.append(dc)
        refined.append(dr)
        train.append(TrainView(cam, img, dr))
    evals = [EvalView(cam, img, depth) for cam, img, depth in scene.eval_views()]
    return PreparedScene(scene, coarse, refined, train, evals)


def config_for(name: str, base: TrainConfig) -> TrainConfig:
    use_depth, use_rdg, adaptive = CONFIGS[name]
    cfg = copy.deepcopy(base)
    cfg.use_depth = use_depth
    cfg.use_rdg = use_rdg
    cfg.densify = replace(cfg.densify, adaptive_sampling=adaptive)
    return cfg


def initial_set(setup: AblationSetup):
    g = random_init(setup.init_points, setup.init_half_width, setup.train.seed)
    g.log_scales += np.log(setup.init_scale_factor)
    return g


def run_config(name: str, setup: AblationSetup, prepared: PreparedScene) -> FitResult:
    cfg = config_for(name, setup.train)
    return fit(initial_set(setup), prepared.train_views, prepared.eval_views, cfg, extent=prepared.scene.scene_extent)


def _timed_run(name: str, setup: AblationSetup, prepared: PreparedScene) -> dict:
    t0 = time.perf_counter()
    res = run_config(name, setup, prepared)
    final = res.metrics[max(res.metrics)]["mean"]
    return {**final, "primitives": len(res.gset), "seconds": time.perf_counter() - t0}


def run_ablation(setup: AblationSetup, names=None, prepared: PreparedScene | None = None, workers: int = 1) -> dict:
    """Held-out mean PSNR/SSIM/RMSE at the final step for each configuration.

    With ``workers > 1`` the configurations run in separate processes; each
    run is independent, so the numbers match a sequential run.
    """
    prepared = prepared if prepared is not None else prepare(setup)
    names = list(names or CONFIGS)
    if workers > 1 and len(names) > 1:
        with ProcessPoolExecutor(min(workers, len(names))) as pool:
            futures = {n: pool.submit(_timed_run, n, setup, prepared) for n in names}
            results = {n: f.result() for n, f in futures.items()}
    else:
        results = {n: _timed_run(n, setup, prepared) for n in names}
    for n in names:
        log.info("%s: %s", n, results[n])
    return results


def main(argv=None) -> int:
    """Run the default ablation and write the results as a reference document."""
    import argparse
    import json
    import os
    import platform

    p = argparse.ArgumentParser(prog="python3 -m rdg.ablation", description=main.__doc__)
    p.add_argument("--out", help="write the reference JSON here (default: print)")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.add_argument("--tolerance-db", type=float, default=0.05, help="allowed PSNR drift when checking against this reference")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    t0 = time.perf_counter()
    results = run_ablation(AblationSetup(), workers=args.workers)
    doc = {
        "setup": "AblationSetup() defaults",
        "results": {k: {m: v[m] for m in ("psnr", "ssim", "rmse", "primitives")} for k, v in results.items()},
        "seconds": {k: round(v["seconds"], 1) for k, v in results.items()},
        "wall_seconds": round(time.perf_counter() - t0, 1),
        "workers": args.workers,
        "platform": platform.platform(),
        "tolerance_db": args.tolerance_db,
    }
    text = json.dumps(doc, indent=1, sort_keys=True)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    else:
        print(text)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
