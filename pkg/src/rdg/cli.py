"""Command-line entry point: ``rdg synth|refine|train|render|eval``.

Exit codes: 0 ok, 1 usage or I/O problem, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .io import IoError, RunManifest, SchemaError, dump_json, load_json, read_pfm, read_png, write_pfm, write_png
from .refiner import COARSE, FINE, EnergyIncrease, EnergyParams, ResolutionMismatch, refine
from .scene import Camera, GaussianSet
from .splatter import render
from .synth import SceneSpec, make_scene
from .ablation import AblationSetup, coarse_depth_for
from .trainer import EvalView, NonFiniteLoss, TrainConfig, TrainView, dumps_record, evaluate, fit, random_init

log = logging.getLogger("rdg")

SCENE_FIELDS = ("n_gaussians", "layout", "n_train", "n_eval", "resolution", "seed")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# config documents


def apply_overrides(doc: dict, pairs: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides; values parse as JSON, else stay strings."""
    doc = copy.deepcopy(doc)
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise UsageError(f"--set {key}: '{p}' is not a section")
        node[parts[-1]] = value
    return doc


def build(cls, values: dict, where: str):
    """Instantiate dataclass ``cls`` from ``values``, naming any unknown field."""
    names = {f.name for f in dataclasses.fields(cls)}
    for k in values:
        if k not in names:
            raise SchemaError("unknown field", field=f"{where}{k}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise SchemaError(str(e), field=where.rstrip(".") or None) from e


def energy_params(doc: dict) -> tuple[EnergyParams, EnergyParams]:
    coarse = dataclasses.replace(COARSE, **_checked(EnergyParams, doc.get("coarse", {}), "coarse."))
    fine = dataclasses.replace(FINE, **_checked(EnergyParams, doc.get("fine", {}), "fine."))
    return coarse, fine


def _checked(cls, values: dict, where: str) -> dict:
    names = {f.name for f in dataclasses.fields(cls)}
    for k in values:
        if k not in names:
            raise SchemaError("unknown field", field=f"{where}{k}")
    return values


def train_config(doc: dict) -> TrainConfig:
    t = dict(doc.get("train", {}))
    _checked(TrainConfig, t, "train.")
    sub = {"lr": "LearningRates", "weights": "LossWeights", "guidance": "GuidanceParams", "densify": "DensifyConfig"}
    base = TrainConfig()
    for key in sub:
        if key in t:
            cls = type(getattr(base, key))
            vals = dict(t[key])
            if key == "densify" and "opacity_reset_steps" in vals:
                vals["opacity_reset_steps"] = tuple(vals["opacity_reset_steps"])
            t[key] = build(cls, vals, f"train.{key}.")
    if "adam_betas" in t:
        t["adam_betas"] = tuple(t["adam_betas"])
    return build(TrainConfig, t, "train.")


# scene directories


def _views(doc: dict, split: str) -> list[Camera]:
    return [Camera.from_dict(c) for c in doc[split]]


def load_scene_dir(scene_dir: Path) -> dict:
    cams = load_json(scene_dir / "cameras.json", ("train", "eval"))
    train, evals = _views(cams, "train"), _views(cams, "eval")
    out = {"train": [], "eval": []}
    for split, cameras in (("train", train), ("eval", evals)):
        for i, cam in enumerate(cameras):
            img = read_pfm(scene_dir / "images" / f"{split}_{i:03d}.pfm").astype(np.float64)
            depth = read_pfm(scene_dir / "depth" / f"{split}_{i:03d}.pfm").astype(np.float64)
            coarse_path = scene_dir / "coarse" / f"{split}_{i:03d}.pfm"
            coarse = read_pfm(coarse_path).astype(np.float64) if coarse_path.exists() else None
            if img.shape[:2] != (cam.height, cam.width) or depth.shape != img.shape[:2]:
                raise ResolutionMismatch(f"{split} view {i}: buffers do not match the camera")
            out[split].append({"camera": cam, "image": img, "depth": depth, "coarse": coarse})
    return out


def _scene_files(scene_dir: Path) -> list[Path]:
    return sorted(p for p in scene_dir.rglob("*") if p.is_file() and p.name != "manifest.json")


# commands


def cmd_synth(args) -> RunManifest:
    doc = apply_overrides(load_json(args.spec), args.set)
    for name in SCENE_FIELDS:
        if name not in doc:
            raise SchemaError(f"{args.spec}: missing field", field=name)
    scene_doc = {k: doc[k] for k in SCENE_FIELDS}
    extra = {k: doc[k] for k in ("camera_distance", "arc_degrees", "focal_scale", "depth_margin") if k in doc}
    spec = build(SceneSpec, {**scene_doc, **extra}, "")
    corruption = dict(doc.get("corruption", {}))
    allowed = ("depth_scale", "depth_shift", "blur_sigma", "noise_fraction")
    for k in corruption:
        if k not in allowed:
            raise SchemaError("unknown field", field=f"corruption.{k}")
    setup = AblationSetup(scene=spec, **corruption)
    scene = make_scene(spec)
    out = Path(args.out_dir)
    for sub in ("images", "depth", "coarse"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    n = scene.n_train
    for j, cam in enumerate(scene.cameras):
        split, i = ("train", j) if j < n else ("eval", j - n)
        stem = f"{split}_{i:03d}"
        write_png(out / "images" / f"{stem}.png", scene.gt_images[j])
        write_pfm(out / "images" / f"{stem}.pfm", scene.gt_images[j])
        write_pfm(out / "depth" / f"{stem}.pfm", scene.gt_depths[j])
        if split == "train":
            write_pfm(out / "coarse" / f"{stem}.pfm", coarse_depth_for(scene.gt_depths[j], setup, spec.seed * 1000 + i))
    dump_json(out / "cameras.json", {"train": [c.to_dict() for c in scene.train_cameras], "eval": [c.to_dict() for c in scene.eval_cameras]})
    dump_json(out / "gt_set.json", scene.gt_set.to_dict())
    corruption_doc = {k: getattr(setup, k) for k in allowed}
    dump_json(out / "scene.json", {"spec": dataclasses.asdict(spec), "corruption": corruption_doc, "scene_extent": scene.scene_extent})
    m = RunManifest("synth", [], {"spec": doc}, spec.seed)
    m.record_inputs(args.spec)
    m.record_outputs(*_scene_files(out))
    m.manifest_path = out / "manifest.json"
    return m


def cmd_refine(args) -> RunManifest:
    params = apply_overrides(load_json(args.params), args.set)
    coarse, fine = energy_params(params)
    depth = read_pfm(args.depth).astype(np.float64)
    image = read_png(args.image)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    if depth.shape != image.shape[:2]:
        raise ResolutionMismatch(f"depth {depth.shape} vs image {image.shape[:2]}")
    refined = refine(depth, image, coarse, fine)
    write_pfm(args.out, refined)
    m = RunManifest("refine", [], {"params": params}, None)
    m.record_inputs(args.depth, args.image, args.params)
    m.record_outputs(args.out)
    m.manifest_path = Path(str(args.out) + ".manifest.json")
    return m


def cmd_train(args) -> RunManifest:
    doc = apply_overrides(load_json(args.config), args.set)
    if args.steps is not None:
        doc = apply_overrides(doc, [f"train.total_steps={args.steps}"])
    cfg = train_config(doc)
    init = doc.get("init", {})
    for k in init:
        if k not in ("points", "half_width", "scale_factor"):
            raise SchemaError("unknown field", field=f"init.{k}")
    ref = doc.get("refine", {})
    for k in ref:
        if k not in ("enabled", "coarse", "fine"):
            raise SchemaError("unknown field", field=f"refine.{k}")
    coarse_p, fine_p = energy_params(ref)
    scene_dir = Path(args.scene_dir)
    data = load_scene_dir(scene_dir)
    extent = float(load_json(scene_dir / "scene.json", ("scene_extent",))["scene_extent"])
    out = Path(args.out_dir)
    (out / "refined").mkdir(parents=True, exist_ok=True)
    (out / "renders").mkdir(parents=True, exist_ok=True)

    train_views = []
    for i, v in enumerate(data["train"]):
        dr = None
        if v["coarse"] is not None:
            dr = refine(v["coarse"], v["image"], coarse_p, fine_p) if ref.get("enabled", True) else v["coarse"]
            write_pfm(out / "refined" / f"train_{i:03d}.pfm", dr)
        train_views.append(TrainView(v["camera"], v["image"], dr))
    eval_views = [EvalView(v["camera"], v["image"], v["depth"]) for v in data["eval"]]

    gset = random_init(int(init.get("points", 100)), float(init.get("half_width", 1.3)), cfg.seed)
    gset.log_scales += np.log(float(init.get("scale_factor", 0.5)))
    log_path = out / "log.ndjson"
    with open(log_path, "w") as f:
        result = fit(gset, train_views, eval_views, cfg, extent=extent, on_record=lambda r: f.write(dumps_record(r) + "\n"))
    dump_json(out / "model.json", result.gset.to_dict())
    final = result.metrics[max(result.metrics)]
    dump_json(out / "metrics.json", {"step": max(result.metrics), **_metrics_doc(final), "history": {str(k): v["mean"] for k, v in sorted(result.metrics.items())}})
    outputs = [log_path, out / "model.json", out / "metrics.json"] + sorted((out / "refined").glob("*.pfm"))
    for i, v in enumerate(eval_views):
        r = render(result.gset, v.camera)
        write_pfm(out / "renders" / f"eval_{i:03d}.pfm", r.depth)
        write_png(out / "renders" / f"eval_{i:03d}.png", r.image)
        outputs += [out / "renders" / f"eval_{i:03d}.pfm", out / "renders" / f"eval_{i:03d}.png"]
    m = RunManifest("train", [], doc, cfg.seed)
    m.record_inputs(args.config, *_scene_files(scene_dir))
    m.record_outputs(*outputs)
    m.manifest_path = out / "manifest.json"
    return m


def _metrics_doc(ev: dict) -> dict:
    return {"per_view": [{"view": i, **m} for i, m in enumerate(ev["per_view"])], "mean": ev["mean"]}


def cmd_render(args) -> RunManifest:
    gset = GaussianSet.from_dict(load_json(args.model, ("positions", "rotations", "log_scales", "opacity_logits", "colors")))
    cam_doc = load_json(args.camera, ("fx", "fy", "cx", "cy", "rotation", "translation", "height", "width"))
    cam = Camera.from_dict(cam_doc)
    out = render(gset, cam)
    prefix = str(args.out_prefix)
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    write_png(prefix + ".png", out.image)
    write_pfm(prefix + ".pfm", out.depth)
    m = RunManifest("render", [], {}, None)
    m.record_inputs(args.model, args.camera)
    m.record_outputs(prefix + ".png", prefix + ".pfm")
    m.manifest_path = Path(prefix + ".manifest.json")
    return m


def cmd_eval(args) -> RunManifest:
    gset = GaussianSet.from_dict(load_json(args.model, ("positions", "rotations", "log_scales", "opacity_logits", "colors")))
    data = load_scene_dir(Path(args.scene_dir))
    views = [EvalView(v["camera"], v["image"], v["depth"]) for v in data["eval"]]
    if not views:
        raise UsageError("scene has no eval views")
    ev = evaluate(gset, views)
    out = Path(args.out) if args.out else Path(args.model).with_name("metrics.json")
    dump_json(out, _metrics_doc(ev))
    m = RunManifest("eval", [], {}, None)
    m.record_inputs(args.model, *_scene_files(Path(args.scene_dir)))
    m.record_outputs(out)
    m.manifest_path = Path(str(out) + ".manifest.json")
    return m


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rdg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic scene directory")
    s.add_argument("spec")
    s.add_argument("out_dir")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("refine", help="refine a coarse depth map against an image")
    s.add_argument("depth")
    s.add_argument("image")
    s.add_argument("params")
    s.add_argument("out")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_refine)

    s = sub.add_parser("train", help="fit a Gaussian set to a scene directory")
    s.add_argument("scene_dir")
    s.add_argument("config")
    s.add_argument("out_dir")
    s.add_argument("--steps", type=int)
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", help="render a model from a camera")
    s.add_argument("model")
    s.add_argument("camera")
    s.add_argument("out_prefix")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", help="held-out metrics of a model on a scene")
    s.add_argument("model")
    s.add_argument("scene_dir")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"rdg: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        manifest = args.func(args)
    except NonFiniteLoss as e:
        print(f"rdg: {e}\n{json.dumps(e.dump, indent=1, default=str)}", file=sys.stderr)
        return 2
    except (EnergyIncrease, FloatingPointError) as e:
        print(f"rdg: numerical failure: {e}", file=sys.stderr)
        return 2
    except (UsageError, SchemaError, IoError, ResolutionMismatch, OSError, ValueError) as e:
        print(f"rdg: {e}", file=sys.stderr)
        return 1
    manifest.argv = argv
    manifest.seconds = time.perf_counter() - t0
    manifest.write(manifest.manifest_path)
    return 0


def replay(manifest_path) -> int:
    """Re-run the command recorded in a manifest."""
    return main(RunManifest.read(manifest_path).argv)


if __name__ == "__main__":
    sys.exit(main())
