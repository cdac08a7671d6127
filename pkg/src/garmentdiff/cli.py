"""Command-line entry point: ``garmentdiff <subcommand> [--config FILE] [--set k=v] ...``.

Every run is described by one JSON config (see `RunConfig`); ``--seed``,
``--out`` and repeated ``--set key=value`` override it.  Values given to
``--set`` are parsed as JSON when possible, and dotted keys reach into the
``train``, ``augment``, ``schedule`` and ``dataset_spec`` sections.

Exit status is 0 on success, 1 for invalid input or configuration, and 2 for
failures while running.  Diagnostics go to stderr; results go only to files
under ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .bake import DisplacementTexture, bake as bake_texture, export_png, load_disp, reconstruct_garment, save_disp
from .dataset import (
    DatasetManifest,
    build_dataset,
    condition_vector,
    desk_manifest,
    group_sequences,
    item_ground_truth,
    load_frames,
    manifest_template,
    read_conditions_csv,
    split_condition,
)
from .denoiser import Denoiser, TextureSet, TrainConfig, load_checkpoint, save_checkpoint, train
from .design import DesignParams, DesignTemplate, design_mesh, load_template
from .diffusion import MODES, make_schedule, sample
from .errors import StructuralError, ValidationError
from .geometry import Pose, desk_body, load_body, read_obj, write_obj
from .temporal import AugmentationConfig, SequenceSample, rollout, train_temporal

log = logging.getLogger("garmentdiff")

COMMANDS = (
    "dataset-gen", "bake", "reconstruct", "train", "train-temporal",
    "sample", "rollout", "eval", "export-png",
)
NEEDS_SEED = ("train", "train-temporal", "sample", "rollout")


class UsageError(ValidationError):
    pass


@dataclass
class RunConfig:
    """Declarative run description shared by all subcommands.

    Paths: ``dataset`` (built dataset root), ``manifest`` (manifest JSON to
    build from), ``checkpoint``, ``input`` (OBJ, ``.disp`` or a directory of
    ``frame_*.disp``), ``template`` (``.dtpl``), ``body`` (body JSON),
    ``conditions`` (CSV with frame, beta_*, theta_*, p_0..p_2 columns).
    """

    seed: int | None = None
    out: str | None = None
    dataset: str | None = None
    manifest: str | None = None
    dataset_spec: dict = field(default_factory=lambda: {"n_designs": 6, "n_sequences": 4, "n_frames": 30})
    resolution: int = 32
    checkpoint: str | None = None
    input: str | None = None
    template: str | None = None
    body: str | None = None
    conditions: str | None = None
    design: list = field(default_factory=lambda: [0.5, 0.5, 0.5])
    shape: list = field(default_factory=lambda: [0.0, 0.0])
    pose: list | None = None
    translation: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    split: str = "val"
    sequence: str | None = None
    design_index: int | None = None
    n_samples: int = 1
    mode: str = "standard-ddpm"
    label: str = "model"
    schedule: dict = field(default_factory=lambda: {"T": 100, "beta_start": 1e-3, "beta_end": 0.2})
    train: dict = field(default_factory=dict)
    augment: dict = field(default_factory=dict)
    overwrite: bool = False

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.check()
        return cfg

    def check(self):
        unknown = set(self.dataset_spec) - {"n_designs", "n_sequences", "n_frames"}
        if unknown:
            raise ValidationError(f"unknown dataset_spec keys: {sorted(unknown)}")
        unknown = set(self.schedule) - {"T", "beta_start", "beta_end"}
        if unknown:
            raise ValidationError(f"unknown schedule keys: {sorted(unknown)}")
        TrainConfig.from_dict(self.train)
        AugmentationConfig.from_dict(self.augment)
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}")
        if self.split not in ("train", "val"):
            raise ValidationError("split must be 'train' or 'val'")
        if self.n_samples < 1:
            raise ValidationError("n_samples must be at least 1")

    def train_config(self, **extra):
        d = dict(self.train)
        d.update(extra)
        return TrainConfig.from_dict(d)

    def sched(self):
        return make_schedule(**self.schedule)


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d, pairs):
    d = json.loads(json.dumps(d))
    for pair in pairs:
        if "=" not in pair:
            raise ValidationError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        target = d
        *parents, leaf = key.split(".")
        for p in parents:
            if not isinstance(target.get(p, {}), dict):
                raise ValidationError(f"{p!r} is not a config section")
            target = target.setdefault(p, {})
        target[leaf] = _parse_value(value)
    return d


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="garmentdiff", description="Garment deformation textures and diffusion models.")
    parser.add_argument("command", metavar="command", help="one of: " + ", ".join(COMMANDS))
    parser.add_argument("--config", help="JSON run config")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config entry")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def load_run_config(args):
    d = {}
    if args.config:
        d = json.loads(Path(args.config).read_text())
        if not isinstance(d, dict):
            raise ValidationError("config file must hold a JSON object")
    d = apply_overrides(d, args.set)
    if args.seed is not None:
        d["seed"] = args.seed
    if args.out is not None:
        d["out"] = args.out
    return RunConfig.from_dict(d)


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _require(cfg, *names):
    for name in names:
        if getattr(cfg, name) is None:
            raise ValidationError(f"config needs {name!r}")


def _out_dir(cfg):
    _require(cfg, "out")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _body(cfg):
    return load_body(cfg.body) if cfg.body else desk_body()


def _template(cfg, manifest=None):
    if cfg.template:
        return load_template(cfg.template)
    if manifest is not None:
        return manifest_template(manifest)
    return DesignTemplate()


def _manifest(cfg):
    _require(cfg, "dataset")
    path = Path(cfg.dataset) / "manifest.json"
    if not path.exists():
        raise ValidationError(f"no dataset manifest at {path}")
    return DatasetManifest.load(path)


def _pose(cfg, joint_count):
    if cfg.pose is None:
        rot = np.zeros((joint_count, 3))
    else:
        rot = np.asarray(cfg.pose, dtype=np.float64).reshape(-1, 3)
    if rot.shape[0] != joint_count:
        raise ValidationError(f"pose has {rot.shape[0]} joints, body has {joint_count}")
    return Pose(rot, np.asarray(cfg.translation, dtype=np.float64))


def _sequence_items(cfg, manifest):
    """Manifest items of one (sequence, design) pair in frame order."""
    seqs = manifest.val_sequences if cfg.split == "val" else manifest.train_sequences
    sid = cfg.sequence or (seqs[0] if seqs else manifest.sequences[0].id)
    items = [it for it in manifest.items if it["sequence"] == sid]
    if not items:
        raise ValidationError(f"sequence {sid!r} has no frames")
    designs = sorted({it["design"] for it in items}, key=lambda d: -1 if d is None else d)
    if cfg.design_index is not None:
        design = cfg.design_index
    else:
        pool = manifest.val_designs if cfg.split == "val" else manifest.train_designs
        design = next((d for d in designs if d in pool), designs[0])
    items = sorted((it for it in items if it["design"] == design), key=lambda it: it["frame"])
    if not items:
        raise ValidationError(f"sequence {sid!r} has no frames for design {design}")
    return items


def _conditions(cfg):
    if cfg.conditions:
        return [condition_vector(beta, theta, design) for _, beta, theta, design in read_conditions_csv(cfg.conditions)]
    if cfg.dataset:
        return [np.asarray(it["condition"]) for it in _sequence_items(cfg, _manifest(cfg))]
    body = _body(cfg)
    return [condition_vector(cfg.shape, _pose(cfg, body.joint_count), DesignParams(*cfg.design))]


def _seed_everything(seed):
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


def _layout_path(directory):
    return Path(directory) / "layout.disp"


def _save_layout(directory, mask, normalization):
    layout = DisplacementTexture(np.zeros(mask.shape + (3,)), mask, normalization)
    save_disp(_layout_path(directory), layout, normalization)


def _load_model(cfg):
    _require(cfg, "checkpoint")
    trained = load_checkpoint(cfg.checkpoint)
    layout = load_disp(_layout_path(cfg.checkpoint))
    sched = make_schedule(trained.schedule["T"], trained.schedule["beta_start"], trained.schedule["beta_end"])
    return trained, layout, sched


def _write_textures(out, textures, names):
    for tex, name in zip(textures, names):
        save_disp(out / name, tex, tex.normalization)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_dataset_gen(cfg):
    _require(cfg, "out")
    if cfg.manifest:
        manifest = DatasetManifest.load(cfg.manifest)
    else:
        seed = 0 if cfg.seed is None else cfg.seed
        manifest = desk_manifest(cfg.resolution, seed, **cfg.dataset_spec)
    build_dataset(manifest, Path(cfg.out), _template(cfg), _body(cfg), overwrite=cfg.overwrite)


def cmd_bake(cfg):
    _require(cfg, "input")
    out = _out_dir(cfg)
    body, template = _body(cfg), _template(cfg)
    design = DesignParams(*cfg.design)
    canonical = design_mesh(template, design)
    posed = read_obj(cfg.input)
    if not posed.same_topology(canonical):
        raise StructuralError(f"{cfg.input} does not match the garment template topology")
    weights = template.weights(canonical.vertices, body.joint_count)
    tex = bake_texture(canonical.with_vertices(posed.vertices), canonical, weights, body,
                        np.asarray(cfg.shape, float), _pose(cfg, body.joint_count), cfg.resolution,
                        {"source": Path(cfg.input).name, "design": list(design.as_array())})
    save_disp(out / (Path(cfg.input).stem + ".disp"), tex)


def cmd_reconstruct(cfg):
    _require(cfg, "input")
    out = _out_dir(cfg)
    body = _body(cfg)
    manifest = _manifest(cfg) if cfg.dataset else None
    template = _template(cfg, manifest)
    tex = load_disp(cfg.input)
    if manifest is not None:
        rel = Path(cfg.input).resolve().relative_to(Path(cfg.dataset).resolve()).as_posix()
        item = next((it for it in manifest.items if it["file"] == rel), None)
        if item is None:
            raise ValidationError(f"{rel} is not listed in the dataset manifest")
        beta, pose, design = split_condition(item["condition"], body.shape_count, body.joint_count)
    else:
        beta, pose, design = np.asarray(cfg.shape, float), _pose(cfg, body.joint_count), DesignParams(*cfg.design)
    mesh = reconstruct_garment(tex, template, design, None, body, beta, pose)
    write_obj(out / (Path(cfg.input).stem + ".obj"), mesh)


def _frames_for_training(cfg):
    manifest, frames = load_frames(cfg.dataset, "train")
    if not frames:
        raise ValidationError("the dataset has no training frames")
    return manifest, frames


def cmd_train(cfg):
    _require(cfg, "dataset")
    out = _out_dir(cfg)
    manifest, frames = _frames_for_training(cfg)
    spec = manifest.normalization
    tc = cfg.train_config(seed=cfg.seed, resolution=manifest.resolution)
    _seed_everything(cfg.seed)
    data = TextureSet(
        torch.tensor(np.stack([f.texture.normalized(spec) for f in frames]), dtype=torch.float32),
        torch.tensor(np.stack([f.condition for f in frames]), dtype=torch.float32),
    )
    sched = cfg.sched()
    model = Denoiser.from_config(tc, data.conditions.shape[1], 3, sched)
    trained = train(model, data, sched, tc, checkpoint_dir=out)
    trained.normalization = spec.to_dict()
    save_checkpoint(out, trained)
    _save_layout(out, frames[0].texture.mask, spec)


def cmd_train_temporal(cfg):
    _require(cfg, "dataset")
    out = _out_dir(cfg)
    manifest, frames = _frames_for_training(cfg)
    spec = manifest.normalization
    tc = cfg.train_config(seed=cfg.seed, resolution=manifest.resolution)
    _seed_everything(cfg.seed)
    sequences = []
    for (sid, design), group in group_sequences(frames).items():
        fps = manifest.sequence(sid).fps
        sequences.append(SequenceSample.from_frames(group, fps, f"{sid}/d{design}"))
    sched = cfg.sched()
    model = Denoiser.from_config(tc, len(frames[0].condition), 6, sched)
    trained = train_temporal(model, sequences, sched, tc, AugmentationConfig.from_dict(cfg.augment), spec, checkpoint_dir=out)
    trained.normalization = spec.to_dict()
    save_checkpoint(out, trained)
    _save_layout(out, frames[0].texture.mask, spec)


def cmd_sample(cfg):
    out = _out_dir(cfg)
    trained, layout, sched = _load_model(cfg)
    if trained.temporal:
        raise ValidationError("checkpoint holds a temporal model; use 'rollout'")
    gen = _seed_everything(cfg.seed)
    conds = _conditions(cfg)
    rows, names = [], []
    for i, c in enumerate(conds):
        for k in range(cfg.n_samples):
            rows.append(c)
            names.append(f"frame_{i:05d}.disp" if cfg.n_samples == 1 else f"frame_{i:05d}_{k:02d}.disp")
    textures = []
    for c in rows:
        textures += sample(trained.model, np.asarray(c)[None], sched, gen, layout.mask, layout.normalization, cfg.mode)
    _write_textures(out, textures, names)


def cmd_rollout(cfg):
    out = _out_dir(cfg)
    trained, layout, sched = _load_model(cfg)
    if not trained.temporal:
        raise ValidationError("checkpoint holds a static model; use 'sample'")
    gen = _seed_everything(cfg.seed)
    conds = _conditions(cfg)
    textures = rollout(trained.model, conds, sched, gen, layout.mask, layout.normalization, cfg.mode)
    _write_textures(out, textures, [f"frame_{i:05d}.disp" for i in range(len(textures))])


def cmd_eval(cfg):
    _require(cfg, "input", "dataset")
    out = _out_dir(cfg)
    manifest = _manifest(cfg)
    body, template = _body(cfg), _template(cfg, manifest)
    items = _sequence_items(cfg, manifest)
    files = sorted(Path(cfg.input).glob("frame_*.disp"))
    if len(files) != len(items):
        raise StructuralError(f"{len(files)} predicted frames for a {len(items)}-frame sequence")
    preds, gts = [], []
    for path, item in zip(files, items):
        gt, beta, pose, design = item_ground_truth(manifest, item, template, body)
        preds.append(reconstruct_garment(load_disp(path), template, design, None, body, beta, pose))
        gts.append(gt)
    sid = items[0]["sequence"]
    curves = [
        metrics.position_curve(preds, gts, f"{cfg.label}_position", sid),
        metrics.velocity_error(preds, gts, f"{cfg.label}_velocity", sid),
    ]
    metrics.report(curves, out / "metrics.csv", overwrite=cfg.overwrite)


def cmd_export_png(cfg):
    _require(cfg, "input")
    out = _out_dir(cfg)
    tex = load_disp(cfg.input)
    export_png(out / (Path(cfg.input).stem + ".png"), tex)


HANDLERS = {
    "dataset-gen": cmd_dataset_gen,
    "bake": cmd_bake,
    "reconstruct": cmd_reconstruct,
    "train": cmd_train,
    "train-temporal": cmd_train_temporal,
    "sample": cmd_sample,
    "rollout": cmd_rollout,
    "eval": cmd_eval,
    "export-png": cmd_export_png,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command not in HANDLERS:
            parser.print_usage(sys.stderr)
            raise UsageError(f"unknown command {args.command!r}; expected one of {', '.join(COMMANDS)}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_run_config(args)
        if args.command in NEEDS_SEED and cfg.seed is None:
            raise ValidationError(f"'{args.command}' needs a seed (--seed or 'seed' in the config)")
        torch.use_deterministic_algorithms(True)
        HANDLERS[args.command](cfg)
    except (ValidationError, StructuralError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every other failure maps to exit status 2
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
