"""Command-line pipeline: data generation, training, sampling, evaluation.

Exit codes (stable, also listed in README):
  0  success
  1  estimate-pose finished below the acceptance IoU (estimate still printed)
  2  bad configuration (unknown key, bad range/value)
  3  stage II training without an initial checkpoint
  4  incompatible checkpoint (magic/version/digest)
  5  estimate-pose target mask is blank
  6  eval outputs missing (absent ids on stderr)
  7  I/O failure

stdout carries machine-readable JSON only; diagnostics go to stderr.
Every subcommand that writes artifacts echoes the effective config into
its output directory.  Randomness derives from the single --seed through
named substreams (data, train, sample) so stages reproduce in isolation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint, write_loss_csv
from .conditioning import Encoders, Task, ToyLatentEncoder, assemble_conditioning
from .errors import (
    BadParamsError,
    BadRangesError,
    EmptyTargetError,
    IncompatibleCheckpointError,
    MissingOutputError,
)
from .flow import NetConfig, TrainConfig, VelocityNet, euler_sample, train
from .imgio import float_to_unit8, read_pgm8, write_ppm
from .masks import BinaryMaskVolume, load_mask_volume
from .mesh import load_obj
from .metrics import EvalConfig, eval_report
from .pose import EstimatorConfig, estimate_camera
from .render import SilhouetteImage
from .synth import CameraPerturb, CameraRanges, GenConfig, build_dataset, load_pair, read_manifest


class ConfigError(Exception):
    pass


_SUBSTREAMS = {"data": 0, "train": 1, "sample": 2}


def substream_seed(seed: int, name: str) -> int:
    """Named 64-bit child seed of the master seed."""
    ss = np.random.SeedSequence((seed, _SUBSTREAMS[name]))
    return int(ss.generate_state(1, np.uint64)[0])


def build_config(cls, data: dict):
    """Strict dataclass construction: unknown keys are errors, lists become
    tuples where the default is a tuple, dicts recurse into nested configs."""
    if not isinstance(data, dict):
        raise ConfigError(f"{cls.__name__} config must be a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key '{unknown[0]}' for {cls.__name__}")
    kwargs = {}
    for key, value in data.items():
        f = fields[key]
        if f.default is not dataclasses.MISSING:
            default = f.default
        elif f.default_factory is not dataclasses.MISSING:
            default = f.default_factory()
        else:
            default = None
        if dataclasses.is_dataclass(default) and isinstance(value, dict):
            value = build_config(type(default), value)
        elif isinstance(default, tuple) and isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (ValueError, BadRangesError, BadParamsError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def _read_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    obj = json.loads(Path(path).read_text())
    if not isinstance(obj, dict):
        raise ConfigError("config file must hold a JSON object")
    return obj


def _out_dir(args) -> Path:
    root = args.out or os.environ.get("GEOEDIT_OUT") or "out"
    out = Path(root)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out: Path, payload: dict) -> None:
    (out / "config_used.json").write_text(json.dumps(payload, indent=2, default=str) + "\n")


def _emit(obj) -> None:
    print(json.dumps(obj))


def _set_threads(args) -> None:
    if args.threads:
        import torch

        torch.set_num_threads(args.threads)


def cmd_gen_data(args) -> int:
    cfg = build_config(GenConfig, _read_config_file(args.config))
    out = _out_dir(args)
    seed = substream_seed(args.seed, "data")
    _echo_config(out, {"subcommand": "gen-data", "seed": args.seed,
                       "data_seed": seed, "config": dataclasses.asdict(cfg)})
    manifest = build_dataset(cfg, out, seed)
    _emit({"manifest": str(manifest), "pairs": cfg.n_pairs})
    return 0


def cmd_train(args) -> int:
    raw = _read_config_file(args.config)
    net_raw = raw.pop("net", {})
    cfg = build_config(TrainConfig, raw)
    if "seed" not in raw:
        cfg = dataclasses.replace(cfg, seed=substream_seed(args.seed, "train"))
    net_cfg = build_config(NetConfig, net_raw)
    _set_threads(args)
    if args.init_checkpoint:
        net, net_cfg = load_checkpoint(args.init_checkpoint)
    elif cfg.stage == "II":
        print("stage II training requires --init-checkpoint", file=sys.stderr)
        return 3
    else:
        net = VelocityNet(net_cfg)
    out = _out_dir(args)
    _echo_config(out, {"subcommand": "train", "seed": args.seed,
                       "manifest": args.manifest,
                       "init_checkpoint": args.init_checkpoint,
                       "config": cfg.to_dict(), "net": net_cfg.to_dict()})
    net, trace = train(net, args.manifest, cfg)
    ckpt = save_checkpoint(out / "checkpoint.bin", net)
    csv_path = write_loss_csv(trace, out / "loss.csv")
    tail = [row[2] for row in trace[-100:]]
    _emit({
        "checkpoint": str(ckpt),
        "loss_csv": str(csv_path),
        "steps": cfg.steps,
        "final_loss": float(np.mean(tail)) if tail else None,
    })
    return 0


@dataclasses.dataclass(frozen=True)
class SampleConfig:
    steps: int = 64
    guidance: float = 1.5
    task: str = "manipulate"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.task not in [t.value for t in Task]:
            raise ValueError(f"unknown task {self.task!r}")


def cmd_sample(args) -> int:
    cfg = build_config(SampleConfig, _read_config_file(args.config))
    if args.task:
        cfg = dataclasses.replace(cfg, task=args.task)
    if args.steps:
        cfg = dataclasses.replace(cfg, steps=args.steps)
    if args.guidance is not None:
        cfg = dataclasses.replace(cfg, guidance=args.guidance)
    _set_threads(args)
    net, _ = load_checkpoint(args.checkpoint)
    task = Task(cfg.task)
    records = read_manifest(args.manifest)
    root = Path(args.manifest).parent
    wanted = set(args.ids.split(",")) if args.ids else None
    out = _out_dir(args)
    _echo_config(out, {"subcommand": "sample", "seed": args.seed,
                       "checkpoint": args.checkpoint, "manifest": args.manifest,
                       "ids": args.ids, "config": dataclasses.asdict(cfg)})
    encoders = Encoders(
        latent=ToyLatentEncoder(stride=net.cfg.latent_stride),
        pose=net.control.pose_encoder,
    )
    sample_seed = substream_seed(args.seed, "sample")
    outputs = []
    for index, rec in enumerate(records):
        if wanted is not None and rec["id"] not in wanted:
            continue
        pair = load_pair(rec, root)
        tup = assemble_conditioning(pair, task, encoders)
        rng = np.random.default_rng(np.random.SeedSequence((sample_seed, index)))
        latent = euler_sample(net, tup, cfg.steps, rng, guidance=cfg.guidance)
        img = encoders.latent.decode(latent)
        img_path = out / f"{rec['id']}.ppm"
        write_ppm(img_path, float_to_unit8(np.clip(img, 0.0, 1.0)))
        sidecar = {
            "id": rec["id"],
            "task": task.value,
            "descriptor": tup.descriptor.tolist(),
            "null_condition": tup.null_condition,
            "steps": cfg.steps,
            "guidance": cfg.guidance,
            "checkpoint": str(args.checkpoint),
        }
        (out / f"{rec['id']}.json").write_text(json.dumps(sidecar, indent=2) + "\n")
        outputs.append(str(img_path))
    _emit({"outputs": outputs, "count": len(outputs)})
    return 0


def _load_mask_any(path: str) -> BinaryMaskVolume:
    p = Path(path)
    if p.suffix == ".json":
        return load_mask_volume(p)
    frame = (read_pgm8(p) > 127).astype(np.uint8)
    return BinaryMaskVolume.from_frame(frame)


def cmd_estimate_pose(args) -> int:
    cfg = build_config(EstimatorConfig, _read_config_file(args.config))
    mesh = load_obj(args.mesh)
    mask = _load_mask_any(args.mask)
    target = SilhouetteImage(data=mask.frame(0).astype(np.float64))
    estimate = estimate_camera(mesh, target, cfg)
    payload = estimate.to_dict()
    _emit(payload)
    if args.out:
        out = _out_dir(args)
        _echo_config(out, {"subcommand": "estimate-pose", "mesh": args.mesh,
                           "mask": args.mask, "config": dataclasses.asdict(cfg)})
        (out / "pose.json").write_text(json.dumps(payload, indent=2) + "\n")
    return 0 if estimate.converged else 1


def cmd_eval(args) -> int:
    cfg = build_config(EvalConfig, _read_config_file(args.config))
    _set_threads(args)
    out = _out_dir(args)
    records = read_manifest(args.manifest)
    if not records:
        print("warning: empty manifest, empty report", file=sys.stderr)
    _echo_config(out, {"subcommand": "eval", "manifest": args.manifest,
                       "outputs": args.outputs, "config": dataclasses.asdict(cfg)})
    report = eval_report(args.manifest, args.outputs, cfg, out_dir=out)
    _emit({
        "report_json": report["json_path"],
        "report_csv": report["csv_path"],
        "n_samples": report["n_samples"],
        "aggregates": report["aggregates"],
    })
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--out", help="output directory (default $GEOEDIT_OUT or ./out)")
    p.add_argument("--threads", type=int, help="cap worker/torch threads")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geoedit",
        description="geometry-consistent object manipulation toy pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a paired-view dataset")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the velocity network")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--init-checkpoint", help="checkpoint to start from (stage II)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate images from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--ids", help="comma-separated manifest ids (default: all)")
    p.add_argument("--task", choices=[t.value for t in Task])
    p.add_argument("--steps", type=int)
    p.add_argument("--guidance", type=float)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("estimate-pose", help="fit a camera to a mask")
    _add_common(p)
    p.add_argument("--mesh", required=True, help="OBJ mesh")
    p.add_argument("--mask", required=True, help="mask sidecar JSON or 8-bit PGM")
    p.set_defaults(func=cmd_estimate_pose)

    p = sub.add_parser("eval", help="score generated outputs against a manifest")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--outputs", required=True, help="directory of generated PPMs")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (BadRangesError, BadParamsError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except IncompatibleCheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 4
    except EmptyTargetError as exc:
        print(f"empty target: {exc}", file=sys.stderr)
        return 5
    except MissingOutputError as exc:
        print(str(exc), file=sys.stderr)
        return 6
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 7


def estimate_pose_entry() -> None:
    """Console script: `estimate-pose ...` = `geoedit estimate-pose ...`."""
    sys.exit(main(["estimate-pose", *sys.argv[1:]]))


if __name__ == "__main__":
    sys.exit(main())
