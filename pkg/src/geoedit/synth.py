"""Procedural paired-view training data.

Each sample renders one primitive from a source camera and a perturbed
target camera over a flat background, giving (image, camera) pairs plus
the relative-pose descriptor, the true target mask, a reference crop, and
the clean background plate used by the auxiliary objectives.

Appearance is flat shading: intensity = 0.4 + 0.6 * max(0, n . l) with a
fixed world light l = normalize(1, 1, 1), so the look of a face depends on
viewpoint and pose conditioning has signal to learn from.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import (
    PITCH_EPS,
    EulerCamera,
    RelPoseDescriptor,
    build_descriptor,
    wrap_angle,
)
from .errors import BadRangesError
from .imgio import float_to_unit8, read_ppm, unit8_to_float, write_ppm
from .masks import BinaryMaskVolume, load_mask_volume, mask_bbox, save_mask_volume
from .mesh import TriangleMesh, make_primitive
from .render import rasterize_faces

_LIGHT = np.array([1.0, 1.0, 1.0]) / math.sqrt(3.0)
_PITCH_LIMIT = math.pi / 2 - PITCH_EPS


@dataclass(frozen=True)
class ToyScene:
    mesh: TriangleMesh
    tint: np.ndarray  # (3,) in [0,1]
    background: np.ndarray  # (3,) in [0,1]; all-ones means white

    def __post_init__(self):
        for name in ("tint", "background"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.shape != (3,) or v.min() < 0.0 or v.max() > 1.0:
                raise ValueError(f"{name} must be 3 channels in [0,1], got {v}")
            object.__setattr__(self, name, v)


@dataclass(frozen=True)
class SamplePair:
    x_src: np.ndarray
    x_tgt: np.ndarray
    x_bg: np.ndarray  # clean background plate (auxiliary-task target/input)
    i_ref: np.ndarray
    m_src: BinaryMaskVolume
    m_tgt_true: BinaryMaskVolume
    s_src: EulerCamera
    s_tgt: EulerCamera
    f: RelPoseDescriptor


@dataclass(frozen=True)
class CameraRanges:
    """Uniform per-parameter sampling intervals for source cameras."""

    yaw: tuple = (-math.pi, math.pi)
    pitch: tuple = (-0.3, 0.45)
    d: tuple = (2.2, 4.0)
    rx: tuple = (-0.25, 0.25)
    ry: tuple = (-0.25, 0.25)

    def __post_init__(self):
        for name in ("yaw", "pitch", "d", "rx", "ry"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise BadRangesError(f"{name}: empty interval [{lo}, {hi}]")
        if self.d[0] <= 0:
            raise BadRangesError(f"d must be positive, got {self.d}")
        if abs(self.pitch[0]) > _PITCH_LIMIT or abs(self.pitch[1]) > _PITCH_LIMIT:
            raise BadRangesError(f"pitch range {self.pitch} hits the pole guard")
        for name in ("rx", "ry"):
            lo, hi = getattr(self, name)
            if lo < -1.0 or hi > 1.0:
                raise BadRangesError(f"{name} range [{lo}, {hi}] outside [-1, 1]")


@dataclass(frozen=True)
class CameraPerturb:
    """Half-widths of the target-camera perturbation around the source."""

    yaw: float = math.pi / 4
    pitch: float = math.pi / 12
    d_factor: tuple = (0.8, 1.25)  # multiplicative interval for distance
    shift: float = 0.4

    def __post_init__(self):
        if self.yaw < 0 or self.pitch < 0 or self.shift < 0:
            raise BadRangesError("perturbation half-widths must be nonnegative")
        if not (0 < self.d_factor[0] <= self.d_factor[1]):
            raise BadRangesError(f"bad distance factor interval {self.d_factor}")


def sample_source_camera(rng: np.random.Generator, ranges: CameraRanges) -> EulerCamera:
    """Independent uniform draws per parameter."""
    return EulerCamera(
        yaw=rng.uniform(*ranges.yaw),
        pitch=rng.uniform(*ranges.pitch),
        d=rng.uniform(*ranges.d),
        rx=rng.uniform(*ranges.rx),
        ry=rng.uniform(*ranges.ry),
    )


def sample_target_camera(
    src: EulerCamera,
    rng: np.random.Generator,
    perturb: CameraPerturb = CameraPerturb(),
    bounding_radius: float = 1.0,
) -> EulerCamera:
    """Moderate perturbation of the source camera, clamped to validity.

    Angles and shifts move additively within their half-widths; distance
    scales by a factor drawn from perturb.d_factor and is kept at least
    1.5x the mesh bounding radius.
    """
    yaw = wrap_angle(src.yaw + rng.uniform(-perturb.yaw, perturb.yaw))
    pitch = float(
        np.clip(
            src.pitch + rng.uniform(-perturb.pitch, perturb.pitch),
            -_PITCH_LIMIT,
            _PITCH_LIMIT,
        )
    )
    d = max(src.d * rng.uniform(*perturb.d_factor), 1.5 * bounding_radius)
    rx = float(np.clip(src.rx + rng.uniform(-perturb.shift, perturb.shift), -1.0, 1.0))
    ry = float(np.clip(src.ry + rng.uniform(-perturb.shift, perturb.shift), -1.0, 1.0))
    return EulerCamera(yaw=yaw, pitch=pitch, d=d, rx=rx, ry=ry)


def _shade(scene: ToyScene, cam: EulerCamera, H: int, W: int):
    """Flat-shaded image plus the hard silhouette mask."""
    face_id = rasterize_faces(scene.mesh, cam, H, W)
    covered = face_id >= 0
    normals = scene.mesh.face_normals()
    intensity = 0.4 + 0.6 * np.maximum(normals @ _LIGHT, 0.0)
    img = np.broadcast_to(scene.background, (H, W, 3)).copy()
    img[covered] = scene.tint * intensity[face_id[covered], None]
    return img, BinaryMaskVolume.from_frame(covered.astype(np.uint8))


def _nearest_resize(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    rows = np.floor((np.arange(size) + 0.5) * h / size).astype(np.int64)
    cols = np.floor((np.arange(size) + 0.5) * w / size).astype(np.int64)
    return img[rows][:, cols]


def render_pair(
    scene: ToyScene,
    s_src: EulerCamera,
    s_tgt: EulerCamera,
    H: int,
    W: int,
    ref_size: int = 32,
) -> SamplePair:
    x_src, m_src = _shade(scene, s_src, H, W)
    x_tgt, m_tgt = _shade(scene, s_tgt, H, W)
    x_bg = np.broadcast_to(scene.background, (H, W, 3)).copy()
    box = mask_bbox(m_src)
    if box is None:
        i_ref = np.broadcast_to(scene.background, (ref_size, ref_size, 3)).copy()
    else:
        crop = x_src[box.row_min : box.row_max, box.col_min : box.col_max]
        i_ref = _nearest_resize(crop, ref_size)
    return SamplePair(
        x_src=x_src,
        x_tgt=x_tgt,
        x_bg=x_bg,
        i_ref=i_ref,
        m_src=m_src,
        m_tgt_true=m_tgt,
        s_src=s_src,
        s_tgt=s_tgt,
        f=build_descriptor(s_src, s_tgt),
    )


# Base dimensions and tessellation per primitive kind; per-pair jitter is
# applied multiplicatively.
_KIND_SPECS = {
    "box": {"params": (0.55, 0.85, 1.4), "jitter": (0.9, 1.1), "subdivisions": 2},
    "cylinder": {"params": (0.5, 1.6), "jitter": (0.8, 1.2), "subdivisions": 1},
    "capsule": {"params": (0.45, 1.2), "jitter": (0.8, 1.2), "subdivisions": 1},
    "icosphere": {"params": (1.0,), "jitter": (1.0, 1.0), "subdivisions": 2},
}


@dataclass(frozen=True)
class GenConfig:
    n_pairs: int = 100
    H: int = 64
    W: int = 64
    ref_size: int = 32
    kinds: tuple = ("box", "cylinder", "capsule")
    background: str = "white"  # "white" or "color"
    ranges: CameraRanges = field(default_factory=CameraRanges)
    perturb: CameraPerturb = field(default_factory=CameraPerturb)

    def __post_init__(self):
        if self.n_pairs < 0:
            raise BadRangesError("n_pairs must be nonnegative")
        if self.background not in ("white", "color"):
            raise BadRangesError(f"unknown background regime {self.background!r}")
        unknown = set(self.kinds) - set(_KIND_SPECS)
        if unknown:
            raise BadRangesError(f"unknown primitive kinds {sorted(unknown)}")


def _sample_scene(cfg: GenConfig, rng: np.random.Generator) -> tuple[ToyScene, dict]:
    kind = cfg.kinds[int(rng.integers(len(cfg.kinds)))]
    spec = _KIND_SPECS[kind]
    params = tuple(p * rng.uniform(*spec["jitter"]) for p in spec["params"])
    mesh = make_primitive(kind, params, subdivisions=spec["subdivisions"])
    tint = rng.uniform(0.15, 0.85, size=3)
    if cfg.background == "white":
        bg = np.ones(3)
    else:
        for _ in range(20):
            bg = rng.uniform(0.0, 1.0, size=3)
            if np.abs(bg - tint * 0.7).max() > 0.25:
                break
    meta = {
        "kind": kind,
        "params": list(params),
        "subdivisions": spec["subdivisions"],
        "tint": tint.tolist(),
        "background": bg.tolist(),
    }
    return ToyScene(mesh=mesh, tint=tint, background=bg), meta


def generate_pair(cfg: GenConfig, seed: int, index: int) -> tuple[SamplePair, dict]:
    """The index-th sample of a run: deterministic in (cfg, seed, index)."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, index)))
    scene, meta = _sample_scene(cfg, rng)
    s_src = sample_source_camera(rng, cfg.ranges)
    s_tgt = sample_target_camera(
        s_src, rng, cfg.perturb, bounding_radius=scene.mesh.bounding_radius
    )
    pair = render_pair(scene, s_src, s_tgt, cfg.H, cfg.W, cfg.ref_size)
    return pair, meta


def build_dataset(cfg: GenConfig, out_dir: str | Path, seed: int) -> Path:
    """Write n_pairs samples plus a JSON Lines manifest; returns its path.

    Bit-identical across reruns with the same (cfg, seed): every pair draws
    from its own seed substream keyed by (seed, index).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(cfg.n_pairs):
        pair, meta = generate_pair(cfg, seed, i)
        pid = f"pair_{i:06d}"
        pdir = out_dir / pid
        pdir.mkdir(exist_ok=True)
        paths = {}
        for name, img in (
            ("x_src", pair.x_src),
            ("x_tgt", pair.x_tgt),
            ("x_bg", pair.x_bg),
            ("i_ref", pair.i_ref),
        ):
            rel = f"{pid}/{name}.ppm"
            write_ppm(out_dir / rel, float_to_unit8(img))
            paths[name] = rel
        for name, vol in (("m_src", pair.m_src), ("m_tgt_true", pair.m_tgt_true)):
            sidecar = save_mask_volume(vol, pdir / name)
            paths[name] = f"{pid}/{sidecar.name}"
        records.append(
            {
                "id": pid,
                "seed": [seed, i],
                **meta,
                "s_src": pair.s_src.to_dict(),
                "s_tgt": pair.s_tgt.to_dict(),
                "f": pair.f.as_vector().tolist(),
                "paths": paths,
            }
        )
    manifest = out_dir / "manifest.jsonl"
    with manifest.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return manifest


def read_manifest(manifest_path: str | Path) -> list[dict]:
    records = []
    for line in Path(manifest_path).read_text().splitlines():
        if line.strip():
            records.append(json.loads(line))
    return records


def load_pair(record: dict, root: str | Path) -> SamplePair:
    """Rehydrate a SamplePair from manifest record + files (dequantized)."""
    root = Path(root)
    paths = record["paths"]
    imgs = {
        name: unit8_to_float(read_ppm(root / paths[name]))
        for name in ("x_src", "x_tgt", "x_bg", "i_ref")
    }
    s_src = EulerCamera.from_dict(record["s_src"])
    s_tgt = EulerCamera.from_dict(record["s_tgt"])
    return SamplePair(
        x_src=imgs["x_src"],
        x_tgt=imgs["x_tgt"],
        x_bg=imgs["x_bg"],
        i_ref=imgs["i_ref"],
        m_src=load_mask_volume(root / paths["m_src"]),
        m_tgt_true=load_mask_volume(root / paths["m_tgt_true"]),
        s_src=s_src,
        s_tgt=s_tgt,
        f=RelPoseDescriptor.from_vector(np.array(record["f"], dtype=np.float64)),
    )


def record_mesh(record: dict) -> TriangleMesh:
    """Rebuild the primitive a manifest record was rendered from."""
    return make_primitive(
        record["kind"], record["params"], subdivisions=record["subdivisions"]
    )
