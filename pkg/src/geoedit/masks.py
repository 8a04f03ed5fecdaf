"""Binary mask volumes, space-to-depth codes, and target-mask estimation.

Masks carry edit/preserve semantics (1 = edit, 0 = preserve) and are kept
binary end to end; they are never treated as image intensities.  The
space-to-depth encoding trades spatial resolution for channels so masks can
ride alongside latent grids at matching stride without any appearance
encoding.

Pixel convention: NDC x in [-1, 1] spans the columns left to right and NDC
y spans the rows top to bottom, so a +delta shift of 1.0 in either axis
moves content by half the image size toward larger indices.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import RelPoseDescriptor
from .errors import ShapeMismatchError
from .imgio import read_pgm8, write_pgm8


@dataclass(frozen=True)
class BinaryMaskVolume:
    """A {0,1} grid of shape T x 1 x H x W."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4 or data.shape[1] != 1:
            raise ValueError(f"mask volume must be T x 1 x H x W, got {data.shape}")
        if data.shape[0] < 1 or data.shape[2] < 1 or data.shape[3] < 1:
            raise ValueError(f"empty mask volume shape {data.shape}")
        if not np.isin(data, (0, 1)).all():
            raise ValueError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "data", data.astype(np.uint8))

    @property
    def shape(self):
        return self.data.shape

    def frame(self, i: int) -> np.ndarray:
        """The i-th frame as an H x W array."""
        return self.data[i, 0]

    def ones_count(self) -> int:
        return int(self.data.sum())

    @classmethod
    def from_frame(cls, frame: np.ndarray) -> "BinaryMaskVolume":
        return cls(np.asarray(frame)[None, None])


@dataclass(frozen=True)
class MaskCode:
    """Space-to-depth encoding of a mask volume at strides (s, t)."""

    data: np.ndarray
    spatial_stride: int
    temporal_stride: int

    def __post_init__(self):
        data = np.asarray(self.data)
        s, t = self.spatial_stride, self.temporal_stride
        if data.ndim != 4 or data.shape[1] != t * s * s:
            raise ValueError(
                f"code shape {data.shape} inconsistent with strides s={s}, t={t}"
            )
        if not np.isin(data, (0, 1)).all():
            raise ValueError("code values must be exactly 0 or 1")
        object.__setattr__(self, "data", data.astype(np.uint8))

    @property
    def shape(self):
        return self.data.shape

    def ones_count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True)
class BBox:
    """Half-open pixel box [row_min, row_max) x [col_min, col_max)."""

    row_min: int
    row_max: int
    col_min: int
    col_max: int

    def __post_init__(self):
        if not (self.row_min < self.row_max and self.col_min < self.col_max):
            raise ValueError(f"degenerate box {self}")

    @property
    def height(self) -> int:
        return self.row_max - self.row_min

    @property
    def width(self) -> int:
        return self.col_max - self.col_min


def pixel_unshuffle(m: BinaryMaskVolume, s: int, t: int = 1) -> MaskCode:
    """Space-to-depth rearrangement (T,1,H,W) -> (T/t, t*s^2, H/s, W/s).

    Bijective: channel c = tau*s^2 + dr*s + dc holds the (dr, dc) offset of
    temporal slot tau, i.e. temporal-major then row-major within each s x s
    block.
    """
    T, _, H, W = m.shape
    if H % s or W % s or T % t:
        raise ShapeMismatchError(
            f"shape T={T}, H={H}, W={W} not divisible by strides s={s}, t={t}"
        )
    x = m.data[:, 0].reshape(T // t, t, H // s, s, W // s, s)
    x = x.transpose(0, 1, 3, 5, 2, 4).reshape(T // t, t * s * s, H // s, W // s)
    return MaskCode(data=x, spatial_stride=s, temporal_stride=t)


def pixel_shuffle_inverse(c: MaskCode) -> BinaryMaskVolume:
    """Exact inverse of :func:`pixel_unshuffle`."""
    s, t = c.spatial_stride, c.temporal_stride
    Tt, _, Hs, Ws = c.shape
    x = c.data.reshape(Tt, t, s, s, Hs, Ws)
    x = x.transpose(0, 1, 4, 2, 5, 3).reshape(Tt * t, 1, Hs * s, Ws * s)
    return BinaryMaskVolume(data=x)


def mask_bbox(m: BinaryMaskVolume, frame: int = 0) -> BBox | None:
    """Squared bounding box of a frame's foreground, or None when empty.

    The tight box is expanded to a square of side max(height, width) about
    its center (half-pixel centers resolved toward smaller indices) and then
    clipped to the image bounds, so the result may lose squareness at the
    border.
    """
    f = m.frame(frame)
    rows = np.flatnonzero(f.any(axis=1))
    cols = np.flatnonzero(f.any(axis=0))
    if rows.size == 0:
        return None
    r0, r1 = int(rows[0]), int(rows[-1]) + 1
    c0, c1 = int(cols[0]), int(cols[-1]) + 1
    side = max(r1 - r0, c1 - c0)
    row_min = (r0 + r1 - side) // 2
    col_min = (c0 + c1 - side) // 2
    H, W = f.shape
    return BBox(
        row_min=max(row_min, 0),
        row_max=min(row_min + side, H),
        col_min=max(col_min, 0),
        col_max=min(col_min + side, W),
    )


def round_half_away(x: float) -> int:
    """Round to nearest integer with ties away from zero."""
    return int(math.floor(x + 0.5)) if x >= 0 else int(math.ceil(x - 0.5))


def estimate_target_mask(
    m_src: BinaryMaskVolume,
    f: RelPoseDescriptor,
    d_src: float,
    d_tgt: float,
) -> BinaryMaskVolume:
    """Coarse target-placement mask derived from the source mask and f.

    Per frame: square the source bbox, scale its side by d_src/d_tgt
    (nearest integer, minimum 1), shift the center by (drx*W/2, dry*H/2)
    pixels, fill with ones and clip to the frame.  Descriptors whose NDC
    deltas leave [-1, 1] place the object outside the image and yield the
    all-zero mask.
    """
    if not (d_src > 0 and d_tgt > 0):
        raise ValueError("distances must be positive")
    T, _, H, W = m_src.shape
    out = np.zeros_like(m_src.data)
    if not f.in_frame():
        return BinaryMaskVolume(data=out)
    ratio = d_src / d_tgt
    for k in range(T):
        box = mask_bbox(m_src, k)
        if box is None:
            continue
        side = max(round_half_away(max(box.height, box.width) * ratio), 1)
        center_r = 0.5 * (box.row_min + box.row_max) + f.dry * H / 2.0
        center_c = 0.5 * (box.col_min + box.col_max) + f.drx * W / 2.0
        r0 = round_half_away(center_r - side / 2.0)
        c0 = round_half_away(center_c - side / 2.0)
        rr0, rr1 = max(r0, 0), min(r0 + side, H)
        cc0, cc1 = max(c0, 0), min(c0 + side, W)
        if rr0 < rr1 and cc0 < cc1:
            out[k, 0, rr0:rr1, cc0:cc1] = 1
    return BinaryMaskVolume(data=out)


def mask_iou(a: BinaryMaskVolume, b: BinaryMaskVolume) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = int(np.logical_and(a.data, b.data).sum())
    union = int(np.logical_or(a.data, b.data).sum())
    if union == 0:
        return 1.0
    return inter / union


def save_mask_volume(
    m: BinaryMaskVolume,
    basepath: str | Path,
    spatial_stride: int | None = None,
    temporal_stride: int | None = None,
) -> Path:
    """Persist a volume as one 8-bit PGM per frame plus a JSON sidecar.

    Stride metadata, when given, records how a code derived from this volume
    should be rebuilt.  Returns the sidecar path.
    """
    base = Path(basepath)
    base.parent.mkdir(parents=True, exist_ok=True)
    T, _, H, W = m.shape
    frames = []
    for k in range(T):
        frame_path = base.parent / f"{base.name}_f{k:03d}.pgm"
        write_pgm8(frame_path, m.frame(k) * 255)
        frames.append(frame_path.name)
    manifest = {"T": T, "H": H, "W": W, "frames": frames}
    if spatial_stride is not None:
        manifest["spatial_stride"] = spatial_stride
    if temporal_stride is not None:
        manifest["temporal_stride"] = temporal_stride
    sidecar = base.parent / f"{base.name}.json"
    sidecar.write_text(json.dumps(manifest, indent=2))
    return sidecar


def load_mask_volume(sidecar: str | Path) -> BinaryMaskVolume:
    """Load a volume written by :func:`save_mask_volume`."""
    sidecar = Path(sidecar)
    manifest = json.loads(sidecar.read_text())
    frames = []
    for name in manifest["frames"]:
        img = read_pgm8(sidecar.parent / name)
        frames.append((img >= 128).astype(np.uint8))
    data = np.stack(frames)[:, None]
    vol = BinaryMaskVolume(data=data)
    if vol.shape != (manifest["T"], 1, manifest["H"], manifest["W"]):
        raise ShapeMismatchError("sidecar metadata disagrees with frame files")
    return vol
