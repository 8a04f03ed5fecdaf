"""Software silhouette rasterizer for origin-centered meshes.

Projection model: world -> camera via look-at extrinsics, then pinhole
division (x/z, y/z) plus the camera's NDC shift (r_x, r_y).  NDC x spans
image columns left to right and NDC y spans rows top to bottom; the pixel
center of (row i, col j) sits at NDC ((j+0.5)*2/W - 1, (i+0.5)*2/H - 1).

Silhouettes deliberately ignore occlusion ordering (no z-buffer): a pixel
is covered when any triangle, front- or back-facing, contains its center.
`rasterize_faces` additionally resolves the nearest covering face per pixel
for callers that need per-pixel normals (flat shading).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import EulerCamera, look_at_extrinsics
from .errors import CameraInsideObjectError
from .imgio import read_pgm16, write_pgm16
from .mesh import TriangleMesh


@dataclass(frozen=True)
class SilhouetteImage:
    """H x W coverage grid with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError(f"silhouette must be H x W, got {data.shape}")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("coverage values must lie in [0, 1]")
        object.__setattr__(self, "data", data)

    @property
    def shape(self):
        return self.data.shape

    def threshold(self, level: float = 0.5) -> np.ndarray:
        """Binary H x W uint8 view at the given coverage level."""
        return (self.data > level).astype(np.uint8)

    def is_empty(self) -> bool:
        return not bool((self.data > 0.5).any())


def project_mesh_ndc(mesh: TriangleMesh, cam: EulerCamera):
    """Project all vertices to NDC; returns (ndc (V,2), z_cam (V,))."""
    if cam.d <= mesh.bounding_radius:
        raise CameraInsideObjectError(
            f"camera distance {cam.d} within bounding radius {mesh.bounding_radius}"
        )
    xf = look_at_extrinsics(cam)
    pts = mesh.vertices @ xf.R.T + xf.t
    z = pts[:, 2]
    if (z <= 1e-9).any():
        raise CameraInsideObjectError("mesh vertex at or behind the image plane")
    ndc = pts[:, :2] / z[:, None] + np.array([cam.rx, cam.ry])
    return ndc, z


def _pixel_coords(ndc: np.ndarray, H: int, W: int) -> np.ndarray:
    """Continuous pixel coordinates (x = column units, y = row units)."""
    return (ndc + 1.0) * 0.5 * np.array([W, H])


def rasterize_faces(mesh: TriangleMesh, cam: EulerCamera, H: int, W: int):
    """Coverage plus nearest covering face id per pixel (-1 where empty).

    Nearness uses perspective-correct interpolated depth; ties keep the
    lowest face index so results are deterministic.
    """
    ndc, z = project_mesh_ndc(mesh, cam)
    pix = _pixel_coords(ndc, H, W)
    inv_z = 1.0 / z
    face_id = np.full((H, W), -1, dtype=np.int64)
    best_inv_z = np.zeros((H, W))
    for fi, (ia, ib, ic) in enumerate(mesh.faces):
        a, b, c = pix[ia], pix[ib], pix[ic]
        area2 = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(area2) < 1e-12:
            continue
        lo = np.minimum(np.minimum(a, b), c)
        hi = np.maximum(np.maximum(a, b), c)
        j0 = max(int(np.ceil(lo[0] - 0.5)), 0)
        j1 = min(int(np.floor(hi[0] - 0.5)), W - 1)
        i0 = max(int(np.ceil(lo[1] - 0.5)), 0)
        i1 = min(int(np.floor(hi[1] - 0.5)), H - 1)
        if j0 > j1 or i0 > i1:
            continue
        xs = np.arange(j0, j1 + 1) + 0.5
        ys = (np.arange(i0, i1 + 1) + 0.5)[:, None]
        # Edge functions; all-same-sign accepts either winding.
        e_ab = (b[0] - a[0]) * (ys - a[1]) - (b[1] - a[1]) * (xs - a[0])
        e_bc = (c[0] - b[0]) * (ys - b[1]) - (c[1] - b[1]) * (xs - b[0])
        e_ca = (a[0] - c[0]) * (ys - c[1]) - (a[1] - c[1]) * (xs - c[0])
        inside = ((e_ab >= 0) & (e_bc >= 0) & (e_ca >= 0)) | (
            (e_ab <= 0) & (e_bc <= 0) & (e_ca <= 0)
        )
        if not inside.any():
            continue
        # Screen barycentrics interpolate 1/z exactly for planar faces.
        wa, wb, wc = e_bc / area2, e_ca / area2, e_ab / area2
        iz = wa * inv_z[ia] + wb * inv_z[ib] + wc * inv_z[ic]
        sl = (slice(i0, i1 + 1), slice(j0, j1 + 1))
        take = inside & (iz > best_inv_z[sl])
        best_inv_z[sl] = np.where(take, iz, best_inv_z[sl])
        face_id[sl] = np.where(take, fi, face_id[sl])
    return face_id


def render_hard(mesh: TriangleMesh, cam: EulerCamera, H: int, W: int) -> SilhouetteImage:
    """Binary silhouette: pixel center inside any projected triangle."""
    face_id = rasterize_faces(mesh, cam, H, W)
    return SilhouetteImage(data=(face_id >= 0).astype(np.float64))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# Signed-distance field sentinel for "far from every triangle".
_FAR = -1e6


def render_soft(
    mesh: TriangleMesh,
    cam: EulerCamera,
    H: int,
    W: int,
    sharpness: float = 0.05,
) -> SilhouetteImage:
    """Soft silhouette: logistic of approximate signed distance over sharpness.

    The signed distance at a pixel is the max over triangles of the
    per-triangle signed distance in NDC (positive inside, negative outside,
    magnitude = distance to the nearest edge).  Pixels farther than ~6
    sharpness units from every triangle saturate to coverage 0.
    """
    if sharpness <= 0:
        raise ValueError("sharpness must be positive")
    ndc, _ = project_mesh_ndc(mesh, cam)
    field = np.full((H, W), _FAR)
    pad = 6.0 * sharpness
    xs_all = (np.arange(W) + 0.5) * 2.0 / W - 1.0
    ys_all = (np.arange(H) + 0.5) * 2.0 / H - 1.0
    for ia, ib, ic in mesh.faces:
        a, b, c = ndc[ia], ndc[ib], ndc[ic]
        lo = np.minimum(np.minimum(a, b), c) - pad
        hi = np.maximum(np.maximum(a, b), c) + pad
        j0 = max(int(np.ceil((lo[0] + 1.0) * 0.5 * W - 0.5)), 0)
        j1 = min(int(np.floor((hi[0] + 1.0) * 0.5 * W - 0.5)), W - 1)
        i0 = max(int(np.ceil((lo[1] + 1.0) * 0.5 * H - 0.5)), 0)
        i1 = min(int(np.floor((hi[1] + 1.0) * 0.5 * H - 0.5)), H - 1)
        if j0 > j1 or i0 > i1:
            continue
        px = xs_all[j0 : j1 + 1]
        py = ys_all[i0 : i1 + 1][:, None]
        d2 = None
        signs = []
        for p0, p1 in ((a, b), (b, c), (c, a)):
            ex, ey = p1[0] - p0[0], p1[1] - p0[1]
            vx, vy = px - p0[0], py - p0[1]
            ee = ex * ex + ey * ey
            tt = np.clip((vx * ex + vy * ey) / (ee + 1e-300), 0.0, 1.0)
            dx, dy = vx - tt * ex, vy - tt * ey
            seg = dx * dx + dy * dy
            d2 = seg if d2 is None else np.minimum(d2, seg)
            signs.append(ex * vy - ey * vx)
        inside = ((signs[0] >= 0) & (signs[1] >= 0) & (signs[2] >= 0)) | (
            (signs[0] <= 0) & (signs[1] <= 0) & (signs[2] <= 0)
        )
        dist = np.sqrt(d2)
        sl = (slice(i0, i1 + 1), slice(j0, j1 + 1))
        field[sl] = np.maximum(field[sl], np.where(inside, dist, -dist))
    return SilhouetteImage(data=_stable_sigmoid(field / sharpness))


def save_silhouette(img: SilhouetteImage, path: str | Path) -> None:
    """Persist coverage as 16-bit PGM (quantized to 65535 levels)."""
    write_pgm16(path, np.rint(img.data * 65535.0).astype(np.uint16))


def load_silhouette(path: str | Path) -> SilhouetteImage:
    return SilhouetteImage(data=read_pgm16(path).astype(np.float64) / 65535.0)
