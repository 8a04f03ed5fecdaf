"""Triangle meshes and procedural primitives.

All primitives are watertight, centered at the origin, and by default
rescaled so the bounding-sphere radius is exactly 1; the dimension
parameters then control aspect only.  Face windings are normalized to
outward (positive signed volume) during construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadParamsError

_DEGENERATE_AREA = 1e-12


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64
    bounding_radius: float = field(default=0.0)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"vertices must be V x 3, got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError(f"faces must be F x 3, got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        # Construction cleanup: drop degenerate (near-zero-area) faces.
        if f.size:
            a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
            areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
            f = f[areas > _DEGENERATE_AREA]
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(
            self, "bounding_radius", float(np.linalg.norm(v, axis=1).max())
        )

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_normals(self) -> np.ndarray:
        """Unit outward normals, one per face."""
        v, f = self.vertices, self.faces
        n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def signed_volume(self) -> float:
        v, f = self.vertices, self.faces
        a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def undirected_edges(faces: np.ndarray) -> set[tuple[int, int]]:
    edges = set()
    for i, j, k in np.asarray(faces):
        for a, b in ((i, j), (j, k), (k, i)):
            edges.add((min(int(a), int(b)), max(int(a), int(b))))
    return edges


def euler_characteristic(mesh: TriangleMesh) -> int:
    """V - E + F; equals 2 for a watertight genus-0 surface."""
    return mesh.n_vertices - len(undirected_edges(mesh.faces)) + mesh.n_faces


def is_watertight(mesh: TriangleMesh) -> bool:
    """True when every directed edge is matched by exactly one reverse."""
    directed: dict[tuple[int, int], int] = {}
    for i, j, k in mesh.faces:
        for a, b in ((int(i), int(j)), (int(j), int(k)), (int(k), int(i))):
            directed[(a, b)] = directed.get((a, b), 0) + 1
    if any(n != 1 for n in directed.values()):
        return False
    return all((b, a) in directed for (a, b) in directed)


def _finalize(verts, faces, normalize: bool) -> TriangleMesh:
    """Center at origin, normalize radius, and fix winding to outward."""
    v = np.asarray(verts, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    v = v - 0.5 * (v.min(axis=0) + v.max(axis=0))
    if normalize:
        v = v / np.linalg.norm(v, axis=1).max()
    mesh = TriangleMesh(vertices=v, faces=f)
    if mesh.signed_volume() < 0:
        mesh = TriangleMesh(vertices=v, faces=f[:, ::-1])
    return mesh


def _box(dims):
    sx, sy, sz = [d / 2.0 for d in dims]
    half = (sx, sy, sz)
    corner_index: dict[tuple[float, float, float], int] = {}
    verts: list[tuple[float, float, float]] = []

    def vid(p):
        if p not in corner_index:
            corner_index[p] = len(verts)
            verts.append(p)
        return corner_index[p]

    faces = []
    for axis in range(3):
        b, c = (axis + 1) % 3, (axis + 2) % 3
        for sign in (1.0, -1.0):
            corners = []
            for db, dc in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
                p = [0.0, 0.0, 0.0]
                p[axis] = sign * half[axis]
                p[b] = db * half[b]
                p[c] = dc * half[c]
                corners.append(vid(tuple(p)))
            if sign < 0:
                corners.reverse()
            faces.append((corners[0], corners[1], corners[2]))
            faces.append((corners[0], corners[2], corners[3]))
    return verts, faces


_ICO_T = (1.0 + math.sqrt(5.0)) / 2.0
_ICO_VERTS = [
    (-1, _ICO_T, 0), (1, _ICO_T, 0), (-1, -_ICO_T, 0), (1, -_ICO_T, 0),
    (0, -1, _ICO_T), (0, 1, _ICO_T), (0, -1, -_ICO_T), (0, 1, -_ICO_T),
    (_ICO_T, 0, -1), (_ICO_T, 0, 1), (-_ICO_T, 0, -1), (-_ICO_T, 0, 1),
]
_ICO_FACES = [
    (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
    (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
    (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
    (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
]


def _icosphere(radius, subdivisions):
    verts = [np.array(v, dtype=np.float64) for v in _ICO_VERTS]
    faces = list(_ICO_FACES)
    for _ in range(subdivisions):
        midpoint: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in midpoint:
                midpoint[key] = len(verts)
                verts.append(0.5 * (verts[a] + verts[b]))
            return midpoint[key]

        new_faces = []
        for i, j, k in faces:
            ij, jk, ki = mid(i, j), mid(j, k), mid(k, i)
            new_faces += [(i, ij, ki), (j, jk, ij), (k, ki, jk), (ij, jk, ki)]
        faces = new_faces
    v = np.stack(verts)
    v = v / np.linalg.norm(v, axis=1, keepdims=True) * radius
    return v, faces


def _cylinder(radius, height, segments):
    verts = []
    for y in (height / 2.0, -height / 2.0):
        for k in range(segments):
            a = 2.0 * math.pi * k / segments
            verts.append((radius * math.cos(a), y, radius * math.sin(a)))
    top_center = len(verts)
    verts.append((0.0, height / 2.0, 0.0))
    bot_center = len(verts)
    verts.append((0.0, -height / 2.0, 0.0))
    faces = []
    for k in range(segments):
        k2 = (k + 1) % segments
        t0, t1 = k, k2
        b0, b1 = segments + k, segments + k2
        faces += [(t0, b0, b1), (t0, b1, t1)]  # side quad
        faces.append((top_center, t0, t1))
        faces.append((bot_center, b1, b0))
    return verts, faces


def _capsule(radius, cyl_height, segments, rings):
    h = cyl_height / 2.0
    # Latitude profile: top pole -> top equator, then mirrored bottom half,
    # so consecutive rings always stitch without crossing.
    top_profile = []
    for i in range(1, rings + 1):
        theta = 0.5 * math.pi * i / rings
        top_profile.append((h + radius * math.cos(theta), radius * math.sin(theta)))
    profile = top_profile + [(-y, r) for y, r in reversed(top_profile)]

    verts = [(0.0, h + radius, 0.0)]  # top pole
    ring_start = []
    for y, r in profile:
        ring_start.append(len(verts))
        for k in range(segments):
            a = 2.0 * math.pi * k / segments
            verts.append((r * math.cos(a), y, r * math.sin(a)))
    bottom_pole = len(verts)
    verts.append((0.0, -(h + radius), 0.0))

    def ring(idx):
        return [ring_start[idx] + k for k in range(segments)]

    faces = []
    first = ring(0)
    for k in range(segments):
        faces.append((0, first[k], first[(k + 1) % segments]))
    for idx in range(2 * rings - 1):
        upper, lower = ring(idx), ring(idx + 1)
        for k in range(segments):
            k2 = (k + 1) % segments
            faces += [
                (upper[k], lower[k], lower[k2]),
                (upper[k], lower[k2], upper[k2]),
            ]
    last = ring(2 * rings - 1)
    for k in range(segments):
        faces.append((bottom_pole, last[(k + 1) % segments], last[k]))
    return verts, faces


def make_primitive(
    kind: str,
    params=(1.0,),
    subdivisions: int = 2,
    normalize: bool = True,
) -> TriangleMesh:
    """Build a watertight primitive: box, cylinder, icosphere, or capsule.

    params: box -> (sx, sy, sz) extents; cylinder -> (radius, height);
    icosphere -> (radius,); capsule -> (radius, cylinder_height).
    Subdivisions control tessellation density (icosphere splits, lateral
    segment counts for the others).
    """
    params = tuple(float(p) for p in params)
    if not (0 <= subdivisions <= 4):
        raise BadParamsError(f"subdivisions must be in [0, 4], got {subdivisions}")
    if any(p <= 0 for p in params):
        raise BadParamsError(f"dimensions must be positive, got {params}")
    if kind == "box":
        if len(params) != 3:
            raise BadParamsError("box expects (sx, sy, sz)")
        verts, faces = _box(params)
    elif kind == "icosphere":
        if len(params) != 1:
            raise BadParamsError("icosphere expects (radius,)")
        verts, faces = _icosphere(params[0], subdivisions)
    elif kind == "cylinder":
        if len(params) != 2:
            raise BadParamsError("cylinder expects (radius, height)")
        verts, faces = _cylinder(params[0], params[1], 8 << subdivisions)
    elif kind == "capsule":
        if len(params) != 2:
            raise BadParamsError("capsule expects (radius, cylinder_height)")
        verts, faces = _capsule(params[0], params[1], 4 << subdivisions, subdivisions + 2)
    else:
        raise BadParamsError(f"unknown primitive kind {kind!r}")
    return _finalize(verts, faces, normalize)


def save_obj(mesh: TriangleMesh, path: str | Path) -> None:
    """Write ASCII OBJ with v/f records only (1-based indices)."""
    lines = []
    for x, y, z in mesh.vertices:
        lines.append(f"v {x:.17g} {y:.17g} {z:.17g}")
    for i, j, k in mesh.faces + 1:
        lines.append(f"f {i} {j} {k}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path: str | Path) -> TriangleMesh:
    """Read an ASCII OBJ, honoring v/f records and ignoring comments."""
    verts, faces = [], []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "v":
            if len(parts) < 4:
                raise OSError(f"{path}: malformed vertex record {raw!r}")
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise OSError(f"{path}: only triangular faces supported: {raw!r}")
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
        # Any other record type (vn, vt, o, ...) is ignored.
    if not verts or not faces:
        raise OSError(f"{path}: no mesh data found")
    return TriangleMesh(vertices=np.array(verts), faces=np.array(faces))
