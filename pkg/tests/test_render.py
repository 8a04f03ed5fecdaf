"""Silhouette rasterizer: analytic projections, soft/hard agreement, IO."""

import math

import numpy as np
import pytest

from geoedit.camera import EulerCamera, look_at_extrinsics
from geoedit.errors import CameraInsideObjectError
from geoedit.mesh import TriangleMesh, make_primitive
from geoedit.render import (
    SilhouetteImage,
    load_silhouette,
    project_mesh_ndc,
    rasterize_faces,
    render_hard,
    render_soft,
    save_silhouette,
)


def centroid(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    return ys.mean(), xs.mean()


class TestHardRender:
    def test_sphere_projects_to_analytic_disk(self):
        # silhouette of a sphere of radius rho at distance d is a disk of
        # NDC radius rho / sqrt(d^2 - rho^2); NDC area 4 covers H*W pixels
        mesh = make_primitive("icosphere", (1.0,), subdivisions=3)
        cam = EulerCamera(yaw=0.0, pitch=0.0, d=4.0, rx=0.0, ry=0.0)
        sil = render_hard(mesh, cam, 128, 128)
        frac = sil.data.mean()
        expected = math.pi * (1.0 / (4.0**2 - 1.0)) / 4.0
        assert abs(frac - expected) / expected < 0.20
        cy, cx = centroid(sil.threshold())
        assert abs(cy - 63.5) < 2.0 and abs(cx - 63.5) < 2.0

    def test_ndc_shift_moves_centroid(self):
        mesh = make_primitive("icosphere", (1.0,), subdivisions=2)
        base = EulerCamera(yaw=0.0, pitch=0.0, d=4.0, rx=0.0, ry=0.0)
        shifted = EulerCamera(yaw=0.0, pitch=0.0, d=4.0, rx=0.5, ry=0.0)
        _, cx0 = centroid(render_hard(mesh, base, 128, 128).threshold())
        _, cx1 = centroid(render_hard(mesh, shifted, 128, 128).threshold())
        assert cx1 - cx0 == pytest.approx(128 / 4, abs=2.0)

    def test_vertical_shift_moves_rows(self):
        mesh = make_primitive("icosphere", (1.0,), subdivisions=2)
        base = EulerCamera(yaw=0.0, pitch=0.0, d=4.0, rx=0.0, ry=0.0)
        shifted = EulerCamera(yaw=0.0, pitch=0.0, d=4.0, rx=0.0, ry=-0.5)
        cy0, _ = centroid(render_hard(mesh, base, 128, 128).threshold())
        cy1, _ = centroid(render_hard(mesh, shifted, 128, 128).threshold())
        assert cy1 - cy0 == pytest.approx(-128 / 4, abs=2.0)

    def test_doubling_distance_halves_size(self):
        mesh = make_primitive("icosphere", (1.0,), subdivisions=3)
        near = render_hard(mesh, EulerCamera(0.0, 0.0, 4.0, 0.0, 0.0), 128, 128)
        far = render_hard(mesh, EulerCamera(0.0, 0.0, 8.0, 0.0, 0.0), 128, 128)
        ratio = math.sqrt(near.data.sum() / far.data.sum())
        assert ratio == pytest.approx(2.0, rel=0.10)

    def test_determinism(self):
        mesh = make_primitive("capsule", (0.45, 1.2), subdivisions=1)
        cam = EulerCamera(0.7, 0.2, 3.0, 0.1, -0.05)
        a = render_hard(mesh, cam, 96, 96)
        b = render_hard(mesh, cam, 96, 96)
        assert np.array_equal(a.data, b.data)

    def test_face_and_vertex_permutation_invariance(self):
        rng = np.random.default_rng(31)
        mesh = make_primitive("box", (0.6, 0.9, 1.3))
        cam = EulerCamera(0.5, 0.3, 3.0, 0.0, 0.0)
        ref = render_hard(mesh, cam, 64, 64).data

        perm_faces = mesh.faces[rng.permutation(mesh.n_faces)]
        out1 = render_hard(
            TriangleMesh(vertices=mesh.vertices, faces=perm_faces), cam, 64, 64
        ).data
        assert np.array_equal(out1, ref)

        vperm = rng.permutation(mesh.n_vertices)
        inv = np.empty_like(vperm)
        inv[vperm] = np.arange(mesh.n_vertices)
        remapped = TriangleMesh(vertices=mesh.vertices[vperm], faces=inv[mesh.faces])
        out2 = render_hard(remapped, cam, 64, 64).data
        assert np.array_equal(out2, ref)

    def test_cylinder_yaw_invariance(self):
        mesh = make_primitive("cylinder", (0.5, 1.6), subdivisions=3)
        cams = [EulerCamera(y, 0.2, 3.0, 0.0, 0.0) for y in (0.0, 0.7, 2.1)]
        masks = [render_hard(mesh, c, 128, 128).threshold() for c in cams]
        for m in masks[1:]:
            differing = int(np.sum(m != masks[0]))
            union = int(np.logical_or(m, masks[0]).sum())
            assert differing / union < 0.05

    def test_camera_inside_object_rejected(self):
        mesh = make_primitive("icosphere", (1.0,))
        with pytest.raises(CameraInsideObjectError):
            render_hard(mesh, EulerCamera(0.0, 0.0, 0.9, 0.0, 0.0), 64, 64)

    def test_nearest_face_is_camera_facing(self):
        mesh = make_primitive("box", (1.0, 1.0, 1.0), normalize=False)
        cam = EulerCamera(yaw=0.0, pitch=0.0, d=3.0, rx=0.0, ry=0.0)
        face_id = rasterize_faces(mesh, cam, 64, 64)
        fid = face_id[32, 32]
        assert fid >= 0
        cam_pos = -look_at_extrinsics(cam).R.T @ look_at_extrinsics(cam).t
        normal = mesh.face_normals()[fid]
        assert float(normal @ cam_pos) > 0


class TestSoftRender:
    def test_sharp_soft_matches_hard(self):
        mesh = make_primitive("box", (0.6, 0.9, 1.3))
        cam = EulerCamera(0.6, 0.25, 3.0, 0.0, 0.0)
        hard = render_hard(mesh, cam, 96, 96).data
        soft = render_soft(mesh, cam, 96, 96, sharpness=1e-4)
        agree = np.mean((soft.data > 0.5) == (hard > 0.5))
        assert agree >= 0.99

    def test_interior_saturates_high(self):
        # saturation needs sigma well below the projected triangle inradius:
        # the distance field is capped per triangle, not per silhouette
        mesh = make_primitive("icosphere", (1.0,), subdivisions=2)
        cam = EulerCamera(0.0, 0.0, 3.0, 0.0, 0.0)
        soft = render_soft(mesh, cam, 64, 64, sharpness=0.002)
        assert np.median(soft.data[30:35, 30:35]) > 0.99

    def test_exterior_saturates_low(self):
        mesh = make_primitive("icosphere", (1.0,), subdivisions=2)
        cam = EulerCamera(0.0, 0.0, 3.0, 0.0, 0.0)
        soft = render_soft(mesh, cam, 64, 64, sharpness=0.002)
        assert soft.data[0, 0] < 0.01
        assert soft.data[63, 63] < 0.01

    def test_band_width_tracks_sharpness(self):
        # the uncertain band (0.01 < p < 0.99) grows with sigma
        mesh = make_primitive("icosphere", (1.0,), subdivisions=2)
        cam = EulerCamera(0.0, 0.0, 3.0, 0.0, 0.0)
        band = []
        for sig in (0.01, 0.05):
            soft = render_soft(mesh, cam, 128, 128, sharpness=sig).data
            band.append(int(np.sum((soft > 0.01) & (soft < 0.99))))
        assert band[1] > band[0]

    def test_bad_sharpness(self):
        mesh = make_primitive("icosphere", (1.0,))
        with pytest.raises(ValueError):
            render_soft(mesh, EulerCamera(0, 0, 3.0, 0, 0), 32, 32, sharpness=0.0)


class TestProjection:
    def test_center_vertex_projects_to_image_center(self):
        mesh = make_primitive("box", (1.0, 1.0, 1.0))
        cam = EulerCamera(yaw=1.1, pitch=-0.2, d=5.0, rx=0.0, ry=0.0)
        ndc, z = project_mesh_ndc(mesh, cam)
        # centroid of a symmetric mesh lands on the optical axis
        assert np.allclose(ndc.mean(axis=0), 0.0, atol=1e-2)
        assert (z > 0).all()


class TestSilhouetteIO:
    def test_hard_round_trip_exact(self, tmp_path):
        mesh = make_primitive("box", (0.6, 0.9, 1.3))
        sil = render_hard(mesh, EulerCamera(0.4, 0.1, 3.0, 0.0, 0.0), 64, 64)
        save_silhouette(sil, tmp_path / "hard.pgm")
        back = load_silhouette(tmp_path / "hard.pgm")
        assert np.array_equal(back.data, sil.data)

    def test_soft_round_trip_quantized(self, tmp_path):
        mesh = make_primitive("icosphere", (1.0,), subdivisions=1)
        sil = render_soft(mesh, EulerCamera(0.0, 0.0, 3.0, 0.0, 0.0), 48, 48, 0.03)
        save_silhouette(sil, tmp_path / "soft.pgm")
        back = load_silhouette(tmp_path / "soft.pgm")
        assert np.abs(back.data - sil.data).max() <= 0.5 / 65535 + 1e-12

    def test_validation(self):
        with pytest.raises(ValueError):
            SilhouetteImage(data=np.full((4, 4), 1.5))
        with pytest.raises(ValueError):
            SilhouetteImage(data=np.zeros((4, 4, 2)))

    def test_threshold_and_empty(self):
        sil = SilhouetteImage(data=np.zeros((4, 4)))
        assert sil.is_empty()
        assert set(np.unique(sil.threshold())) == {0}
