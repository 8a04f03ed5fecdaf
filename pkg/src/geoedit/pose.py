"""Camera recovery from an observed silhouette by IoU maximization.

Multi-start finite-difference descent on a soft-IoU loss: yaw starts are
stratified over the circle, the remaining parameters are seeded from blob
statistics of the target mask.  The soft sharpness anneals on a fixed
iteration schedule so early iterations see wide basins and late ones sharp
boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .camera import PITCH_EPS, EulerCamera, wrap_angle
from .errors import EmptyTargetError, ShapeMismatchError
from .masks import BinaryMaskVolume, mask_iou
from .mesh import TriangleMesh
from .render import SilhouetteImage, render_hard, render_soft


@dataclass(frozen=True)
class PoseEstimate:
    cam: EulerCamera
    iou: float
    iterations: int
    converged: bool

    def __post_init__(self):
        if not (0.0 <= self.iou <= 1.0):
            raise ValueError(f"iou out of range: {self.iou}")

    def to_dict(self) -> dict:
        return {
            "camera": self.cam.to_dict(),
            "iou": self.iou,
            "iterations": self.iterations,
            "converged": self.converged,
        }


@dataclass(frozen=True)
class EstimatorConfig:
    starts: int = 8
    max_iters: int = 200
    # Descent step scale per parameter (yaw, pitch, d, rx, ry); the line
    # search multiplies these by the finite-difference gradient.
    step_sizes: tuple = (0.3, 0.3, 1.0, 0.3, 0.3)
    # Central-difference epsilons; the d entry is relative to current d.
    fd_epsilons: tuple = (1e-3, 1e-3, 1e-3, 1e-3, 1e-3)
    accept_iou: float = 0.90
    sigma_start: float = 0.05
    sigma_min: float = 0.005
    sigma_halve_every: int = 50
    # Stop scanning further yaw starts once one descent already passes the
    # acceptance threshold (the result is then not necessarily the global
    # best over all starts; disable for exhaustive search).
    stop_on_accept: bool = True
    # Give up on a start whose loss is still above this after the first
    # anneal stage (wrong basin; sharpening will not rescue it).
    abandon_loss: float = 0.55
    # Pattern-search polish on hard IoU after promising descents.
    polish: bool = True
    # Keep scanning starts until this hard IoU is reached (a mediocre
    # accept may sit in the wrong basin of a near-symmetric object).
    strong_accept: float = 0.96
    # Final pattern search on the sharp soft loss to tighten angles beyond
    # hard-IoU pixel plateaus.
    fine_polish: bool = True
    fine_sigma: float = 0.004

    def __post_init__(self):
        if self.starts < 1:
            raise ValueError("starts must be >= 1")
        if not (0.0 < self.accept_iou <= 1.0):
            raise ValueError("accept_iou must lie in (0, 1]")


def soft_iou_loss(
    mesh: TriangleMesh,
    cam: EulerCamera,
    target: SilhouetteImage,
    sharpness: float = 0.05,
) -> float:
    """1 - soft IoU between render_soft(mesh, cam) and the target coverage."""
    q = target.data
    if q.ndim != 2:
        raise ShapeMismatchError(f"target must be H x W, got {q.shape}")
    H, W = q.shape
    p = render_soft(mesh, cam, H, W, sharpness).data
    denom = np.maximum(p, q).sum()
    if denom == 0.0:
        return 0.0
    return float(1.0 - np.minimum(p, q).sum() / denom)


def filter_by_iou(estimates, threshold: float):
    """Order-preserving subsequence with iou >= threshold."""
    return [e for e in estimates if e.iou >= threshold]


def _hard_iou(mesh, cam, target_bin: BinaryMaskVolume, H, W) -> float:
    rendered = render_hard(mesh, cam, H, W)
    return mask_iou(BinaryMaskVolume.from_frame(rendered.threshold()), target_bin)


def _clamp(vec: np.ndarray, min_d: float) -> np.ndarray:
    out = vec.copy()
    out[0] = wrap_angle(out[0])
    pitch_lim = math.pi / 2 - PITCH_EPS - 2e-3  # headroom for FD probes
    out[1] = np.clip(out[1], -pitch_lim, pitch_lim)
    out[2] = max(out[2], min_d)
    out[3] = np.clip(out[3], -0.999, 0.999)
    out[4] = np.clip(out[4], -0.999, 0.999)
    return out


def _sigma_at(cfg: EstimatorConfig, it: int) -> float:
    return max(cfg.sigma_start * 0.5 ** (it // cfg.sigma_halve_every), cfg.sigma_min)


def _descend(mesh, target, vec0, cfg, min_d):
    H, W = target.shape

    def loss(vec, sigma):
        return soft_iou_loss(mesh, EulerCamera.from_vector(vec), target, sigma)

    vec = _clamp(vec0, min_d)
    it = 0
    sigma = _sigma_at(cfg, 0)
    current = loss(vec, sigma)
    fails = 0
    while it < cfg.max_iters:
        new_sigma = _sigma_at(cfg, it)
        if new_sigma != sigma:
            if sigma == _sigma_at(cfg, 0) and current > cfg.abandon_loss:
                break  # wrong basin; let another start take over
            sigma = new_sigma
            current = loss(vec, sigma)
            fails = 0
        # Cheap forward differences while sigma is coarse, central when fine.
        central = sigma <= 2.1 * cfg.sigma_min
        grad = np.zeros(5)
        for k in range(5):
            eps = cfg.fd_epsilons[k] * (vec[2] if k == 2 else 1.0)
            hi = vec.copy()
            hi[k] += eps
            hi = _clamp(hi, min_d)
            if central:
                lo = vec.copy()
                lo[k] -= eps
                lo = _clamp(lo, min_d)
                span = 2 * eps if k == 0 else hi[k] - lo[k]
                grad[k] = (loss(hi, sigma) - loss(lo, sigma)) / span if span else 0.0
            else:
                span = eps if k == 0 else hi[k] - vec[k]
                grad[k] = (loss(hi, sigma) - current) / span if span else 0.0
        step = grad * np.asarray(cfg.step_sizes)
        step[2] *= vec[2]  # distance moves on a relative scale
        improved = False
        alpha = 1.0
        for _ in range(6):
            cand = _clamp(vec - alpha * step, min_d)
            cand_loss = loss(cand, sigma)
            if cand_loss < current - 1e-12:
                vec, current = cand, cand_loss
                improved = True
                break
            alpha *= 0.5
        it += 1
        if improved:
            fails = 0
            continue
        fails += 1
        if fails >= 3:
            # Stuck at this sharpness: jump to the next anneal stage, or
            # stop once the schedule has bottomed out.
            if sigma <= cfg.sigma_min:
                break
            it = ((it // cfg.sigma_halve_every) + 1) * cfg.sigma_halve_every
    return vec, it


_POLISH_DELTAS = np.array([0.08, 0.08, 0.04, 0.02, 0.02])  # d entry is relative
_FINE_DELTAS = np.array([0.02, 0.02, 0.01, 0.005, 0.005])


def _pattern_search(score, vec, deltas0, min_d, levels=5, sweeps=4):
    """Generic maximizing pattern search; deterministic probe order."""
    best = score(vec)
    deltas = deltas0.copy()
    for _ in range(levels):
        for _ in range(sweeps):
            moved = False
            for k in range(5):
                dk = deltas[k] * (vec[2] if k == 2 else 1.0)
                for sign in (1.0, -1.0):
                    cand = vec.copy()
                    cand[k] += sign * dk
                    cand = _clamp(cand, min_d)
                    s = score(cand)
                    if s > best:
                        best, vec = s, cand
                        moved = True
                        break
            if not moved:
                break
        deltas = deltas * 0.5
    return vec, best


def _polish(mesh, target_bin, vec, cfg, min_d, H, W):
    """Pattern search directly on hard IoU around a near-solution."""

    def score(v):
        return _hard_iou(mesh, EulerCamera.from_vector(v), target_bin, H, W)

    return _pattern_search(score, vec, _POLISH_DELTAS, min_d)


def _fine_polish(mesh, target, target_bin, vec, cfg, min_d):
    """Tighten the pose past the plateaus of either objective.

    The soft loss optimum can sit a few degrees off the true pose (blur
    trades boundary error for interior coverage), while hard IoU is exact
    at the truth but plateaued.  So: smooth pass to gather the parameters,
    a yaw ladder scored on hard IoU to hop compensated-yaw ridges, then a
    sharp soft pass for sub-plateau angles.
    """
    H, W = target.shape

    def soft_score_at(sigma):
        def score(v):
            return -soft_iou_loss(mesh, EulerCamera.from_vector(v), target, sigma)

        return score

    def hard_score(v):
        return _hard_iou(mesh, EulerCamera.from_vector(v), target_bin, H, W)

    vec, _ = _pattern_search(
        soft_score_at(0.02), vec, np.array([0.08, 0.08, 0.02, 0.01, 0.01]),
        min_d, levels=4, sweeps=3,
    )
    best_hard = hard_score(vec)
    for off in (-0.1745, -0.0873, 0.0873, 0.1745):
        cand = vec.copy()
        cand[0] += off
        cand, s = _pattern_search(
            hard_score, _clamp(cand, min_d),
            np.array([0.01, 0.04, 0.02, 0.01, 0.01]),
            min_d, levels=2, sweeps=2,
        )
        if s > best_hard + 1e-9:
            vec, best_hard = cand, s
    vec, _ = _pattern_search(
        soft_score_at(cfg.fine_sigma), vec, _FINE_DELTAS, min_d, levels=4, sweeps=2
    )
    return vec


def estimate_camera(
    mesh: TriangleMesh,
    target: SilhouetteImage,
    cfg: EstimatorConfig = EstimatorConfig(),
) -> PoseEstimate:
    """Best camera over cfg.starts stratified-yaw descents.

    Starts are screened by their initial loss and descended most-promising
    first (a pure reordering; determinism is unchanged, ties resolve to the
    lowest start index).  converged reports whether the returned pose
    clears cfg.accept_iou in hard IoU.
    """
    tb = target.threshold()
    if not tb.any():
        raise EmptyTargetError("target silhouette has no foreground")
    target_bin = BinaryMaskVolume.from_frame(tb)
    H, W = target.shape
    rho = mesh.bounding_radius
    # Distance floor: excludes frame-filling close-ups (a sphere at
    # d < ~1.4 rho covers > 90% of the frame, so an all-ones target would
    # otherwise "converge").  All supported scenes keep d >= 1.5 rho.
    min_d = 1.4 * rho

    area_frac = tb.mean()
    d0 = max(min_d * 1.1, rho * math.sqrt(math.pi / 4.0) / math.sqrt(area_frac))
    rows, cols = np.nonzero(tb)
    cx = float((cols.mean() + 0.5) * 2.0 / W - 1.0)
    cy = float((rows.mean() + 0.5) * 2.0 / H - 1.0)

    start_vecs = []
    for k in range(cfg.starts):
        yaw0 = -math.pi + (k + 0.5) * 2.0 * math.pi / cfg.starts
        start_vecs.append(_clamp(np.array([yaw0, 0.0, d0, cx, cy]), min_d))
    screen = [
        soft_iou_loss(mesh, EulerCamera.from_vector(v), target, cfg.sigma_start)
        for v in start_vecs
    ]
    order = sorted(range(cfg.starts), key=lambda k: (screen[k], k))

    best_vec = None
    best_iou = -1.0
    total_iters = 0
    stop_at = max(cfg.accept_iou, cfg.strong_accept)
    for k in order:
        vec, iters = _descend(mesh, target, start_vecs[k], cfg, min_d)
        total_iters += iters
        iou = _hard_iou(mesh, EulerCamera.from_vector(vec), target_bin, H, W)
        if cfg.polish and iou >= cfg.accept_iou - 0.07:
            vec, iou = _polish(mesh, target_bin, vec, cfg, min_d, H, W)
        if iou > best_iou:
            best_iou, best_vec = iou, vec
        if cfg.stop_on_accept and best_iou >= stop_at:
            break
    if best_iou < cfg.accept_iou - 0.05:
        # Every start fizzled (blob statistics can mislead the seeds when
        # the object is partially clipped): give the most promising start a
        # full-length descent with the abandon rule off.
        rescue_cfg = replace(cfg, abandon_loss=1.0)
        vec, iters = _descend(mesh, target, start_vecs[order[0]], rescue_cfg, min_d)
        total_iters += iters
        iou = _hard_iou(mesh, EulerCamera.from_vector(vec), target_bin, H, W)
        if iou > best_iou:
            best_iou, best_vec = iou, vec
    if cfg.polish and best_iou < cfg.accept_iou:
        best_vec, best_iou = _polish(mesh, target_bin, best_vec, cfg, min_d, H, W)
    if cfg.fine_polish and best_iou >= cfg.accept_iou - 0.10:
        cand = _fine_polish(mesh, target, target_bin, best_vec, cfg, min_d)
        cand_iou = _hard_iou(mesh, EulerCamera.from_vector(cand), target_bin, H, W)
        if cand_iou >= best_iou - 0.002:
            best_vec, best_iou = cand, cand_iou
    cam = EulerCamera.from_vector(best_vec)
    return PoseEstimate(
        cam=cam,
        iou=best_iou,
        iterations=total_iters,
        converged=best_iou >= cfg.accept_iou,
    )
