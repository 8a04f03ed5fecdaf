"""Conditioning interface of the generator.

Three ingredients:

* pose tokens — each of the 8 descriptor components is Fourier-encoded and
  passed through a small shared MLP plus a learned per-component embedding,
  giving an 8 x D token matrix (with a separate learned null set used when
  the camera condition is dropped);
* a lossless space-to-depth latent encoder standing in for a trained image
  autoencoder, so latents stay exactly decodable;
* assembly of the five-slot conditioning tuple for the main manipulation
  task and the two auxiliary tasks (object removal, reference inpainting).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from .camera import RelPoseDescriptor, build_outofframe_descriptor
from .errors import MissingBackgroundError, ShapeMismatchError
from .masks import BinaryMaskVolume, MaskCode, estimate_target_mask, pixel_unshuffle
from .synth import SamplePair


class Task(enum.Enum):
    MAIN = "manipulate"
    AUX1_REMOVAL = "removal"
    AUX2_REF_INPAINT = "inpaint"


def fourier_encode(x: float, n_freqs: int) -> np.ndarray:
    """(x, sin 2^0 x, cos 2^0 x, ..., sin 2^{n-1} x, cos 2^{n-1} x)."""
    if n_freqs < 1:
        raise ValueError("n_freqs must be >= 1")
    out = np.empty(2 * n_freqs + 1)
    out[0] = x
    for k in range(n_freqs):
        out[1 + 2 * k] = np.sin((1 << k) * x)
        out[2 + 2 * k] = np.cos((1 << k) * x)
    return out


def _fourier_torch(x: torch.Tensor, n_freqs: int) -> torch.Tensor:
    """Batched counterpart of :func:`fourier_encode` along a new last axis."""
    parts = [x.unsqueeze(-1)]
    for k in range(n_freqs):
        parts.append(torch.sin((1 << k) * x).unsqueeze(-1))
        parts.append(torch.cos((1 << k) * x).unsqueeze(-1))
    return torch.cat(parts, dim=-1)


@dataclass(frozen=True)
class PoseTokens:
    tokens: np.ndarray  # (8, D)

    def __post_init__(self):
        t = np.asarray(self.tokens, dtype=np.float64)
        if t.ndim != 2 or t.shape[0] != 8:
            raise ShapeMismatchError(f"pose tokens must be 8 x D, got {t.shape}")
        if not np.isfinite(t).all():
            raise ValueError("pose tokens must be finite")
        object.__setattr__(self, "tokens", t)


class PoseTokenEncoder(nn.Module):
    """Shared 3-layer MLP over Fourier features + per-component embedding.

    Also owns the learned null-token set standing in for "no camera
    guidance", which must stay distinguishable from an all-zero relative
    pose (f = 0 is itself a meaningful condition).
    """

    def __init__(self, n_freqs: int = 6, dim: int = 64, hidden: int = 64,
                 seed: int | None = None):
        super().__init__()
        self.n_freqs = n_freqs
        self.dim = dim
        in_dim = 2 * n_freqs + 1
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.SiLU(),
            nn.Linear(hidden, hidden), nn.SiLU(),
            nn.Linear(hidden, dim),
        )
        self.component_embedding = nn.Parameter(torch.zeros(8, dim))
        self.null_tokens = nn.Parameter(torch.zeros(8, dim))
        if seed is not None:
            reinit_parameters(self, seed)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        """(..., 8) descriptor vectors -> (..., 8, dim) token matrices."""
        feats = _fourier_torch(f, self.n_freqs)
        return self.mlp(feats) + self.component_embedding

    def encode(self, f: RelPoseDescriptor) -> PoseTokens:
        with torch.no_grad():
            v = torch.as_tensor(f.as_vector(), dtype=next(self.parameters()).dtype)
            return PoseTokens(tokens=self(v).numpy())

    def null(self) -> PoseTokens:
        with torch.no_grad():
            return PoseTokens(tokens=self.null_tokens.numpy().copy())


def reinit_parameters(module: nn.Module, seed: int) -> None:
    """Deterministically reinitialize a module from a numpy stream.

    Weights draw from N(0, 1/sqrt(fan_in)); biases are zeroed; bare
    parameter matrices (embeddings, null tokens) draw from N(0, 0.5).
    Using numpy sidesteps any dependence on torch's global RNG state.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC0DE)))
    with torch.no_grad():
        seen = set()
        for m in module.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                fan_in = m.weight.shape[1] * (
                    m.weight.shape[2] * m.weight.shape[3]
                    if isinstance(m, nn.Conv2d) else 1
                )
                w = rng.standard_normal(tuple(m.weight.shape)) / np.sqrt(fan_in)
                m.weight.copy_(torch.as_tensor(w, dtype=m.weight.dtype))
                seen.add(id(m.weight))
                if m.bias is not None:
                    m.bias.zero_()
                    seen.add(id(m.bias))
        for p in module.parameters():
            if id(p) not in seen:
                v = rng.standard_normal(tuple(p.shape)) * 0.5
                p.copy_(torch.as_tensor(v, dtype=p.dtype))


def encode_descriptor(f: RelPoseDescriptor, encoder: PoseTokenEncoder) -> PoseTokens:
    return encoder.encode(f)


@dataclass(frozen=True)
class LatentGrid:
    data: np.ndarray  # (C, H', W')
    stride: int

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3:
            raise ShapeMismatchError(f"latent grid must be C x H' x W', got {d.shape}")
        if not np.isfinite(d).all():
            raise ValueError("latent grid must be finite")
        object.__setattr__(self, "data", d)

    @property
    def shape(self):
        return self.data.shape


class ToyLatentEncoder:
    """Lossless space-to-depth image latent: affine normalize then rearrange.

    Channel order is color-major: latent channel c*s^2 + dr*s + dc holds
    color c at in-block offset (dr, dc).  encode/decode are exact inverses.
    """

    def __init__(self, stride: int = 4):
        self.stride = stride

    @property
    def channels(self) -> int:
        return 3 * self.stride * self.stride

    def encode(self, img: np.ndarray) -> LatentGrid:
        img = np.asarray(img, dtype=np.float64)
        s = self.stride
        if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] % s or img.shape[1] % s:
            raise ShapeMismatchError(
                f"image shape {img.shape} not H x W x 3 with H, W divisible by {s}"
            )
        H, W, _ = img.shape
        x = (img - 0.5) / 0.5
        x = x.transpose(2, 0, 1).reshape(3, H // s, s, W // s, s)
        x = x.transpose(0, 2, 4, 1, 3).reshape(3 * s * s, H // s, W // s)
        return LatentGrid(data=x, stride=s)

    def decode(self, grid: LatentGrid) -> np.ndarray:
        s = grid.stride
        C, Hs, Ws = grid.shape
        if C != 3 * s * s:
            raise ShapeMismatchError(f"latent channels {C} != 3*{s}^2")
        x = grid.data.reshape(3, s, s, Hs, Ws)
        x = x.transpose(0, 3, 1, 4, 2).reshape(3, Hs * s, Ws * s)
        return x.transpose(1, 2, 0) * 0.5 + 0.5


@dataclass(frozen=True)
class ConditioningTuple:
    src_latent: LatentGrid
    ref_latent: LatentGrid
    src_mask_code: MaskCode
    tgt_mask_code: MaskCode
    pose_tokens: PoseTokens
    task: Task
    descriptor: np.ndarray  # raw 8-vector the tokens were computed from
    null_condition: bool = False


@dataclass(frozen=True)
class Encoders:
    latent: ToyLatentEncoder = field(default_factory=ToyLatentEncoder)
    pose: PoseTokenEncoder = field(default_factory=lambda: PoseTokenEncoder(seed=0))


def _zero_code(like: MaskCode) -> MaskCode:
    return MaskCode(
        data=np.zeros_like(like.data),
        spatial_stride=like.spatial_stride,
        temporal_stride=like.temporal_stride,
    )


def assemble_conditioning(
    pair: SamplePair, task: Task, encoders: Encoders
) -> ConditioningTuple:
    """Build the task's five-slot condition.

    The target-mask slot is always the *estimated* placement mask derived
    from the source mask and the descriptor, never the rendered target
    silhouette — at inference time no ground-truth target exists.
    """
    if task is not Task.MAIN and pair.x_bg is None:
        raise MissingBackgroundError(f"{task.value} conditioning needs x_bg")
    enc = encoders.latent
    s = enc.stride
    src_latent = enc.encode(pair.x_src)
    ref_latent = enc.encode(pair.i_ref)
    src_code = pixel_unshuffle(pair.m_src, s)
    m_hat = estimate_target_mask(pair.m_src, pair.f, pair.s_src.d, pair.s_tgt.d)
    tgt_code = pixel_unshuffle(m_hat, s)
    f = pair.f
    if task is Task.AUX1_REMOVAL:
        ref_latent = enc.encode(np.ones_like(pair.i_ref))
        tgt_code = _zero_code(tgt_code)
        f = build_outofframe_descriptor(pair.s_src)
    elif task is Task.AUX2_REF_INPAINT:
        src_latent = enc.encode(pair.x_bg)
        src_code = _zero_code(src_code)
    return ConditioningTuple(
        src_latent=src_latent,
        ref_latent=ref_latent,
        src_mask_code=src_code,
        tgt_mask_code=tgt_code,
        pose_tokens=encoders.pose.encode(f),
        task=task,
        descriptor=f.as_vector(),
    )


def training_target(pair: SamplePair, task: Task) -> np.ndarray:
    """Image the generator should produce under each task."""
    if task is Task.AUX1_REMOVAL:
        if pair.x_bg is None:
            raise MissingBackgroundError("removal target is the background plate")
        return pair.x_bg
    return pair.x_tgt


def null_variant(tup: ConditioningTuple, encoder: PoseTokenEncoder) -> ConditioningTuple:
    """The same condition with the camera guidance replaced by null tokens."""
    return replace(tup, pose_tokens=encoder.null(), null_condition=True)


def drop_camera_condition(
    tup: ConditioningTuple,
    rng: np.random.Generator,
    p: float,
    encoder: PoseTokenEncoder,
) -> ConditioningTuple:
    """With probability p, swap in the learned null-token set."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"drop probability {p} outside [0, 1]")
    if rng.uniform() < p:
        return null_variant(tup, encoder)
    return tup
