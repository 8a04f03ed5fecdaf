"""Flow-matching objective, toy conditional velocity network, and sampler.

Training regresses the constant velocity of the linear path
zt = (1-t)*z0 + t*eps, i.e. v* = eps - z0.  The network is a small
residual conv stack over the latent grid plus a t-modulated linear skip
from the noised input straight to the output: v* equals (zt - z0)/t, so
the input-proportional part must bypass the narrow trunk or the loss
floor hides the conditioning signal.  Conditioning enters through a
control branch whose injection layers start at exactly zero, so a fresh
network ignores its condition entirely.  Pose tokens are flattened and
projected (concatenation-projection) rather than mean-pooled: the token
rows are value + per-component offset, so a pool over rows is invariant
to permuting values across components and the net could not tell a yaw
change from a screen-space shift.  Stage II freezes the backbone
and trains only the control branch.  Sampling integrates the learned
field with explicit Euler steps from t=1 down to t=0, optionally with
classifier-free guidance against the learned null condition.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .conditioning import (
    ConditioningTuple,
    Encoders,
    LatentGrid,
    PoseTokenEncoder,
    Task,
    ToyLatentEncoder,
    _fourier_torch,
    assemble_conditioning,
    drop_camera_condition,
    null_variant,
    reinit_parameters,
    training_target,
)
from .errors import NonFiniteError, ShapeMismatchError
from .synth import load_pair, read_manifest


@dataclass(frozen=True)
class FlowSample:
    z0: LatentGrid
    eps: np.ndarray
    t: float
    zt: np.ndarray
    v_star: np.ndarray


def make_flow_sample(z0: LatentGrid, rng: np.random.Generator, t: float) -> FlowSample:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    eps = rng.standard_normal(z0.shape)
    return FlowSample(
        z0=z0,
        eps=eps,
        t=float(t),
        zt=(1.0 - t) * z0.data + t * eps,
        v_star=eps - z0.data,
    )


def fm_loss(pred_v: np.ndarray, sample: FlowSample) -> float:
    pred = pred_v.data if isinstance(pred_v, LatentGrid) else np.asarray(pred_v)
    if pred.shape != sample.v_star.shape:
        raise ShapeMismatchError(
            f"velocity shape {pred.shape} != target {sample.v_star.shape}"
        )
    return float(np.mean((pred - sample.v_star) ** 2))


_TASKS = (Task.MAIN, Task.AUX1_REMOVAL, Task.AUX2_REF_INPAINT)


def sample_task(rng: np.random.Generator, weights: Sequence[float]) -> Task:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (3,) or (w < 0).any() or w.sum() <= 0:
        raise ValueError(f"need 3 nonnegative weights with positive sum, got {weights}")
    return _TASKS[int(rng.choice(3, p=w / w.sum()))]


@dataclass(frozen=True)
class NetConfig:
    latent_channels: int = 48
    width: int = 32
    blocks: int = 4
    code_channels: int = 16
    token_dim: int = 64
    pose_hidden: int = 64
    pose_n_freqs: int = 6
    t_n_freqs: int = 6
    t_hidden: int = 64
    ref_upsample: int = 2
    seed: int = 0

    @property
    def latent_stride(self) -> int:
        s = int(round((self.latent_channels / 3) ** 0.5))
        if 3 * s * s != self.latent_channels:
            raise ValueError(f"latent_channels {self.latent_channels} != 3*s^2")
        return s

    @property
    def control_channels(self) -> int:
        return 2 * self.latent_channels + 2 * self.code_channels

    def to_dict(self) -> dict:
        return {
            k: getattr(self, k)
            for k in (
                "latent_channels", "width", "blocks", "code_channels",
                "token_dim", "pose_hidden", "pose_n_freqs", "t_n_freqs",
                "t_hidden", "ref_upsample", "seed",
            )
        }


class _ResBlock(nn.Module):
    def __init__(self, width: int, t_hidden: int):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.film = nn.Linear(t_hidden, 2 * width)

    def forward(self, h: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        scale, shift = self.film(temb).chunk(2, dim=-1)
        x = self.conv1(F.silu(h))
        x = x * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        return h + self.conv2(F.silu(x))


class _Backbone(nn.Module):
    """Consumes (zt, t) only; conditioning never touches these weights."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.conv_in = nn.Conv2d(cfg.latent_channels, cfg.width, 3, padding=1)
        self.t_mlp = nn.Sequential(
            nn.Linear(2 * cfg.t_n_freqs + 1, cfg.t_hidden),
            nn.SiLU(),
            nn.Linear(cfg.t_hidden, cfg.t_hidden),
        )
        self.blocks = nn.ModuleList(
            _ResBlock(cfg.width, cfg.t_hidden) for _ in range(cfg.blocks)
        )
        self.conv_out = nn.Conv2d(cfg.width, cfg.latent_channels, 3, padding=1)
        self.skip = nn.Conv2d(cfg.latent_channels, cfg.latent_channels, 1)
        self.skip_film = nn.Linear(cfg.t_hidden, 2 * cfg.latent_channels)


class _Control(nn.Module):
    """Projects the stacked condition grids and injects them per block.

    inject/token_bias layers are zero-initialized, so the branch is silent
    until training moves them.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.pose_encoder = PoseTokenEncoder(
            n_freqs=cfg.pose_n_freqs, dim=cfg.token_dim, hidden=cfg.pose_hidden
        )
        self.proj = nn.Conv2d(cfg.control_channels, cfg.width, 1)
        self.token_proj = nn.Linear(8 * cfg.token_dim, cfg.t_hidden)
        self.inject = nn.ModuleList(
            nn.Conv2d(cfg.width, cfg.width, 1) for _ in range(cfg.blocks)
        )
        self.token_bias = nn.ModuleList(
            nn.Linear(cfg.t_hidden, cfg.width) for _ in range(cfg.blocks)
        )


@dataclass
class _BatchedCond:
    grid: torch.Tensor  # (B, control_channels, h, w)
    descriptors: torch.Tensor  # (B, 8)
    null_mask: torch.Tensor  # (B,) bool


class VelocityNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = _Backbone(cfg)
        self.control = _Control(cfg)
        reinit_parameters(self, cfg.seed)
        with torch.no_grad():
            for m in list(self.control.inject) + list(self.control.token_bias):
                m.weight.zero_()
                m.bias.zero_()

    @property
    def dtype(self) -> torch.dtype:
        return self.backbone.conv_in.weight.dtype

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def prepare(self, conds: Sequence[ConditioningTuple]) -> _BatchedCond:
        """Stack conditioning tuples into the tensors the forward pass eats."""
        grids, descs, nulls = [], [], []
        for tup in conds:
            src = tup.src_latent.data
            ref = tup.ref_latent.data
            if ref.shape[1] * self.cfg.ref_upsample != src.shape[1]:
                raise ShapeMismatchError(
                    f"reference latent {ref.shape} does not upsample x"
                    f"{self.cfg.ref_upsample} onto {src.shape}"
                )
            ref_t = torch.as_tensor(ref, dtype=self.dtype)[None]
            ref_up = F.interpolate(
                ref_t, scale_factor=self.cfg.ref_upsample, mode="nearest"
            )[0]
            grid = torch.cat(
                [
                    torch.as_tensor(src, dtype=self.dtype),
                    ref_up,
                    torch.as_tensor(
                        tup.src_mask_code.data[0], dtype=self.dtype
                    ),
                    torch.as_tensor(
                        tup.tgt_mask_code.data[0], dtype=self.dtype
                    ),
                ]
            )
            if grid.shape[0] != self.cfg.control_channels:
                raise ShapeMismatchError(
                    f"control grid has {grid.shape[0]} channels, "
                    f"expected {self.cfg.control_channels}"
                )
            grids.append(grid)
            descs.append(torch.as_tensor(tup.descriptor, dtype=self.dtype))
            nulls.append(tup.null_condition)
        return _BatchedCond(
            grid=torch.stack(grids),
            descriptors=torch.stack(descs),
            null_mask=torch.tensor(nulls, dtype=torch.bool),
        )

    def forward(
        self, zt: torch.Tensor, t: torch.Tensor, cond: _BatchedCond | None
    ) -> torch.Tensor:
        temb = self.backbone.t_mlp(_fourier_torch(t, self.cfg.t_n_freqs))
        h = self.backbone.conv_in(zt)
        ctrl = tok = None
        if cond is not None:
            ctrl = F.silu(self.control.proj(cond.grid))
            tokens = self.control.pose_encoder(cond.descriptors)
            if bool(cond.null_mask.any()):
                null = self.control.pose_encoder.null_tokens.unsqueeze(0)
                tokens = torch.where(cond.null_mask[:, None, None], null, tokens)
            tok = self.control.token_proj(tokens.flatten(1))
        for i, blk in enumerate(self.backbone.blocks):
            if cond is not None:
                h = (
                    h
                    + self.control.inject[i](ctrl)
                    + self.control.token_bias[i](tok)[:, :, None, None]
                )
            h = blk(h, temb)
        scale, shift = self.backbone.skip_film(temb).chunk(2, dim=-1)
        skip = self.backbone.skip(zt) * (1.0 + scale[:, :, None, None])
        return self.backbone.conv_out(h) + skip + shift[:, :, None, None]


def velocity_forward(net: VelocityNet, zt, t: float, cond: ConditioningTuple) -> np.ndarray:
    """Single-sample numpy-in/numpy-out wrapper around the torch forward."""
    z = zt.data if isinstance(zt, LatentGrid) else np.asarray(zt)
    with torch.no_grad():
        out = net(
            torch.as_tensor(z, dtype=net.dtype)[None],
            torch.as_tensor([t], dtype=net.dtype),
            net.prepare([cond]),
        )
    return out[0].numpy().astype(np.float64)


def _batch_loss(net: VelocityNet, batch: Sequence[tuple]) -> tuple:
    """Mean flow-matching loss of (FlowSample, ConditioningTuple) pairs."""
    zt = torch.as_tensor(
        np.stack([fs.zt for fs, _ in batch]), dtype=net.dtype
    )
    ts = torch.as_tensor([fs.t for fs, _ in batch], dtype=net.dtype)
    v_star = torch.as_tensor(
        np.stack([fs.v_star for fs, _ in batch]), dtype=net.dtype
    )
    cond = net.prepare([tup for _, tup in batch])
    pred = net(zt, ts, cond)
    per_example = ((pred - v_star) ** 2).mean(dim=(1, 2, 3))
    return per_example.mean(), per_example


def backward_and_check(net: VelocityNet, batch: Sequence[tuple]) -> tuple:
    """Gradients of the mean batch loss for every trainable parameter.

    Returns (loss value, {name: gradient array}); frozen parameters are
    absent from the dict.  Raises NonFiniteError if anything blew up.
    """
    net.zero_grad(set_to_none=True)
    loss, _ = _batch_loss(net, batch)
    if not torch.isfinite(loss):
        raise NonFiniteError("flow-matching loss is not finite")
    loss.backward()
    grads = {}
    for name, p in net.named_parameters():
        if not p.requires_grad:
            continue
        g = torch.zeros_like(p) if p.grad is None else p.grad
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient in {name}")
        grads[name] = g.detach().numpy().astype(np.float64).copy()
    return float(loss.detach()), grads


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 0.0
    task_weights: tuple = (8.0, 1.0, 1.0)
    dropout_p: float = 0.1
    stage: str = "I"
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        w = np.asarray(self.task_weights, dtype=np.float64)
        if w.shape != (3,) or (w < 0).any() or w.sum() <= 0:
            raise ValueError(f"bad task weights {self.task_weights}")
        if self.stage not in ("I", "II"):
            raise ValueError(f"stage must be 'I' or 'II', got {self.stage!r}")
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ValueError(f"dropout_p {self.dropout_p} outside [0, 1]")

    def to_dict(self) -> dict:
        d = {
            k: getattr(self, k)
            for k in (
                "steps", "batch_size", "lr", "weight_decay",
                "dropout_p", "stage", "seed",
            )
        }
        d["task_weights"] = list(self.task_weights)
        return d


def train(net: VelocityNet, manifest: str | Path, cfg: TrainConfig):
    """Seeded multi-task training loop; returns (net, loss trace).

    The trace has one (step, task, loss) row per example so per-task
    curves can be separated afterwards.  All randomness (pair choice,
    task mix, condition dropout, t, noise) flows from cfg.seed through
    one numpy stream in a fixed draw order, which makes reruns of the
    same config reproduce the trace exactly.
    """
    records = read_manifest(manifest)
    if not records:
        raise ValueError(f"empty dataset manifest {manifest}")
    root = Path(manifest).parent
    pairs = [load_pair(rec, root) for rec in records]
    stride = net.cfg.latent_stride
    encoders = Encoders(
        latent=ToyLatentEncoder(stride=stride), pose=net.control.pose_encoder
    )

    net.backbone.requires_grad_(cfg.stage == "I")
    trainable = [p for p in net.parameters() if p.requires_grad]
    trace: list[tuple] = []
    if cfg.steps == 0:
        return net, trace
    opt = torch.optim.AdamW(trainable, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.OneCycleLR(
        opt, max_lr=cfg.lr, total_steps=cfg.steps
    )
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x71A1)))

    for step in range(cfg.steps):
        batch = []
        for i in rng.integers(len(pairs), size=cfg.batch_size):
            pair = pairs[int(i)]
            task = sample_task(rng, cfg.task_weights)
            tup = assemble_conditioning(pair, task, encoders)
            tup = drop_camera_condition(
                tup, rng, cfg.dropout_p, net.control.pose_encoder
            )
            z0 = encoders.latent.encode(training_target(pair, task))
            batch.append((make_flow_sample(z0, rng, rng.uniform()), tup))
        loss, per_example = _batch_loss(net, batch)
        if not torch.isfinite(loss):
            raise NonFiniteError(f"training loss diverged at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        for (fs, tup), ex_loss in zip(batch, per_example.detach().numpy()):
            trace.append((step, tup.task.value, float(ex_loss)))
    return net, trace


def euler_sample(
    net,
    cond: ConditioningTuple,
    steps: int,
    rng: np.random.Generator,
    guidance: float = 1.0,
    shape: tuple | None = None,
) -> LatentGrid:
    """Integrate the velocity field from noise at t=1 down to t=0.

    `net` is either a VelocityNet or any callable (zt, t, cond) -> array
    (handy for closed-form oracles).  guidance g != 1 applies
    classifier-free mixing v = v_null + g*(v_cond - v_null) against the
    learned null condition.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if shape is None:
        shape = cond.src_latent.shape
    stride = cond.src_latent.stride if cond is not None else 1

    if isinstance(net, VelocityNet):
        null_cond = (
            null_variant(cond, net.control.pose_encoder)
            if guidance != 1.0
            else None
        )

        def v_fn(z, t):
            v = velocity_forward(net, z, t, cond)
            if null_cond is not None:
                v_null = velocity_forward(net, z, t, null_cond)
                v = v_null + guidance * (v - v_null)
            return v

    else:

        def v_fn(z, t):
            return np.asarray(net(z, t, cond))

    z = rng.standard_normal(shape)
    dt = 1.0 / steps
    for k in range(steps):
        t = 1.0 - k * dt
        z = z - dt * v_fn(z, t)
        if not np.isfinite(z).all():
            raise NonFiniteError(f"sampler state non-finite at t={t - dt:.4f}")
    return LatentGrid(data=z, stride=stride)
