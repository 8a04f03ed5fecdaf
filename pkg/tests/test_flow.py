"""Tests for flow-matching training, the velocity net, and Euler sampling.

The gradient test checks autograd against central finite differences on a
small float64 probe configuration; the sampler test uses a closed-form
constant-velocity oracle whose integral is known exactly.
"""

import math
from pathlib import Path

import numpy as np
import pytest
import torch

from geoedit.conditioning import (
    Encoders,
    Task,
    ToyLatentEncoder,
    assemble_conditioning,
    null_variant,
)
from geoedit.errors import NonFiniteError, ShapeMismatchError
from geoedit.flow import (
    FlowSample,
    NetConfig,
    TrainConfig,
    VelocityNet,
    _batch_loss,
    backward_and_check,
    euler_sample,
    fm_loss,
    make_flow_sample,
    sample_task,
    train,
    velocity_forward,
)
from geoedit.synth import GenConfig, build_dataset, generate_pair

torch.set_num_threads(1)

# 16x16 scenes with stride-2 latents keep the probe net under 2k parameters
PROBE_CFG = NetConfig(
    latent_channels=12,
    width=3,
    blocks=2,
    code_channels=4,
    token_dim=4,
    pose_hidden=4,
    pose_n_freqs=1,
    t_n_freqs=1,
    t_hidden=4,
    ref_upsample=2,
    seed=2,
)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("flowdata")
    cfg = GenConfig(n_pairs=4, kinds=("box",))
    return build_dataset(cfg, root, seed=41)


@pytest.fixture(scope="module")
def main_cond():
    pair, _ = generate_pair(GenConfig(n_pairs=1, kinds=("box",)), 43, 0)
    net = VelocityNet(NetConfig(seed=0))
    enc = Encoders(latent=ToyLatentEncoder(4), pose=net.control.pose_encoder)
    return pair, net, assemble_conditioning(pair, Task.MAIN, enc), enc


def _probe_batch(net):
    pair, _ = generate_pair(
        GenConfig(n_pairs=1, kinds=("box",), H=16, W=16, ref_size=8), 47, 0
    )
    enc = Encoders(latent=ToyLatentEncoder(2), pose=net.control.pose_encoder)
    tup = assemble_conditioning(pair, Task.MAIN, enc)
    z0 = enc.latent.encode(pair.x_tgt)
    rng = np.random.default_rng(3)
    return [(make_flow_sample(z0, rng, 0.4), tup)]


# ----------------------------------------------------------- flow samples


def test_flow_sample_algebra():
    rng = np.random.default_rng(0)
    enc = ToyLatentEncoder(2)
    z0 = enc.encode(rng.uniform(0, 1, size=(8, 8, 3)))
    for t in (0.0, 0.25, 0.5, 0.9, 1.0):
        fs = make_flow_sample(z0, np.random.default_rng(1), t)
        assert np.array_equal(fs.zt, (1 - t) * z0.data + t * fs.eps)
        assert np.array_equal(fs.v_star, fs.eps - z0.data)
    fs = make_flow_sample(z0, np.random.default_rng(2), 0.0)
    assert np.array_equal(fs.zt, z0.data)
    fs = make_flow_sample(z0, np.random.default_rng(2), 1.0)
    assert np.array_equal(fs.zt, fs.eps)


def test_zero_latent_velocity_is_noise():
    from geoedit.conditioning import LatentGrid

    z0 = LatentGrid(data=np.zeros((3, 4, 4)), stride=1)
    fs = make_flow_sample(z0, np.random.default_rng(5), 0.7)
    assert np.array_equal(fs.v_star, fs.eps)


def test_flow_sample_rejects_bad_t():
    enc = ToyLatentEncoder(2)
    z0 = enc.encode(np.zeros((4, 4, 3)))
    for t in (-0.1, 1.1):
        with pytest.raises(ValueError):
            make_flow_sample(z0, np.random.default_rng(0), t)


def test_fm_loss_values_and_oracle():
    rng = np.random.default_rng(1)
    enc = ToyLatentEncoder(2)
    z0 = enc.encode(rng.uniform(0, 1, size=(8, 8, 3)))
    fs = make_flow_sample(z0, rng, 0.3)
    assert fm_loss(fs.v_star, fs) == 0.0
    assert fm_loss(fs.v_star + 1.0, fs) == pytest.approx(1.0, abs=1e-12)
    pred = rng.standard_normal(fs.v_star.shape)
    total, count = 0.0, 0
    for c in range(pred.shape[0]):
        for r in range(pred.shape[1]):
            for cc in range(pred.shape[2]):
                total += (pred[c, r, cc] - fs.v_star[c, r, cc]) ** 2
                count += 1
    assert fm_loss(pred, fs) == pytest.approx(total / count, rel=1e-12)
    with pytest.raises(ShapeMismatchError):
        fm_loss(np.zeros((3, 2, 2)), fs)


# ------------------------------------------------------------ task mixing


def test_task_sampling_degenerate_and_mixed():
    rng = np.random.default_rng(2)
    assert all(
        sample_task(rng, (1.0, 0.0, 0.0)) is Task.MAIN for _ in range(50)
    )
    counts = {t: 0 for t in Task}
    for _ in range(10_000):
        counts[sample_task(rng, (8.0, 1.0, 1.0))] += 1
    for task, p in ((Task.MAIN, 0.8), (Task.AUX1_REMOVAL, 0.1), (Task.AUX2_REF_INPAINT, 0.1)):
        sigma = math.sqrt(p * (1 - p) / 10_000)
        assert abs(counts[task] / 10_000 - p) < 3 * sigma, task
    counts = {t: 0 for t in Task}
    for _ in range(10_000):
        counts[sample_task(rng, (1.0, 1.0, 1.0))] += 1
    for task in Task:
        assert abs(counts[task] / 10_000 - 1 / 3) < 3 * math.sqrt(2 / 9 / 10_000)
    with pytest.raises(ValueError):
        sample_task(rng, (1.0, -0.5, 0.0))
    with pytest.raises(ValueError):
        sample_task(rng, (0.0, 0.0, 0.0))


# -------------------------------------------------------------- net basics


def test_net_config_properties():
    cfg = NetConfig()
    assert cfg.latent_stride == 4
    assert cfg.control_channels == 2 * 48 + 2 * 16
    with pytest.raises(ValueError):
        NetConfig(latent_channels=47).latent_stride
    assert PROBE_CFG.latent_stride == 2


def test_parameter_counts():
    assert VelocityNet(NetConfig()).parameter_count() == 191_744
    assert VelocityNet(PROBE_CFG).parameter_count() <= 2000


def test_fresh_net_ignores_condition(main_cond):
    pair, net, cond_a, enc = main_cond
    other, _ = generate_pair(GenConfig(n_pairs=1, kinds=("cylinder",)), 53, 1)
    cond_b = assemble_conditioning(other, Task.MAIN, enc)
    zt = np.random.default_rng(4).standard_normal((48, 16, 16))
    va = velocity_forward(net, zt, 0.5, cond_a)
    vb = velocity_forward(net, zt, 0.5, cond_b)
    assert np.array_equal(va, vb)
    assert va.shape == zt.shape


def test_perturbed_control_weight_changes_output(main_cond):
    pair, _, cond, enc = main_cond
    zt = np.random.default_rng(6).standard_normal((48, 16, 16))
    for name in ("inject", "token_bias"):
        net = VelocityNet(NetConfig(seed=0))
        base = velocity_forward(net, zt, 0.5, cond)
        with torch.no_grad():
            getattr(net.control, name)[0].weight[0, 0] += 0.5
        assert not np.array_equal(velocity_forward(net, zt, 0.5, cond), base)


def test_determinism_of_forward(main_cond):
    _, net, cond, _ = main_cond
    zt = np.random.default_rng(7).standard_normal((48, 16, 16))
    assert np.array_equal(
        velocity_forward(net, zt, 0.3, cond), velocity_forward(net, zt, 0.3, cond)
    )


# ---------------------------------------------------------------- gradients


def test_rigged_zero_loss_has_zero_gradients():
    net = VelocityNet(PROBE_CFG)
    [(fs, tup)] = _probe_batch(net)
    with torch.no_grad():
        pred = net(
            torch.as_tensor(fs.zt, dtype=net.dtype)[None],
            torch.as_tensor([fs.t], dtype=net.dtype),
            net.prepare([tup]),
        )[0].numpy()
    rigged = FlowSample(z0=fs.z0, eps=fs.eps, t=fs.t, zt=fs.zt, v_star=pred)
    loss, grads = backward_and_check(net, [(rigged, tup)])
    assert loss == pytest.approx(0.0, abs=1e-10)
    for name, g in grads.items():
        assert np.abs(g).max() < 1e-6, name


def test_gradients_match_finite_differences():
    net = VelocityNet(PROBE_CFG).double()
    batch = _probe_batch(net)
    _, grads = backward_and_check(net, batch)
    names = list(grads)
    rng = np.random.default_rng(8)
    checked = 0
    h = 1e-5
    params = dict(net.named_parameters())
    while checked < 100:
        name = names[int(rng.integers(len(names)))]
        p = params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        with torch.no_grad():
            orig = float(p[idx])
            p[idx] = orig + h
            up, _ = _batch_loss(net, batch)
            p[idx] = orig - h
            dn, _ = _batch_loss(net, batch)
            p[idx] = orig
        fd = (float(up) - float(dn)) / (2 * h)
        g = grads[name][idx]
        if abs(fd) < 1e-9 and abs(g) < 1e-9:
            continue
        assert abs(fd - g) / max(abs(fd), abs(g)) < 1e-4, (name, idx, fd, g)
        checked += 1


def test_nonfinite_gradient_detected():
    net = VelocityNet(PROBE_CFG)
    [(fs, tup)] = _probe_batch(net)
    bad = FlowSample(
        z0=fs.z0, eps=fs.eps, t=fs.t, zt=fs.zt, v_star=np.full_like(fs.v_star, np.inf)
    )
    with pytest.raises(NonFiniteError):
        backward_and_check(net, [(bad, tup)])


def test_stage_two_reports_only_control_gradients():
    net = VelocityNet(PROBE_CFG)
    net.backbone.requires_grad_(False)
    _, grads = backward_and_check(net, _probe_batch(net))
    assert grads
    assert all(name.startswith("control.") for name in grads)


# ----------------------------------------------------------------- training


def test_zero_steps_is_identity(dataset):
    net = VelocityNet(NetConfig(seed=1))
    before = {k: v.clone() for k, v in net.state_dict().items()}
    net, trace = train(net, dataset, TrainConfig(steps=0))
    assert trace == []
    for k, v in net.state_dict().items():
        assert torch.equal(v, before[k])


def test_empty_manifest_rejected(tmp_path):
    manifest = tmp_path / "manifest.jsonl"
    manifest.write_text("")
    with pytest.raises(ValueError):
        train(VelocityNet(NetConfig(seed=1)), manifest, TrainConfig(steps=1))


def test_training_is_deterministic(dataset):
    tc = TrainConfig(steps=12, batch_size=2, seed=5)
    net1, trace1 = train(VelocityNet(NetConfig(seed=1)), dataset, tc)
    net2, trace2 = train(VelocityNet(NetConfig(seed=1)), dataset, tc)
    assert trace1 == trace2
    for k, v in net1.state_dict().items():
        assert torch.equal(v, net2.state_dict()[k]), k
    assert len(trace1) == 12 * 2
    for step, task, loss in trace1:
        assert 0 <= step < 12
        assert task in ("manipulate", "removal", "inpaint")
        assert math.isfinite(loss) and loss >= 0


def test_stage_two_freezes_backbone(dataset):
    net, _ = train(
        VelocityNet(NetConfig(seed=2)), dataset, TrainConfig(steps=4, seed=1)
    )
    backbone_before = {
        k: v.clone() for k, v in net.state_dict().items() if k.startswith("backbone.")
    }
    control_before = {
        k: v.clone() for k, v in net.state_dict().items() if k.startswith("control.")
    }
    net, _ = train(net, dataset, TrainConfig(steps=6, stage="II", seed=2))
    after = net.state_dict()
    for k, v in backbone_before.items():
        assert torch.equal(after[k], v), k
    assert any(not torch.equal(after[k], v) for k, v in control_before.items())


def test_diverging_training_raises(dataset):
    with pytest.raises(NonFiniteError):
        train(
            VelocityNet(NetConfig(seed=3)),
            dataset,
            TrainConfig(steps=200, lr=1e12, seed=0),
        )


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=-1)
    with pytest.raises(ValueError):
        TrainConfig(task_weights=(1.0, 1.0))
    with pytest.raises(ValueError):
        TrainConfig(stage="III")
    with pytest.raises(ValueError):
        TrainConfig(dropout_p=1.5)


# ----------------------------------------------------------------- sampling


def test_euler_recovers_endpoint_of_constant_field():
    shape = (3, 4, 4)
    rng = np.random.default_rng(9)
    z0_fixed = rng.standard_normal(shape)
    eps_fixed = np.random.default_rng(10).standard_normal(shape)

    def oracle(z, t, cond):
        return eps_fixed - z0_fixed

    one = euler_sample(oracle, None, 1, np.random.default_rng(10), shape=shape)
    many = euler_sample(oracle, None, 64, np.random.default_rng(10), shape=shape)
    assert np.abs(one.data - z0_fixed).max() < 1e-12
    assert np.abs(many.data - one.data).max() < 1e-12


def test_euler_rejects_bad_steps(main_cond):
    _, net, cond, _ = main_cond
    with pytest.raises(ValueError):
        euler_sample(net, cond, 0, np.random.default_rng(0))


def test_euler_detects_nonfinite():
    def bad(z, t, cond):
        return np.full_like(z, np.nan)

    with pytest.raises(NonFiniteError):
        euler_sample(bad, None, 4, np.random.default_rng(0), shape=(3, 2, 2))


def test_null_branch_distinct_and_guided_sampling_finite(dataset):
    net, _ = train(
        VelocityNet(NetConfig(seed=4)),
        dataset,
        TrainConfig(steps=40, batch_size=2, dropout_p=0.5, seed=3),
    )
    pair, _ = generate_pair(GenConfig(n_pairs=1, kinds=("box",)), 43, 0)
    enc = Encoders(latent=ToyLatentEncoder(4), pose=net.control.pose_encoder)
    cond = assemble_conditioning(pair, Task.MAIN, enc)
    zt = np.random.default_rng(11).standard_normal((48, 16, 16))
    v_cond = velocity_forward(net, zt, 0.5, cond)
    v_null = velocity_forward(net, zt, 0.5, null_variant(cond, net.control.pose_encoder))
    assert np.isfinite(v_cond).all() and np.isfinite(v_null).all()
    assert not np.array_equal(v_cond, v_null)
    out = euler_sample(net, cond, 8, np.random.default_rng(12), guidance=1.5)
    assert np.isfinite(out.data).all()
    assert out.data.shape == (48, 16, 16)
    assert out.stride == 4
