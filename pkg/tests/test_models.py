import numpy as np
import pytest

from evseg.engine import SGD, Tensor, grad_check
from evseg.errors import ConfigError, NumericError
from evseg.models import (BackboneConfig, D2SConfig, LossConfig, S2DConfig, SegNet, build_d2s,
                          build_event, build_network, build_rgb, build_s2d, compute_losses,
                          event_target, train_step)

TOY = BackboneConfig.toy()
F64 = np.float64


def batch(rng, n=1, h=32, w=32, ev=2, classes=19):
    return {"rgb": rng.normal(size=(n, 3, h, w)),
            "events": rng.uniform(0, 2, size=(n, ev, h, w)),
            "event_target": (rng.uniform(size=(n, ev, h, w)) > 0.7).astype(F64),
            "labels": rng.integers(0, classes, size=(n, h, w))}


def randomize_biases(net, rng, skip=()):
    for name, t in net.named_tensors():
        if name.endswith("bias") and not name.startswith(skip):
            t.data = rng.normal(scale=0.1, size=t.shape).astype(t.dtype)


@pytest.mark.parametrize("kind", ["rgb", "event", "s2d", "d2s"])
def test_output_shapes(kind, rng):
    net = build_network(kind, TOY, event_channels=2, dtype=F64)
    out = net(batch(rng, n=2, h=32, w=48))
    assert out["seg"].shape == (2, 19, 32, 48)
    if kind == "d2s":
        assert out["event"].shape == (2, 2, 32, 48)


def test_full_scale_widths():
    full = BackboneConfig()
    assert full.channels == (64, 128, 256, 512) and TOY.channels == (8, 16, 32, 64)
    d2s = D2SConfig()
    assert d2s.branch_channels(False) == (64, 32, 16, 8)
    assert d2s.branch_channels(True) == (16, 8, 4, 2)


def test_backbone_validation():
    with pytest.raises(ConfigError):
        BackboneConfig(stage_downsample=(4, 8, 8, 32))
    with pytest.raises(ConfigError):
        BackboneConfig(stage_downsample=(4, 6, 12, 24))
    with pytest.raises(ConfigError):
        BackboneConfig(stage_channels=(8, 16, 32))


def test_s2d_accepts_many_bins(rng):
    net = build_network("s2d", TOY, event_channels=18, dtype=F64)
    b = batch(rng, ev=18)
    assert net(b)["seg"].shape == (1, 19, 32, 32)
    with pytest.raises(Exception):
        net(batch(rng, ev=2))


def test_s2d_stage_mismatch_names_stage():
    with pytest.raises(ConfigError, match="stage 2"):
        build_s2d(TOY, S2DConfig(event_stage_channels=(8, 12, 32, 64)), dtype=F64)


@pytest.mark.parametrize("channels", [1, 2])
def test_d2s_polarity_variants(channels, rng):
    net = build_d2s(TOY, D2SConfig(target_channels=channels), dtype=F64)
    b = batch(rng, ev=channels)
    out = net(b)
    assert out["event"].shape == (1, channels, 32, 32)
    total, terms = compute_losses(net, b)
    assert set(terms) == {"ce", "bce"}
    assert float(total.data) == float(terms["ce"].data) + float(terms["bce"].data)


def test_s2d_zero_events_equals_tied_rgb_graph(rng):
    """Zero events give a constant attention gain and a constant pooled event stream."""
    s2d = build_s2d(TOY, S2DConfig(), dtype=F64, seed=3)
    randomize_biases(s2d, rng, skip=("event_encoder",))   # event features stay exactly 0
    b = batch(rng, n=2)
    b["events"] = np.zeros_like(b["events"])

    # gains at a zero feature are sigmoid(fc2(relu(fc1(0)))) for every sample
    for att, ch in zip(s2d.attention, TOY.channels):
        h = np.maximum(att.fc1.bias.data, 0)
        g = 1 / (1 + np.exp(-(att.fc2.weight.data @ h + att.fc2.bias.data)))
        got = att.gains(Tensor(np.zeros((2, ch, 4, 4)))).data
        np.testing.assert_allclose(got, np.broadcast_to(g, (2, ch)), atol=1e-15)

    rgb = SegNet(3, TOY, 19, np.random.default_rng(0), F64)
    state = {k: v for k, v in s2d.state_dict().items() if k in dict(rgb.named_tensors())}
    fw = s2d.spp.fuse.weight.data
    keep = rgb.spp.fuse.weight.shape[1]
    # the event stream into the fuse conv is the constant relu(extra.bias)
    const = np.maximum(s2d.spp.extra.bias.data, 0)
    state["spp.fuse.weight"] = fw[:, :keep].copy()
    state["spp.fuse.bias"] = s2d.spp.fuse.bias.data + fw[:, keep:, 0, 0] @ const
    rgb.load_state_dict(state)
    np.testing.assert_allclose(s2d(b)["seg"].data, rgb(b)["seg"].data, atol=1e-6, rtol=0)


def test_forced_open_gates(rng):
    net = build_d2s(TOY, dtype=F64, seed=2)
    net.force_open_gates()
    b = batch(rng)
    out = net(b)
    assert np.all(np.isfinite(out["seg"].data)) and np.all(np.isfinite(out["event"].data))
    params = dict(net.named_parameters())
    picked = {k: params[k] for k in ("ev_conv3.0.weight", "ev_conv1.3.weight", "ev_out.weight")}
    rep = grad_check(lambda: compute_losses(net, b)[0], picked, max_coords=6,
                     rng=np.random.default_rng(0))
    assert rep.worst < 1e-3


def end_to_end_check(kind, seed):
    rng = np.random.default_rng(seed)
    net = build_network(kind, TOY, event_channels=2, dtype=F64, seed=seed)
    randomize_biases(net, rng)
    b = batch(rng)
    x = Tensor(b["rgb"], requires_grad=True)
    b["rgb"] = x
    params = dict(net.named_parameters())
    names = sorted(params)
    chosen = [names[i] for i in rng.choice(len(names), 4, replace=False)]
    inputs = {"rgb": x, **{n: params[n] for n in chosen}}
    return grad_check(lambda: compute_losses(net, b)[0], inputs, max_coords=4, rng=rng)


@pytest.mark.parametrize("kind", ["s2d", "d2s"])
def test_end_to_end_gradients(kind):
    worst = max(end_to_end_check(kind, s).worst for s in range(10))
    assert worst < 1e-3


@pytest.mark.parametrize("kind", ["rgb", "event"])
def test_baseline_gradients(kind):
    assert end_to_end_check(kind, 0).worst < 1e-3


def test_head_permutation(rng):
    net = build_network("s2d", TOY, dtype=F64)
    net.head.bias.data = rng.normal(size=19)
    b = batch(rng)
    ref = net(b)["seg"].data
    perm = rng.permutation(19)
    net.head.weight.data = net.head.weight.data[perm]
    net.head.bias.data = net.head.bias.data[perm]
    np.testing.assert_array_equal(net(b)["seg"].data, ref[:, perm])


def test_build_is_deterministic(rng):
    a = build_d2s(TOY, seed=5).state_dict()
    b = build_d2s(TOY, seed=5).state_dict()
    c = build_d2s(TOY, seed=6).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not all(np.array_equal(a[k], c[k]) for k in a)


def test_d2s_needs_event_target(rng):
    net = build_d2s(TOY, dtype=F64)
    b = batch(rng)
    del b["event_target"]
    with pytest.raises(ConfigError, match="event"):
        compute_losses(net, b)


def test_nan_names_loss_term(rng):
    net = build_rgb(TOY, dtype=F64)
    b = batch(rng)
    b["rgb"][0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError, match="ce"):
        compute_losses(net, b)


def test_event_targets():
    counts = np.array([0.0, 1.0, 3.0])
    np.testing.assert_array_equal(event_target(counts), [0, 1, 1])
    np.testing.assert_allclose(event_target(counts, "counts"), 1 - np.exp(-counts))


def test_training_reduces_loss_on_a_fixed_batch(rng):
    net = build_event(TOY, 2, seed=0)
    b = {k: v.astype(np.float32) if k != "labels" else v for k, v in batch(rng, n=2).items()}
    b["labels"] = np.zeros((2, 32, 32), dtype=np.int64)
    b["labels"][:, :, 16:] = 13
    opt = SGD(lr=0.05, momentum=0.9, clip_norm=5.0)
    losses = [train_step(net, b, opt)["total"] for _ in range(30)]
    assert losses[-1] < 0.5 * losses[0]


def test_loss_weights(rng):
    net = build_d2s(TOY, dtype=F64)
    b = batch(rng)
    total, terms = compute_losses(net, b, LossConfig(ce_weight=0.5, bce_weight=2.0))
    expect = 0.5 * float(terms["ce"].data) + 2.0 * float(terms["bce"].data)
    assert float(total.data) == pytest.approx(expect, rel=1e-14)
