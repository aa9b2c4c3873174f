import numpy as np
import pytest

from mixbit import numerics as nx
from mixbit.costmodel import flop_pair
from mixbit.dataio import gen_synthetic
from mixbit.network import (
    RetrainConfig,
    build,
    build_resnet20,
    build_tinynet,
    forward_fixed,
    forward_search,
    full_precision_plan,
    load_checkpoint,
    load_weights,
    parameter_count,
    retrain,
    save_checkpoint,
)
from mixbit.plan import NetworkPlan
from mixbit.quantizer import on_grid


def reference_resnet20_params(num_classes=10):
    """Enumerate the standard CIFAR ResNet-20 by hand: convs, BN affine, projections, fc."""
    total = 3 * 16 * 9 + 2 * 16
    in_ch = 16
    for width in (16, 32, 64):
        for i in range(3):
            total += in_ch * width * 9 + 2 * width + width * width * 9 + 2 * width
            if in_ch != width:
                total += in_ch * width + 2 * width
            in_ch = width
    return total + 64 * num_classes + num_classes


def test_resnet20_structure():
    net = build_resnet20()
    n = parameter_count(net)
    assert n == reference_resnet20_params()
    assert abs(n - 0.27e6) / 0.27e6 < 0.05
    convs = net.convs()
    assert len(net.quantized_layers()) == len(convs) + 1 - 2
    macs = sum(c.macs for c in convs) + net.head.macs
    assert abs(macs - 40.81e6) / 40.81e6 < 0.03
    out = net.forward(np.zeros((1, 3, 32, 32)))
    assert out.shape == (1, 10) and np.all(np.isfinite(out.data))


def test_tinynet_structure():
    net = build_tinynet(7)
    assert net.forward(np.zeros((4, 3, 16, 16))).shape == (4, 7)
    layers = net.quantized_layers()
    assert len(layers) == 3
    assert all(c.r.shape == (5,) and c.s.shape == (5,) for c in layers)
    assert len({id(c.r) for c in layers}) == 3
    with pytest.raises(ValueError):
        build_tinynet(1)
    with pytest.raises(ValueError):
        build("vgg")


def test_tinynet_quantized_flops_ratio():
    net = build_tinynet()
    q = [c for c in net.layer_costs() if c.quantized]
    f5 = sum(flop_pair(c.macs, 5, 5) for c in q)
    f1 = sum(flop_pair(c.macs, 1, 1) for c in q)
    assert f5 / f1 == pytest.approx(25.0)


@pytest.mark.parametrize("b", [1, 3, 5])
def test_single_bitwidth_search_equals_fixed(rng, b):
    net = build_tinynet(bits=(b,), input_hw=8)
    x = rng.uniform(0, 1, (3, 3, 8, 8))
    a = forward_search(net, x).data
    f = forward_fixed(net, x, NetworkPlan.uniform(net.layer_names(), b)).data
    np.testing.assert_allclose(a, f, atol=1e-9, rtol=0)


def test_saturated_strengths_match_fixed(rng):
    net = build_tinynet(input_hw=8)
    for c in net.quantized_layers():
        c.r.data = np.array([0, 0, 20.0, 0, 0])
        c.s.data = np.array([0, 0, 0, 25.0, 0])
    x = rng.uniform(0, 1, (3, 3, 8, 8))
    a = forward_search(net, x).data
    f = forward_fixed(net, x, NetworkPlan.uniform(net.layer_names(), 3, 4)).data
    np.testing.assert_allclose(a, f, atol=1e-5, rtol=0)


def test_bypass_plan_equals_float(rng):
    net = build_resnet20(input_hw=8)
    x = rng.normal(size=(2, 3, 8, 8))
    f = forward_fixed(net, x, full_precision_plan(net)).data
    net.set_float()
    np.testing.assert_array_equal(f, net.forward(x).data)


@pytest.mark.parametrize("bits", [(1,), (1, 3, 5), (1, 2, 3, 4, 5)])
def test_one_convolution_per_layer(rng, bits):
    net = build_tinynet(bits=bits, input_hw=8)
    net.reset_counters()
    forward_search(net, rng.uniform(0, 1, (2, 3, 8, 8)))
    assert set(net.conv_counts().values()) == {1}
    assert all(net.meta_weight_count(n) == 1 for n in net.layer_names())


def test_quantized_inputs_on_grid(rng):
    net = build_tinynet(input_hw=8)
    plan = NetworkPlan({"q1": (2, 3), "q2": (4, 1), "q3": (5, 2)})
    seen = {}
    net.ctx.probe = lambda name, xq, wq: seen.__setitem__(name, (xq, wq))
    forward_fixed(net, rng.uniform(0, 1, (2, 3, 8, 8)), plan)
    net.ctx.probe = None
    assert set(seen) == set(plan.layers)
    for c in net.quantized_layers():
        bw, bx = plan[c.name]
        xq, wq = seen[c.name]
        assert on_grid(xq, bx, scale=float(c.alpha.data[0]))
        assert on_grid(wq, bw, signed=True)


def test_search_mode_gradients_reach_everything(rng):
    net = build_tinynet(input_hw=8)
    net.set_search("sto", 0.8)
    loss = nx.softmax_xent(net.forward(rng.uniform(0, 1, (4, 3, 8, 8)), training=True), np.arange(4))
    loss.backward()
    for c in net.quantized_layers():
        for p in (c.weight, c.alpha, c.r, c.s):
            assert p.grad is not None and np.any(p.grad != 0), p.name


def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    net = build_tinynet(input_hw=8, seed=3)
    for c in net.quantized_layers():
        c.r.data = rng.normal(size=5)
        c.alpha.data = np.array([rng.uniform(1, 4)])
        c.bn.running_mean[:] = rng.normal(size=c.bn.running_mean.shape)
    plan = NetworkPlan({"q1": (2, 3), "q2": (4, 1), "q3": (5, 2)})
    net.set_fixed(plan)
    save_checkpoint(net, tmp_path / "ck", plan)
    back, plan2, manifest = load_checkpoint(tmp_path / "ck")
    assert plan2.layers == plan.layers
    for (n1, a1), (n2, a2) in zip(
            [(p.name, p.data) for p in net.params()], [(p.name, p.data) for p in back.params()]):
        assert n1 == n2 and a1.tobytes() == a2.tobytes()
    assert back.strength_snapshot() == net.strength_snapshot()
    x = rng.uniform(0, 1, (2, 3, 8, 8))
    assert back.forward(x).data.tobytes() == net.forward(x).data.tobytes()
    assert set(manifest["alpha"]) == {f"{n}.alpha" for n in net.layer_names()}


def test_checkpoint_size_independent_of_bitwidth_count(tmp_path):
    sizes = []
    for bits in [(1,), (1, 2, 3, 4, 5)]:
        d = save_checkpoint(build_tinynet(bits=bits), tmp_path / str(len(bits)))
        sizes.append((d / "tensors.bin").stat().st_size)
    assert sizes[0] == sizes[1]


def test_load_weights_shape_mismatch(tmp_path):
    save_checkpoint(build_tinynet(10), tmp_path / "ck")
    with pytest.raises(ValueError):
        load_weights(build_tinynet(5), tmp_path / "ck")


@pytest.fixture(scope="module")
def tiny_data():
    return gen_synthetic(10, 30, 16, seed=0)


def test_retrain_zero_epochs_keeps_weights(tiny_data):
    net = build_tinynet()
    before = [p.data.copy() for p in net.params()]
    m = retrain(net, tiny_data, NetworkPlan.uniform(net.layer_names(), 3), RetrainConfig(epochs=0))
    assert m["epochs"] == 0 and m["history"] == []
    assert all(np.array_equal(a, p.data) for a, p in zip(before, net.params()))
    assert 0.0 <= m["test_acc"] <= 1.0


@pytest.mark.slow
def test_retrain_reaches_high_train_accuracy_with_progressive_init(tmp_path, tiny_data):
    net = build_tinynet()
    m5 = retrain(net, tiny_data, NetworkPlan.uniform(net.layer_names(), 5), RetrainConfig(epochs=30, batch_size=64))
    assert m5["train_acc"] >= 0.9
    save_checkpoint(net, tmp_path / "five")
    low = build_tinynet()
    load_weights(low, tmp_path / "five")
    m2 = retrain(low, tiny_data, NetworkPlan.uniform(low.layer_names(), 2), RetrainConfig(epochs=30, batch_size=64))
    assert m2["train_acc"] >= 0.9
