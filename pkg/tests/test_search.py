import math

import numpy as np
import pytest

from mixbit import numerics as nx
from mixbit.gradcheck import net_loss
from mixbit.costmodel import LayerCost, network_flops
from mixbit.network import build_tinynet
from mixbit.numerics import Param, Tensor
from mixbit.plan import BitwidthSet, NetworkPlan
from mixbit.quantizer import quantize_weights
from mixbit.search import (
    ConvCounter,
    InfeasibleRange,
    SearchConfig,
    aggregate_quantized,
    dnas_reference_forward,
    gumbel_coeffs,
    make_optimizers,
    run_search,
    sample_random_plan,
    search_step,
    select_plan,
    softmax_coeffs,
    tau_at,
)


def test_bitwidth_set_validation():
    assert tuple(BitwidthSet()) == (1, 2, 3, 4, 5)
    for bad in ((), (0, 1), (2, 2), (3, 1)):
        with pytest.raises(ValueError):
            BitwidthSet(bad)


def test_softmax_examples():
    np.testing.assert_allclose(softmax_coeffs([0.0, 0.0]), [0.5, 0.5])
    c = softmax_coeffs([1000.0, 0.0])
    assert np.all(np.isfinite(c)) and c[0] == pytest.approx(1.0) and c[1] < 1e-300 + 1e-12
    np.testing.assert_allclose(softmax_coeffs([-1.0, 1.0]), [0.1192, 0.8808], atol=1e-4)
    e = math.exp(2.0)
    assert softmax_coeffs([-1.0, 1.0])[1] == pytest.approx(e / (1 + e), abs=1e-12)


def test_softmax_shift_invariance(rng):
    r = rng.normal(size=5)
    np.testing.assert_allclose(softmax_coeffs(r), softmax_coeffs(r + 123.4), atol=1e-12)
    assert abs(softmax_coeffs(r).sum() - 1) < 1e-12


def test_aggregate_examples():
    w = Tensor([0.5, 1.0])
    branches = [quantize_weights(w, 2), quantize_weights(w, 3)]
    np.testing.assert_allclose(branches[0].data, [1 / 3, 1.0])
    np.testing.assert_allclose(branches[1].data, [5 / 7, 1.0])
    out = aggregate_quantized(branches, Tensor(softmax_coeffs([0.0, 0.0])))
    np.testing.assert_allclose(out.data, [11 / 21, 1.0])
    single = aggregate_quantized(branches[:1], Tensor([1.0]))
    np.testing.assert_array_equal(single.data, branches[0].data)
    one_hot = aggregate_quantized(branches, Tensor([0.0, 1.0]))
    np.testing.assert_array_equal(one_hot.data, branches[1].data)
    with pytest.raises(ValueError):
        aggregate_quantized(branches, Tensor([1.0]))
    with pytest.raises(ValueError):
        aggregate_quantized([Tensor([1.0]), Tensor([1.0, 2.0])], Tensor([0.5, 0.5]))


def test_aggregate_convexity_and_saturation(rng):
    w = Tensor(rng.normal(size=50))
    bits = (1, 2, 3, 4, 5)
    branches = [quantize_weights(w, b) for b in bits]
    stack = np.stack([b.data for b in branches])
    out = aggregate_quantized(branches, Tensor(softmax_coeffs(rng.normal(size=5)))).data
    assert np.all(out >= stack.min(axis=0) - 1e-15) and np.all(out <= stack.max(axis=0) + 1e-15)
    r = np.zeros(5)
    r[2] = 20.0
    sat = aggregate_quantized(branches, Tensor(softmax_coeffs(r))).data
    bound = 2 * math.exp(-20) * np.abs(stack).max()
    assert np.abs(sat - branches[2].data).max() <= bound


def test_gumbel_examples():
    g = np.array([0.3, -0.1, 1.5])
    r = Tensor([0.5, 0.2, -0.4])
    c = gumbel_coeffs(r, 1e-3, noise=g).data
    assert c.max() >= 1 - 1e-6 and int(np.argmax(c)) == int(np.argmax(r.data + g))
    np.testing.assert_allclose(gumbel_coeffs(Tensor(np.zeros(4)), 0.7, noise=np.zeros(4)).data, 0.25)
    a = gumbel_coeffs(Tensor(np.zeros(3)), 1.0, np.random.default_rng(5)).data
    b = gumbel_coeffs(Tensor(np.zeros(3)), 1.0, np.random.default_rng(5)).data
    assert a.tobytes() == b.tobytes()
    assert abs(a.sum() - 1) < 1e-12 and np.all(a > 0)
    with pytest.raises(ValueError):
        gumbel_coeffs(r, 0.0, noise=g)


def test_gumbel_gradient_with_frozen_noise(rng):
    r = Param(rng.normal(size=4))
    g = rng.gumbel(size=4)
    up = Tensor(rng.normal(size=4))
    err = nx.finite_diff_check(lambda: nx.sum_all(nx.mul(gumbel_coeffs(r, 0.6, noise=g), up)), r, 1e-6)
    assert err < 1e-6


def test_select_plan_examples():
    plan = select_plan({"l": {"r": [0.1, 0.9, 0.2], "s": [0.0, 0.0, 0.0]}}, (1, 2, 3))
    assert plan["l"] == (2, 1)
    tie = select_plan({"l": {"r": [0.5, 0.5], "s": [0.5, 0.5]}}, (1, 2))
    assert tie["l"] == (1, 1)
    st = {f"l{i}": {"r": [0, 0, 0, 0, 0], "s": [0, 0, 0, 1.0, 0]} for i in range(4)}
    assert all(bx == 4 for _, bx in select_plan(st, (1, 2, 3, 4, 5)).layers.values())
    with pytest.raises(ValueError):
        select_plan({"l": {"r": [0.0], "s": [0.0, 0.0]}}, (1, 2))


def test_select_plan_shift_invariance(rng):
    st = {f"l{i}": {"r": rng.normal(size=5), "s": rng.normal(size=5)} for i in range(3)}
    shifted = {k: {"r": v["r"] + 7.0, "s": v["s"] - 3.0} for k, v in st.items()}
    assert select_plan(st, (1, 2, 3, 4, 5)).layers == select_plan(shifted, (1, 2, 3, 4, 5)).layers


def test_dnas_reference_equals_ebs_for_tied_weights(rng):
    bits = (1, 3, 5)
    x = Tensor(rng.uniform(0, 1, size=(2, 3, 6, 6)))
    w = rng.normal(size=(4, 3, 3, 3))
    r = Tensor(rng.normal(size=3))
    counter = ConvCounter()
    ref = dnas_reference_forward(x, [Tensor(w.copy()) for _ in bits], r, bits, 1, 1, counter)
    assert counter.calls == len(bits)
    ebs_counter = ConvCounter()
    agg = aggregate_quantized([quantize_weights(Tensor(w), b) for b in bits], softmax_coeffs(r))
    ebs = ebs_counter.conv2d(x, agg, 1, 1)
    assert ebs_counter.calls == 1
    np.testing.assert_allclose(ebs.data, ref.data, atol=1e-6)
    one = dnas_reference_forward(x, [Tensor(w)], Tensor([0.0]), (2,), 1, 1)
    np.testing.assert_allclose(one.data, nx.conv2d(x, quantize_weights(Tensor(w), 2), 1, 1).data, atol=1e-12)


def test_tau_schedule():
    assert tau_at(0, 40) == 1.0
    assert tau_at(39, 40) == pytest.approx(0.4)
    assert tau_at(0, 1) == 1.0
    taus = [tau_at(e, 10) for e in range(10)]
    assert np.allclose(np.diff(taus), np.diff(taus)[0]) and min(taus) > 0


def _batches(ds, n=32):
    idx = ds.split("train")
    return (ds.inputs(idx[:n]), ds.labels[idx[:n]]), (ds.inputs(idx[n:2 * n]), ds.labels[idx[n:2 * n]])


def test_search_step_penalty_inactive_below_target(synthetic_small):
    net = build_tinynet(10, input_hw=8)
    cfg = SearchConfig(lam=1e6, target_mflops=1e9)
    opt = make_optimizers(net, cfg)
    train, valid = _batches(synthetic_small)
    # with a huge lambda, an active penalty would dominate the strength gradient
    net.set_search("det")
    net.zero_grad()
    loss = nx.softmax_xent(net.forward(valid[0], training=True), valid[1])
    loss.backward()
    ce_grads = [p.grad.copy() for p in net.strength_params()]
    net.zero_grad()
    lt, lv, e = search_step(net, train, valid, opt, cfg.lam, cfg.target_mflops)
    assert np.isfinite(lt) and np.isfinite(lv) and e < cfg.target_mflops
    assert all(np.abs(g).max() < 10 for g in ce_grads)


def test_search_step_lambda_zero_descends(synthetic_small):
    """With lam=0 one small strength step lowers the valid loss, averaged over 20 seeds.

    The loss is evaluated with rounding residuals frozen at the starting point,
    which is the function the straight-through backward differentiates. The
    fully quantized loss is piecewise constant in upstream strengths and is
    reported only as a sanity bound.
    """
    deltas, true_deltas = [], []
    for seed in range(20):
        net = build_tinynet(10, seed=seed, input_hw=8)
        for p in net.strength_params():
            p.data = np.random.default_rng(seed).normal(0, 0.3, 5)
        cfg = SearchConfig(lam=0.0, arch_lr=1e-4)
        opt = make_optimizers(net, cfg)
        _, valid = _batches(synthetic_small)
        net.set_search("det")

        def true_loss():
            net.ctx.residuals = None
            return float(nx.softmax_xent(net.forward(valid[0], training=True), valid[1]).data)

        t0 = true_loss()
        loss = net_loss(net, valid[0], valid[1])
        base = loss()
        net.zero_grad()
        base.backward()
        opt.strengths.step()
        deltas.append(float(loss().data) - float(base.data))
        true_deltas.append(true_loss() - t0)
    assert np.mean(deltas) < 0
    assert sum(d < 0 for d in deltas) >= 18
    assert abs(np.mean(true_deltas)) < 1e-2


def test_huge_lambda_drives_all_layers_to_smallest_bitwidth(synthetic_small):
    net = build_tinynet(10, input_hw=8)
    cfg = SearchConfig(lam=1e6, target_mflops=1e-9)
    opt = make_optimizers(net, cfg)
    train, valid = _batches(synthetic_small)
    for _ in range(50):
        search_step(net, train, valid, opt, cfg.lam, cfg.target_mflops)
    plan = select_plan(net.strength_snapshot(), net.bits)
    assert all(v == (1, 1) for v in plan.layers.values())


def test_run_search_zero_epochs_gives_smallest_bitwidths(synthetic_small):
    net = build_tinynet(10, input_hw=8)
    plan, history = run_search(net, synthetic_small, SearchConfig(epochs=0, target_mflops=0.1))
    assert history == []
    assert all(v == (1, 1) for v in plan.layers.values())


@pytest.mark.parametrize("mode", ["det", "sto"])
def test_run_search_short(synthetic_small, mode):
    net = build_tinynet(10, input_hw=8)
    plan, history = run_search(net, synthetic_small, SearchConfig(epochs=2, target_mflops=0.05, mode=mode))
    assert len(history) == 2
    plan.validate(net.layer_names(), BitwidthSet())
    assert set(history[0]) == {"epoch", "train_loss", "valid_loss", "valid_acc", "expected_mflops", "tau"}
    if mode == "sto":
        assert history[0]["tau"] == 1.0 and history[1]["tau"] == pytest.approx(0.4)


def test_search_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(mode="greedy")
    with pytest.raises(ValueError):
        SearchConfig(lam=-1)
    with pytest.raises(ValueError):
        SearchConfig(target_mflops=0)


COSTS = [LayerCost("first", 100, False), LayerCost("a", 6400), LayerCost("b", 6400), LayerCost("last", 10, False)]


def test_random_plan_degenerate_range(rng):
    all1 = network_flops(NetworkPlan.uniform(["a", "b"], 1), COSTS)
    plan = sample_random_plan(COSTS, (all1, all1), rng)
    assert plan.layers == {"a": (1, 1), "b": (1, 1)}


def test_random_plan_full_range_accepts_first_draw():
    rng_a, rng_b = np.random.default_rng(3), np.random.default_rng(3)
    plan = sample_random_plan(COSTS, (0, 1e12), rng_a)
    draw = rng_b.choice(np.array([1, 2, 3, 4, 5]), size=(2, 2))
    assert plan.layers == {"a": tuple(map(int, draw[0])), "b": tuple(map(int, draw[1]))}


def test_random_plan_mid_range_distribution(rng):
    lo, hi = 2000.0, 5000.0
    plans = [sample_random_plan(COSTS, (lo, hi), rng) for _ in range(1000)]
    flops = [network_flops(p, COSTS) for p in plans]
    assert all(lo <= f <= hi for f in flops)
    assert len({tuple(sorted(p.layers.items())) for p in plans}) >= 2


def test_random_plan_infeasible(rng):
    with pytest.raises(InfeasibleRange):
        sample_random_plan(COSTS, (0.0, 1.0), rng, max_draws=100)
    with pytest.raises(ValueError):
        sample_random_plan(COSTS, (5.0, 1.0), rng)
