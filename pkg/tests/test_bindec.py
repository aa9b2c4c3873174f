import numpy as np
import pytest

from conftest import naive_conv, naive_matmul
from mixbit import numerics as nx
from mixbit.bindec import (
    BDLayer,
    CoeffSpec,
    ExportError,
    OpCounts,
    attach,
    bd_conv2d,
    bd_matmul,
    bench_kernel,
    binary_gemm,
    decompose_bits,
    export_bd_model,
    im2col,
    layer_bytes,
    load_bd,
    lower_network,
    pack_bits,
    plane_bytes,
    popcount_native,
    popcount_table,
    recombine,
    to_codes,
)
from mixbit.network import build_tinynet
from mixbit.plan import NetworkPlan

W = np.array([[1, 2, 3], [0, 1, 2]])
X = np.array([[1], [2], [3]])


def test_decompose_example():
    bm = decompose_bits(W, 2)
    np.testing.assert_array_equal(bm.unpack(), [[1, 0, 1], [0, 1, 1], [0, 1, 0], [0, 0, 1]])
    np.testing.assert_array_equal(bm.codes(), W)
    assert not decompose_bits(np.zeros((3, 70), int), 3).unpack().any()
    np.testing.assert_array_equal(decompose_bits(W % 2, 1).unpack(), W % 2)
    with pytest.raises(ValueError):
        decompose_bits(np.array([[4]]), 2)
    with pytest.raises(ValueError):
        decompose_bits(np.array([[-1]]), 2)


def test_pack_bits_little_endian_and_zero_tail():
    planes = np.zeros((1, 65), np.uint8)
    planes[0, 0] = planes[0, 64] = 1
    np.testing.assert_array_equal(pack_bits(planes), [[1, 1]])


def test_binary_gemm_example():
    p = binary_gemm(decompose_bits(W, 2), decompose_bits(X.T, 2))
    np.testing.assert_array_equal(p, [[2, 1], [1, 2], [0, 1], [1, 1]])
    z = binary_gemm(decompose_bits(np.zeros_like(W), 2), decompose_bits(X.T, 2))
    assert not z.any()


def test_recombine_examples():
    assert recombine(np.array([[2, 1], [1, 2]]), CoeffSpec(2, 2))[0, 0] == 14
    p = np.arange(12).reshape(3, 4)
    np.testing.assert_array_equal(recombine(p, CoeffSpec(1, 1)), p)
    np.testing.assert_array_equal(bd_matmul(W, X, 2, 2), [[14], [8]])
    with pytest.raises(ValueError):
        recombine(np.zeros((3, 4), int), CoeffSpec(2, 1))


@pytest.mark.parametrize("s", [1, 63, 64, 65, 128, 200])
def test_bd_matmul_exact_across_word_boundaries(rng, s):
    for m in (1, 3, 5):
        for k in (1, 2, 5):
            cw = rng.integers(0, 1 << m, size=(4, s))
            cx = rng.integers(0, 1 << k, size=(s, 3))
            np.testing.assert_array_equal(bd_matmul(cw, cx, m, k), naive_matmul(cw, cx))


def test_popcount_implementations_agree(rng):
    words = rng.integers(0, 2**63, size=1000, dtype=np.uint64) * np.uint64(2) + rng.integers(0, 2, 1000).astype(np.uint64)
    words[:3] = [0, np.iinfo(np.uint64).max, 1 << 63]
    ref = np.array([bin(int(v)).count("1") for v in words])
    np.testing.assert_array_equal(popcount_native(words), ref)
    np.testing.assert_array_equal(popcount_table(words), ref)


def test_gemm_independent_of_threads_and_popcount(rng):
    bw = decompose_bits(rng.integers(0, 8, (64, 300)), 3)
    bx = decompose_bits(rng.integers(0, 4, (500, 300)), 2)
    base = binary_gemm(bw, bx, threads=1)
    np.testing.assert_array_equal(binary_gemm(bw, bx, threads=4), base)
    np.testing.assert_array_equal(binary_gemm(bw, bx, popcount="table", threads=3), base)


def test_op_counts_formula(rng):
    counts = OpCounts()
    bd_matmul(rng.integers(0, 4, (5, 70)), rng.integers(0, 8, (70, 6)), 2, 3, counts=counts)
    assert counts.and_words == 2 * 5 * 3 * 6 * 2
    assert counts.shift_adds == 5 * 6 * 2 * 3


def test_im2col_matches_loop_conv(rng):
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    for stride, pad in ((1, 1), (2, 0), (2, 1)):
        cols = im2col(x, (3, 3), stride, pad)
        ref = naive_conv(x, w, stride, pad)
        out = np.einsum("os,nsl->nol", w.reshape(4, -1), cols).reshape(ref.shape)
        np.testing.assert_allclose(out, ref, atol=1e-12)


def test_to_codes():
    np.testing.assert_array_equal(to_codes([-1.0, -1 / 3, 1 / 3, 1.0], 2, signed=True), [0, 1, 2, 3])
    np.testing.assert_array_equal(to_codes([0.0, 2 / 3, 2.0], 2, signed=False, alpha=2.0), [0, 1, 3])
    with pytest.raises(ValueError):
        to_codes([0.2], 2, signed=True)


def test_degenerate_all_ones_kernel(rng):
    co, ci = 2, 3
    alpha = 1.5
    layer = BDLayer.from_codes("l", np.ones((co, ci, 1, 1), int), 1, 0, 1, 1, alpha, np.ones(co), np.zeros(co))
    x = rng.uniform(0, 2, (1, ci, 4, 4))
    xq = alpha * (np.clip(x, 0, alpha) / alpha >= 0.5)
    out = bd_conv2d(layer, x)
    np.testing.assert_allclose(out[0, 0], xq[0].sum(axis=0), atol=1e-12)
    np.testing.assert_allclose(out[0, 1], out[0, 0])


def _fixed_tinynet(plan_pairs, seed=0, hw=8):
    net = build_tinynet(seed=seed, input_hw=hw)
    rng = np.random.default_rng(seed)
    for c in net.convs():
        c.bn.running_mean[:] = rng.normal(0, 0.1, c.bn.running_mean.shape)
        c.bn.running_var[:] = rng.uniform(0.5, 2, c.bn.running_var.shape)
        c.bn.gamma.data = rng.uniform(0.5, 1.5, c.bn.gamma.shape)
        if c.quantize:
            c.alpha.data = np.array([rng.uniform(0.5, 3)])
    net.set_fixed(NetworkPlan(dict(zip(net.layer_names(), plan_pairs))))
    net.freeze()
    return net


def test_random_layers_integer_core_and_float_agreement(rng):
    for case in range(50):
        m, k = (int(v) for v in rng.integers(1, 6, 2))
        net = _fixed_tinynet([(m, k)] * 3, seed=case)
        layers = lower_network(net)
        net.ctx.training = False
        conv = net.quantized_layers()[case % 3]
        layer = layers[conv.name]
        x = rng.uniform(-0.5, 4, (2, conv.spec.in_ch, 6, 6))
        flat, _, _, _ = layer.conv_codes(x)
        o, _ = layer.integer_core(flat)
        np.testing.assert_array_equal(o, naive_matmul(layer.planes.codes(), flat))
        np.testing.assert_allclose(bd_conv2d(layer, x), conv(nx.Tensor(x)).data, atol=1e-4, rtol=0)


def test_tinynet_bd_end_to_end(rng):
    net = _fixed_tinynet([(2, 3), (1, 4), (5, 2)])
    x = rng.uniform(0, 1, (64, 3, 8, 8))
    ref = net.predict(x)
    bd = net.predict(x, bd=lower_network(net))
    assert np.abs(bd - ref).max() < 1e-3
    assert np.array_equal(bd.argmax(1), ref.argmax(1))


def test_export_round_trip_and_size(tmp_path, rng):
    net = _fixed_tinynet([(2, 3), (1, 4), (5, 2)])
    path = export_bd_model(net, tmp_path / "m.mbbd")
    mem = lower_network(net)
    loaded = attach(net, load_bd(path))
    x = rng.uniform(0, 2, (3, 8, 8, 8))
    name = net.layer_names()[0]
    flat, _, _, _ = mem[name].conv_codes(x)
    assert np.array_equal(mem[name].integer_core(flat)[0], loaded[name].integer_core(flat)[0])
    assert np.array_equal(mem[name].planes.packed, loaded[name].planes.packed)
    ref = net.predict(np.zeros((2, 3, 8, 8)) + 0.3, bd=mem)
    np.testing.assert_allclose(net.predict(np.zeros((2, 3, 8, 8)) + 0.3, bd=loaded), ref, atol=1e-6)
    expected = 8
    for c in net.quantized_layers():
        lb = layer_bytes(mem[c.name])
        s = c.spec.in_ch * 9
        assert lb["planes"] == plane_bytes(c.spec.out_ch, s, mem[c.name].m_bits) == \
            -(-s // 64) * 8 * c.spec.out_ch * mem[c.name].m_bits
        expected += lb["planes"] + lb["geometry"] + lb["affine"]
    assert path.stat().st_size == expected


def test_export_preconditions(tmp_path):
    net = build_tinynet(input_hw=8)
    net.set_search("det")
    with pytest.raises(ExportError):
        export_bd_model(net, tmp_path / "x.mbbd")
    net.set_fixed(NetworkPlan.uniform(net.layer_names(), 2))
    with pytest.raises(ExportError):
        lower_network(net)


def test_load_rejects_corrupt_files(tmp_path):
    net = _fixed_tinynet([(2, 2)] * 3)
    path = export_bd_model(net, tmp_path / "m.mbbd")
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short").write_bytes(raw[:-3])
    for name in ("bad", "short"):
        with pytest.raises(ValueError):
            load_bd(tmp_path / name)


def test_bench_op_ratios():
    shape = (16, 16, 3, 8)
    r11 = bench_kernel(shape, 1, 1)
    r12 = bench_kernel(shape, 1, 2)
    r22 = bench_kernel(shape, 2, 2)
    assert r12["and_word_ops"] == 2 * r11["and_word_ops"]
    assert r22["and_word_ops"] == 4 * r11["and_word_ops"]
    for r in (r11, r12, r22):
        assert r["and_word_ops"] == r["expected_and_word_ops"]
        assert r["shift_adds"] == r["expected_shift_adds"]
        assert r["ns_per_call"] > 0
    with pytest.raises(ValueError):
        bench_kernel(shape, 1, 1, reps=3)
