import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import tiny_config
from getnet.errors import CheckpointError, CorruptCheckpointError, DataError, ShapeMismatchError
from getnet.model import (FLAGS, FULL, ArpanConfig, analytic_parameter_count, build,
                          count_parameters, forward, load_checkpoint, save_checkpoint, vanilla)
from getnet.nn import Tensor, check_gradients, ops
from getnet.nn.layers import Dense
from getnet.rng import RandomState

ATTENTION_PARAMS = 7 * 7 * 2 + 1 + 2  # kernel, bias, BN gamma and beta


def plan_kinds(model):
    return [(r.name, r.kind) for r in model.plan]


def test_full_width_flatten_and_count():
    model = build(ArpanConfig())
    flat = next(r for r in model.plan if r.name == "flatten")
    assert flat.out_shape == (8 * 8 * 256,)
    assert count_parameters(model) == analytic_parameter_count(ArpanConfig())
    # same-padded shape propagation lands within 0.1% of the published figure
    assert abs(count_parameters(model) - 4_968_769) / 4_968_769 < 1e-3


def test_fixed_pool_without_m_gives_same_grid():
    model = build(ArpanConfig().without("M"))
    pool = next(r for r in model.plan if r.name == "pool")
    assert pool.kind == "max_pool" and pool.out_shape[:2] == (64, 64)


def test_quarter_width_runs_on_canonical_input():
    cfg = ArpanConfig(width_scale=0.25)
    model = build(cfg)
    convs = {r.name: r.out_shape[-1] for r in model.plan if r.kind == "conv2d"}
    assert convs == {"b1_conv": 16, "b2_conv": 16, "d1_conv": 32, "d2_conv": 32,
                     "d3_conv": 32, "head_conv": 64}
    x = np.random.default_rng(0).random((1, 128, 256)).astype(np.float32)
    p = forward(model, x)
    assert p.shape == (1,) and 0 < p[0] < 1


def test_flag_m_and_g_change_one_op():
    full, no_m, no_g = build(tiny_config()), build(tiny_config().without("M")), \
        build(tiny_config().without("G"))
    a, b = plan_kinds(full), plan_kinds(no_m)
    assert len(a) == len(b)
    assert [i for i, (x, y) in enumerate(zip(a, b)) if x != y] == [a.index(("pool", "adaptive_max_pool"))]
    assert plan_kinds(no_g) == [r for r in a if r != ("noise", "gaussian_noise")]


def test_flag_d_removes_whole_second_block():
    names = {r.name for r in build(tiny_config().without("D")).plan}
    assert not any(n.startswith("b2_") for n in names)
    assert analytic_parameter_count(tiny_config()) > analytic_parameter_count(
        tiny_config().without("D"))


def test_flag_k_kernels():
    with_k = {r.name: r for r in build(ArpanConfig(width_scale=1 / 64)).plan}
    no_k = {r.name: r for r in build(ArpanConfig(width_scale=1 / 64).without("K")).plan}
    assert with_k["b1_conv"].params == 7 * 7 * 1 + 1 and with_k["b2_conv"].params == 5 * 5 + 1
    assert no_k["b1_conv"].params == 3 * 3 + 1 and no_k["b2_conv"].params == 3 * 3 + 1


def test_dropout_placement_b_versus_all():
    only_b = {r.name for r in build(tiny_config(flags=frozenset({"B", "D", "M"}))).plan}
    everywhere = {r.name for r in build(tiny_config(flags=frozenset({"All", "D", "M"}))).plan}
    assert {"b1_drop", "b2_drop"} <= only_b and not any(n.startswith("d1_drop") for n in only_b)
    assert {"b1_drop", "d1_drop", "d3_drop", "head_drop"} <= everywhere


def test_s_flag_switches_head_activation_only():
    s_on = build(tiny_config())
    s_off = build(tiny_config().without("S"))
    act = {m: {layer.name: layer.fn for layer in model.layers if layer.kind == "activation"}
           for m, model in (("on", s_on), ("off", s_off))}
    assert act["on"]["head_act"] == "sigmoid" and act["off"]["head_act"] == "relu"
    assert act["on"]["out_act"] == act["off"]["out_act"] == "sigmoid"


def test_attention_parameter_difference():
    full, plain = ArpanConfig(), ArpanConfig(attention=False)
    diff = count_parameters(build(full)) - count_parameters(build(plain))
    assert diff == 2 * ATTENTION_PARAMS
    assert count_parameters(build(full.without("D"))) - count_parameters(
        build(plain.without("D"))) == ATTENTION_PARAMS


def test_count_examples():
    gen = np.random.default_rng(0)
    assert Dense.create("d", 4, 2, gen).n_params() == 10
    from getnet.nn.layers import Conv2d
    assert Conv2d.create("c", 7, 7, 1, 64, gen).n_params() == 3200


@given(flags=st.sets(st.sampled_from(FLAGS)), attention=st.booleans(),
       ws=st.sampled_from([1 / 64, 1 / 32, 0.125, 0.25]), seed=st.integers(0, 100))
def test_analytic_count_matches_build(flags, attention, ws, seed):
    cfg = ArpanConfig(flags=frozenset(flags), attention=attention, width_scale=ws,
                      input_shape=(32, 64), pool_grid=(16, 16), seed=seed)
    assert count_parameters(build(cfg)) == analytic_parameter_count(cfg)


def test_config_validation():
    with pytest.raises(DataError):
        ArpanConfig(width_scale=1 / 128)
    with pytest.raises(DataError):
        ArpanConfig(flags=frozenset({"Q"}))
    with pytest.raises(DataError):
        build(ArpanConfig(input_shape=(8, 8), pool_grid=(4, 4), width_scale=1 / 64))


def test_config_dict_roundtrip():
    cfg = ArpanConfig(flags=frozenset({"S", "M"}), attention=False, width_scale=0.25, seed=4)
    assert ArpanConfig.from_dict(cfg.to_dict()) == cfg
    assert vanilla().flags == frozenset() and not vanilla().attention
    assert "R" not in FULL


def test_zero_output_layer_gives_half():
    model = build(tiny_config())
    out = next(layer for layer in model.layers if layer.name == "out")
    out.weight.data[:] = 0
    out.bias.data[:] = 0
    x = np.random.default_rng(1).random((5, 16, 32))
    np.testing.assert_array_equal(forward(model, x), 0.5)


def test_forward_range_determinism_and_shape_check():
    model = build(tiny_config())
    x = np.random.default_rng(2).random((4, 16, 32))
    a, b = forward(model, x), forward(model, x)
    np.testing.assert_array_equal(a, b)
    assert np.all(np.isfinite(a)) and np.all((a > 0) & (a < 1))
    with pytest.raises(DataError):
        forward(model, np.zeros((1, 16, 16)))


def test_train_mode_forward_is_seeded():
    model = build(tiny_config())
    x = np.random.default_rng(2).random((4, 16, 32))
    a = forward(model, x, ops.TRAIN, RandomState(7))
    b = forward(model, x, ops.TRAIN, RandomState(7))
    np.testing.assert_array_equal(a, b)


def test_attention_ablation_equivalence():
    model = build(tiny_config())
    x = np.random.default_rng(3).random((3, 16, 32))
    bypassed = model.without_attention()
    plain = build(tiny_config(attention=False))
    from getnet.model import copy_weights
    copy_weights(model, plain)
    np.testing.assert_array_equal(forward(bypassed, x), forward(plain, x))
    assert not np.array_equal(forward(model, x), forward(plain, x))


@pytest.mark.parametrize("mode", [ops.TRAIN, ops.INFER])
def test_full_composition_gradients(mode):
    model = build(tiny_config(), dtype=np.float64)
    for t in model.named_params().values():
        t.data[...] += np.random.default_rng(4).normal(0, 0.05, t.shape)
    x = Tensor(np.random.default_rng(5).random((3, 16, 32, 1)), requires_grad=True)
    rs = RandomState(11)
    params = model.named_params()
    res = check_gradients(lambda: model.forward_tensor(x, mode, rs), [x] + list(params.values()),
                          names=["x"] + list(params), max_per_tensor=40)
    assert res.ok, res.failures[:5]
    assert res.checked > 200


def test_checkpoint_roundtrip(tmp_path):
    model = build(tiny_config(seed=3))
    model.named_buffers()["b1_bn.running_mean"][:] = 0.25
    save_checkpoint(model, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.config == model.config
    x = np.random.default_rng(0).random((2, 16, 32))
    np.testing.assert_array_equal(forward(back, x), forward(model, x))
    np.testing.assert_array_equal(back.named_buffers()["b1_bn.running_mean"], 0.25)


def test_checkpoint_truncated(tmp_path):
    save_checkpoint(build(tiny_config()), tmp_path / "m.ckpt")
    data = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "m.ckpt").write_bytes(data[:-10])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "m.ckpt")


def test_checkpoint_width_mismatch(tmp_path):
    save_checkpoint(build(ArpanConfig(width_scale=0.25, input_shape=(32, 64), pool_grid=(16, 16))),
                    tmp_path / "m.ckpt")
    with pytest.raises(ShapeMismatchError):
        load_checkpoint(tmp_path / "m.ckpt",
                        expected=ArpanConfig(width_scale=1.0, input_shape=(32, 64),
                                             pool_grid=(16, 16)))


def test_checkpoint_version_mismatch(tmp_path):
    save_checkpoint(build(tiny_config()), tmp_path / "m.ckpt")
    data = (tmp_path / "m.ckpt").read_bytes().replace(b'"version": 1', b'"version": 99', 1)
    (tmp_path / "m.ckpt").write_bytes(data)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.ckpt")


def test_plan_table_lists_every_layer():
    model = build(tiny_config())
    table = model.plan_table()
    assert all(r.name in table for r in model.plan)
    assert f"{count_parameters(model):,}" in table.splitlines()[-1]
