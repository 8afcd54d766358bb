from pathlib import Path

import numpy as np
import pytest

from mgabrain import tensor as T
from mgabrain.errors import InvalidConfig, ShapeMismatch
from mgabrain.model import (
    ModelConfig,
    build,
    count_params,
    format_shape_table,
    layer_plan,
    load_checkpoint,
    save_checkpoint,
    shape_infer,
)

TABLE = Path(__file__).parent / "data" / "layer_shapes_n128.txt"


def small(**kw):
    return ModelConfig(input_side=16, **kw)


def test_table_matches_reference():
    assert format_shape_table(ModelConfig()) == TABLE.read_text()


def test_desk_scale_trace_divides_by_four():
    full = {r[0]: r for r in shape_infer(ModelConfig(input_side=128))}
    desk = {r[0]: r for r in shape_infer(ModelConfig(input_side=32))}
    for name, row in full.items():
        if row[4] is None:
            continue
        c, *sp = row[4]
        assert desk[name][4] == (c, *(s // 4 for s in sp))
        assert desk[name][3] == row[3]


def test_bottleneck_side_for_n16():
    rows = {r[0]: r for r in shape_infer(small())}
    assert rows["bott8.1"][4] == (64, 2, 2, 2)
    assert rows["att.qkv"][4] == (192, 2, 2, 2)


@pytest.mark.parametrize("n", [12, 4, 0])
def test_invalid_side(n):
    with pytest.raises(InvalidConfig):
        shape_infer(ModelConfig(input_side=n))


def test_mga_pool_must_divide():
    with pytest.raises(InvalidConfig):
        ModelConfig(input_side=16, mga_pool=3).validate()


def test_seed_determinism_and_count():
    a, b, c = build(small(), 5), build(small(), 5), build(small(), 6)
    assert a.checksum() == b.checksum() != c.checksum()
    assert count_params(a) == count_params(c)


def test_count_params_arithmetic():
    net = build(small())
    expected = sum(cout * cin * k**3 + cout for _, cin, cout, k, _ in layer_plan(net.cfg))
    assert count_params(net) == expected
    k1 = [r for r in layer_plan(net.cfg) if r[0] == "enc2.2"][0]
    assert k1[1] * k1[2] * k1[3] ** 3 + k1[2] == 272
    no_mga = build(small(use_mga=False))
    assert count_params(no_mga) == expected - sum(
        cout * cin + cout for name, cin, cout, *_ in layer_plan(net.cfg) if name.startswith("mga.")
    )


def test_width_scales_k3_counts():
    one = {n: (ci, co, k) for n, ci, co, k, _ in layer_plan(ModelConfig(width=1))}
    two = {n: (ci, co, k) for n, ci, co, k, _ in layer_plan(ModelConfig(width=2))}
    for name in ("enc4.1", "enc6.1", "bott8.1", "mask.dec2.1"):
        ci, co, k = one[name]
        c2i, c2o, _ = two[name]
        assert c2i * c2o * k**3 == 4 * ci * co * k**3


def test_zero_input_is_finite():
    net = build(small(), 0)
    s, r = net.forward(np.zeros((2, 1, 16, 16, 16), np.float32), 1.0)
    assert s.shape == r.shape == (2, 1, 16, 16, 16)
    assert np.isfinite(s.data).all() and np.isfinite(r.data).all()


def test_input_shape_checked():
    net = build(small())
    with pytest.raises(ShapeMismatch):
        net.forward(np.zeros((1, 1, 8, 8, 8), np.float32))
    with pytest.raises(ShapeMismatch):
        net.forward(np.zeros((1, 1, 16, 16, 16), np.float32), 0.5)


def test_trace_matches_symbolic_shapes(rng):
    net = build(small())
    trace = []
    net.forward(rng.random((1, 1, 16, 16, 16)).astype(np.float32), 1.0, trace)
    sym = {r[0]: r[4] for r in shape_infer(net.cfg) if r[4] is not None}
    for name, shape in trace:
        if name in sym:
            assert tuple(shape) == sym[name]


def test_modality_flag_and_spe(rng):
    x = rng.random((1, 1, 16, 16, 16)).astype(np.float32)
    net = build(small(), 0)
    a, b = net.forward(x, 1.0), net.forward(x, -1.0)
    assert not np.array_equal(a[0].data, b[0].data)
    plain = build(small(use_spe=False), 0)
    a, b = plain.forward(x, 1.0), plain.forward(x, -1.0)
    assert np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1].data, b[1].data)


def test_mga_ablation_only_touches_reconstruction(rng):
    x = rng.random((1, 1, 16, 16, 16)).astype(np.float32)
    with_mga, without = build(small(), 3), build(small(use_mga=False), 3)
    s1, r1 = with_mga.forward(x)
    s0, r0 = without.forward(x)
    assert np.array_equal(s1.data, s0.data)
    assert not np.array_equal(r1.data, r0.data)
    loss = T.add(T.mse(s1, T.Tensor(np.zeros_like(s1.data))), T.mse(r1, T.Tensor(x)))
    loss.backward()
    mask_side = T.mse(with_mga.forward(x)[0], T.Tensor(np.zeros_like(s1.data)))
    with_mga.zero_grad()
    mask_side.backward()
    for name, p in with_mga.named_parameters():
        if name.startswith("mga.") or name.startswith("recon."):
            assert p.grad is None or not np.any(p.grad)


def test_mga_pooling_matches_shape(rng):
    x = rng.random((1, 1, 16, 16, 16)).astype(np.float32)
    s, r = build(small(mga_pool=2), 0).forward(x)
    assert r.shape == (1, 1, 16, 16, 16)


def test_every_parameter_receives_gradient(rng):
    net = build(small(dtype="float64"), 1)
    x = rng.random((2, 1, 16, 16, 16))
    s, r = net.forward(x, np.array([1.0, -1.0]))
    T.add(T.mse(s, T.Tensor(rng.standard_normal(s.shape))), T.mse(r, T.Tensor(x))).backward()
    dead = [n for n, p in net.named_parameters() if p.grad is None or np.linalg.norm(p.grad) == 0]
    assert dead == []


def test_network_gradcheck_on_a_few_weights(rng):
    net = build(ModelConfig(input_side=8, width=0.25, heads=1, head_dim=2, dtype="float64"), 2)
    x = rng.random((1, 1, 8, 8, 8))
    target = rng.standard_normal((1, 1, 8, 8, 8))
    names = ["mga.q.weight", "att.qkv.bias", "recon.last.bias", "enc1.bias"]

    def fn(*ws):
        for name, w in zip(names, ws):
            net.params[name] = w
        s, r = net.forward(x)
        return T.add(T.mse(s, T.Tensor(target)), T.mse(r, T.Tensor(x)))

    # small step: a 1e-4 nudge of an early bias pushes some ReLU inputs across zero
    assert T.gradcheck(fn, [net.params[n] for n in names], h=1e-6) <= 1e-4


def test_checkpoint_round_trip(tmp_path, rng):
    net = build(small(), 9)
    save_checkpoint(net, tmp_path / "a", step=3, history=[{"total": 1.0}])
    save_checkpoint(net, tmp_path / "b", step=3, history=[{"total": 1.0}])
    for f in ("manifest.json", "params.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    loaded, manifest = load_checkpoint(tmp_path / "a")
    assert manifest["step"] == 3 and manifest["seed"] == 9
    assert loaded.checksum() == net.checksum()
    x = rng.random((1, 1, 16, 16, 16)).astype(np.float32)
    assert np.array_equal(net.forward(x)[1].data, loaded.forward(x)[1].data)


def test_checkpoint_mismatch_rejected(tmp_path):
    import json

    save_checkpoint(build(small()), tmp_path / "c")
    m = json.loads((tmp_path / "c" / "manifest.json").read_text())
    m["config"]["width"] = 2.0
    (tmp_path / "c" / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(InvalidConfig):
        load_checkpoint(tmp_path / "c")
