"""Transformer wiring: parameter accounting, forward contracts, gradients."""

import numpy as np
import pytest

import tryondit.numerics as nx
from tryondit import rng
from tryondit.model import ModelConfig, ToyDiT, init_params, param_count, parity_of_layer

from conftest import agree

TINY = ModelConfig(image_size=8, dim=16, heads=2, depth=2, window_size=2,
                   text_vocab=8, text_len=2)


def livened(cfg, seed=0, std=0.05):
    """Init, then randomize the zero-initialized surfaces (modulation and
    final head) so the velocity field actually responds to its inputs."""
    m = ToyDiT.init(cfg, seed)
    names = ["final.w", "final.b"] + [f"block{i}.mod.w" for i in range(cfg.depth)]
    for name in names:
        t = m.params[name]
        t.data[...] = rng.truncated_normal(rng.stream(seed, "liven", name),
                                           t.shape, std=std, dtype=t.data.dtype)
    return m


def batch_inputs(cfg, seed=0, b=2, n_conds=1):
    g = np.random.default_rng(seed)
    s = cfg.image_size
    x = g.standard_normal((b, cfg.channels, s, s))
    conds = [g.standard_normal((b, cfg.channels, s, s)) for _ in range(n_conds)]
    ids = g.integers(0, cfg.text_vocab, size=(b, cfg.text_len))
    t = g.uniform(0.1, 0.9, size=b)
    return x, t, conds, ids


def test_config_validation():
    with pytest.raises(ValueError, match="does not divide"):
        ModelConfig(image_size=15)
    with pytest.raises(ValueError, match="do not divide"):
        ModelConfig(dim=30, heads=4)
    with pytest.raises(ValueError, match="even"):
        ModelConfig(depth=3)
    with pytest.raises(ValueError, match="head_dim"):
        ModelConfig(dim=8, heads=4)  # head_dim 2 is too small to split


def test_parity_alternates_every_two_layers():
    assert [parity_of_layer(i) for i in range(8)] == [
        "regular", "regular", "shifted", "shifted",
        "regular", "regular", "shifted", "shifted",
    ]


def test_param_count_matches_closed_form():
    for cfg in (ModelConfig(), TINY,
                ModelConfig(image_size=8, dim=24, heads=2, depth=6, mlp_ratio=2,
                            window_size=2)):
        assert ToyDiT.init(cfg, seed=0).param_count() == param_count(cfg)


def test_param_count_scaling_identities():
    base = dict(image_size=8, dim=16, heads=2, window_size=2)
    p2 = param_count(ModelConfig(depth=2, **base))
    p4 = param_count(ModelConfig(depth=4, **base))
    p6 = param_count(ModelConfig(depth=6, **base))
    assert p6 - p4 == p4 - p2  # per-block cost is depth-independent
    v32 = param_count(ModelConfig(text_vocab=32, **base))
    v33 = param_count(ModelConfig(text_vocab=33, **base))
    assert v33 - v32 == 16  # one vocab row costs dim


def test_zero_init_velocity_is_exactly_zero():
    m = ToyDiT.init(TINY, seed=0)
    x, t, conds, ids = batch_inputs(TINY, seed=1)
    v = m.forward_batch(x, t, conds, ids)
    assert np.array_equal(v.data, np.zeros_like(v.data))


def test_seeded_init_reproducible():
    a = init_params(TINY, seed=5)
    b = init_params(TINY, seed=5)
    c = init_params(TINY, seed=6)
    for name in a:
        assert np.array_equal(a[name].data, b[name].data)
    assert not np.array_equal(a["patch.w"].data, c["patch.w"].data)


def test_forward_bitwise_deterministic():
    m = livened(TINY, seed=2)
    x, t, conds, ids = batch_inputs(TINY, seed=3)
    va = m.forward_batch(x, t, conds, ids).data.copy()
    vb = m.forward_batch(x, t, conds, ids).data.copy()
    assert np.array_equal(va, vb)


def test_save_load_roundtrip(tmp_path):
    m = livened(TINY, seed=4)
    m.save(tmp_path / "ckpt")
    back = ToyDiT.load(tmp_path / "ckpt")
    assert back.config == m.config
    for name, t in m.params.items():
        assert np.array_equal(back.params[name].data, t.data)
    wide = ToyDiT.load(tmp_path / "ckpt", dtype="f64")
    assert wide.config.dtype == "f64"
    assert wide.params["patch.w"].data.dtype == np.float64
    assert np.array_equal(wide.params["patch.w"].data,
                          m.params["patch.w"].data.astype(np.float64))


def test_layer_table():
    cfg = ModelConfig(image_size=8, dim=16, heads=2, depth=4, window_size=2)
    m = ToyDiT.init(cfg, seed=0)
    rows = m.layer_table()
    assert [r["parity"] for r in rows] == ["regular", "regular", "shifted", "shifted"]
    assert len({r["params"] for r in rows}) == 1
    shallow = param_count(ModelConfig(image_size=8, dim=16, heads=2, depth=2,
                                      window_size=2))
    assert param_count(cfg) - shallow == 2 * rows[0]["params"]


def test_output_shape_across_task_layouts():
    m = livened(TINY, seed=1)
    s = TINY.image_size
    for n_conds in (1, 2):
        x, t, conds, ids = batch_inputs(TINY, seed=n_conds, n_conds=n_conds)
        v = m.forward_batch(x, t, conds, ids)
        assert v.shape == (2, 3, s, s)
    v, h = m.forward_batch(x, t, conds, ids, return_hidden=True)
    seq_len = TINY.text_len + 16 + 2 * 16
    assert h.shape == (2, seq_len, TINY.dim)


def test_inputs_are_live():
    m = livened(TINY, seed=7)
    x, t, conds, ids = batch_inputs(TINY, seed=8)
    v0 = m.forward_batch(x, t, conds, ids).data.copy()

    x2 = x.copy()
    x2[0, 0, 0, 0] += 1.0
    assert not np.array_equal(m.forward_batch(x2, t, conds, ids).data, v0)

    c2 = [conds[0].copy()]
    c2[0][0, 1, 3, 3] += 1.0
    assert not np.array_equal(m.forward_batch(x, t, c2, ids).data, v0)

    ids2 = ids.copy()
    ids2[0, 0] = (ids2[0, 0] + 1) % TINY.text_vocab
    assert not np.array_equal(m.forward_batch(x, t, conds, ids2).data, v0)

    t2 = t.copy()
    t2[0] = 0.95
    assert not np.array_equal(m.forward_batch(x, t2, conds, ids).data, v0)


def test_reference_hiddens_ignore_noisy_and_text_at_every_depth():
    cfg = ModelConfig(image_size=8, dim=16, heads=2, depth=4, window_size=2,
                      text_vocab=8, text_len=2)
    m = livened(cfg, seed=9)
    x, t, conds, ids = batch_inputs(cfg, seed=10)
    _, hs = m.forward_batch(x, t, conds, ids, return_hidden="all")
    assert len(hs) == cfg.depth

    x2 = x + np.random.default_rng(11).standard_normal(x.shape)
    ids2 = (ids + 3) % cfg.text_vocab
    _, hs2 = m.forward_batch(x2, t, conds, ids2, return_hidden="all")

    ref_start = cfg.text_len + 16  # text + noisy tokens precede references
    for d in range(cfg.depth):
        assert np.array_equal(hs[d].data[:, ref_start:, :],
                              hs2[d].data[:, ref_start:, :])
        assert not np.array_equal(hs[d].data[:, :ref_start, :],
                                  hs2[d].data[:, :ref_start, :])


def test_single_sample_forward_matches_batch():
    m = livened(TINY, seed=12)
    x, t, conds, ids = batch_inputs(TINY, seed=13)
    vb = m.forward_batch(x, t, conds, ids).data
    v0 = m.forward(x[0], float(t[0]), [c[0] for c in conds], ids[0]).data
    assert np.allclose(v0, vb[0], atol=1e-6)

    fn = m.velocity_fn([c[0] for c in conds], ids[0])
    assert np.array_equal(fn(x[0], float(t[0])).data, v0)


def test_forward_input_validation():
    m = ToyDiT.init(TINY, seed=0)
    x, t, conds, ids = batch_inputs(TINY, seed=1)
    with pytest.raises(nx.ShapeError, match="does not match config"):
        m.forward_batch(x[:, :, :4, :4], t, conds, ids)
    with pytest.raises(nx.ShapeError, match="text_ids shape"):
        m.forward_batch(x, t, conds, ids[:, :1])
    with pytest.raises(ValueError, match="outside vocabulary"):
        m.forward_batch(x, t, conds, np.full_like(ids, 99))
    with pytest.raises(ValueError, match="no conditioning"):
        cfg0 = ModelConfig(image_size=8, dim=16, heads=2, depth=2,
                           window_size=2, text_len=0)
        ToyDiT.init(cfg0, 0).forward_batch(x, t, [], None)


def test_end_to_end_gradients_match_finite_differences():
    cfg = ModelConfig(image_size=8, dim=8, heads=2, depth=2, window_size=2,
                      text_vocab=8, text_len=2, dtype="f64")
    m = livened(cfg, seed=3)
    g = np.random.default_rng(0)
    x = g.standard_normal((2, 3, 8, 8))
    cond = g.standard_normal((2, 3, 8, 8))
    ids = np.array([[1, 2], [3, 0]])
    t = np.array([0.3, 0.7])
    w = g.standard_normal((2, 3, 8, 8))

    def loss_value():
        v = m.forward_batch(x, t, [cond], ids)
        return float(np.sum(v.data * w))

    m.zero_grads()
    with nx.Graph():
        v = m.forward_batch(x, t, [cond], ids)
        nx.backward(nx.t_sum(nx.mul(v, nx.Tensor(w))))

    names = ["patch.w", "text.table", "time.w1", "block0.qkv.w", "block0.mod.w",
             "block0.attn_out.w", "block1.mlp.w2", "final.w", "final.b"]
    h = 1e-5
    for ni, name in enumerate(names):
        p = m.params[name]
        flat = p.data.reshape(-1)
        coords = np.random.default_rng(ni).choice(flat.size, size=3, replace=False)
        for j in coords:
            orig = flat[j]
            flat[j] = orig + h
            up = loss_value()
            flat[j] = orig - h
            dn = loss_value()
            flat[j] = orig
            fd = (up - dn) / (2.0 * h)
            agree(fd, float(p.grad.reshape(-1)[j]), 1e-4, f"{name}[{j}]")
