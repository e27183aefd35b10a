import numpy as np
import pytest

from cnngruskip import data as D
from cnngruskip import model as M
from cnngruskip import tensor as T
from cnngruskip.model import ConfigError, ModelConfig
from cnngruskip.tensor import Tensor
from conftest import directional_check, tiny_config


def _inputs(cfg, rng, B=4):
    return rng.normal(size=(B, cfg.in_channels, cfg.window_len)), rng.normal(size=(B, cfg.n_periods))


def test_init_deterministic():
    a, _ = M.init_params(tiny_config(), seed=3)
    b, _ = M.init_params(tiny_config(), seed=3)
    c, _ = M.init_params(tiny_config(), seed=4)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a if "weight" in k or "W" in k)


def test_init_biases_zero_gammas_one():
    params, buffers = M.init_params(tiny_config(), seed=0)
    for k, p in params.items():
        leaf = k.rsplit(".", 1)[1]
        if leaf in ("bias", "b_z", "b_r", "b", "b_out", "b1", "b2", "beta"):
            assert np.all(p.data == 0), k
        if leaf in ("gamma", "gain"):
            assert np.all(p.data == 1), k


def test_init_variance_of_square_matrix():
    cfg = ModelConfig(n_encoder=1, n_decoder=0)
    params, _ = M.init_params(cfg, seed=0)
    w = params["transformer.enc.0.attn.W_q"].data
    assert w.shape == (128, 128)
    assert abs(w.var() / (2.0 / 256) - 1.0) < 0.2


def test_config_errors_list_every_field():
    with pytest.raises(ConfigError) as exc:
        ModelConfig(d_model=10, heads=3, dropout=1.5, horizons=(7,))
    msg = str(exc.value)
    for name in ("heads", "dropout", "horizons"):
        assert name in msg
    assert len(exc.value.errors) >= 3


def test_config_roundtrip_and_unknown_key():
    cfg = tiny_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError, match="bogus"):
        ModelConfig.from_dict({**cfg.to_dict(), "bogus": 1})


def test_window_below_extractor_minimum():
    with pytest.raises(ConfigError, match="window_len"):
        ModelConfig(window_len=6)


# -- head --------------------------------------------------------------------------
def _head(rng, d=4, h1=3, out=2, zero=False):
    f = np.zeros if zero else (lambda s: rng.normal(size=s))
    return {"head.fc1.weight": Tensor(f((d, h1))), "head.fc1.bias": Tensor(f(h1)),
            "head.fc2.weight": Tensor(f((h1, out))), "head.fc2.bias": Tensor(f(out))}


def test_head_classification_sums_to_one(rng):
    out = M.predict_head(Tensor(rng.normal(size=(5, 4))), _head(rng), "classification").data
    assert np.max(np.abs(out.sum(axis=1) - 1)) < 1e-12


def test_head_zero_weights(rng):
    assert np.all(M.predict_head(Tensor(rng.normal(size=(5, 4))), _head(rng, zero=True)).data == 0)


def test_head_scalar_oracle(rng):
    p = _head(rng)
    H = rng.normal(size=4)
    W1, b1, W2, b2 = (p[k].data for k in ("head.fc1.weight", "head.fc1.bias", "head.fc2.weight", "head.fc2.bias"))
    hidden = [max(0.0, sum(H[i] * W1[i, j] for i in range(4)) + b1[j]) for j in range(3)]
    want = [sum(hidden[j] * W2[j, o] for j in range(3)) + b2[o] for o in range(2)]
    np.testing.assert_allclose(M.predict_head(Tensor(H), p).data, want, atol=1e-12)


# -- forward and variants ---------------------------------------------------------------
def test_forward_shape_and_eval_determinism(rng):
    cfg = tiny_config(horizons=(10, 20))
    m = M.build_variant(cfg, "full", seed=0)
    x, s = _inputs(cfg, rng, 5)
    a = m.forward(x, s).data
    assert a.shape == (5, 2)
    assert a.tobytes() == m.forward(x, s).data.tobytes()


def test_full_variant_equals_model_forward(rng):
    cfg = tiny_config()
    m = M.build_variant(cfg, "full", seed=1)
    x, s = _inputs(cfg, rng)
    batch = D.WindowBatch(x, s, np.zeros((4, 1)), (10,))
    assert np.array_equal(M.model_forward(batch, cfg, m.params, m.buffers).data, m.forward(x, s).data)


def test_no_temporal_ignores_skip_context(rng):
    cfg = tiny_config()
    m = M.build_variant(cfg, "T", seed=0)
    x, s = _inputs(cfg, rng)
    assert np.array_equal(m.forward(x, s).data, m.forward(x, rng.normal(size=s.shape) * 100).data)
    assert not any(k.startswith("gru.") or k.startswith("skip_out.") for k in m.params)


def test_full_uses_skip_context(rng):
    cfg = tiny_config()
    m = M.build_variant(cfg, "full", seed=0)
    x, s = _inputs(cfg, rng)
    assert not np.allclose(m.forward(x, s).data, m.forward(x, s + 1.0).data)


def test_no_feature_has_no_extractor_and_uses_raw_window(rng):
    cfg = tiny_config()
    m = M.build_variant(cfg, "F", seed=0)
    assert not any(k.startswith("cnn.") for k in m.params) and not m.buffers
    x, s = _inputs(cfg, rng)
    x2 = x.copy()
    x2[:, :, -1] += 1.0
    assert not np.allclose(m.forward(x, s).data, m.forward(x2, s).data)


def test_no_prediction_is_single_affine(rng):
    m = M.build_variant(tiny_config(), "no_prediction", seed=0)
    assert {k for k in m.params if k.startswith("head.")} == {"head.out.weight", "head.out.bias"}


def test_ablated_components_get_no_gradient(rng):
    cfg = tiny_config()
    x, s = _inputs(cfg, rng)
    for variant in ("no_feature", "no_temporal"):
        m = M.build_variant(cfg, variant, seed=0)
        xi, si = Tensor(x, requires_grad=True), Tensor(s, requires_grad=True)
        T.backward(T.sum_(m.forward(xi, si, training=True)))
        if variant == "no_temporal":
            assert si.grad is None or np.all(si.grad == 0)
        assert all(p.grad is not None for p in m.params.values())


def test_unknown_variant():
    with pytest.raises(ValueError, match="unknown variant"):
        M.build_variant(tiny_config(), "X")


def test_parameter_counts_exact():
    for cfg in (tiny_config(), ModelConfig(), tiny_config(horizons=(10, 20), channels=("flow", "speed"))):
        for v in M.VARIANTS:
            assert M.build_variant(cfg, v).parameter_count() == M.parameter_count(cfg, v), (cfg, v)
        full = M.parameter_count(cfg, "full")
        assert full - M.parameter_count(cfg, "F") == M.extractor_parameter_count(cfg)


def test_parameter_count_manual_tiny():
    cfg = tiny_config()
    conv = (2 * 1 * 5 + 6) + 5 * (2 * 2 * 3 + 6)
    tokens = 8 * 8 + 8
    gru = 3 * (5 * 4 + 4) + 3 * (8 * 4 + 4) + (4 * 8 + 8)
    enc = 4 * 64 + (8 * 8 + 8 + 8 * 8 + 8) + 4 * 8
    dec = 8 + 8 * 64 + (8 * 8 + 8 + 8 * 8 + 8) + 6 * 8
    head = 8 * 8 + 8 + 8 * 1 + 1
    assert M.parameter_count(cfg) == conv + tokens + gru + enc + dec + head


def test_batch_mismatch_names_fields(rng):
    m = M.build_variant(tiny_config(), "full")
    with pytest.raises(ValueError, match="window_len"):
        m.forward(np.zeros((2, 1, 11)), np.zeros((2, 3)))
    with pytest.raises(ValueError, match="n_periods"):
        m.forward(np.zeros((2, 1, 10)), np.zeros((2, 4)))


def test_tiny_model_gradient(rng):
    cfg = tiny_config()
    m = M.build_variant(cfg, "full", seed=0)
    x, s = _inputs(cfg, rng)
    w = Tensor(rng.normal(size=(4, 1)))
    saved = {k: v.copy() for k, v in m.buffers.items()}

    def fn():
        for k, v in saved.items():
            m.buffers[k][...] = v
        return T.sum_(m.forward(x, s, training=True) * w)
    assert directional_check(fn, list(m.params.values()), np.random.default_rng(0)) < 1e-4


@pytest.mark.slow
def test_default_config_no_nan(rng):
    cfg = ModelConfig()
    m = M.build_variant(cfg, "full", seed=0)
    for _ in range(1000 // 64 + 1):
        x, s = _inputs(cfg, rng, 64)
        m.zero_grad()
        out = m.forward(x, s, training=True, rng=rng)
        T.backward(T.sum_(out))
        assert np.all(np.isfinite(out.data))
        assert all(np.all(np.isfinite(p.grad)) for p in m.params.values())


def test_token_count():
    cfg = tiny_config()
    # 2 channels x 4 positions after six stride-1 pools = 8 features -> one token, plus the skip token
    assert M.token_count(cfg) == 2
    assert M.token_count(cfg, "no_temporal") == 1
    assert M.token_count(ModelConfig()) == 6 + 1
