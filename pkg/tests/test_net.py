import math

import numpy as np
import pytest

from gaborlens.features import FeatureMatrix
from gaborlens.net import (
    ARCHITECTURES,
    ConvShape,
    ModelWeights,
    NetworkSpec,
    SpecError,
    StateError,
    TrainConfig,
    apply_update,
    conv_backward,
    conv_forward,
    dense_softmax_xent,
    from_sequence,
    grad_check,
    init_optimizer,
    init_weights,
    load_checkpoint,
    lstm_backward,
    lstm_forward,
    make_spec,
    param_shapes,
    predict,
    predict_proba,
    save_checkpoint,
    tiny_spec,
    to_sequence,
    train,
    write_history,
)


def naive_conv(x, K, b, stride):
    """Quadruple-loop valid cross-correlation + ReLU."""
    C, H, W = x.shape
    F, _, kh, kw = K.shape
    sh, sw = stride
    Ho, Wo = (H - kh) // sh + 1, (W - kw) // sw + 1
    out = np.zeros((F, Ho, Wo))
    for f in range(F):
        for r in range(Ho):
            for q in range(Wo):
                acc = b[f]
                for c in range(C):
                    for a in range(kh):
                        for d in range(kw):
                            acc += K[f, c, a, d] * x[c, r * sh + a, q * sw + d]
                out[f, r, q] = max(acc, 0.0)
    return out


def fd_grad(f, w, step=1e-5):
    g = np.zeros_like(w)
    flat, gf = w.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        lp = f()
        flat[i] = old - step
        lm = f()
        flat[i] = old
        gf[i] = (lp - lm) / (2 * step)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


# -------------------------------------------------------------- make_spec

def test_spec_j1_n11():
    s = make_spec("OneD_LSTM", 1, 11)
    assert (s.input_h, s.input_w) == (4, 2048)
    assert (s.conv1d.filter_h, s.conv1d.filter_w, s.conv1d.stride_h, s.conv1d.stride_w) == (1, 64, 1, 32)
    assert s.conv1d.n_filters == 64 and s.lstm_units == 64 and s.n_classes == 5


def test_spec_j7_n11():
    s = make_spec("OneD_LSTM", 7, 11)
    assert (s.conv1d.filter_h, s.conv1d.filter_w, s.conv1d.stride_h, s.conv1d.stride_w) == (8, 1, 4, 1)


def test_spec_infeasible():
    with pytest.raises(SpecError, match="conv1d"):
        make_spec("OneD_LSTM", 5, 6)
    with pytest.raises(SpecError):
        make_spec("OneD_LSTM", 11, 11)
    with pytest.raises(SpecError, match="conv1d"):
        NetworkSpec("OneD_LSTM", 1, 3, 4, 8, ConvShape(1, 9, 1, 1, 2))
    with pytest.raises(SpecError, match="conv2d"):
        NetworkSpec("OneD_TwoD_LSTM", 1, 3, 4, 8, ConvShape(1, 3, 1, 1, 2), ConvShape(5, 1, 1, 1, 2))


@pytest.mark.parametrize("arch", ARCHITECTURES)
@pytest.mark.parametrize("j", range(1, 11))
def test_spec_table_rules_n11(arch, j):
    s = make_spec(arch, j, 11)
    c1 = s.conv1d
    if j <= 5:
        assert (c1.filter_h, c1.filter_w, c1.stride_h, c1.stride_w) == (1, 2 ** (7 - j), 1, 2 ** (6 - j))
    else:
        assert (c1.filter_h, c1.filter_w, c1.stride_h, c1.stride_w) == (2 ** (j - 4), 1, 2 ** (j - 5), 1)
    h1 = (s.input_h - c1.filter_h) // c1.stride_h + 1
    w1 = (s.input_w - c1.filter_w) // c1.stride_w + 1
    assert s.conv1d_out == (h1, w1) and h1 >= 1 and w1 >= 1
    if arch == "OneD_TwoD_LSTM":
        c2 = s.conv2d
        lg = math.ceil(math.log2(j))
        if j <= 5:
            assert (c2.filter_h, c2.filter_w, c2.stride_w) == (lg + 1, 2 ** (6 - j), 2 ** (5 - j))
            assert c2.stride_h == max(lg, 1)
        else:
            assert (c2.filter_h, c2.filter_w, c2.stride_h, c2.stride_w) == (2 ** (j - 5), 7 - lg, 2 ** (j - 6), 6 - lg)
        _, h2, w2 = s.conv_out
        assert (h2, w2) == ((h1 - c2.filter_h) // c2.stride_h + 1, (w1 - c2.filter_w) // c2.stride_w + 1)
        assert h2 >= 1 and w2 >= 1


def test_spec_smaller_n_keeps_window_count():
    for N in (9, 10, 11):
        assert make_spec("OneD_LSTM", 1, N).conv1d_out == (4, 63)


# ------------------------------------------------------------------- conv

def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((1, 3, 5))
    out, _ = conv_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1), (1, 1))
    np.testing.assert_array_equal(out, np.maximum(x, 0))


def test_conv_hand_example():
    out, cache = conv_forward(np.array([[1.0, 2.0, 3.0, 4.0]]), np.array([[1.0, 0.0, -1.0]]), 0.0, (1, 1))
    np.testing.assert_array_equal(cache.pre.ravel(), [-2.0, -2.0])
    np.testing.assert_array_equal(out, [[0.0, 0.0]])


@pytest.mark.parametrize("stride", [(1, 1), (2, 1), (1, 3), (2, 2)])
def test_conv_matches_naive(stride):
    rng = np.random.default_rng(sum(stride))
    x = rng.standard_normal((3, 7, 9))
    K = rng.standard_normal((4, 3, 2, 3))
    b = rng.standard_normal(4)
    out, _ = conv_forward(x, K, b, stride)
    np.testing.assert_allclose(out, naive_conv(x, K, b, stride), atol=1e-10)


def test_conv_backward_finite_differences():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 3, 5))
    K = rng.standard_normal((2, 1, 2, 2))
    b = rng.standard_normal(2)
    up = rng.standard_normal(conv_forward(x, K, b, (1, 2))[0].shape)

    def f():
        return float(np.sum(conv_forward(x, K, b, (1, 2))[0] * up))

    out, cache = conv_forward(x, K, b, (1, 2))
    dx, dK, db = conv_backward(up, cache, K)
    assert rel_err(dx, fd_grad(f, x)) <= 1e-4
    assert rel_err(dK, fd_grad(f, K)) <= 1e-4
    assert rel_err(db, fd_grad(f, b)) <= 1e-4


def test_conv_backward_zero_and_dead_units():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 3, 5))
    K = rng.standard_normal((2, 1, 1, 2))
    out, cache = conv_forward(x, K, np.full(2, -100.0), (1, 1))
    assert not out.any()
    dx, dK, db = conv_backward(np.ones_like(out), cache, K)
    assert not dx.any() and not dK.any() and not db.any()
    out, cache = conv_forward(x, K, np.zeros(2), (1, 1))
    dx, dK, db = conv_backward(np.zeros_like(out), cache, K)
    assert not dx.any() and not dK.any() and not db.any()


def test_conv_backward_requires_cache():
    with pytest.raises(StateError):
        conv_backward(np.zeros((1, 1, 1)), None, np.zeros((1, 1, 1, 1)))


def test_conv_shape_mismatch():
    with pytest.raises(ValueError):
        conv_forward(np.zeros((2, 3, 3)), np.zeros((1, 1, 2, 2)), np.zeros(1), (1, 1))


# --------------------------------------------------------------- sequence

def test_to_sequence_degenerate():
    t = np.arange(5.0).reshape(1, 1, 5)
    s = to_sequence(t)
    assert s.shape == (5, 1)
    np.testing.assert_array_equal(s[:, 0], np.arange(5.0))


def test_to_sequence_index_map():
    t = np.arange(24.0).reshape(2, 3, 4)
    s = to_sequence(t)
    assert s.shape == (4, 6)
    for q in range(4):
        np.testing.assert_array_equal(s[q], np.concatenate([t[0, :, q], t[1, :, q]]))


@pytest.mark.parametrize("mode", ["width", "flat"])
def test_sequence_roundtrip(mode):
    t = np.random.default_rng(0).standard_normal((3, 2, 3, 4))
    np.testing.assert_array_equal(from_sequence(to_sequence(t, mode), (2, 3, 4), mode), t)


# ------------------------------------------------------------------- lstm

def _lstm_weights(rng, F, U, scale=0.5):
    return (scale * rng.standard_normal((4 * U, F)), scale * rng.standard_normal((4 * U, U)),
            scale * rng.standard_normal(4 * U))


def test_lstm_zero_weights():
    h, _ = lstm_forward(np.ones((6, 3)), np.zeros((8, 3)), np.zeros((8, 2)), np.zeros(8))
    np.testing.assert_array_equal(h, 0.0)


def test_lstm_single_step_formula():
    rng = np.random.default_rng(3)
    W, R, b = _lstm_weights(rng, 3, 2)
    x = rng.standard_normal(3)
    sig = lambda v: 1 / (1 + np.exp(-v))
    a = W @ x + b
    i, f, g, o = sig(a[0:2]), sig(a[2:4]), np.tanh(a[4:6]), sig(a[6:8])
    expected = o * np.tanh(i * g)
    h, _ = lstm_forward(x[None], W, R, b)
    np.testing.assert_allclose(h, expected, atol=1e-14)


def test_lstm_pure():
    rng = np.random.default_rng(4)
    W, R, b = _lstm_weights(rng, 3, 5)
    s = rng.standard_normal((4, 3))
    assert lstm_forward(s, W, R, b)[0].tobytes() == lstm_forward(s, W, R, b)[0].tobytes()


def test_lstm_backward_finite_differences():
    rng = np.random.default_rng(5)
    T, F, U = 4, 3, 5
    W, R, b = _lstm_weights(rng, F, U)
    s = rng.standard_normal((T, F))
    up = rng.standard_normal(U)

    def f():
        return float(lstm_forward(s, W, R, b)[0] @ up)

    _, cache = lstm_forward(s, W, R, b)
    dS, dW, dR, db = lstm_backward(up, cache, W, R)
    for analytic, param in ((dS[0], s), (dW, W), (dR, R), (db, b)):
        assert rel_err(analytic, fd_grad(f, param)) <= 1e-4


def test_lstm_backward_zero_and_credit():
    rng = np.random.default_rng(6)
    W, R, b = _lstm_weights(rng, 3, 5)
    s = rng.standard_normal((4, 3))
    _, cache = lstm_forward(s, W, R, b)
    grads = lstm_backward(np.zeros(5), cache, W, R)
    assert all(not g.any() for g in grads)
    dS = lstm_backward(np.ones(5), cache, W, R)[0][0]
    assert np.any(dS[-1] != 0) and np.any(dS[0] != 0)
    with pytest.raises(StateError):
        lstm_backward(np.ones(5), None, W, R)


def test_lstm_shape_mismatch():
    with pytest.raises(ValueError):
        lstm_forward(np.ones((2, 4)), np.zeros((8, 3)), np.zeros((8, 2)), np.zeros(8))


# ------------------------------------------------------------------ dense

def test_softmax_uniform_and_stable():
    loss, p, _ = dense_softmax_xent(np.zeros(3), np.zeros((5, 3)), np.zeros(5), 2)
    np.testing.assert_allclose(p, 0.2)
    assert loss == pytest.approx(math.log(5), abs=1e-12)
    loss, p, _ = dense_softmax_xent(np.ones(1), np.zeros((5, 1)), np.array([1000.0, 0, 0, 0, 0]), 0)
    assert np.all(np.isfinite(p)) and p[0] == pytest.approx(1.0) and abs(p.sum() - 1) <= 1e-12
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_dense_finite_differences():
    rng = np.random.default_rng(7)
    h = rng.standard_normal((3, 4))
    Wd, bd = rng.standard_normal((5, 4)), rng.standard_normal(5)
    y = np.array([0, 3, 4])
    _, p, (dh, dW, db) = dense_softmax_xent(h, Wd, bd, y)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(p > 0)
    f = lambda: dense_softmax_xent(h, Wd, bd, y)[0]
    assert rel_err(dW, fd_grad(f, Wd)) <= 1e-4
    assert rel_err(db, fd_grad(f, bd)) <= 1e-4
    assert rel_err(dh, fd_grad(f, h)) <= 1e-4


# ------------------------------------------------------------- grad check

@pytest.mark.parametrize("arch", ARCHITECTURES)
@pytest.mark.parametrize("mode", ["width", "flat"])
def test_grad_check_passes(arch, mode):
    r = grad_check(tiny_spec(arch, mode), seed=0)
    assert r.passed and r.max_rel_error <= 1e-4
    assert set(r.per_tensor) == set(param_shapes(tiny_spec(arch, mode)))


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_grad_check_detects_wrong_backward(arch):
    assert not grad_check(tiny_spec(arch), seed=0, drop_recurrent=True).passed


# ------------------------------------------------------------- optimizers

def test_adam_first_step_closed_form():
    rng = np.random.default_rng(8)
    spec = tiny_spec("OneD_LSTM")
    w0 = init_weights(spec, 1)
    w = w0.copy()
    grads = {k: rng.standard_normal(v.shape) for k, v in w.params.items()}
    cfg = TrainConfig(optimizer="ADAM", learning_rate=0.01)
    apply_update(cfg, w, init_optimizer(cfg, w), grads)
    for k in w.params:
        g = grads[k]
        np.testing.assert_allclose(w.params[k] - w0.params[k], -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12, atol=1e-15)


def test_sgdm_two_steps():
    spec = tiny_spec("OneD_LSTM")
    w0 = init_weights(spec, 1)
    w = w0.copy()
    g = {k: np.ones_like(v) for k, v in w.params.items()}
    cfg = TrainConfig(optimizer="SGDM")
    st = init_optimizer(cfg, w)
    apply_update(cfg, w, st, g)
    apply_update(cfg, w, st, g)
    # v1 = -0.1, v2 = 0.5 * -0.1 - 0.1 = -0.15
    for k in w.params:
        np.testing.assert_allclose(w.params[k] - w0.params[k], -0.25, atol=1e-12)


def test_train_config_defaults_and_validation():
    assert TrainConfig(optimizer="SGDM").lr == 0.1 and TrainConfig(optimizer="ADAM").lr == 0.001
    c = TrainConfig()
    assert (c.momentum, c.beta1, c.beta2, c.epsilon, c.batch_size, c.max_epochs) == (0.5, 0.9, 0.999, 1e-8, 150, 100)
    for kw in ({"optimizer": "RMS"}, {"learning_rate": -1.0}, {"momentum": 1.0}, {"beta2": -0.1}):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


def test_init_scheme():
    spec = make_spec("OneD_TwoD_LSTM", 1, 9)
    w = init_weights(spec, 3)
    U = spec.lstm_units
    np.testing.assert_array_equal(w.params["lstm.b"][U:2 * U], 1.0)
    assert not w.params["lstm.b"][:U].any() and not w.params["conv1d.bias"].any()
    lim = math.sqrt(6 / 16)
    assert np.abs(w.params["conv1d.kernel"]).max() <= lim
    assert {k: v.shape for k, v in w.params.items()} == param_shapes(spec)


# ---------------------------------------------------------------- training

def _toy_set(spec, per_class, seed):
    """Class c lights up frequency row c % H with noise."""
    rng = np.random.default_rng(seed)
    data = []
    for c in range(5):
        for _ in range(per_class):
            m = 0.05 * rng.random((spec.input_h, spec.input_w))
            m[c % spec.input_h, (c * spec.input_w) // 5:((c + 1) * spec.input_w) // 5] += 0.3
            data.append((FeatureMatrix(m, spec.j, spec.N), c))
    return data


def test_train_deterministic():
    spec = make_spec("OneD_TwoD_LSTM", 1, 9)
    data = _toy_set(spec, 2, 0)
    cfg = TrainConfig(max_epochs=3, batch_size=4, seed=42)
    w1, h1, _ = train(data, spec, cfg)
    w2, h2, _ = train(data, spec, cfg)
    assert all(w1.params[k].tobytes() == w2.params[k].tobytes() for k in w1.params)
    assert [r.loss for r in h1] == [r.loss for r in h2]


def test_overfit_one_per_class():
    spec = make_spec("OneD_TwoD_LSTM", 1, 9)
    data = _toy_set(spec, 1, 1)
    w, hist, _ = train(data, spec, TrainConfig(optimizer="ADAM", max_epochs=100, seed=0))
    assert hist[-1].train_accuracy == 1.0
    assert [predict(w, spec, m)[0] for m, _ in data] == [0, 1, 2, 3, 4]


@pytest.mark.parametrize("opt", ["SGDM", "ADAM"])
def test_first_epoch_descends(opt):
    spec = make_spec("OneD_LSTM", 1, 9)
    data = _toy_set(spec, 4, 2)
    _, hist, _ = train(data, spec, TrainConfig(optimizer=opt, max_epochs=1, batch_size=5, seed=3))
    assert hist[1].loss < hist[0].loss


def test_train_rejects_mismatched_shapes():
    spec = make_spec("OneD_LSTM", 1, 9)
    with pytest.raises(ValueError, match="j=2"):
        train([(FeatureMatrix(np.zeros((8, 256)), 2, 9), 0)], spec, TrainConfig(max_epochs=1))


def test_predict_zero_dense_ties_low():
    spec = tiny_spec("OneD_LSTM")
    w = init_weights(spec, 0)
    w.params["dense.W"][:] = 0
    m = np.random.default_rng(0).random((4, 8))
    label, p = predict(w, spec, m)
    assert label == 0
    np.testing.assert_allclose(p, 0.2)
    assert predict(w, spec, m)[1].tobytes() == p.tobytes()


def test_checkpoint_roundtrip(tmp_path):
    spec = make_spec("OneD_TwoD_LSTM", 1, 9)
    data = _toy_set(spec, 1, 0)
    cfg = TrainConfig(max_epochs=2, seed=1)
    w, hist, st = train(data, spec, cfg)
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, spec, w, st)
    spec2, w2, st2 = load_checkpoint(p)
    assert spec2 == spec and st2.kind == "ADAM" and st2.step == st.step
    for k in w.params:
        np.testing.assert_array_equal(w2.params[k], w.params[k].astype(np.float32))
        for a, b in zip(st.slots[k], st2.slots[k]):
            np.testing.assert_array_equal(b, a.astype(np.float32))
    raw = p.read_bytes()
    assert raw[:6] == b"GLCKPT"
    save_checkpoint(tmp_path / "n.ckpt", spec, w)
    assert load_checkpoint(tmp_path / "n.ckpt")[2] is None
    np.testing.assert_allclose(predict_proba(spec2, w2, data[0][0].values[None]),
                               predict_proba(spec, w, data[0][0].values[None]), atol=1e-5)


def test_checkpoint_bad_version(tmp_path):
    spec = tiny_spec("OneD_LSTM")
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, spec, init_weights(spec, 0))
    raw = bytearray(p.read_bytes())
    raw[6] = 99
    p.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(p)


def test_history_csv(tmp_path):
    spec = tiny_spec("OneD_LSTM")
    data = [(np.random.default_rng(i).random((4, 8)), i) for i in range(5)]
    _, hist, _ = train(data, spec, TrainConfig(max_epochs=2, seed=0))
    write_history(tmp_path / "h.csv", hist, ["seed=0"])
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "# seed=0" and lines[1] == "epoch,loss,train_accuracy,wall_ms"
    assert len(lines) == 2 + 3 and lines[2].endswith(",")
    _, timed, _ = train(data, spec, TrainConfig(max_epochs=1, seed=0, record_time=True))
    assert timed[-1].wall_ms is not None
