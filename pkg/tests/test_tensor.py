import math

import numpy as np
import pytest

from cnav import oracles
from cnav.tensor import (
    OptimConfig,
    ParamStore,
    Tape,
    TapeError,
    adamw_step,
    checkpoint_bytes,
    checkpoint_from_bytes,
    interpolate_params,
    load_checkpoint,
    lr_at,
    save_checkpoint,
)


def make_store(**arrays) -> ParamStore:
    store = ParamStore()
    for name, arr in arrays.items():
        store.add(name, arr)
    return store


def tape_loss(arrays, build):
    """Wrap a tape construction as a pure loss over a param dict."""

    def fn(params):
        store = make_store(**params)
        tape = Tape(store)
        return float(tape.value(build(tape)))

    analytic_store = make_store(**arrays)
    tape = Tape(analytic_store)
    node = build(tape)
    grads = tape.backward(node)
    numeric = oracles.fd_gradient(fn, arrays)
    return grads, numeric


def assert_grads_close(grads, numeric, rtol=1e-4):
    for name in numeric:
        a, n = grads[name], numeric[name]
        scale = np.maximum(np.abs(n), 1e-6)
        assert np.max(np.abs(a - n) / scale) < rtol, name


# ---------------------------------------------------------------------------
# Forward examples


def test_matmul_of_ones():
    store = make_store(a=np.ones((2, 3)), b=np.ones((3, 1)))
    tape = Tape(store)
    out = tape.value(tape.matmul(tape.param("a"), tape.param("b")))
    assert out.shape == (2, 1)
    assert np.array_equal(out, np.full((2, 1), 3.0))


def test_identity_chain():
    tape = Tape()
    x = tape.const(np.array([[1.5, -2.0]]))
    y = tape.scale(x, 1.0)
    assert np.array_equal(tape.value(y), np.array([[1.5, -2.0]]))


def test_softmax_xent_uniform_logits():
    tape = Tape()
    logits = tape.const(np.zeros((1, 6)))
    loss = tape.softmax_xent(logits, [2])
    assert float(tape.value(loss)) == pytest.approx(math.log(6.0), abs=1e-12)


def test_shape_mismatch_names_primitive():
    tape = Tape()
    a = tape.const(np.ones((2, 3)))
    b = tape.const(np.ones((4, 1)))
    with pytest.raises(TapeError, match="matmul"):
        tape.matmul(a, b)


# ---------------------------------------------------------------------------
# Backward examples


def test_backward_squared_product():
    # loss = sum((w*x)^2) with w=1, x=2 -> dL/dw = 2*w*x^2 = 8
    store = make_store(w=np.array([[1.0]]))
    tape = Tape(store)
    w = tape.param("w")
    x = tape.const(np.array([[2.0]]))
    loss = tape.sum(tape.power(tape.mul(w, x), 2))
    grads = tape.backward(loss)
    assert grads["w"][0, 0] == pytest.approx(8.0, abs=1e-12)


def test_untouched_parameter_gets_zero_grad():
    store = make_store(w=np.array([[1.0]]), unused=np.ones((2, 2)))
    tape = Tape(store)
    loss = tape.sum(tape.param("w"))
    grads = tape.backward(loss)
    assert np.array_equal(grads["unused"], np.zeros((2, 2)))


def test_backward_before_forward_errors():
    tape = Tape(make_store(w=np.ones((1, 1))))
    with pytest.raises(TapeError, match="before"):
        tape.backward(0)


def test_backward_requires_scalar():
    store = make_store(w=np.ones((2, 2)))
    tape = Tape(store)
    node = tape.scale(tape.param("w"), 2.0)
    with pytest.raises(TapeError, match="scalar"):
        tape.backward(node)


def test_three_layer_net_matches_finite_differences():
    rng = np.random.default_rng(7)
    arrays = {
        "w1": rng.standard_normal((5, 4)) * 0.6,
        "b1": rng.standard_normal(4) * 0.1,
        "w2": rng.standard_normal((4, 4)) * 0.6,
        "b2": rng.standard_normal(4) * 0.1,
        "w3": rng.standard_normal((4, 3)) * 0.6,
        "b3": rng.standard_normal(3) * 0.1,
    }
    x = rng.standard_normal((2, 5))

    def build(tape):
        h1 = tape.tanh(tape.affine(tape.const(x), tape.param("w1"), tape.param("b1")))
        h2 = tape.sigmoid(tape.affine(h1, tape.param("w2"), tape.param("b2")))
        logits = tape.affine(h2, tape.param("w3"), tape.param("b3"))
        return tape.softmax_xent(logits, [0, 2])

    grads, numeric = tape_loss(arrays, build)
    assert_grads_close(grads, numeric)


# ---------------------------------------------------------------------------
# Per-primitive gradient checks (finite-difference oracle)


PRIMITIVE_CASES = {}


def primitive_case(name):
    def deco(fn):
        PRIMITIVE_CASES[name] = fn
        return fn

    return deco


@primitive_case("matmul")
def _case_matmul(rng):
    arrays = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((4, 2))}
    return arrays, lambda t: t.sum(t.matmul(t.param("a"), t.param("b")))


@primitive_case("affine")
def _case_affine(rng):
    arrays = {
        "x": rng.standard_normal((3, 4)),
        "w": rng.standard_normal((4, 2)),
        "b": rng.standard_normal(2),
    }
    return arrays, lambda t: t.sum(t.affine(t.param("x"), t.param("w"), t.param("b")))


@primitive_case("add_sub_mul_scale")
def _case_elementwise(rng):
    arrays = {"a": rng.standard_normal((2, 3)), "b": rng.standard_normal((2, 3))}

    def build(t):
        s = t.add(t.param("a"), t.param("b"))
        d = t.sub(s, t.param("b"))
        m = t.mul(d, t.param("a"))
        return t.sum(t.scale(m, 0.7))

    return arrays, build


@primitive_case("tanh_sigmoid_power")
def _case_nonlin(rng):
    arrays = {"a": rng.standard_normal((2, 3)) * 0.5 + 2.0}

    def build(t):
        x = t.tanh(t.param("a"))
        y = t.sigmoid(t.param("a"))
        z = t.power(t.param("a"), 1.7)
        return t.sum(t.add(t.add(x, y), z))

    return arrays, build


@primitive_case("concat_slice")
def _case_concat(rng):
    arrays = {"a": rng.standard_normal((3, 2)), "b": rng.standard_normal((3, 3))}

    def build(t):
        cat = t.concat([t.param("a"), t.param("b")])
        part = t.slice_cols(cat, 1, 4)
        return t.sum(t.mul(part, part))

    return arrays, build


@primitive_case("softmax_xent_weighted")
def _case_xent(rng):
    arrays = {"logits": rng.standard_normal((4, 6))}
    labels = [0, 5, 2, 2]
    weights = [1.0, 4.48, 1.0, 2.0]
    return arrays, lambda t: t.softmax_xent(t.param("logits"), labels, weights)


@primitive_case("kl_softmax")
def _case_kl(rng):
    arrays = {"logits": rng.standard_normal((3, 5))}
    raw = rng.random((3, 5)) + 0.1
    target = raw / raw.sum(axis=1, keepdims=True)
    return arrays, lambda t: t.kl_softmax(t.param("logits"), target)


@primitive_case("sq_diff_sum")
def _case_sqdiff(rng):
    arrays = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((3, 4))}
    return arrays, lambda t: t.sq_diff_sum(t.param("a"), t.param("b"))


@primitive_case("rownorm_sum")
def _case_rownorm(rng):
    arrays = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((3, 4))}
    return arrays, lambda t: t.rownorm_sum(t.param("a"), t.param("b"))


@primitive_case("gru_sequence")
def _case_gru(rng):
    d, H, L = 5, 4, 6
    arrays = {
        "f": rng.standard_normal((L, d)),
        "w": rng.standard_normal((d, 3 * H)) * 0.4,
        "u": rng.standard_normal((H, 3 * H)) * 0.4,
        "b": rng.standard_normal(3 * H) * 0.1,
    }
    return arrays, lambda t: t.sum(
        t.gru_sequence(t.param("f"), t.param("w"), t.param("u"), t.param("b"))
    )


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients(name):
    rng = np.random.default_rng(hash(name) % (2**32))
    arrays, build = PRIMITIVE_CASES[name](rng)
    grads, numeric = tape_loss(arrays, build)
    assert_grads_close(grads, numeric)


def test_rownorm_gradient_zero_at_zero_rows():
    store = make_store(a=np.zeros((2, 3)))
    tape = Tape(store)
    loss = tape.rownorm_sum(tape.param("a"), tape.const(np.zeros((2, 3))))
    grads = tape.backward(loss)
    assert np.array_equal(grads["a"], np.zeros((2, 3)))


# ---------------------------------------------------------------------------
# Optimizer


def test_lr_schedule_endpoints_and_shape():
    cfg = OptimConfig(base_lr=0.1, warmup_steps=10, total_steps=50)
    assert lr_at(cfg, 10) == pytest.approx(0.1)
    assert lr_at(cfg, 50) == 0.0
    assert lr_at(cfg, 60) == 0.0
    values = [lr_at(cfg, s) for s in range(1, 51)]
    assert max(values) == pytest.approx(0.1)
    assert values.index(max(values)) == 9  # peak exactly at warmup
    assert all(v >= 0 for v in values)
    # piecewise linear: constant second differences on each side
    warm = np.diff(values[:10])
    decay = np.diff(values[10:])
    assert np.allclose(warm, warm[0])
    assert np.allclose(decay, decay[0])


def test_adamw_two_step_recurrence_by_hand():
    cfg = OptimConfig(
        base_lr=0.1, warmup_steps=0, total_steps=1000, weight_decay=0.0,
        beta1=0.9, beta2=0.999, epsilon=1e-8,
    )
    store = make_store(p=np.array([0.5]))
    p = 0.5
    m = v = 0.0
    for step in (1, 2):
        adamw_step(store, {"p": np.array([1.0])}, cfg, step)
        lr = lr_at(cfg, step)
        m = 0.9 * m + 0.1 * 1.0
        v = 0.999 * v + 0.001 * 1.0
        mhat = m / (1 - 0.9**step)
        vhat = v / (1 - 0.999**step)
        p -= lr * mhat / (math.sqrt(vhat) + 1e-8)
        assert store["p"][0] == pytest.approx(p, abs=1e-15)


def test_adamw_missing_gradient_key_errors():
    cfg = OptimConfig()
    store = make_store(a=np.ones(2), b=np.ones(2))
    with pytest.raises(KeyError):
        adamw_step(store, {"a": np.zeros(2)}, cfg, 1)


def test_adamw_determinism():
    def run():
        rng = np.random.default_rng(3)
        store = make_store(w=rng.standard_normal((4, 4)))
        cfg = OptimConfig(base_lr=0.05, warmup_steps=2, total_steps=20)
        for step in range(1, 11):
            g = np.full((4, 4), 0.1 * step)
            adamw_step(store, {"w": g}, cfg, step)
        return store["w"].copy()

    assert np.array_equal(run(), run())


# ---------------------------------------------------------------------------
# Interpolation


def test_interpolate_endpoints_and_midpoint():
    a = make_store(x=np.array([2.0]))
    b = make_store(x=np.array([-2.0]))
    assert interpolate_params(a, b, 1.0)["x"][0] == 2.0
    assert interpolate_params(a, b, 0.0)["x"][0] == -2.0
    assert interpolate_params(a, b, 0.7)["x"][0] == pytest.approx(0.8)


def test_interpolate_resets_moments():
    a = make_store(x=np.ones(3))
    adamw_step(a, {"x": np.ones(3)}, OptimConfig(), 1)
    b = make_store(x=np.zeros(3))
    out = interpolate_params(a, b, 0.5)
    assert np.array_equal(out.m["x"], np.zeros(3))
    assert out.steps["x"] == 0


def test_interpolate_mismatch_errors():
    a = make_store(x=np.ones(3))
    b = make_store(y=np.ones(3))
    with pytest.raises(ValueError):
        interpolate_params(a, b, 0.5)


# ---------------------------------------------------------------------------
# Serialization


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(11)
    store = make_store(
        **{
            "encoder.proj_visual.weight": rng.standard_normal((8, 4)),
            "policy.head.bias": rng.standard_normal(6),
        }
    )
    manifest, blob = checkpoint_bytes(store)
    again = checkpoint_from_bytes(manifest, blob)
    assert again.names() == store.names()
    for name in store.names():
        assert np.array_equal(again[name], store[name])
        assert again[name].dtype == np.float64

    save_checkpoint(store, tmp_path / "ckpt")
    loaded = load_checkpoint(tmp_path / "ckpt")
    for name in store.names():
        assert np.array_equal(loaded[name], store[name])


def test_checkpoint_version_mismatch():
    store = make_store(x=np.ones(2))
    manifest, blob = checkpoint_bytes(store)
    bad = manifest.replace(b"cnav-ckpt-v1", b"cnav-ckpt-v9")
    with pytest.raises(ValueError, match="version"):
        checkpoint_from_bytes(bad, blob)
