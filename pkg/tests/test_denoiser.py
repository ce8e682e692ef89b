import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY, tiny_data, tiny_params
from dpsapf.autodiff import Tape
from dpsapf.denoiser import (
    EMBED_ID,
    DenoiserConfig,
    DiffusionSchedule,
    MatrixId,
    _Weights,
    block_forward,
    fixed_buffers,
    forward_diffuse,
    init_params,
    loss,
    make_schedule,
    patchify,
    predict_noise,
    sample_batch,
    sample_images,
    sinusoid,
    unpatchify,
)
from gradcheck import worst_matrix_error
from oracles import alpha_bar_product

CFG = DenoiserConfig()


# -- ids and shapes -----------------------------------------------------------


def test_candidate_pool_is_the_24_qkv_matrices():
    ids = CFG.attention_ids()
    assert len(ids) == 24 and len(set(ids)) == 24
    assert all(m.role in "qkv" for m in ids)
    assert ids == sorted(ids)
    assert str(ids[0]) == "B0.self.q" and str(ids[5]) == "B0.cross.v" and str(ids[-1]) == "B3.cross.v"


def test_canonical_order_puts_extensions_after_attention():
    ids = CFG.all_ids()
    assert ids == sorted(ids)
    assert ids[:24] == CFG.attention_ids()
    assert ids[-1] == EMBED_ID
    assert [str(m) for m in ids[24:27]] == ["B0.proj.o", "B0.mlp.fc1", "B0.mlp.fc2"]


@pytest.mark.parametrize("text", ["B2.cross.k", "embed.class", "B0.mlp.fc2", "B3.proj.o"])
def test_matrix_id_round_trip(text):
    assert str(MatrixId.parse(text)) == text


def test_matrix_id_parse_rejects_garbage():
    with pytest.raises(ValueError):
        MatrixId.parse("attn.q")


def test_shapes():
    assert CFG.shape(MatrixId(0, "self", "q")) == (16, 16)
    assert CFG.shape(MatrixId(1, "cross", "k")) == (16, 16)
    assert CFG.shape(MatrixId(1, "mlp", "fc1")) == (16, 64)
    assert CFG.shape(MatrixId(1, "mlp", "fc2")) == (64, 16)
    assert CFG.shape(EMBED_ID) == (4, 16)


def test_patchify_round_trip():
    x = np.arange(2 * 64, dtype=float).reshape(2, 64)
    tokens = patchify(x, CFG)
    assert tokens.shape == (2, 16, 4)
    assert list(tokens[0, 0]) == [0, 1, 8, 9]
    np.testing.assert_array_equal(unpatchify(tokens, CFG), x)


def test_readout_inverts_embedding():
    buf = fixed_buffers(CFG)
    np.testing.assert_allclose(buf["embed"] @ buf["readout"], np.eye(4), atol=1e-12)


# -- schedule and forward process ---------------------------------------------


def test_schedule_two_steps():
    s = make_schedule(2)
    np.testing.assert_allclose(s.betas, [1e-4, 0.02])
    np.testing.assert_allclose(s.alpha_bars, [0.9999, 0.9999 * 0.98], rtol=1e-15)
    assert s.alpha_bar(1) == 1 - s.beta(1)


def test_schedule_fifty_steps_matches_product():
    s = make_schedule(50)
    betas = [1e-4 + i * (0.02 - 1e-4) / 49 for i in range(50)]
    np.testing.assert_allclose(s.alpha_bars, alpha_bar_product(betas), rtol=1e-13)
    assert s.alpha_bar(50) == pytest.approx(0.602951597329715, rel=1e-12)
    assert np.all(np.diff(s.alpha_bars) < 0)


@pytest.mark.parametrize("bad", [dict(T=1), dict(T=10, beta_start=0.0), dict(T=10, beta_end=1.0)])
def test_schedule_rejects(bad):
    with pytest.raises(ValueError):
        make_schedule(**bad)


def test_forward_diffuse_closed_form():
    s = make_schedule(50)
    x0 = np.linspace(-1, 1, 64)[None]
    np.testing.assert_allclose(forward_diffuse(s, x0, 10, np.zeros((1, 64))), math.sqrt(s.alpha_bar(10)) * x0)
    e = np.ones((1, 64))
    np.testing.assert_allclose(forward_diffuse(s, np.zeros((1, 64)), 10, e), math.sqrt(1 - s.alpha_bar(10)) * e)
    with pytest.raises(ValueError):
        forward_diffuse(s, x0, 51, e)
    with pytest.raises(ValueError):
        forward_diffuse(s, x0, 0, e)


def test_forward_marginal_monte_carlo():
    s = make_schedule(50, 0.002, 0.4)
    rng = np.random.default_rng(0)
    n, t = 100_000, 17
    x0 = np.array([[0.7, -0.3, 0.0, 1.0]])
    xt = forward_diffuse(s, np.repeat(x0, n, axis=0), t, rng.standard_normal((n, 4)))
    ab = s.alpha_bar(t)
    var = 1 - ab
    se_mean = math.sqrt(var / n)
    se_var = var * math.sqrt(2 / (n - 1))
    assert np.all(np.abs(xt.mean(0) - math.sqrt(ab) * x0[0]) < 3 * se_mean)
    assert np.all(np.abs(xt.var(0, ddof=1) - var) < 3 * se_var)


# -- network ------------------------------------------------------------------


def test_zero_weights_give_pure_residual_path():
    p = init_params(CFG, np.random.default_rng(0))
    zeroed = p.replace({m: np.zeros_like(p[m]) for m in CFG.all_ids() if m != EMBED_ID})
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, (3, 64))
    t = np.array([1, 20, 50])
    buf = fixed_buffers(CFG)
    h = patchify(x, CFG) @ buf["embed"] + buf["pos"] + sinusoid(t, 16)[:, None, :]
    expect = unpatchify(h @ buf["readout"], CFG)
    np.testing.assert_allclose(predict_noise(zeroed, x, t, [0, 1, 2]), expect, rtol=1e-12, atol=1e-12)


def test_self_attention_block_is_permutation_equivariant():
    p = tiny_params(3)
    rng = np.random.default_rng(3)
    h = rng.normal(size=(1, 16, 4))
    ctx = rng.normal(size=(1, 2, 4))
    perm = rng.permutation(16)

    def run(tokens):
        tape = Tape(1, record=False)
        w = _Weights(tape, p)
        out = block_forward(w, tape.constant(tokens, batched=True), tape.constant(ctx, batched=True), 0)
        return tape.value(out)

    np.testing.assert_allclose(run(h[:, perm]), run(h)[:, perm], rtol=1e-12, atol=1e-14)


def test_predict_noise_golden():
    p = init_params(CFG, np.random.default_rng(42))
    x = np.random.default_rng(7).uniform(-1, 1, (2, 64))
    out = predict_noise(p, x, np.array([1, 37]), np.array([0, 3]))
    assert out.shape == (2, 64)
    np.testing.assert_allclose(out[0, :4], [-0.33133772, 0.41582976, 0.94756686, -0.01923825], atol=1e-8)
    np.testing.assert_allclose(out[1, -3:], [-3.12437636, 0.41641498, -1.50593139], atol=1e-8)
    assert float(out.sum()) == pytest.approx(-37.67968021149062, rel=1e-10)
    assert float((out**2).sum()) == pytest.approx(139.34050016283652, rel=1e-10)


def test_unknown_label_rejected():
    p = tiny_params(0)
    with pytest.raises(ValueError):
        predict_noise(p, np.zeros(64), 1, 3)
    with pytest.raises(ValueError):
        predict_noise(p, np.zeros(64), 11, 0)


# -- loss ---------------------------------------------------------------------


def test_mse_convention():
    tape = Tape(1)
    node = tape.mse(tape.constant(np.zeros((1, 64)), True), tape.constant(np.ones((1, 64)), True))
    assert tape.value(node)[0] == 1.0


def test_loss_matches_direct_recomputation(tiny_schedule):
    p, d = tiny_params(1), tiny_data(4, 1)
    rng = np.random.default_rng(2)
    t, e = rng.integers(1, 11, 4), rng.standard_normal((4, 64))
    got = loss(p, d.x, t, e, d.y, tiny_schedule)
    for i in range(4):
        ab = tiny_schedule.alpha_bars[t[i] - 1]
        xt = math.sqrt(ab) * d.x[i] + math.sqrt(1 - ab) * e[i]
        pred = predict_noise(p, xt, t[i], d.y[i])[0]
        assert got[i] == pytest.approx(np.sum((e[i] - pred) ** 2) / 64, rel=1e-12)
    assert np.all(got >= 0)


# -- gradients ----------------------------------------------------------------


def test_every_matrix_gradient_matches_finite_differences(tiny_schedule):
    p, d = tiny_params(11), tiny_data(2, 11)
    rng = np.random.default_rng(11)
    t, e = np.array([2, 9]), rng.standard_normal((2, 64))
    worst = worst_matrix_error(p, d.x, t, e, d.y, tiny_schedule, TINY.all_ids(), rng)
    assert max(worst.values()) <= 1e-4, {str(k): v for k, v in worst.items() if v > 1e-4}


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(2))
def test_full_size_gradient_sampled_entries(seed):
    p = init_params(CFG, np.random.default_rng(seed))
    rng = np.random.default_rng(100 + seed)
    x = rng.uniform(-1, 1, (2, 64))
    worst = worst_matrix_error(p, x, rng.integers(1, 51, 2), rng.standard_normal((2, 64)), rng.integers(0, 4, 2),
                               make_schedule(50, 0.002, 0.4), CFG.all_ids(), rng, count=4)
    assert max(worst.values()) <= 1e-4


# -- sampling -----------------------------------------------------------------


def test_single_step_sampler_is_posterior_mean():
    p = tiny_params(4)
    beta = 0.3
    sched = DiffusionSchedule(np.array([beta]), np.array([1 - beta]))
    x_T = np.random.default_rng(5).standard_normal((2, 64))
    out = sample_batch(p, sched, np.array([0, 2]), np.random.default_rng(5))
    eps = predict_noise(p, x_T, 1, [0, 2])
    expect = (x_T - beta / math.sqrt(beta) * eps) / math.sqrt(1 - beta)
    np.testing.assert_allclose(out, np.clip(expect, -1, 1), rtol=1e-12)


def test_sampling_is_seeded_and_clamped(tiny_schedule):
    p = tiny_params(6)
    a = sample_images(p, tiny_schedule, 1, 3, np.random.default_rng(8))
    b = sample_images(p, tiny_schedule, 1, 3, np.random.default_rng(8))
    assert a.shape == (3, 64) and np.array_equal(a, b)
    assert a.min() >= -1 and a.max() <= 1
    with pytest.raises(ValueError):
        sample_images(p, tiny_schedule, 1, 0, np.random.default_rng(8))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_loss_non_negative(seed):
    rng = np.random.default_rng(seed)
    p = tiny_params(seed % 5)
    sched = make_schedule(10)
    x = rng.uniform(-1, 1, (2, 64))
    assert np.all(loss(p, x, rng.integers(1, 11, 2), rng.standard_normal((2, 64)), rng.integers(0, 3, 2), sched) >= 0)
