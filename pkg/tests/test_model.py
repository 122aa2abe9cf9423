import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rfdrl import autodiff as ad
from rfdrl.autodiff import ContractError, Tape, Tensor
from rfdrl._io import DataError
from rfdrl.model import (DisentangleModel, FactorMap, ModelConfig, NoiseSchedule, Representations,
                         diffuse_forward, load_checkpoint, model_from_state, model_state,
                         posterior_step, sample_reverse, save_checkpoint)

SMALL = ModelConfig(length=32, cards=(3, 3, 3), d_c=8, d_f=16, steps=20, beta_start=1e-3, beta_end=0.3)


@pytest.fixture(scope="module")
def model():
    return DisentangleModel(SMALL, seed=7)


def signals(rng, b, length=32):
    return rng.standard_normal((b, 2, length)) * 0.7


# ---------------------------------------------------------------- encoder

def test_encode_is_deterministic_and_gives_six_vectors(model, rng):
    x = signals(rng, 1)
    a, b = model.encode(x), model.encode(x.copy())
    assert a.factor_codes.data.tobytes() == b.factor_codes.data.tobytes()
    assert a.space_codes.data.tobytes() == b.space_codes.data.tobytes()
    vecs = a.vectors()
    assert len(vecs) == 6 and all(v.shape == (SMALL.d_c,) for v in vecs)


def test_encode_rejects_wrong_length(model):
    with pytest.raises(ContractError):
        model.encode(np.zeros((1, 2, 48)))


def test_encode_finite_on_many_signals(model, rng):
    r = model.encode(signals(rng, 1000) * 3)
    assert np.all(np.isfinite(r.factor_codes.data)) and np.all(np.isfinite(r.space_codes.data))


# ---------------------------------------------------------------- decoders

@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 20.0))
def test_space_field_is_a_distribution_over_factors(seed, scale):
    m = DisentangleModel(SMALL, seed=1)
    codes = Tensor(np.random.default_rng(seed).standard_normal((4, 3, SMALL.d_c)) * scale)
    p = m.decode_space(codes).data
    assert p.shape == (4, 3, SMALL.length)
    assert np.all(p >= 0) and np.all(p <= 1)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_equal_logits_give_uniform_field():
    p = ad.softmax(Tensor(np.full((1, 3, 5), 2.5)), axis=1).data
    np.testing.assert_allclose(p, 1 / 3, atol=1e-15)


def test_argmax_invariant_to_per_position_shift(rng):
    logits = rng.standard_normal((2, 3, 10))
    shift = rng.standard_normal((2, 1, 10)) * 50
    a = ad.softmax(Tensor(logits), axis=1).data.argmax(axis=1)
    b = ad.softmax(Tensor(logits + shift), axis=1).data.argmax(axis=1)
    assert np.array_equal(a, b)


def test_decode_factor_shapes(model, rng):
    feats = model.decode_factor(Tensor(rng.standard_normal((5, 3, SMALL.d_c))))
    assert len(feats) == 3 and all(f.shape == (5, SMALL.d_f) for f in feats)


# ---------------------------------------------------------------- factor map

def test_factor_map_components_are_rank_one_and_sum(model, rng):
    r = model.encode(signals(rng, 2))
    fm = model.build_factor_map(r)
    assert fm.map.shape == (2, SMALL.length, SMALL.d_f)
    for c in fm.components:
        for b in range(2):
            s = np.linalg.svd(c.data[b], compute_uv=False)
            assert s[1] <= 1e-10 * max(s[0], 1e-300)
    np.testing.assert_allclose(sum(c.data for c in fm.components), fm.map.data, atol=1e-12)


def test_zero_code_removes_its_contribution(model, rng):
    # with the code projection bias zeroed, a zero code gives a zero component
    m = DisentangleModel(SMALL, seed=3)
    m.fm_code[1].b.data[:] = 0.0
    r = m.encode(signals(rng, 2))
    zc = r.factor_codes.data.copy()
    zc[:, 1, :] = 0.0
    fm = m.build_factor_map(Representations(Tensor(zc), r.space_codes))
    assert np.all(fm.components[1].data == 0.0)
    rest = fm.components[0].data + fm.components[2].data
    np.testing.assert_allclose(fm.map.data, rest, atol=1e-12)


# ---------------------------------------------------------------- schedule and forward process

def test_schedule_invariants():
    s = NoiseSchedule()
    beta = s.beta[1:]
    assert 0 < beta[0] and np.all(np.diff(beta) >= 0) and beta[-1] < 1
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[-1] < 0.05 and s.alpha_bar[0] == 1.0


def test_schedule_that_never_reaches_noise_is_rejected():
    with pytest.raises(ContractError):
        NoiseSchedule(100, 1e-4, 0.02)


def test_t_out_of_range():
    s = NoiseSchedule()
    with pytest.raises(ContractError):
        diffuse_forward(np.zeros(3), 0, np.zeros(3), s)
    with pytest.raises(ContractError):
        diffuse_forward(np.zeros(3), s.T + 1, np.zeros(3), s)


def test_first_step_stays_close_to_data(rng):
    s = NoiseSchedule()
    x0, eps = rng.standard_normal(128), rng.standard_normal(128)
    x1 = diffuse_forward(x0, 1, eps, s)
    assert np.linalg.norm(x1 - x0) <= np.sqrt(s.beta[1]) * np.linalg.norm(eps) + np.sqrt(s.beta[1]) * np.linalg.norm(x0)


@pytest.mark.parametrize("t", [10, 50, 100])
def test_forward_marginal_variance(t):
    s = NoiseSchedule()
    rng = np.random.default_rng(t)
    x0 = rng.standard_normal((10_000, 4)) * np.sqrt(0.5)
    xt = diffuse_forward(x0, np.full(10_000, t), rng.standard_normal(x0.shape), s)
    expect = s.alpha_bar[t] * 0.5 + 1 - s.alpha_bar[t]
    assert np.all(np.abs(xt.var(axis=0) / expect - 1) < 0.05)


def test_posterior_mean_at_t1_with_oracle_is_exact(rng):
    s = NoiseSchedule()
    x0 = rng.standard_normal(16)
    xt = diffuse_forward(x0, 1, rng.standard_normal(16), s)
    mu, sigma = posterior_step(x0, xt, 1, s)
    np.testing.assert_allclose(mu, x0, atol=1e-12)
    assert sigma == 0.0


def test_sample_reverse_deterministic_given_seed(rng):
    s = NoiseSchedule(20, 1e-3, 0.3)
    x0 = rng.standard_normal((2, 8))
    oracle = lambda x, t: x0
    a = sample_reverse(oracle, rng.standard_normal((2, 8)), s, np.random.default_rng(5))
    start = np.random.default_rng(1234).standard_normal((2, 8))
    b1 = sample_reverse(oracle, start, s, np.random.default_rng(5))
    b2 = sample_reverse(oracle, start, s, np.random.default_rng(5))
    assert b1.tobytes() == b2.tobytes() and np.all(np.isfinite(a))
    # a perfect denoiser lands on the data
    np.testing.assert_allclose(b1, x0, atol=1e-12)


# ---------------------------------------------------------------- denoiser

def test_denoise_shape_and_factor_map_sensitivity(rng):
    m = DisentangleModel(SMALL, seed=2)
    m.g_out.w.data[:] = rng.standard_normal(m.g_out.w.shape) * 0.05
    x = signals(rng, 2)
    fm = m.build_factor_map(m.encode(x)).map.data
    out = m.denoise(x, np.array([3, 9]), fm).data
    assert out.shape == x.shape
    out2 = m.denoise(x, np.array([3, 9]), fm + rng.standard_normal(fm.shape)).data
    assert np.linalg.norm(out2 - out) > 0


def test_denoise_rejects_bad_inputs(model, rng):
    x = signals(rng, 1)
    good = np.zeros((1, SMALL.length, SMALL.d_f))
    with pytest.raises(ContractError):
        model.denoise(x, 0, good)
    with pytest.raises(ContractError):
        model.denoise(x, 1, np.zeros((1, SMALL.length, SMALL.d_f + 1)))


def test_denoise_gradient_wrt_factor_map(rng):
    m = DisentangleModel(SMALL, seed=2)
    m.g_out.w.data[:] = rng.standard_normal(m.g_out.w.shape) * 0.05
    x = signals(rng, 1)
    fm0 = rng.standard_normal((1, SMALL.length, SMALL.d_f)) * 0.3

    def f(fm):
        d = m.denoise(x, 4, fm) - Tensor(x)
        return ad.sum_(d * d)

    # loss is O(10); h=1e-4 keeps central-difference roundoff below the tolerance
    assert ad.grad_check(f, Tensor(fm0), h=1e-4) < 1e-6


# ---------------------------------------------------------------- classifiers

def test_zero_weight_head_is_uniform(rng):
    m = DisentangleModel(ModelConfig(length=32, cards=(7, 5, 7), d_c=8, d_f=16, steps=20,
                                     beta_start=1e-3, beta_end=0.3), seed=0)
    feat = Tensor(rng.standard_normal((4, 16)))
    for n, k in enumerate((7, 5, 7)):
        m.heads[n].w.data[:] = 0.0
        m.heads[n].b.data[:] = 0.0
        np.testing.assert_allclose(m.classify(n, feat).data, 1 / k, atol=1e-15)


def test_cross_application_is_well_formed(model, rng):
    feats = model.decode_factor(model.encode(signals(rng, 3)).factor_codes)
    for n1 in range(3):
        for n2 in range(3):
            p = model.classify(n2, feats[n1]).data
            assert p.shape == (3, 3) and np.all((p >= 0) & (p <= 1))
            np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-9)


def test_frozen_head_gets_no_gradient(rng):
    m = DisentangleModel(SMALL, seed=0)
    feat = Tensor(rng.standard_normal((2, SMALL.d_f)), requires_grad=True)
    with Tape() as tape:
        p = m.classify(0, feat, frozen=True)
        tape.backward(ad.sum_(p * ad.log(p)))
    assert m.heads[0].w.grad is None or not np.any(m.heads[0].w.grad)
    assert np.any(feat.grad)


# ---------------------------------------------------------------- checkpoint

def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    m = DisentangleModel(SMALL, seed=11)
    path = tmp_path / "m.rfck"
    save_checkpoint(path, model_state(m))
    raw = path.read_bytes()
    assert raw[:4] == b"RFCK"
    back = model_from_state(load_checkpoint(path))
    assert back.config == m.config
    for (na, a), (nb, b) in zip(m.named_parameters().items(), back.named_parameters().items()):
        assert na == nb and a.data.tobytes() == b.data.tobytes()


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "m.rfck"
    save_checkpoint(path, model_state(DisentangleModel(SMALL, seed=0)))
    raw = path.read_bytes()
    (tmp_path / "t.rfck").write_bytes(raw[:-5])
    (tmp_path / "x.rfck").write_bytes(b"NOPE" + raw[4:])
    (tmp_path / "extra.rfck").write_bytes(raw + b"\0")
    for name in ("t.rfck", "x.rfck", "extra.rfck", "missing.rfck"):
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / name)


def test_parameter_groups_cover_everything(model):
    groups = model.groups()
    names = [n for g in groups.values() for n in g]
    assert sorted(names) == sorted(model.named_parameters())
    assert set(groups) == {"E", "D_F", "D_S", "FM", "G", "C"}
    assert model.parameter_count() > 0
