import numpy as np
import pytest

from soe import numcore as nc
from soe.errors import ConfigError, DimensionError, GeometryError, SingularScheduleError, \
    StorageError, UsageError
from soe.latentdiff import (DenoiserModel, ModelConfig, NoiseSchedule, TextCondition, add_noise,
                            assemble_inpaint_input, ddim_step, decode_latent, encode_latent,
                            load_checkpoint, make_schedule, noise_prediction_loss,
                            predict_noise, save_checkpoint, train_step)
from soe.masks import RectMask
from soe.shapes import training_batch

from .test_numcore import central_diff, rel_err


def toy_schedule(a, s):
    return NoiseSchedule(1, np.array([1.0, a]), np.array([0.0, s]))


# --- schedule -------------------------------------------------------------

def test_schedule_endpoints():
    s = make_schedule(50)
    assert s.alpha[0] >= 0.999 and s.alpha[50] <= 0.01


@pytest.mark.parametrize("T", [2, 7, 20, 50, 1000])
def test_schedule_variance_preserving(T):
    s = make_schedule(T)
    assert np.abs(s.alpha ** 2 + s.sigma ** 2 - 1).max() < 1e-9


def test_schedule_strictly_decreasing():
    a = make_schedule(50).alpha
    assert all(a[t + 1] < a[t] for t in range(50))


def test_schedule_needs_two_steps():
    with pytest.raises(ConfigError):
        make_schedule(1)


# --- forward noising --------------------------------------------------------

def test_add_noise_endpoints(rng):
    s = make_schedule(50)
    z, eps = rng.standard_normal((4, 3, 3)), rng.standard_normal((4, 3, 3))
    assert s.sigma[0] <= 0.05
    bound0 = s.sigma[0] * np.abs(eps).max() + (1 - s.alpha[0]) * np.abs(z).max()
    assert np.abs(add_noise(z, 0, eps, s) - z).max() <= bound0 + 1e-12
    bound_t = s.alpha[50] * np.abs(z).max() + (1 - s.sigma[50]) * np.abs(eps).max()
    assert np.abs(add_noise(z, 50, eps, s) - eps).max() <= bound_t + 1e-12


def test_add_noise_formula():
    np.testing.assert_allclose(add_noise([1.0, 0.0], 1, [0.0, 1.0], toy_schedule(0.8, 0.6)),
                               [0.8, 0.6])


def test_add_noise_shape_mismatch():
    with pytest.raises(DimensionError):
        add_noise(np.zeros(2), 1, np.zeros(3), make_schedule(4))


# --- DDIM -----------------------------------------------------------------

def test_ddim_scalar_example():
    sched = toy_schedule(0.8, 0.6)
    z_t = np.array([0.8 * 2 + 0.6 * 1])
    # t=1 lands on alpha(0)=1, sigma(0)=0, i.e. the x0 estimate itself
    np.testing.assert_allclose(ddim_step(z_t, np.array([1.0]), 1, sched), [2.0])


def test_ddim_true_noise_recovers_latent(rng):
    s = make_schedule(20)
    z, eps = rng.standard_normal((4, 2, 2)), rng.standard_normal((4, 2, 2))
    z_t = add_noise(z, 12, eps, s)
    out = ddim_step(z_t, eps, 12, s)
    np.testing.assert_allclose(out, add_noise(z, 11, eps, s), atol=1e-12)


def test_ddim_perfect_denoiser_reconstructs(rng):
    s = make_schedule(50)
    z = rng.standard_normal((4, 8, 8))
    z_t = rng.standard_normal(z.shape)
    for t in range(50, 0, -1):
        oracle = (z_t - s.alpha[t] * z) / s.sigma[t]
        z_t = ddim_step(z_t, oracle, t, s)
    assert np.abs(z_t - z).max() < 1e-8


def test_ddim_singular_alpha():
    with pytest.raises(SingularScheduleError):
        ddim_step(np.ones(1), np.ones(1), 1, toy_schedule(0.0, 1.0))


# --- VAE stub -------------------------------------------------------------

def test_encode_512_gives_64_grid():
    assert encode_latent(np.zeros((3, 512, 512))).shape == (4, 64, 64)


def test_encode_constant_image():
    z = encode_latent(np.full((3, 32, 24), 0.3))
    assert np.ptp(z.reshape(4, -1), axis=1).max() < 1e-15


def test_roundtrip_piecewise_constant(rng):
    cells = rng.random((3, 4, 5))
    img = np.repeat(np.repeat(cells, 8, axis=1), 8, axis=2)
    assert np.array_equal(decode_latent(encode_latent(img)), img) or \
        np.abs(decode_latent(encode_latent(img)) - img).max() < 1e-14


def test_decode_zero_and_shape():
    out = decode_latent(np.zeros((4, 8, 8)))
    assert out.shape == (3, 64, 64) and not out.any()


def test_encode_rejects_indivisible():
    with pytest.raises(DimensionError):
        encode_latent(np.zeros((3, 20, 16)))


# --- conditioning ---------------------------------------------------------

def test_assemble_full_mask_zeroes_masked_latent(rng):
    z = rng.standard_normal((4, 4, 4))
    x = assemble_inpaint_input(z, RectMask(16, 16, 32, 32, 32, 32), z)
    assert x.shape == (9, 4, 4)
    assert not x[5:].any() and (x[4] == 1).all()


def test_assemble_smallest_mask_touches_one_cell(rng):
    z = rng.standard_normal((4, 4, 4))
    x = assemble_inpaint_input(z, RectMask(12.5, 20.5, 1, 1, 32, 32), z)
    assert np.count_nonzero(x[4]) == 1


def test_assemble_wrong_image_size():
    with pytest.raises(GeometryError):
        assemble_inpaint_input(np.zeros((4, 4, 4)), RectMask(8, 8, 4, 4, 64, 64), np.zeros((4, 4, 4)))


def test_text_condition_validates():
    with pytest.raises(UsageError):
        TextCondition(np.zeros((3, 4)), ())
    with pytest.raises(UsageError):
        TextCondition(np.zeros((3, 4)), (3,))


# --- denoiser -------------------------------------------------------------

def _inputs(cfg, rng, I=5):
    hw = cfg.latent_hw
    z = rng.standard_normal((4, hw, hw))
    c = TextCondition(rng.standard_normal((I, cfg.token_dim)), (I - 1,))
    m = RectMask(8 * hw / 2, 8 * hw / 2, 16, 16, 8 * hw, 8 * hw)
    return z, c, m


def test_zero_model_predicts_zero_and_uniform(rng):
    cfg = ModelConfig(latent_hw=8, pyramid=(8, 4, 4, 8))
    z, c, m = _inputs(cfg, rng)
    eps, attn = predict_noise(DenoiserModel(cfg), rng.standard_normal(z.shape), 7, c, m, z)
    assert not eps.any()
    for layer in attn:
        np.testing.assert_allclose(layer.values, 0.2, atol=1e-15)


def test_attention_shapes_follow_pyramid(small_model, rng):
    z, c, m = _inputs(small_model.config, rng)
    _, attn = predict_noise(small_model, z, 4, c, m, z)
    assert len(attn) == small_model.n_layers == 4
    assert [(l.H, l.W, l.values.shape) for l in attn] == \
        [(r, r, (r * r, 5)) for r in (8, 4, 4, 8)]
    attn.check(1e-6)


def test_predict_noise_deterministic(small_model, rng):
    z, c, m = _inputs(small_model.config, rng)
    a = predict_noise(small_model, z, 4, c, m, z)
    b = predict_noise(small_model, z, 4, c, m, z)
    assert np.array_equal(a[0], b[0])
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a[1], b[1]))


def test_token_width_mismatch(small_model, rng):
    z, _, m = _inputs(small_model.config, rng)
    with pytest.raises(ConfigError):
        predict_noise(small_model, z, 4, TextCondition(np.zeros((3, 5)), (0,)), m, z)


def test_pyramid_shape_validation():
    with pytest.raises(ConfigError):
        ModelConfig(latent_hw=16, pyramid=(8, 16, 8))
    with pytest.raises(ConfigError):
        ModelConfig(latent_hw=16, pyramid=(16, 8, 4, 8, 16, 8))


def test_tracked_latent_gradient(small_model, rng):
    z, c, m = _inputs(small_model.config, rng)
    w = rng.standard_normal((16, 5))

    def f(zt):
        _, attn = predict_noise(small_model, zt, 6, c, m, z)
        return nc.sum_(nc.mul(attn[1].map, w))

    tape = nc.Tape()
    zv = tape.track(z * 0.5)
    g = nc.backward_grad(f(zv), zv)
    fd = central_diff(lambda v: float(f(v)), z * 0.5)
    assert rel_err(g, fd) < 1e-4


# --- training -------------------------------------------------------------

def test_zero_model_loss_is_mean_noise_power():
    cfg = ModelConfig(latent_hw=4, pyramid=(4, 2, 2, 4))
    model = DenoiserModel(cfg)
    sched = make_schedule(cfg.timesteps)
    batch = training_batch(np.random.default_rng(1), 3, 32, cfg.token_dim)
    loss = train_step(model, batch, sched, 0.01, np.random.default_rng(5))
    # replay the same draws
    r = np.random.default_rng(5)
    expect = []
    for _ in batch:
        r.integers(1, sched.T + 1)
        expect.append(np.mean(r.standard_normal((4, 4, 4)) ** 2))
    assert loss == pytest.approx(np.mean(expect), rel=1e-12)


def test_loss_nonnegative_and_weights_move(small_model):
    model = small_model.copy()
    sched = make_schedule(10)
    rng = np.random.default_rng(2)
    before = {k: v.copy() for k, v in model.params.items()}
    loss = train_step(model, training_batch(rng, 2, 64, 16), sched, 0.01, rng)
    assert loss >= 0
    assert any(not np.array_equal(before[k], model.params[k]) for k in before)


def test_train_step_matches_loss_gradient(small_model):
    """The update equals -lr times a finite-difference gradient of the loss."""
    model = small_model.copy()
    sched = make_schedule(10)
    batch = training_batch(np.random.default_rng(4), 1, 64, 16)
    name = "attn1.k"
    p0 = model.params[name].copy()

    def f(p):
        params = {**model.params, name: p}
        return float(noise_prediction_loss(model, params, batch, sched, np.random.default_rng(9)))

    fd = central_diff(f, p0)
    train_step(model, batch, sched, 1e-3, np.random.default_rng(9))
    assert rel_err((p0 - model.params[name]) / 1e-3, fd) < 1e-4


def test_train_step_rejects_bad_input(small_model, small_sched, rng):
    with pytest.raises(UsageError):
        train_step(small_model.copy(), [], small_sched, 0.1, rng)
    with pytest.raises(ConfigError):
        train_step(small_model.copy(), training_batch(rng, 1, 64, 16), small_sched, 0.0, rng)


def test_toy_training_halves_loss(toy):
    _, losses = toy
    assert len(losses) == 200
    assert losses[-1] < 0.5 * losses[0]


# --- checkpoints ----------------------------------------------------------

def test_checkpoint_roundtrip(small_model, tmp_path):
    path = tmp_path / "m.soed"
    save_checkpoint(small_model, path)
    data = path.read_bytes()
    assert data[:4] == b"SOED" and int.from_bytes(data[4:8], "little") == 1
    back = load_checkpoint(path)
    assert back.config == small_model.config
    assert all(np.array_equal(back.params[k], small_model.params[k]) for k in back.params)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.soed"
    path.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(StorageError):
        load_checkpoint(path)


def test_checkpoint_truncated(small_model, tmp_path):
    path = tmp_path / "m.soed"
    save_checkpoint(small_model, path)
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(StorageError):
        load_checkpoint(path)


def test_checkpoint_missing(tmp_path):
    with pytest.raises(StorageError):
        load_checkpoint(tmp_path / "absent.soed")
