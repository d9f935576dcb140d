"""
latentwm: RSSM世界モデルと部分系列サンプリング
"""

import numpy as np
import pytest
from scipy.stats import chisquare

from src.envkit.tasks import Trajectory
from src.latentwm.rssm import WorldModel
from src.latentwm.training import SubsequenceBatch, hybrid_batch, sample_windows, window, wm_loss, wm_train_step
from src.tensorcore import tape as T
from src.tensorcore.gradcheck import grad_check
from src.tensorcore.tape import Tape
from src.utils.common import ShapeError


def small_wm(seed: int = 0) -> WorldModel:
    return WorldModel(d_o=3, d_a=2, rng=np.random.default_rng(seed), deter=4, groups=2, classes=3,
                      units=5, encoder_layers=1, decoder_layers=1)


def random_batch(rng, batch: int = 2, length: int = 3, d_o: int = 3, d_a: int = 2) -> SubsequenceBatch:
    return SubsequenceBatch(
        obs=rng.standard_normal((batch, length, d_o)),
        prev_actions=rng.uniform(-1, 1, (batch, length, d_a)),
        cont=np.ones((batch, length)),
        mask=np.ones((batch, length)),
        is_demo=np.arange(batch) < batch // 2,
        traj_ids=np.arange(batch),
        starts=np.zeros(batch, dtype=np.int64),
    )


def flat_trajectory(length: int, d_o: int = 3, d_a: int = 2, traj_id: int = 0) -> Trajectory:
    obs = np.arange(length * d_o, dtype=np.float32).reshape(length, d_o)
    continuations = np.ones(length, dtype=np.uint8)
    continuations[-1] = 0
    return Trajectory(obs=obs, actions=np.zeros((length, d_a), np.float32), continuations=continuations,
                      successes=np.zeros(length, bool), final_obs=np.full(d_o, -1.0, np.float32),
                      success=False, traj_id=traj_id)


def test_latent_dimensions():
    wm = small_wm()
    assert wm.dz == 4 + 2 * 3
    state = wm.encode(wm.initial_state(1), np.zeros((1, 2)), np.ones(3), np.random.default_rng(0))
    assert state.z.shape == (1, wm.dz)
    np.testing.assert_array_equal(state.s.value.sum(axis=-1), np.ones((1, 2)))


def test_encode_is_deterministic_given_seed():
    wm = small_wm()
    obs = np.array([0.1, -0.2, 0.3])
    a = wm.encode(wm.initial_state(1), np.zeros((1, 2)), obs, np.random.default_rng(5))
    b = wm.encode(wm.initial_state(1), np.zeros((1, 2)), obs, np.random.default_rng(5))
    np.testing.assert_array_equal(a.z.value, b.z.value)


def test_encode_checks_dimensions():
    wm = small_wm()
    with pytest.raises(ShapeError):
        wm.encode(wm.initial_state(1), np.zeros((1, 3)), np.ones(3), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        wm.encode(wm.initial_state(1), np.zeros((1, 2)), np.ones(4), np.random.default_rng(0))


def test_zero_prior_head_gives_uniform_prior():
    wm = small_wm()
    wm.store.assign({k: np.zeros_like(v) for k, v in wm.store.items() if k.startswith('prior/')})
    state = wm.predict_prior(wm.initial_state(2), np.zeros((2, 2)), np.random.default_rng(0))
    probs = T.softmax(state.logits).value
    np.testing.assert_allclose(probs, np.full((2, 2, 3), 1 / 3), atol=1e-6)


def test_zero_continuation_head_gives_half():
    wm = small_wm()
    wm.store.assign({k: np.zeros_like(v) for k, v in wm.store.items() if k.startswith('cont/')})
    obs_mean, cont = wm.decode(np.ones((4, wm.dz), np.float32))
    assert obs_mean.shape == (4, 3)
    np.testing.assert_allclose(cont.value, 0.5)


def test_imagine_shapes_and_range():
    wm = small_wm()
    start = wm.encode(wm.initial_state(1), np.zeros((1, 2)), np.ones(3), np.random.default_rng(0))
    actions = np.random.default_rng(1).uniform(-1, 1, (6, 4, 2))
    latents, conts = wm.imagine(start, actions, np.random.default_rng(2))
    assert latents.shape == (6, 4, wm.dz)
    assert conts.shape == (6, 4)
    assert np.all((conts > 0) & (conts < 1))


def test_single_step_imagination_is_one_prior_step():
    wm = small_wm()
    start = wm.encode(wm.initial_state(1), np.zeros((1, 2)), np.ones(3), np.random.default_rng(0))
    action = np.array([[[0.3, -0.4]]], np.float32)
    latents = wm.rollout_imagine(start, action, np.random.default_rng(9))
    prior = wm.predict_prior(start, action[:, 0], np.random.default_rng(9))
    np.testing.assert_array_equal(latents[:, 0], prior.z.value)


def test_float64_observations_keep_the_latent_precision():
    wm = small_wm()
    obs = np.array([0.1, -0.2, 0.3])
    start = wm.encode(wm.initial_state(1), np.zeros((1, 2)), obs, np.random.default_rng(0))
    assert start.z.value.dtype == np.float32
    actions = np.random.default_rng(1).uniform(-1, 1, (2, 3, 2))
    latents, conts = wm.imagine(start, actions, np.random.default_rng(2))
    assert latents.dtype == conts.dtype == np.float32
    prior = wm.predict_prior(start.repeat(2), actions[:, 0], np.random.default_rng(2))
    np.testing.assert_array_equal(latents[:, 0], prior.z.value)


def test_imagination_is_stochastic():
    wm = small_wm()
    start = wm.encode(wm.initial_state(1), np.zeros((1, 2)), np.ones(3), np.random.default_rng(0))
    actions = np.zeros((8, 5, 2))
    a = wm.rollout_imagine(start, actions, np.random.default_rng(1))
    b = wm.rollout_imagine(start, actions, np.random.default_rng(2))
    assert not np.array_equal(a, b)


@pytest.mark.parametrize('seed', range(10))
def test_prediction_loss_gradient_matches_finite_differences(seed):
    wm = small_wm(seed)
    batch = random_batch(np.random.default_rng(seed))

    def fn(p):
        return wm_loss(wm, batch, None, p, beta_dyn=0.0, beta_rep=0.0, free_nats=0.0, stochastic=False).loss

    assert grad_check(fn, wm.store.cast(np.float64), rng=np.random.default_rng(seed)) < 1e-3


@pytest.mark.parametrize('seed', range(10))
def test_representation_loss_gradient_matches_finite_differences(seed):
    # 事前側は stop_gradient で定数扱いなので、事後側のパラメータだけを動かす
    wm = small_wm(seed)
    batch = random_batch(np.random.default_rng(seed), length=1)
    params = wm.store.cast(np.float64)
    posterior_side = {k: v for k, v in params.items() if k.startswith(('enc/', 'post/'))}
    fixed = {k: T.constant(v) for k, v in params.items() if k not in posterior_side}

    def fn(p):
        return wm_loss(wm, batch, None, {**fixed, **p}, beta_pred=0.0, beta_dyn=0.0, beta_rep=1.0,
                       free_nats=0.0, stochastic=False).loss

    assert grad_check(fn, posterior_side, rng=np.random.default_rng(seed)) < 1e-3


def grads_of(wm, batch, **weights):
    with Tape() as tape:
        params = tape.watch(wm.store.cast(np.float64))
        out = wm_loss(wm, batch, np.random.default_rng(0), params, free_nats=0.0, **weights)
    return tape.gradient(out.loss, params)


def test_representation_term_does_not_train_prior(rng):
    wm = small_wm()
    grads = grads_of(wm, random_batch(rng), beta_pred=0.0, beta_dyn=0.0, beta_rep=1.0)
    prior = [k for k in grads if k.startswith(('prior/', 'dec/', 'cont/'))]
    assert prior
    for key in prior:
        np.testing.assert_array_equal(grads[key], 0.0)
    assert np.any(grads['post/w0'] != 0)


def test_dynamics_term_does_not_train_posterior(rng):
    wm = small_wm()
    grads = grads_of(wm, random_batch(rng, length=1), beta_pred=0.0, beta_dyn=1.0, beta_rep=0.0)
    for key in grads:
        if key.startswith(('post/', 'enc/', 'dec/', 'cont/')):
            np.testing.assert_array_equal(grads[key], 0.0)
    assert np.any(grads['prior/w0'] != 0)


def test_free_bits_clamp_each_step(rng):
    wm = small_wm()
    batch = random_batch(rng, length=4)
    out = wm_loss(wm, batch, np.random.default_rng(0), free_nats=1.0)
    assert out.dyn >= batch.length - 1e-6
    assert out.rep >= batch.length - 1e-6
    assert set(out.diagnostics) == {'wm_loss', 'wm_pred', 'wm_dyn', 'wm_rep'}


def test_window_pads_short_trajectories():
    traj = flat_trajectory(3)
    obs, prev_actions, cont, mask = window(traj, 0, 8)
    np.testing.assert_array_equal(mask, [1, 1, 1, 1, 0, 0, 0, 0])
    np.testing.assert_array_equal(obs[4:], np.repeat(obs[3:4], 4, axis=0))
    np.testing.assert_array_equal(obs[3], traj.final_obs)
    assert cont[3] == 0.0


def test_window_starts_are_uniform():
    traj = flat_trajectory(100)
    batch = sample_windows([traj], 10000, 8, np.random.default_rng(42), is_demo=True)
    counts = np.bincount(batch.starts, minlength=94)
    assert len(counts) == 94
    assert batch.starts.max() == 93
    assert chisquare(counts).pvalue > 0.01


def test_hybrid_batch_is_half_demo():
    demos = [flat_trajectory(20, traj_id=i) for i in range(3)]
    replay = [flat_trajectory(30, traj_id=100 + i) for i in range(2)]
    batch = hybrid_batch(demos, replay, 16, 8, np.random.default_rng(0))
    assert batch.batch_size == 16
    assert batch.is_demo.sum() == 8
    assert set(batch.traj_ids[batch.is_demo]) <= {0, 1, 2}
    assert set(batch.traj_ids[~batch.is_demo]) <= {100, 101}


def test_single_demo_fills_all_demo_rows():
    batch = hybrid_batch([flat_trajectory(20, traj_id=7)], [flat_trajectory(20, traj_id=1)], 8, 4,
                         np.random.default_rng(0))
    assert set(batch.traj_ids[batch.is_demo]) == {7}


def test_empty_source_raises():
    with pytest.raises(ValueError):
        sample_windows([], 4, 8, np.random.default_rng(0), is_demo=False)


@pytest.mark.slow
def test_world_model_overfits_fixed_data(smoke_config):
    wm = small_wm()
    data_rng = np.random.default_rng(3)
    trajectories = [flat_trajectory(12, traj_id=i) for i in range(2)]
    for traj in trajectories:
        traj.obs = data_rng.standard_normal(traj.obs.shape).astype(np.float32) * 0.3
    settings = smoke_config.world_model.model_copy(update={'lr': 3e-3})
    batch = hybrid_batch(trajectories, trajectories, 4, 8, data_rng)
    rng = np.random.default_rng(0)
    first = wm_train_step(wm, batch, rng, settings).pred
    for _ in range(200):
        last = wm_train_step(wm, batch, rng, settings).pred
    assert last < first
