import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agnocomm.comms import (
    CommLayer,
    LossRecorder,
    Neighborhood,
    assemble_batch,
    assemble_observation_set,
    connectivity,
    neighborhood,
    policy_input,
)
from agnocomm.errors import ConfigurationError
from agnocomm.pisa import init_autoencoder, reconstruction_loss


def test_infinite_range_is_everyone():
    pos = np.random.default_rng(0).uniform(-1, 1, size=(5, 2))
    assert neighborhood(pos, math.inf, 2).members == frozenset({0, 1, 3, 4})


def test_zero_range_distinct_positions_is_empty():
    pos = np.random.default_rng(1).uniform(-1, 1, size=(5, 2))
    for i in range(5):
        assert neighborhood(pos, 0.0, i).members == frozenset()


def test_neighborhood_matches_pairwise_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        pos = rng.uniform(-1, 1, size=(5, 2))
        for i in range(5):
            oracle = {j for j in range(5) if j != i and math.dist(pos[i], pos[j]) <= 0.5}
            assert neighborhood(pos, 0.5, i).members == oracle


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 3))
def test_neighborhood_symmetric(seed, eps):
    pos = np.random.default_rng(seed).uniform(-1, 1, size=(6, 2))
    nb = [neighborhood(pos, eps, i).members for i in range(6)]
    for i in range(6):
        for j in range(6):
            assert (j in nb[i]) == (i in nb[j])
    conn = connectivity(pos[None], eps)[0]
    assert np.array_equal(conn, conn.T)


def test_assemble_sets():
    obs = np.arange(20.0).reshape(4, 5)
    np.testing.assert_array_equal(assemble_observation_set(2, obs, Neighborhood(2, frozenset())), obs[[2]])
    full = Neighborhood(0, frozenset({1, 2, 3}))
    np.testing.assert_array_equal(assemble_observation_set(0, obs, full), obs)
    part = assemble_observation_set(0, obs, Neighborhood(0, frozenset({1, 3})))
    assert part.shape == (3, 5)
    np.testing.assert_array_equal(part, obs[[0, 1, 3]])
    with pytest.raises(ConfigurationError):
        assemble_observation_set(1, obs, full)
    with pytest.raises(ConfigurationError):
        Neighborhood(0, frozenset({0}))


def test_assemble_batch_matches_per_agent_sets():
    rng = np.random.default_rng(3)
    obs = rng.normal(size=(2, 4, 3))
    pos = rng.uniform(-1, 1, size=(2, 4, 2))
    batch = assemble_batch(obs, pos, 0.8)
    for e in range(2):
        for i in range(4):
            s = assemble_observation_set(i, obs[e], neighborhood(pos[e], 0.8, i))
            got = batch.sets()[e * 4 + i]
            np.testing.assert_array_equal(got, s[np.lexsort(s.T[::-1])])


@pytest.fixture
def comm():
    ae = init_autoencoder(np.random.default_rng(0), d_obs=3, d_z=7, n_max=6, hidden=8, d_key=4)
    return CommLayer(ae)


def test_full_connectivity_latents_identical(comm):
    rng = np.random.default_rng(4)
    obs = rng.normal(size=(3, 4, 3))
    z = comm.joint_latents(obs, rng.uniform(-1, 1, size=(3, 4, 2)))
    assert z.shape == (3, 4, 7)
    for e in range(3):
        for i in range(1, 4):
            assert z[e, i].tobytes() == z[e, 0].tobytes()


def test_latent_dimension_independent_of_neighborhood(comm):
    rng = np.random.default_rng(5)
    for k in range(0, 6):
        assert comm.encode_state(rng.normal(size=(k, 3))).shape == (7,)


def test_recorded_loss_equals_direct_call(comm):
    x = np.random.default_rng(6).normal(size=(3, 3))
    comm.encode_state(x)
    recorded = comm.recorder.close_iteration()
    assert recorded == reconstruction_loss(comm.autoencoder, x).total


def test_latent_invariant_to_arrival_order(comm):
    rng = np.random.default_rng(7)
    obs = rng.normal(size=(1, 5, 3))
    pos = rng.uniform(-1, 1, size=(1, 5, 2))
    perm = rng.permutation(5)
    z = comm.joint_latents(obs, pos)[0]
    zp = comm.joint_latents(obs[:, perm], pos[:, perm])[0]
    for new_i, old_i in enumerate(perm):
        assert zp[new_i].tobytes() == z[old_i].tobytes()


def test_partial_connectivity_latents_differ(comm):
    pos = np.array([[[0.0, 0.0], [0.1, 0.0], [2.0, 2.0]]])
    obs = np.random.default_rng(8).normal(size=(1, 3, 3))
    comm.epsilon = 0.5
    z = comm.joint_latents(obs, pos)[0]
    assert z[0].tobytes() == z[1].tobytes()
    assert z[0].tobytes() != z[2].tobytes()
    np.testing.assert_allclose(z[2], comm.encode_state(obs[0, [2]]), atol=1e-14)


def test_policy_input_layout():
    latent = np.arange(72.0)
    own = -np.arange(1.0, 29.0)
    x = policy_input(latent, own)
    assert x.shape == (100,)
    np.testing.assert_array_equal(x[:72], latent)
    np.testing.assert_array_equal(x[72:], own)
    other = policy_input(latent, own + 1)
    assert not np.array_equal(x, other)


def test_loss_recorder_window():
    rec = LossRecorder(window_size=3)
    for i in range(5):
        rec.add(np.array([float(i), float(i) + 2]))
        assert rec.close_iteration() == i + 1
    assert list(rec.window) == [3.0, 4.0, 5.0]
    assert rec.window_mean() == 4.0
    assert math.isnan(rec.close_iteration())


def test_negative_epsilon_rejected(comm):
    with pytest.raises(ConfigurationError):
        CommLayer(comm.autoencoder, epsilon=-1.0)
