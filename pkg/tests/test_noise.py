import numpy as np
import pytest

from mfglab.errors import ConfigurationError
from mfglab.noise import (InitialLaw, make_time_grid, permute_players, restrict_players,
                          restrict_worlds, sample_noise)


@pytest.mark.parametrize("T,K,dt", [(1.0, 4, 0.25), (2.0, 1, 2.0)])
def test_grid_step(T, K, dt):
    g = make_time_grid(T, K)
    assert g.dt == dt
    assert g.times[-1] == T and len(g.times) == K + 1


@pytest.mark.parametrize("T,K", [(0.0, 10), (-1.0, 3), (1.0, 0)])
def test_grid_rejects_degenerate(T, K):
    with pytest.raises(ConfigurationError):
        make_time_grid(T, K)


def test_grid_message_names_field():
    with pytest.raises(ConfigurationError, match="grid.K must be >= 1"):
        make_time_grid(1.0, 0)


def test_same_seed_same_bundle(grid50, mu0):
    a = sample_noise(grid50, 8, 2, mu0, 42, worlds=3)
    b = sample_noise(grid50, 8, 2, mu0, 42, worlds=3)
    assert np.array_equal(a.common, b.common)
    assert np.array_equal(a.idio, b.idio)
    assert np.array_equal(a.initial_states, b.initial_states)


def test_seed_change_changes_bundle(grid50, mu0):
    a = sample_noise(grid50, 4, 1, mu0, 1)
    b = sample_noise(grid50, 4, 1, mu0, 2)
    assert not np.array_equal(a.idio, b.idio)
    assert not np.array_equal(a.common, b.common)


def test_adding_paths_keeps_existing(grid50, mu0):
    small = sample_noise(grid50, 5, 1, mu0, 9, worlds=2)
    big = sample_noise(grid50, 50, 1, mu0, 9, worlds=2)
    assert np.array_equal(small.idio, big.idio[:, :, :5])
    assert np.array_equal(small.initial_states, big.initial_states[:, :5])
    assert np.array_equal(small.common, big.common)


def test_common_variance_single_step():
    g = make_time_grid(0.25, 1)
    b = sample_noise(g, 1, 1, InitialLaw.point([0.0]), 3, worlds=10_000)
    v = b.common[:, 0, 0].var()
    assert abs(v - 0.25) <= 3 * 0.25 * np.sqrt(2) / np.sqrt(1e4)


def test_increment_moments():
    g = make_time_grid(1.0, 4)
    b = sample_noise(g, 5000, 2, InitialLaw.point([0.0]), 5, worlds=2)
    inc = b.idio.reshape(-1, 2)
    S = inc.shape[0]
    dt = g.dt
    assert np.all(np.abs(inc.mean(axis=0)) <= 4 * np.sqrt(dt / S))
    cov = inc.T @ inc / S
    se = np.sqrt(2) * dt / np.sqrt(S)
    assert np.all(np.abs(cov - dt * np.eye(2)) <= 4 * se)


def test_initial_law_samples():
    g = make_time_grid(1.0, 1)
    b = sample_noise(g, 20000, 1, InitialLaw.gaussian([1.0], [[0.25]]), 0)
    x0 = b.initial_states[0, :, 0]
    assert abs(x0.mean() - 1.0) < 4 * 0.5 / np.sqrt(x0.size)
    pm = sample_noise(g, 3, 1, InitialLaw.point([2.0, -1.0]), 0)
    assert np.all(pm.initial_states == np.array([2.0, -1.0]))


def test_restrict_players(grid50, mu0):
    b = sample_noise(grid50, 8, 1, mu0, 4, worlds=2)
    assert restrict_players(b, 8) is b
    one = restrict_players(b, 1)
    assert np.array_equal(one.common, b.common)
    r84 = restrict_players(restrict_players(b, 8), 4)
    r4 = restrict_players(b, 4)
    assert np.array_equal(r84.idio, r4.idio)
    assert np.array_equal(r84.initial_states, r4.initial_states)
    with pytest.raises(IndexError):
        restrict_players(b, 9)


def test_bundle_is_read_only(grid50, mu0):
    b = sample_noise(grid50, 2, 1, mu0, 4)
    with pytest.raises(ValueError):
        b.common[0, 0, 0] = 1.0


def test_restrict_worlds_and_permute(grid50, mu0):
    b = sample_noise(grid50, 4, 1, mu0, 4, worlds=3)
    w = restrict_worlds(b, 2)
    assert np.array_equal(w.common, b.common[:2])
    p = permute_players(b, [1, 2, 0, 3])
    assert np.array_equal(p.idiosyncratic[:, 0], b.idiosyncratic[:, 1])
    assert np.array_equal(p.initial_states[:, 2], b.initial_states[:, 0])
    with pytest.raises(ConfigurationError):
        permute_players(b, [0, 0, 1, 2])
