import numpy as np
import pytest

from wfdetect import embedding as em, sim_workflow as sw
from wfdetect.table import DataTable


def low_rank(seed=0, n=400, d=2, width=6):
    r = np.random.default_rng(seed)
    X = r.normal(size=(n, d)) @ r.normal(size=(d, width))
    return DataTable([f"v{k}" for k in range(width)], X)


def rmse_normalized(e, T):
    X = T.matrix(e.columns)
    return float(np.sqrt(np.mean(((e.decode(e.encode(X)) - X) / e.scale) ** 2)))


def test_low_rank_data_is_reconstructed():
    T = low_rank()
    e = em.train(T, 2, epochs=3000, hidden=16, seed=0)
    assert rmse_normalized(e, T) <= 1e-3


def test_full_width_linear_autoencoder_is_exact():
    T = DataTable([f"v{k}" for k in range(4)], np.random.default_rng(1).normal(size=(300, 4)))
    e = em.train(T, 4, epochs=3000, activation="linear", seed=0)
    assert rmse_normalized(e, T) <= 1e-3


def test_select_dim_finds_the_rank():
    e, d, ok = em.select_dim(low_rank(), 4, 0.999, epochs=3000, seed=0)
    assert (d, ok) == (2, True)


def test_select_dim_rejects_impossible_width():
    with pytest.raises(ValueError):
        em.select_dim(low_rank(), 7, 0.99)


@pytest.mark.prop
def test_gradient_descent_loss_is_monotone():
    e = em.train(low_rank(), 2, epochs=400, step_size=0.05, optimizer="gd", seed=3)
    h = np.array(e.loss_history)
    assert len(h) > 10
    assert np.all(np.diff(h) <= 1e-6)


@pytest.mark.prop
def test_lbfgs_loss_is_monotone():
    e = em.train(low_rank(), 1, epochs=300, seed=3)
    h = np.array(e.loss_history)
    assert np.all(np.diff(h) <= 1e-6)


@pytest.mark.prop
def test_same_seed_same_parameters():
    a = em.train(low_rank(), 2, epochs=200, seed=11)
    b = em.train(low_rank(), 2, epochs=200, seed=11)
    c = em.train(low_rank(), 2, epochs=200, seed=12)
    assert np.array_equal(a.theta, b.theta)
    assert not np.array_equal(a.theta, c.theta)


@pytest.mark.prop
def test_pass_through_columns_are_bit_identical(t0doe, tmp_path):
    e = em.train(t0doe, 2, epochs=50, seed=0)
    latent = em.encode_table(e, t0doe)
    for c in t0doe.columns_of("imposed", "boolean"):
        assert np.array_equal(latent[c], t0doe[c])
    back = em.decode_table(e, latent)
    assert np.array_equal(back["speed_setpoint"], t0doe["speed_setpoint"])
    e.to_json(tmp_path / "e.json")
    again = em.Embedding.from_json(tmp_path / "e.json")
    assert np.array_equal(again.encode(t0doe.matrix(e.columns)), e.encode(t0doe.matrix(e.columns)))


def test_three_latents_suffice_for_the_reference_table():
    T0 = sw.simulate(sw.case_config(), sw.default_cycle())
    train = DataTable(T0.columns, T0.values[::4], T0.kinds)
    e = em.train(train, 3, epochs=2000, seed=0)
    assert min(e.reconstruction_r2(T0).values()) >= 0.99


def test_invalid_arguments():
    with pytest.raises(ValueError):
        em.train(low_rank(), 0)
    with pytest.raises(ValueError):
        em.train(low_rank(n=15), 2)
    with pytest.raises(ValueError):
        em.train(low_rank(), 2, optimizer="adam")
