import numpy as np
import pytest

from softq_lab import dataset as ds
from softq_lab.plant import PlantConfig, ReferencePlant
from softq_lab.surrogate import PlantOracle, SurrogateDynamics, one_step_nrmse, train_surrogate, validate


@pytest.fixture(scope="module")
def model(small_split):
    train, val = small_split
    return train_surrogate(train, epochs=15, seed=0, val_set=val, input_noise=0.01)


def test_fit_predict_shapes(model, small_split):
    _, val = small_split
    S, A, S1 = val.arrays()
    pred = model.predict(np.hstack([S, A]))
    assert pred.shape == S1.shape
    assert model.n_epochs_ <= 15 and len(model.loss_curve_) == model.n_epochs_
    assert model.loss_curve_[-1] < model.loss_curve_[0]


def test_sklearn_estimator_api(small_split):
    from sklearn.base import clone
    m = SurrogateDynamics(epochs=2, seed=3)
    c = clone(m)
    assert c.get_params() == m.get_params()
    train, _ = small_split
    S, A, S1 = train.arrays()
    X = np.hstack([S, A])
    c.fit(X, S1)
    assert -1.0 <= c.score(X, S1) <= 1.0


def test_training_is_deterministic(small_split):
    train, _ = small_split
    a = train_surrogate(train, epochs=2, seed=1)
    b = train_surrogate(train, epochs=2, seed=1)
    assert a.params_ == b.params_


def test_fit_rejects_wrong_width():
    with pytest.raises(ValueError):
        SurrogateDynamics(epochs=1).fit(np.zeros((5, 13)), np.zeros((5, 10)))


def test_predict_rejects_non_finite(model):
    with pytest.raises(ValueError):
        model.predict_states(np.full((1, 10), np.nan), np.zeros((1, 4)))


def test_empty_training_set():
    with pytest.raises(ds.EmptyDatasetError):
        train_surrogate(ds.Dataset(()))


def test_save_load(tmp_path, model, small_split):
    path = tmp_path / "m.npz"
    model.save(path)
    back = SurrogateDynamics.load(path)
    S, A, _ = small_split[1].arrays()
    assert np.array_equal(back.predict_states(S, A), model.predict_states(S, A))
    assert back.clip_margin == model.clip_margin and back.input_noise == model.input_noise


def test_rollout_matches_repeated_prediction(model):
    s0 = ReferencePlant.initial_state().as_array()
    acts = np.random.default_rng(0).uniform(0, 1, (5, 4))
    roll = model.rollout(s0, acts)
    s = s0[None]
    for k, a in enumerate(acts):
        s = model.predict_states(s, a[None])
        assert np.array_equal(roll[k], s[0])


def test_validation_report(model, small_split, tmp_path):
    _, val = small_split
    rep = validate(model, val, T_max=20)
    assert rep.R == rep.R_T[0] and rep.NRMSE == rep.NRMSE_T[0]
    assert len(rep.horizons) == 20 and rep.horizons[0] == 1
    S, A, S1 = val.arrays()
    all_states = np.concatenate([q.states for q in val.sequences])
    np.testing.assert_allclose(rep.NRMSE, one_step_nrmse(model, np.hstack([S, A]), S1, np.ptp(all_states, axis=0)), rtol=1e-12)
    path = tmp_path / "v.csv"
    rep.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "horizon,R_T,NRMSE_T,rho_horizon,n_windows" and len(lines) == 21


def test_validation_rejects_long_horizon(model, small_split):
    with pytest.raises(ValueError):
        validate(model, small_split[1], T_max=500)
    with pytest.raises(ds.EmptyDatasetError):
        validate(model, ds.Dataset(()), T_max=1)


def test_oracle_is_perfect():
    val = ds.collect(PlantConfig(), n_sequences=4, steps_per_sequence=30, expert_fraction=0.25, seed=9)
    rep = validate(PlantOracle(lambda: ReferencePlant(noise=False), val), val, T_max=30)
    assert rep.NRMSE_T.max() <= 1e-12
    assert abs(rep.R - 1.0) <= 1e-9
