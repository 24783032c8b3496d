import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cascade_rec import CascadeRecommender
from cascade_rec.data import build_event_log, split_leave_one_out
from cascade_rec.estimator import check_interactions, check_users
from cascade_rec.exceptions import ConfigError
from cascade_rec.synth import FunnelParams, generate_synthetic


@pytest.fixture(scope="module")
def split():
    events = generate_synthetic(FunnelParams(n_users=30, n_items=20), rng_seed=4)
    return split_leave_one_out(build_event_log(events, ("view", "cart", "buy")))


@pytest.fixture(scope="module")
def fitted(split):
    return CascadeRecommender(embedding_dim=8, batch_size=16, max_epochs=6, patience=6).fit(split)


def test_default_parameters():
    params = CascadeRecommender().get_params()
    assert params["embedding_dim"] == 64 and params["n_negatives"] == 4 and params["batch_size"] == 1024
    assert params["patience"] == 20 and params["eval_k"] == 20 and params["task_weights"] is None


def test_clone_and_set_params():
    est = CascadeRecommender(learning_rate=3e-3, layers=(1, 2, 1))
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est
    twin.set_params(reg_weight=1e-3)
    assert twin.reg_weight == 1e-3 and est.reg_weight == 1e-4


def test_clone_drops_fitted_state(fitted):
    assert not hasattr(clone(fitted), "embeddings_")


def test_unfitted_use_raises():
    with pytest.raises(NotFittedError):
        CascadeRecommender().predict([0])


def test_fitted_attributes(fitted, split):
    assert fitted.embeddings_.P.shape == (split.train.n_users, 8)
    assert fitted.user_factors_.shape == (split.train.n_users, 8)
    assert fitted.behavior_order_ == ("view", "cart", "buy")
    assert len(fitted.history_) == 6 and 1 <= fitted.best_epoch_ <= 6
    assert len(fitted.block_outputs_) == 4


def test_predict_excludes_seen_and_is_sorted(fitted, split):
    users = np.array(sorted(split.test))[:5]
    top = fitted.predict(users, k=5)
    scores = fitted.decision_function(users)
    for row, u in enumerate(users):
        assert not set(top[row].tolist()) & fitted.train_items_[u]
        assert np.all(np.diff(scores[row, top[row]]) <= 0)


def test_predict_can_include_seen(fitted, split):
    u = next(u for u in split.test if fitted.train_items_[u])
    best = int(np.argmax(fitted.decision_function([u])[0]))
    assert fitted.predict([u], k=1, exclude_seen=False)[0, 0] == best


def test_decision_function_per_block(fitted):
    U, I = fitted.block_outputs_[1]
    assert np.array_equal(fitted.decision_function([0], behavior="view"), U[[0]] @ I.T)
    assert np.array_equal(fitted.decision_function([0]), fitted.decision_function([0], behavior="buy"))


def test_transform(fitted):
    assert np.array_equal(fitted.transform([2, 0]), fitted.user_factors_[[2, 0]])


def test_score_is_test_hit_ratio(fitted, split):
    assert fitted.score(split) == fitted.evaluate(split, ks=(20,)).hr[20]


def test_fit_is_reproducible(split):
    a = CascadeRecommender(embedding_dim=8, batch_size=16, max_epochs=3).fit(split)
    b = CascadeRecommender(embedding_dim=8, batch_size=16, max_epochs=3).fit(split)
    assert a.embeddings_.P.tobytes() == b.embeddings_.P.tobytes()


def test_layer_count_mismatch(split):
    with pytest.raises(ConfigError):
        CascadeRecommender(layers=(1, 1), max_epochs=1).fit(split)


def test_bad_inputs():
    with pytest.raises(TypeError):
        check_interactions(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        check_users([0, 5], 5)
    with pytest.raises(ValueError):
        check_users([0.5], 5)
    assert check_users(3, 5).tolist() == [3]
