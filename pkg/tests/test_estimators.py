import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from prevadapt.estimators import ERMClassifier, GPAClassifier, infer_codec
from prevadapt.knockout import CategoricalSpec, ContinuousSpec
from prevadapt.semdata import EmissionConfig, SemConfig, generate_site
from prevadapt.train import f1_score


def _multi_site_data(seed=0, n_train=1500, n_val=400, n_test=600, test_beta=0.45):
    em = EmissionConfig()
    train = [
        generate_site(f"tr{i}", SemConfig("confounded", beta=b, alpha=0.3, n=n_train), em, seed)
        for i, b in enumerate([0.9, 0.7])
    ]
    val = generate_site("val", SemConfig("confounded", beta=0.5, alpha=0.3, n=n_val), em, seed)
    test = generate_site("test", SemConfig("confounded", beta=test_beta, alpha=0.3, n=n_test), em, seed)
    X = np.concatenate([s.x for s in train])
    y = np.concatenate([s.y for s in train])
    z = np.concatenate([s.z for s in train])
    site = np.concatenate([np.full(s.n, i) for i, s in enumerate(train)])
    return (X, y, z, site), val, test


def test_infer_codec_kinds():
    z = np.array([[0.0, 1.25], [1.0, -3.5], [np.nan, 0.75], [2.0, 9.0]])
    codec = infer_codec(z)
    assert isinstance(codec.specs[0], CategoricalSpec) and codec.specs[0].cardinality == 3
    assert isinstance(codec.specs[1], ContinuousSpec)
    assert codec.specs[1].lo == -3.5 and codec.specs[1].hi == 9.0


def test_get_params_set_params_clone():
    clf = GPAClassifier(epochs=7, knockout_rate=0.25)
    params = clf.get_params()
    assert params["epochs"] == 7 and params["knockout_rate"] == 0.25
    clf2 = clone(clf).set_params(epochs=3)
    assert clf2.get_params()["epochs"] == 3
    erm = clone(ERMClassifier(use_z=True, epochs=2))
    assert erm.get_params()["use_z"] is True


def test_predict_before_fit_raises():
    with pytest.raises(NotFittedError):
        GPAClassifier().predict(np.zeros((2, 5)))
    with pytest.raises(NotFittedError):
        ERMClassifier().predict(np.zeros((2, 5)))


def test_predict_before_adapt_raises():
    (X, y, z, site), val, test = _multi_site_data()
    clf = GPAClassifier(epochs=2, hidden=(16,), prevalence_hidden=(8,))
    clf.fit(X, y, z=z, site=site, X_val=val.x, y_val=val.y, z_val=val.z)
    with pytest.raises(RuntimeError):
        clf.predict(test.x, z=test.z)


def test_gpa_full_cycle_beats_chance():
    (X, y, z, site), val, test = _multi_site_data()
    clf = GPAClassifier(epochs=15, hidden=(32, 32), prevalence_hidden=(16,), random_state=0)
    clf.fit(X, y, z=z, site=site, X_val=val.x, y_val=val.y, z_val=val.z)
    clf.adapt(test.x, z=test.z)
    pred = clf.predict(test.x, z=test.z)
    probs = clf.predict_proba(test.x, z=test.z)
    assert probs.shape == (test.n, 2)
    assert np.max(np.abs(probs.sum(axis=1) - 1.0)) < 1e-9
    assert set(np.unique(pred)) <= {0, 1}
    assert f1_score(pred, test.y) > 0.3


def test_gpa_marginal_adaptation_without_z():
    (X, y, z, site), val, test = _multi_site_data()
    clf = GPAClassifier(epochs=10, hidden=(32,), prevalence_hidden=(16,))
    clf.fit(X, y, z=z, site=site, X_val=val.x, y_val=val.y, z_val=val.z)
    clf.adapt(test.x)  # no confounders at the new site
    mode, marginal = clf._target
    assert mode == "marginal"
    assert abs(np.sum(marginal) - 1.0) < 1e-9
    pred = clf.predict(test.x)
    assert pred.shape == (test.n,)


def test_gpa_adapt_direct_uses_labels():
    (X, y, z, site), val, test = _multi_site_data()
    clf = GPAClassifier(epochs=8, hidden=(32,), prevalence_hidden=(16,))
    clf.fit(X, y, z=z, site=site, X_val=val.x, y_val=val.y, z_val=val.z)
    clf.adapt_direct(test.y, test.z)
    pred = clf.predict(test.x, z=test.z)
    assert pred.shape == (test.n,)


def test_gpa_arbitrary_class_labels():
    (X, y, z, site), val, test = _multi_site_data()
    y_named = np.where(y == 1, 5, -2)
    clf = GPAClassifier(epochs=3, hidden=(16,), prevalence_hidden=(8,))
    clf.fit(X, y_named, z=z, site=site, X_val=val.x, y_val=np.where(val.y == 1, 5, -2), z_val=val.z)
    clf.adapt(test.x, z=test.z)
    pred = clf.predict(test.x, z=test.z)
    assert set(np.unique(pred)) <= {-2, 5}


def test_erm_fit_predict():
    (X, y, z, site), val, test = _multi_site_data()
    clf = ERMClassifier(epochs=10, hidden=(32,))
    clf.fit(X, y, X_val=val.x, y_val=val.y)
    pred = clf.predict(test.x)
    assert pred.shape == (test.n,)
    train_f1 = f1_score(clf.predict(X), y)
    assert train_f1 > 0.7  # heavily confounded training data is easy in-domain


def test_erm_with_z_input():
    (X, y, z, site), val, test = _multi_site_data()
    clf = ERMClassifier(use_z=True, epochs=5, hidden=(16,))
    clf.fit(X, y, z=z, X_val=val.x, y_val=val.y, z_val=val.z)
    pred = clf.predict(test.x, z=test.z)
    assert pred.shape == (test.n,)
