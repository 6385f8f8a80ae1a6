import numpy as np
import pytest

from weakseg.autodiff import Tensor
from weakseg.optim import Adam, NonFiniteGradient, PlateauSchedule, adam_step

from oracles import adam_reference


class Params(list):
    names = ["w", "b"]


def make_params(rng):
    return Params([Tensor(rng.normal(size=(3, 2)), True), Tensor(rng.normal(size=4), True)])


def test_zero_gradients_leave_parameters(rng):
    p = make_params(rng)
    before = [t.data.copy() for t in p]
    Adam(p).step(p, [np.zeros((3, 2)), np.zeros(4)])
    assert all(np.array_equal(a, t.data) for a, t in zip(before, p))


def test_first_step_is_sign(rng):
    p = make_params(rng)
    before = [t.data.copy() for t in p]
    grads = [rng.normal(size=(3, 2)), rng.normal(size=4)]
    Adam(p, lr=1e-3).step(p, grads)
    for a, t, g in zip(before, p, grads):
        np.testing.assert_allclose(t.data - a, -1e-3 * np.sign(g), rtol=1e-6)


def test_matches_direct_recurrence(rng):
    p = make_params(rng)
    start = np.concatenate([t.data.ravel() for t in p])
    opt = Adam(p, lr=5e-4)
    history = []
    for _ in range(100):
        grads = [rng.normal(size=(3, 2)) * 3, rng.normal(size=4) * 1e-3]
        history.append(np.concatenate([g.ravel() for g in grads]))
        adam_step(p, grads, opt)
    got = np.concatenate([t.data.ravel() for t in p])
    want = adam_reference(start, history, 5e-4)
    assert np.abs(got - want).max() < 1e-12
    assert opt.state.step == 100
    assert [m.shape for m in opt.state.first] == [t.shape for t in p]


def test_non_finite_gradient_names_parameter(rng):
    p = make_params(rng)
    with pytest.raises(NonFiniteGradient, match="parameter b"):
        Adam(p).step(p, [np.zeros((3, 2)), np.array([0, np.nan, 0, 0])])


def test_shape_mismatch(rng):
    p = make_params(rng)
    with pytest.raises(ValueError, match="shape"):
        Adam(p).step(p, [np.zeros((2, 3)), np.zeros(4)])


def test_plateau_halves_after_patience():
    s = PlateauSchedule(lr=5e-4, patience=20)
    s.update(0.5)
    for _ in range(19):
        assert s.update(0.5) == 5e-4
    assert s.update(0.5) == 2.5e-4
    for _ in range(19):
        s.update(0.5)
    assert s.update(0.5) == 1.25e-4


def test_plateau_needs_strict_gain():
    s = PlateauSchedule(lr=1.0, patience=2, min_delta=1e-4)
    s.update(0.5)
    s.update(0.50005)  # below min_delta: stale
    assert s.update(0.6) == 1.0
    s.update(0.6)
    assert s.update(0.6) == 0.5
