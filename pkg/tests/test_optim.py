import numpy as np
import pytest

from refpop.autodiff import Tape, Tensor, reduce_sum
from refpop.params import AdamState, ParameterStore, adam_step


def make_store(values):
    store = ParameterStore()
    for name, v in values.items():
        store.add(name, v)
    return store


def test_duplicate_segment_rejected():
    store = make_store({"w": np.zeros(3)})
    with pytest.raises(ValueError):
        store.add("w", np.zeros(2))


def test_flat_view_round_trip():
    rng = np.random.default_rng(0)
    store = make_store({"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(4,))})
    assert store.total_size == 10
    flat = store.flat()
    store.set_flat(flat * 2.0)
    assert np.allclose(store["a"].data, flat[:6].reshape(2, 3) * 2.0)
    assert np.allclose(store["b"].data, flat[6:] * 2.0)


def test_clone_is_value_equal_but_independent():
    store = make_store({"a": np.arange(4.0)})
    dup = store.clone()
    assert store.value_equal(dup)
    dup["a"].data[0] = 99.0
    assert not store.value_equal(dup)
    assert store["a"].data[0] == 0.0


def test_fingerprint_changes_with_values():
    store = make_store({"a": np.arange(4.0)})
    f1 = store.fingerprint()
    assert f1 == store.clone().fingerprint()
    store["a"].data[1] = -1.0
    assert store.fingerprint() != f1


def test_adam_zero_gradient_keeps_parameters():
    store = make_store({"a": np.array([1.0, -2.0])})
    state = AdamState(size=2, lr=0.1)
    adam_step(store, {"a": np.zeros(2)}, state)
    assert np.array_equal(store["a"].data, [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_magnitude_is_learning_rate():
    store = make_store({"a": np.array([0.0])})
    state = AdamState(size=1, lr=0.05)
    adam_step(store, {"a": np.array([1.0])}, state)
    assert abs(store["a"].data[0] + 0.05) < 1e-6  # moved by ~lr against the gradient


def test_adam_converges_on_quadratic():
    target = np.array([3.0, -1.0, 0.5])
    store = make_store({"x": np.zeros(3)})
    state = AdamState(size=3, lr=0.1)
    for _ in range(500):
        adam_step(store, {"x": 2.0 * (store["x"].data - target)}, state)
    assert np.allclose(store["x"].data, target, atol=1e-3)


def test_adam_gradient_shape_mismatch_raises():
    store = make_store({"a": np.zeros((2, 2))})
    state = AdamState(size=4)
    with pytest.raises(ValueError):
        adam_step(store, {"a": np.zeros(3)}, state)


def test_missing_gradients_treated_as_zero():
    store = make_store({"a": np.array([1.0]), "b": np.array([2.0])})
    state = AdamState(size=2, lr=0.1)
    adam_step(store, {"a": np.array([1.0])}, state)
    assert store["b"].data[0] == 2.0
    assert store["a"].data[0] != 1.0


def test_store_gradients_via_tape():
    store = make_store({"w": np.array([2.0, -1.0])})
    with Tape() as tape:
        loss = reduce_sum(store["w"] * store["w"])
        grads = dict(zip(store.names(), tape.grad(loss, [store[n] for n in store.names()])))
    assert np.allclose(store.flatten_grads(grads), [4.0, -2.0])
