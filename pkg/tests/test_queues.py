import numpy as np
import pytest
from hypothesis import given, strategies as st

from patchtune.errors import ContractError, NotWarm
from patchtune.queues import IMAGE, PATCH, ClassQueue, QueueGroup, enqueue, random_unit, sample_positive_negative


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


A, B, Cv = unit([1, 0]), unit([0, 1]), unit([1, 1])


def test_fifo_eviction():
    q = ClassQueue(0, 2)
    for i, k in enumerate((A, B, Cv)):
        enqueue(q, k, i)
    assert [k.tolist() for k in q.keys()] == [B.tolist(), Cv.tolist()]
    assert q.steps() == [1, 2]


def test_enqueue_into_empty():
    q = ClassQueue(0, 3)
    enqueue(q, A, 0)
    assert len(q) == 1


def test_kind_mismatch():
    with pytest.raises(ContractError):
        enqueue(ClassQueue(0, 3, IMAGE), unit(np.ones((2, 3))), 0)
    with pytest.raises(ContractError):
        enqueue(ClassQueue(0, 3, PATCH), A, 0)


def test_non_normalised_key_rejected():
    with pytest.raises(ContractError):
        enqueue(ClassQueue(0, 3), np.array([1.0, 1.0]), 0)


def test_stored_keys_are_detached_copies():
    q = ClassQueue(0, 3)
    k = A.copy()
    enqueue(q, k, 0)
    k[0] = 5.0
    assert q.keys()[0].tolist() == [1.0, 0.0]
    with pytest.raises(ValueError):
        q.keys()[0][0] = 2.0


@given(st.integers(1, 6), st.lists(st.integers(0, 10**6), max_size=30))
def test_contents_are_last_n_keys(capacity, ids):
    q = ClassQueue(0, capacity)
    keys = [unit([np.cos(i), np.sin(i)]) for i in ids]
    for step, k in enumerate(keys):
        enqueue(q, k, step)
    tail = keys[-capacity:] if keys else []
    assert len(q) == min(capacity, len(keys))
    for got, want in zip(q.keys(), tail):
        np.testing.assert_array_equal(got, want)


def _group(counts, dim=3, seed=0):
    rng = np.random.default_rng(seed)
    g = QueueGroup(len(counts), 10)
    for c, n in enumerate(counts):
        for i in range(n):
            v = random_unit(rng, (dim,))
            v[0] = abs(v[0]) if c == 0 else -abs(v[0])  # class tag in the sign
            enqueue(g[c], v / np.linalg.norm(v), i)
    return g


def test_positive_truncation():
    pos, neg = sample_positive_negative(_group([1, 4, 4]), 0, 3, 40, np.random.default_rng(0))
    assert len(pos) == 1 and len(neg) == 8


def test_no_negatives_is_not_warm():
    with pytest.raises(NotWarm):
        sample_positive_negative(_group([3, 0, 0]), 0, 3, 3, np.random.default_rng(0))


def test_empty_positive_queue_is_not_warm():
    with pytest.raises(NotWarm):
        sample_positive_negative(_group([0, 3]), 0, 3, 3, np.random.default_rng(0))


def test_sampling_deterministic_given_seed():
    g = _group([6, 6, 6])
    a = sample_positive_negative(g, 1, 3, 4, np.random.default_rng(5))
    b = sample_positive_negative(g, 1, 3, 4, np.random.default_rng(5))
    for x, y in zip(a[0] + a[1], b[0] + b[1]):
        np.testing.assert_array_equal(x, y)


@given(st.integers(0, 2**31 - 1), st.integers(1, 8), st.integers(1, 8))
def test_sampling_respects_classes_and_no_replacement(seed, kp, km):
    g = _group([5, 4, 3], seed=seed % 1000)
    pos, neg = sample_positive_negative(g, 0, kp, km, np.random.default_rng(seed))
    assert all(k[0] >= 0 for k in pos) and all(k[0] <= 0 for k in neg)
    assert len(pos) == min(kp, 5) and len(neg) == min(km, 7)
    assert len({k.tobytes() for k in pos}) == len(pos)
    assert len({k.tobytes() for k in neg}) == len(neg)


def test_seed_random_fills_to_capacity_with_unit_keys():
    g = QueueGroup(3, 5, PATCH)
    g.seed_random(np.random.default_rng(0), (4, 6))
    for q in g.queues:
        assert len(q) == 5
        for k in q.keys():
            np.testing.assert_allclose(np.linalg.norm(k, axis=-1), 1.0, atol=1e-12)
