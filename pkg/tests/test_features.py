import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from leakscope.core import Direction, PacketRecord
from leakscope.errors import EmptyPool
from leakscope.features import (
    FeatureKind,
    Vocabulary,
    as_kind,
    build_vocabulary,
    count_matrix,
    extract,
    sample_index_instances,
    sample_instance,
)

TO, FROM = Direction.TO_SERVICE, Direction.FROM_SERVICE

# chi-square upper 0.1% critical values, df -> value
CHI2_999 = {4: 18.467, 9: 27.877}


def pk(n, d=TO):
    return PacketRecord(0.0, d, n, "s")


def test_vocabulary_order_and_oov():
    v = build_vocabulary([pk(50, FROM), pk(20), pk(50), pk(20)])
    assert v.keys == ((20, TO), (50, TO), (50, FROM))
    assert len(v) == 4
    assert v.lookup((999, TO)) == v.oov_index == 3
    assert Vocabulary.from_list(v.to_list()) == v
    with pytest.raises(ValueError):
        Vocabulary([(1, TO), (1, TO)])


def test_extract_binary_and_counts():
    v = build_vocabulary([pk(20), pk(50)])
    packets = [pk(20), pk(20), pk(50), pk(7)]
    assert extract(packets, v, FeatureKind.COUNTS).values.tolist() == [2, 1, 1]
    assert extract(packets, v, FeatureKind.BINARY).values.tolist() == [1, 1, 1]
    assert extract([], v, FeatureKind.COUNTS).values.tolist() == [0, 0, 0]


@given(st.lists(st.tuples(st.integers(1, 30), st.booleans()), min_size=1, max_size=40))
def test_counts_sum_to_packets(raw):
    packets = [pk(n, TO if b else FROM) for n, b in raw]
    v = build_vocabulary(packets[: len(packets) // 2 + 1])
    counts = extract(packets, v, FeatureKind.COUNTS).values
    assert counts.sum() == len(packets)
    assert np.array_equal(extract(packets, v, FeatureKind.BINARY).values, np.minimum(counts, 1))
    rows = v.encode(packets)[None, :]
    assert np.array_equal(count_matrix(rows, len(v))[0], counts)


def test_count_matrix_rows_are_independent():
    rows = np.array([[0, 0, 2], [1, 2, 2]])
    assert count_matrix(rows, 3).tolist() == [[2, 0, 1], [0, 1, 2]]
    assert as_kind(count_matrix(rows, 3), FeatureKind.BINARY).tolist() == [[1, 0, 1], [0, 1, 1]]


def _chi2(observed, expected):
    return float(((observed - expected) ** 2 / expected).sum())


def test_sample_instance_is_uniform_with_replacement():
    pool = [pk(n) for n in range(5)]
    rng = np.random.default_rng(5)
    draws = [p.payload_length for _ in range(2000) for p in sample_instance(pool, 5, rng)]
    obs = np.bincount(draws, minlength=5)
    assert _chi2(obs, np.full(5, len(draws) / 5)) < CHI2_999[4]


def test_sample_index_instances_is_uniform():
    pool = np.arange(10)
    m = sample_index_instances(pool, 7, 3000, np.random.default_rng(2))
    assert m.shape == (3000, 7)
    obs = np.bincount(m.ravel(), minlength=10)
    assert _chi2(obs, np.full(10, m.size / 10)) < CHI2_999[9]


def test_sampling_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(EmptyPool):
        sample_instance([], 3, rng)
    with pytest.raises(EmptyPool):
        sample_index_instances(np.array([], dtype=int), 3, 2, rng)
    with pytest.raises(ValueError):
        sample_instance([pk(1)], 0, rng)
