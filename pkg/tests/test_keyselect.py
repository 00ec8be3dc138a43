import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from hashview.descriptor import DescriptorSet, bits_to_fields
from hashview.errors import InvalidInputError, InvariantViolation
from hashview.keyselect import (
    OBJECTIVE_RTOL,
    HashKey,
    KeySelectionWarning,
    ProximityConfig,
    Strategy,
    bit_entropies,
    entropy_of_probability,
    key_length,
    learn_key,
    load_keys,
    pair_penalty,
    proximity_filter,
    quat_angle,
    quat_proximal,
    save_keys,
    scatter_penalty,
    select_pbs,
    select_rbs,
    select_tbs,
    select_tbv,
    split_imbalance,
)

IDENT = (1.0, 0.0, 0.0, 0.0)


def bitset(rows, width=None, objects=None, poses=None):
    bits = np.asarray(rows, dtype=bool)
    n, d = bits.shape
    width = width or d // 16
    return DescriptorSet(
        fields=bits_to_fields(bits), width=width, height=(d // 16) // width, ids=np.arange(n),
        object_ids=np.asarray(objects if objects is not None else np.arange(n)),
        view_ids=np.arange(n),
        poses=np.asarray(poses if poses is not None else np.tile(IDENT, (n, 1)), dtype=float),
        foreground_counts=np.ones(n, dtype=np.int64), scale_cluster=0, spread_radius=1,
    )


# key length


@pytest.mark.parametrize("n,b", [(3115, 11), (2, 1), (128, 7), (127, 6), (46725, 15)])
def test_key_length(n, b):
    assert key_length(n) == b


@pytest.mark.parametrize("n", [0, 1, -4])
def test_key_length_rejects_tiny_sets(n):
    with pytest.raises(InvalidInputError):
        key_length(n)


@given(st.integers(2, 2**62))
def test_key_length_matches_float_log(n):
    b = key_length(n)
    assert 2**b <= n < 2 ** (b + 1)


# entropy


def test_entropy_values():
    assert entropy_of_probability(0.5) == pytest.approx(math.log(2), abs=1e-6)
    assert entropy_of_probability(0.0) == 0.0
    assert entropy_of_probability(1.0) == 0.0
    assert entropy_of_probability(0.25) == pytest.approx(0.5623, abs=1e-4)


@given(st.integers(1, 40), st.integers(1, 40))
def test_entropy_of_columns(n, seed):
    bits = np.random.default_rng(seed).random((n, 16)) < 0.3
    h = bit_entropies(bits)
    for j in range(16):
        assert h[j] == pytest.approx(oracles.entropy(bits[:, j].mean()), abs=1e-12)


# RBS


def test_rbs_contract():
    data = np.zeros((4, 8), dtype=bool)
    key = select_rbs(data, 3, seed=9)
    assert len(set(key.positions)) == 3 and all(0 <= p < 8 for p in key.positions)
    assert select_rbs(data, 3, seed=9) == key
    assert sorted(select_rbs(data, 8, seed=1).positions) == list(range(8))


def test_rbs_rejects_b_above_d():
    with pytest.raises(InvalidInputError):
        select_rbs(np.zeros((2, 8), dtype=bool), 9)


# PBS


def test_pbs_unique_maximizers():
    rng = np.random.default_rng(0)
    n, d = 64, 32
    data = np.zeros((n, d), dtype=bool)
    data[:, 5] = True
    for j in (3, 17, 30):
        data[rng.permutation(n)[: n // 2], j] = True
    assert sorted(select_pbs(data, 3).positions) == [3, 17, 30]


def test_pbs_constant_bits_give_empty_key():
    data = np.zeros((5, 32), dtype=bool)
    data[:, 7] = True
    with pytest.warns(KeySelectionWarning):
        key = select_pbs(data, 4)
    assert key.b == 0


@given(st.integers(0, 1000))
def test_pbs_matches_sorted_entropy(seed):
    rng = np.random.default_rng(seed)
    data = rng.random((30, 48)) < rng.random(48)
    key = select_pbs(data, 5)
    h = [oracles.entropy(p) for p in data.mean(axis=0)]
    order = sorted(range(48), key=lambda j: (-h[j], j))
    assert list(key.positions) == [j for j in order if h[j] > 0][:5]


def test_pbs_skips_only_proximity_excluded_bits():
    rng = np.random.default_rng(4)
    data = rng.random((50, 4 * 16)) < 0.5
    dset = bitset(data, width=2)
    key = select_pbs(dset, 6)
    h = bit_entropies(data)
    assert all(h[a] >= h[b] for a, b in zip(key.positions, key.positions[1:]))
    chosen = []
    for pos in sorted(range(64), key=lambda j: (-h[j], j)):
        if pos in key.positions:
            chosen.append(pos)
        elif len(chosen) < key.b:
            assert not oracles.admissible(chosen, pos, 2, 2)


# proximity filter


def test_proximity_filter_examples():
    assert proximity_filter([], 5, 4)
    assert not proximity_filter([5], 5, 4)
    # same value, neighboring cell: distance 1 < 2
    assert not proximity_filter([3], 16 + 3, 4)
    # same value two cells away: distance 2 is admissible
    assert proximity_filter([3], 2 * 16 + 3, 4)
    # other value in the same cell is fine
    assert proximity_filter([3], 4, 4)


@given(st.lists(st.integers(0, 9 * 16 - 1), max_size=6, unique=True), st.integers(0, 9 * 16 - 1),
       st.integers(0, 3))
def test_proximity_filter_matches_oracle(selected, candidate, dist):
    prox = ProximityConfig(same_value_min_distance=dist)
    assert proximity_filter(selected, candidate, 3, prox) == oracles.admissible(selected, candidate, 3, dist)


@pytest.mark.parametrize("strategy", list(Strategy))
def test_all_strategies_respect_filter(strategy):
    rng = np.random.default_rng(1)
    data = rng.random((80, 9 * 16)) < 0.4
    dset = bitset(data, width=3, objects=np.zeros(80, int),
                  poses=_random_quats(80, rng))
    key = learn_key(dset, strategy, 6)
    for j, pos in enumerate(key.positions):
        assert oracles.admissible(list(key.positions[:j]), pos, 3, 2)


# quaternions


def test_quat_proximal_examples():
    assert quat_proximal(IDENT, IDENT, 0.3)
    assert not quat_proximal(IDENT, (0.0, 0.0, 0.0, 1.0), 0.3)
    assert quat_angle(IDENT, (0.0, 0.0, 0.0, 1.0)) == pytest.approx(math.pi / 2)
    q = np.array([0.5, 0.5, 0.5, 0.5])
    assert quat_proximal(q, -q, 0.3)


def test_quat_rejects_non_unit():
    with pytest.raises(InvalidInputError):
        quat_proximal((1.0, 0.1, 0.0, 0.0), IDENT, 0.3)


def _random_quats(n, rng):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


# split and penalty primitives


def test_split_imbalance_examples():
    bits = np.array([[0, 1], [0, 1], [1, 1], [1, 1]], dtype=bool)
    assert split_imbalance(bits, [0, 1, 2, 3], 0) == 0
    assert split_imbalance(bits, [0, 1, 2, 3], 1) == 4
    three = np.array([[0, 0, 1], [0, 1, 0], [1, 0, 0], [1, 1, 1]], dtype=bool)
    assert [split_imbalance(three, range(4), j) for j in range(3)] == [0, 0, 0]


def test_scatter_penalty_examples():
    close = np.array([[1, 0, 0, 0], [math.cos(0.05), math.sin(0.05), 0, 0]])
    bits = np.array([[0] * 16, [1] + [0] * 15, [0] * 16], dtype=bool)
    distinct = bitset(bits, objects=[0, 1, 2], poses=np.tile(IDENT, (3, 1)))
    assert scatter_penalty(distinct, [0, 1, 2], 0) == 0
    pair = bitset(bits[:2], objects=[0, 0], poses=close)
    assert scatter_penalty(pair, [0, 1], 0) == 0  # bit 0 separates them
    assert scatter_penalty(pair, [0, 1], 1) == 2  # both on one side: ordered pairs
    assert pair_penalty([0, 1], np.array([0, 0]), close, 0.3) == 2


# TBS


def test_tbs_two_bit_square():
    data = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=bool)
    trace = []
    key = select_tbs(data, 2, trace=trace)
    assert sorted(key.positions) == [0, 1]
    assert all(int(t.objective[t.chosen]) == 0 for t in trace)


def test_tbs_unique_minimizer():
    data = np.zeros((4, 16), dtype=bool)
    data[:, 3] = True
    data[:2, 9] = True
    assert select_tbs(data, 1).positions == (9,)


def test_tbs_identical_pair_gives_empty_key():
    data = np.tile(np.arange(16) % 3 == 0, (2, 1))
    assert select_tbs(data, 1).b == 0


def test_tree_rejects_empty_set():
    for fn in (select_tbs, select_tbv):
        with pytest.raises(InvalidInputError):
            fn(np.zeros((0, 16), dtype=bool), 1)


# TBV


def test_tbv_equals_tbs_without_pairs():
    rng = np.random.default_rng(3)
    data = rng.random((60, 32)) < 0.5
    assert select_tbv(data, 5).positions == select_tbs(data, 5).positions


def test_tbv_prefers_separating_bit():
    # bits 0 and 1 both split 2/2; only bit 1 separates the close pair (rows 0, 1)
    data = np.zeros((4, 16), dtype=bool)
    data[[0, 1], 0] = True
    data[[1, 2], 1] = True
    close = np.array([IDENT, (math.cos(0.05), math.sin(0.05), 0, 0), (0, 1, 0, 0), (0, 0, 1, 0)])
    dset = bitset(data, objects=[0, 0, 1, 2], poses=close)
    assert select_tbs(dset, 1).positions == (0,)
    assert select_tbv(dset, 1).positions == (1,)


@given(st.integers(0, 10_000))
def test_tbv_single_level_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 24))
    data = rng.random((n, 32)) < rng.random(32)
    objects = rng.integers(0, 2, n)
    base = _random_quats(3, rng)
    poses = base[rng.integers(0, 3, n)] + rng.normal(scale=0.05, size=(n, 4))
    poses /= np.linalg.norm(poses, axis=1, keepdims=True)
    dset = bitset(data, objects=objects, poses=poses)
    rows = data.astype(int).tolist()
    expected, _ = oracles.grow_tree(rows, 1, "tbv", 2, 2, objects.tolist(), poses.tolist(),
                                    rtol=Fraction(OBJECTIVE_RTOL))
    assert list(select_tbv(dset, 1).positions) == expected


# key files


def test_key_line_round_trip(tmp_path):
    keys = [HashKey((3, 7, 12), Strategy.TBV), HashKey((), Strategy.PBS)]
    path = tmp_path / "keys.txt"
    save_keys(keys, path)
    assert path.read_text().splitlines()[0] == "TBV 3 3 7 12"
    assert load_keys(path) == keys


def test_key_line_validation():
    with pytest.raises(InvariantViolation):
        HashKey.from_line("TBS 3 1 2")
    with pytest.raises(InvalidInputError):
        HashKey((1, 1), Strategy.TBS)
    with pytest.raises(InvalidInputError):
        Strategy.parse("xyz")
    assert HashKey.from_line("tbs 2 4 5").strategy is Strategy.TBS


@pytest.mark.parametrize("strategy", list(Strategy))
def test_determinism(strategy):
    rng = np.random.default_rng(8)
    data = rng.random((70, 4 * 16)) < 0.4
    dset = bitset(data, width=2, objects=rng.integers(0, 2, 70), poses=_random_quats(70, rng))
    assert learn_key(dset, strategy, 5, seed=4) == learn_key(dset, strategy, 5, seed=4)
