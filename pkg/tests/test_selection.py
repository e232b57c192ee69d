import math

import numpy as np
import pytest

from utils.config import SelectionConfig
from utils.errors import DatasetFormatError
from utils.graph_store import SplitMasks
from utils.selection import (
    InterventionMask, candidate_indices, gate_probabilities, predictive_entropy, read_mask, resolve_threshold,
    sample_mask, select_nodes, write_mask,
)


def _masks(n=10, test=(5, 6, 7, 8, 9)):
    train = np.zeros(n, dtype=bool)
    val = np.zeros(n, dtype=bool)
    mask_test = np.zeros(n, dtype=bool)
    train[:4] = True
    val[4] = True
    mask_test[list(test)] = True
    return SplitMasks(train, val, mask_test)


def test_entropy_of_uniform_and_one_hot_rows():
    proba = np.array([[0.25, 0.25, 0.25, 0.25], [1.0, 0.0, 0.0, 0.0]])
    np.testing.assert_allclose(predictive_entropy(proba), [math.log(4), 0.0], atol=1e-15)


def test_gate_is_one_half_at_the_threshold():
    cfg = SelectionConfig(alpha_gate=10.0, entropy_threshold=0.7)
    probs = gate_probabilities(np.array([0.7, 0.2, 1.5]), cfg)
    assert probs[0] == 0.5
    assert probs[1] < 0.5 < probs[2]


def test_default_threshold_is_median_over_candidates():
    entropy = np.array([9.0, 9.0, 0.1, 0.2, 0.3])
    assert resolve_threshold(entropy, [2, 3, 4], SelectionConfig()) == pytest.approx(0.2)
    assert resolve_threshold(entropy, [2, 3, 4], SelectionConfig(entropy_threshold=1.5)) == 1.5


def test_candidate_sets():
    masks = _masks()
    np.testing.assert_array_equal(candidate_indices(masks, SelectionConfig()), [5, 6, 7, 8, 9])
    np.testing.assert_array_equal(candidate_indices(masks, SelectionConfig(candidate_set="all_nodes")), np.arange(10))


def test_bernoulli_draw_stays_inside_candidates():
    probs = np.ones(10)
    mask = sample_mask(probs, SelectionConfig(), seed=0, candidates=[5, 6, 7])
    np.testing.assert_array_equal(mask.indices, [5, 6, 7])


def test_bernoulli_draw_concentrates_around_its_rate():
    n = 10000
    mask = sample_mask(np.full(n, 0.5), SelectionConfig(), seed=0, candidates=np.arange(n))
    assert 0.47 <= mask.size / n <= 0.53


def test_top_fraction_breaks_ties_by_index():
    cfg = SelectionConfig(mode="top_fraction", fraction=0.5)
    entropy = np.zeros(10)
    mask = sample_mask(np.zeros(10), cfg, seed=0, candidates=[9, 5, 2, 7], entropy=entropy)
    np.testing.assert_array_equal(mask.indices, [2, 5])


def test_top_fraction_takes_ceiling_of_highest_entropy():
    cfg = SelectionConfig(mode="top_fraction", fraction=0.3)
    entropy = np.array([0.0, 0.9, 0.1, 0.8, 0.5, 0.7])
    mask = sample_mask(np.zeros(6), cfg, seed=0, candidates=np.arange(6), entropy=entropy)
    np.testing.assert_array_equal(mask.indices, [1, 3])


def test_random_fraction_all_and_none_modes():
    candidates = np.arange(3, 13)
    random = sample_mask(np.zeros(20), SelectionConfig(mode="random_fraction", fraction=0.25), 0, candidates)
    assert random.size == 3
    assert set(random.indices) <= set(candidates)
    everything = sample_mask(np.zeros(20), SelectionConfig(mode="all"), 0, candidates)
    np.testing.assert_array_equal(everything.indices, candidates)
    assert sample_mask(np.ones(20), SelectionConfig(mode="none"), 0, candidates).size == 0


def test_draws_are_seeded():
    probs = np.full(50, 0.5)
    a = sample_mask(probs, SelectionConfig(), seed=4, candidates=np.arange(50))
    b = sample_mask(probs, SelectionConfig(), seed=4, candidates=np.arange(50))
    c = sample_mask(probs, SelectionConfig(), seed=4, candidates=np.arange(50), stream=(1,))
    np.testing.assert_array_equal(a.m, b.m)
    assert not np.array_equal(a.m, c.m)


def test_select_nodes_prefers_uncertain_test_nodes():
    proba = np.tile([0.98, 0.01, 0.01], (10, 1))
    proba[[6, 8]] = [1 / 3, 1 / 3, 1 / 3]
    mask, entropy, threshold = select_nodes(proba, _masks(), SelectionConfig(mode="top_fraction", fraction=0.4), 0)
    np.testing.assert_array_equal(mask.indices, [6, 8])
    assert threshold == pytest.approx(float(np.median(entropy[5:])))


def test_mask_file_round_trip(tmp_path):
    mask = InterventionMask(np.array([False, True, False, True]), np.zeros(4))
    loaded = read_mask(write_mask(mask, tmp_path / "mask.txt"), 4)
    np.testing.assert_array_equal(loaded.m, mask.m)


def test_mask_file_rejects_bad_indices(tmp_path):
    path = tmp_path / "mask.txt"
    path.write_text("1\n9\n")
    with pytest.raises(DatasetFormatError, match=r"mask\.txt:2:"):
        read_mask(path, 4)
