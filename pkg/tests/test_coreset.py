import json
import math

import numpy as np
import pytest

from tightsens.core import DegenerateInputError, WeightedPointSet
from tightsens.coreset import (
    Coreset,
    StreamTree,
    compute_sensitivities,
    default_vc_dim,
    sample_coreset,
    sample_size,
    stream_finalize,
    stream_push,
)
from tightsens.sensitivity import SensitivityVector, uniform_sensitivities


def test_sample_size_examples():
    assert sample_size(math.e, 1, 1.0, 1 / math.e) == 6
    assert sample_size(math.e, 1, 1.0, 1 / math.e, c=2) == 11  # 2e * 2 = 10.87
    assert sample_size(0.5, 3, 0.5, 0.1) == sample_size(0.5, 1, 0.5, 0.1)  # ln t clamped at 0
    assert sample_size(1e-12, 1, 0.9, 0.9) == 1
    with pytest.raises(ValueError):
        sample_size(0.0, 1, 0.5)
    assert default_vc_dim(2, 5) == 18


def test_sample_size_monotone():
    assert sample_size(10, 5, 0.1) < sample_size(20, 5, 0.1)
    assert sample_size(10, 5, 0.1) < sample_size(10, 5, 0.05)


def test_sample_coreset_single_point():
    ps = WeightedPointSet([[1.0, 2.0]], [3.0])
    sens = SensitivityVector.build(np.array([1.0]), "x", 0.0, 0, False)
    cs = sample_coreset(ps, sens, 5, 0)
    np.testing.assert_array_equal(cs.source_indices, 0)
    np.testing.assert_allclose(cs.weights, 3.0 / 5)


def test_sample_coreset_weights_formula():
    rng = np.random.default_rng(0)
    ps = WeightedPointSet(rng.normal(size=(20, 3)), rng.uniform(0.5, 2, 20))
    s = rng.uniform(0.1, 1, 20)
    sens = SensitivityVector.build(s, "x", 0.0, 1, False)
    cs = sample_coreset(ps, sens, 50, 1)
    t = s.sum()
    np.testing.assert_allclose(cs.weights, t * ps.weights[cs.source_indices] / (s[cs.source_indices] * 50))
    assert cs.t == pytest.approx(t) and cs.m == 50 and cs.seed == 1


def test_sample_coreset_deterministic():
    rng = np.random.default_rng(1)
    ps = WeightedPointSet.unweighted(rng.normal(size=(30, 2)))
    sens = uniform_sensitivities(ps)
    a = sample_coreset(ps, sens, 10, 42)
    b = sample_coreset(ps, sens, 10, 42)
    c = sample_coreset(ps, sens, 10, 43)
    np.testing.assert_array_equal(a.source_indices, b.source_indices)
    np.testing.assert_array_equal(a.weights, b.weights)
    assert not np.array_equal(a.source_indices, c.source_indices)


def test_sample_coreset_errors():
    ps = WeightedPointSet.unweighted(np.eye(2))
    with pytest.raises(DegenerateInputError):
        sample_coreset(ps, SensitivityVector.build(np.zeros(2), "x", 0, 0, False), 3, 0)
    with pytest.raises(ValueError):
        sample_coreset(ps, uniform_sensitivities(ps), 0, 0)
    with pytest.raises(ValueError):
        sample_coreset(ps, SensitivityVector.build(np.ones(3), "x", 0, 0, False), 3, 0)


def test_coreset_save_load_roundtrip(tmp_path):
    cs = Coreset(np.array([3, 1, 3]), np.array([0.1, 1 / 3, 2.5]), "tight", 7, 1.25, 2, True, 1e-3)
    path = tmp_path / "cs.csv"
    cs.save(path)
    assert path.read_text().splitlines()[0] == "index,weight"
    meta = json.loads((tmp_path / "cs.csv.json").read_text())
    assert meta == {"method": "tight", "k": 2, "affine": True, "eps": 1e-3, "seed": 7, "t": 1.25, "m": 3}
    back = Coreset.load(path)
    np.testing.assert_array_equal(back.source_indices, cs.source_indices)
    np.testing.assert_array_equal(back.weights, cs.weights)
    assert back.provenance() == cs.provenance()


def test_coreset_validation():
    with pytest.raises(ValueError):
        Coreset(np.array([0, 1]), np.array([1.0]))
    with pytest.raises(ValueError):
        Coreset(np.array([-1]), np.array([1.0]))
    with pytest.raises(ValueError):
        Coreset(np.array([], dtype=int), np.array([]))


def test_compute_sensitivities_dispatch():
    ps = WeightedPointSet.unweighted(np.random.default_rng(2).normal(size=(10, 3)))
    assert compute_sensitivities(ps, "uniform", 1, False, 1e-3).method == "uniform"
    assert compute_sensitivities(ps, "tight", 1, False, 1e-3).method == "trace_ratio"
    assert compute_sensitivities(ps, "tight", 1, True, 1e-3).method == "affine_lift"
    assert compute_sensitivities(ps, "baseline", 1, False, 1e-3).method == "baseline_projection"
    with pytest.raises(ValueError):
        compute_sensitivities(ps, "magic", 1, False, 1e-3)


# --- streaming ----------------------------------------------------------------


def test_stream_small_input_returned_unchanged():
    tree = StreamTree(reduce_size=5, leaf_size=10, k=1)
    rows = np.arange(12.0).reshape(6, 2)
    stream_push(tree, rows)
    cs = stream_finalize(tree, 10)
    np.testing.assert_array_equal(np.sort(cs.source_indices), np.arange(6))
    np.testing.assert_array_equal(cs.weights, 1.0)
    assert cs.t is None


def test_stream_levels_and_memory_bound():
    rng = np.random.default_rng(3)
    tree = StreamTree(reduce_size=20, leaf_size=50, k=1, seed=5)
    data = rng.normal(size=(1000, 4))
    for start in range(0, 1000, 37):
        tree.push(data[start:start + 37])
    # 20 leaves -> binary counter 10100
    assert sorted(tree.levels) == [2, 4]
    assert all(node.points.shape[0] == 20 for node in tree.levels.values())
    assert tree.max_retained <= tree.memory_bound()
    cs = tree.finalize(30)
    assert cs.m == 30
    assert cs.source_indices.max() < 1000
    # total weight is preserved in expectation; it should be the right order
    assert 300 < cs.weights.sum() < 3000


def test_stream_deterministic_and_chunking_invariant():
    rng = np.random.default_rng(4)
    data = rng.normal(size=(400, 3))

    def run(chunk):
        tree = StreamTree(reduce_size=25, leaf_size=64, k=1, seed=11)
        for s in range(0, 400, chunk):
            tree.push(data[s:s + chunk])
        return tree.finalize(40)

    a, b = run(50), run(7)
    np.testing.assert_array_equal(a.source_indices, b.source_indices)
    np.testing.assert_array_equal(a.weights, b.weights)


def test_stream_errors():
    tree = StreamTree(reduce_size=3, leaf_size=4)
    with pytest.raises(DegenerateInputError):
        tree.finalize(2)
    tree.push(np.ones((2, 3)))
    with pytest.raises(ValueError):
        tree.push(np.ones((2, 4)))
    with pytest.raises(ValueError):
        StreamTree(reduce_size=0)
