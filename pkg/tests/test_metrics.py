import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sta.boxes import Box
from sta.dataworld import Scene, SceneObject, Triplet, WorldSpec, generate_world
from sta.errors import ConfigError, MetricError
from sta.metrics import (MetricsReport, PredictionSet, alignment_baseline, alignment_recovery, config_hash,
                         eval_threads, overlap_ratio, pair_scores, per_relation_accuracy, recall_at_k,
                         relation_bias, truths_of)
from sta.nets import ModelConfig, init_params


def B(i):
    return Box(i, 0, i + 1, 1)


# ---------------------------------------------------------------- recall@K

def test_recall_example():
    preds = PredictionSet(4)
    preds.add("s", B(0), B(1), 2, 0.9)
    preds.add("s", B(2), B(3), 1, 0.8)
    preds.add("s", B(0), B(1), 3, 0.1)
    truths = {"s": [(B(0), B(1), 2), (B(2), B(3), 3)]}
    assert recall_at_k(preds, truths, 2) == 0.5
    assert recall_at_k(preds, truths, 1) == 0.5
    assert recall_at_k(preds, {"s": [(B(0), B(1), 2), (B(0), B(1), 3)]}, 3) == 1.0


def test_recall_saturates_and_skips_empty_scenes():
    preds = PredictionSet(3)
    for r in range(3):
        preds.add("s", B(0), B(1), r, 0.2)
    truths = {"s": [(B(0), B(1), 0), (B(0), B(1), 2)], "empty": []}
    assert recall_at_k(preds, truths, 3) == 1.0
    with pytest.raises(MetricError):
        recall_at_k(preds, {"empty": []}, 5)
    with pytest.raises(MetricError):
        recall_at_k(preds, truths, 0)


def test_recall_tie_break_is_insertion_order():
    preds = PredictionSet(5)
    for r in range(5):
        preds.add("s", B(0), B(1), r, 0.5)
    truths = {"s": [(B(0), B(1), r) for r in range(5)]}
    assert recall_at_k(preds, truths, 2) == 0.4
    hit_first = recall_at_k(preds, {"s": [(B(0), B(1), 0)]}, 1)
    hit_last = recall_at_k(preds, {"s": [(B(0), B(1), 4)]}, 1)
    assert (hit_first, hit_last) == (1.0, 0.0)


def test_prediction_set_validation():
    preds = PredictionSet(3)
    with pytest.raises(MetricError):
        preds.add("s", B(0), B(1), 3, 0.5)
    with pytest.raises(MetricError):
        preds.add("s", B(0), B(1), 0, float("nan"))


def _oracle(preds, truths, k):
    """Top-K membership by explicit rank counting, independent of sorting."""
    hits = total = 0
    for sid, gt in truths.items():
        if not gt:
            continue
        ps = preds.get(sid)
        members = set()
        for i, p in enumerate(ps):
            ahead = sum(1 for j, q in enumerate(ps) if q.score > p.score or (q.score == p.score and j < i))
            if ahead < k:
                members.add((p.subject, p.object, p.relation))
        hits += sum(1 for s, o, r in gt if (s, o, r) in members)
        total += len(gt)
    return hits / total


def test_recall_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        preds, truths = PredictionSet(4), {}
        for s in range(int(rng.integers(1, 4))):
            sid = f"s{s}"
            for _ in range(int(rng.integers(0, 12))):
                # coarse scores force plenty of ties
                preds.add(sid, B(int(rng.integers(3))), B(int(rng.integers(3))), int(rng.integers(4)),
                          float(rng.integers(5)) / 4)
            truths[sid] = [(B(int(rng.integers(3))), B(int(rng.integers(3))), int(rng.integers(4)))
                           for _ in range(int(rng.integers(1, 5)))]
        k = int(rng.integers(1, 10))
        assert recall_at_k(preds, truths, k) == _oracle(preds, truths, k)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 3), st.floats(0, 1)), min_size=1, max_size=15),
       st.integers(1, 20))
def test_recall_is_monotone_in_k(rows, k):
    preds = PredictionSet(4)
    for box, r, score in rows:
        preds.add("s", B(box), B(0), r, score)
    truths = {"s": [(B(box), B(0), r) for box, r, _ in rows[::2]]}
    assert 0.0 <= recall_at_k(preds, truths, k) <= recall_at_k(preds, truths, k + 1) <= 1.0


# ---------------------------------------------------------------- overlap ratio

def test_overlap_ratio_closed_forms():
    fmap = np.ones((20, 20, 3))
    a, b = Box(0, 0, 10, 10), Box(5, 0, 15, 10)
    assert abs(overlap_ratio(fmap, a, b) - 50 / 150) <= 1e-9
    assert overlap_ratio(fmap, a, Box(12, 12, 18, 18)) == 0.0
    focused = np.zeros((20, 20, 3))
    focused[0:10, 5:10] = 2.0
    assert overlap_ratio(focused, a, b) == 1.0
    with pytest.raises(MetricError):
        overlap_ratio(np.zeros((20, 20, 3)), a, b)


def test_overlap_ratio_uses_channel_mean_of_absolute_values():
    fmap = np.zeros((4, 4, 2))
    fmap[0, 0] = [-3.0, 1.0]   # only in a
    fmap[0, 1] = [2.0, -2.0]   # in the overlap
    a, b = Box(0, 0, 2, 1), Box(1, 0, 3, 1)
    assert overlap_ratio(fmap, a, b) == pytest.approx(2.0 / 4.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_overlap_ratio_scale_invariant(seed, scale):
    fmap = np.random.default_rng(seed).standard_normal((12, 12, 4))
    a, b = Box(1, 1, 8, 7), Box(4, 3, 11, 12)
    assert overlap_ratio(fmap * scale, a, b) == pytest.approx(overlap_ratio(fmap, a, b), rel=1e-12)


# ---------------------------------------------------------------- alignment recovery

def _dup_scene(rng):
    feats = rng.standard_normal((16, 16, 2))
    feats[8:12, 8:12] = feats[0:4, 0:4]
    objs = [SceneObject(Box(0, 0, 4, 4), 0), SceneObject(Box(8, 8, 12, 12), 1),
            SceneObject(Box(0, 10, 4, 14), 1), SceneObject(Box(10, 0, 14, 4), 1)]
    return Scene("dup", feats, objs, [Triplet(0, 0, 1)])


def test_alignment_identity_on_duplicated_partner():
    bundle = init_params(ModelConfig(channels=2, pool=2, use_oa=False), 0)
    rng = np.random.default_rng(1)
    scenes = []
    for i in range(5):
        s = _dup_scene(rng)
        scenes.append(Scene(f"d{i}", s.features, s.objects, s.triplets))
    assert alignment_recovery(bundle, scenes) == 1.0
    assert alignment_baseline(scenes) == pytest.approx(1 / 3)


def test_alignment_excludes_single_candidate_scenes():
    bundle = init_params(ModelConfig(channels=2, pool=2, use_oa=False), 0)
    s = _dup_scene(np.random.default_rng(2))
    lonely = Scene("pair", s.features, s.objects[:2], s.triplets)
    with pytest.raises(MetricError):
        alignment_recovery(bundle, [lonely])
    assert alignment_recovery(bundle, [lonely, s]) == 1.0


def _noise_scene(rng, sid, n):
    """Pure-noise map, n disjoint boxes on a grid, one subject with a random partner."""
    feats = rng.standard_normal((16, 16, 8))
    objs = [SceneObject(Box(4 * (i % 4), 4 * (i // 4), 4 * (i % 4) + 3, 4 * (i // 4) + 3), i) for i in range(n)]
    return Scene(sid, feats, objs, [Triplet(0, 0, int(rng.integers(1, n)))])


def test_alignment_random_bundle_matches_chance():
    # candidates are exchangeable, so an untrained bundle matches at about 1/M
    rates, base = [], []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        scenes = [_noise_scene(rng, f"n{i}", int(rng.integers(3, 9))) for i in range(10)]
        bundle = init_params(ModelConfig(pool=2), seed)
        rates.append(alignment_recovery(bundle, scenes))
        base.append(alignment_baseline(scenes))
    # 1000 queries at p ~ 0.25 give a standard error near 0.014
    assert abs(np.mean(rates) - np.mean(base)) < 0.045


def test_alignment_is_pure():
    spec = WorldSpec(seed=1, n_train=1, n_test=6).resolved()
    w = generate_world(spec)
    bundle = init_params(ModelConfig(pool=2), 4)
    before = {k: v.copy() for k, v in bundle.state_arrays().items()}
    assert alignment_recovery(bundle, w.test) == alignment_recovery(bundle, w.test)
    assert all(np.array_equal(before[k], v) for k, v in bundle.state_arrays().items())


# ---------------------------------------------------------------- per relation / bias

def _scene(sid, rels, cats=None):
    objs = [SceneObject(B(i), (cats or {}).get(i, i)) for i in range(2 * len(rels))]
    return Scene(sid, np.zeros((1, 1, 1)), objs, [Triplet(2 * i, r, 2 * i + 1) for i, r in enumerate(rels)])


def test_per_relation_accuracy_examples():
    scenes = [_scene("a", [0, 2, 2]), _scene("b", [5])]
    perfect = {"a": np.eye(8)[[0, 2, 2]], "b": np.eye(8)[[5]]}
    assert per_relation_accuracy(perfect, scenes) == {0: 1.0, 2: 1.0, 5: 1.0}
    half = {"a": np.eye(8)[[0, 2, 3]], "b": np.eye(8)[[1]]}
    assert per_relation_accuracy(half, scenes) == {0: 1.0, 2: 0.5, 5: 0.0}


def test_per_relation_accuracy_of_random_predictor():
    rng = np.random.default_rng(3)
    # 1000 trials per relation; standard error of 1/8 is about 0.0105
    rels = np.repeat(np.arange(8), 1000)
    scenes = [_scene("x", list(rels))]
    acc = per_relation_accuracy({"x": rng.random((8000, 8))}, scenes)
    assert set(acc) == set(range(8))
    assert all(abs(v - 1 / 8) < 0.035 for v in acc.values())


def test_relation_bias_examples():
    ten = [_scene(f"s{i}", [3], {0: i % 2, 1: 6}) for i in range(10)]
    assert relation_bias(ten) == [(3, 5.0)]
    distinct = [_scene(f"t{i}", [1], {0: i, 1: 6 + i}) for i in range(4)]
    assert relation_bias(distinct) == [(1, 1.0)]
    assert [r for r, _ in relation_bias(ten + distinct)] == [1, 3]
    with pytest.raises(MetricError):
        relation_bias([])


# ---------------------------------------------------------------- report

def _report(**kw):
    d = dict(setting="supervised", variant="sta", recall_50=0.5, recall_100=0.5, per_relation={0: 0.25, 3: 1.0},
             overlap_ratio=0.4, alignment_recovery=0.3, bias_curve=[(0, 1.0, 0.25)], seed=1,
             config_hash=config_hash({"a": 1}), wall_time=1.5)
    d.update(kw)
    return MetricsReport(**d)


def test_report_json_round_trip():
    r = _report()
    again = MetricsReport.from_json(r.to_json())
    assert again == r
    assert again.to_json() == r.to_json()
    assert json.loads(r.to_json())["config_hash"] == config_hash({"a": 1})
    assert r.comparable() == _report(wall_time=99.0).comparable()


def test_report_invariants():
    with pytest.raises(MetricError):
        _report(recall_50=0.6, recall_100=0.5)
    with pytest.raises(MetricError):
        _report(recall_50=1.5, recall_100=1.5)


def test_config_hash_is_canonical():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_parallel_scoring_matches_serial(monkeypatch):
    spec = WorldSpec(seed=2, n_train=1, n_test=8).resolved()
    w = generate_world(spec)
    bundle = init_params(ModelConfig(pool=2, mlp_hidden=16), 0)
    serial = pair_scores(bundle, w.test, threads=1)
    monkeypatch.setenv("STA_THREADS", "3")
    assert eval_threads() == 3
    threaded = pair_scores(bundle, w.test)
    assert serial.keys() == threaded.keys()
    assert all(np.array_equal(serial[k], threaded[k]) for k in serial)
    assert truths_of(w.test).keys() == {s.scene_id for s in w.test}
    monkeypatch.setenv("STA_THREADS", "zero")
    with pytest.raises(ConfigError):
        eval_threads()
