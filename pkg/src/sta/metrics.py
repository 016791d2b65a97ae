"""Evaluation metrics: Recall@K, per-relation accuracy, overlap ratio,
alignment recovery and the relation-bias ordering, plus the report record."""
from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .boxes import Box, intersection
from .errors import ConfigError, MetricError


class Prediction(NamedTuple):
    subject: Box
    object: Box
    relation: int
    score: float


class PredictionSet:
    """Per-scene ranked candidates; insertion order breaks confidence ties."""

    def __init__(self, num_relations):
        self.num_relations = num_relations
        self.scenes = {}

    def add(self, scene_id, subject, obj, relation, score):
        score = float(score)
        if not math.isfinite(score):
            raise MetricError(f"non-finite confidence in scene {scene_id}")
        if not 0 <= relation < self.num_relations:
            raise MetricError(f"relation id {relation} out of range [0, {self.num_relations})")
        self.scenes.setdefault(scene_id, []).append(
            Prediction(Box(*subject), Box(*obj), int(relation), score))

    def get(self, scene_id):
        return self.scenes.get(scene_id, [])


def truths_of(scenes):
    """Ground truth as {scene_id: [(subject box, object box, relation)]}."""
    out = {}
    for s in scenes:
        out[s.scene_id] = [(s.objects[t.subject].box, s.objects[t.object].box, t.relation)
                           for t in s.triplets]
    return out


def top_k(preds, k):
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    return [preds[i] for i in order[:k]]


def recall_at_k(preds, truths, k):
    if k < 1:
        raise MetricError(f"K must be >= 1, got {k}")
    hits = total = 0
    for sid, gt in truths.items():
        if not gt:
            continue
        kept = {(p.subject, p.object, p.relation) for p in top_k(preds.get(sid), k)}
        hits += sum((Box(*s), Box(*o), r) in kept for s, o, r in gt)
        total += len(gt)
    if total == 0:
        raise MetricError("no ground-truth relationships to recall")
    return hits / total


def eval_threads():
    """Worker cap for evaluation, from ``STA_THREADS`` (default 1)."""
    raw = os.environ.get("STA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError("STA_THREADS", f"not an integer: {raw!r}") from None
    if n < 1:
        raise ConfigError("STA_THREADS", "must be >= 1")
    return n


def _scene_scores(bundle, scene):
    with T.no_grad():
        return bundle.scores(scene.features, scene.pairs()).data


def pair_scores(bundle, scenes, threads=None):
    """Relation score rows for every ground-truth pair, scene by scene.

    Scenes are scored independently with read-only access to the bundle, so
    the result does not depend on the worker count.
    """
    scenes = [s for s in scenes if s.triplets]
    threads = threads or eval_threads()
    if threads == 1:
        rows = [_scene_scores(bundle, s) for s in scenes]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda s: _scene_scores(bundle, s), scenes))
    return {s.scene_id: r for s, r in zip(scenes, rows)}


def predictions_from_scores(scores, scenes, num_relations):
    """Top-1 relation and its confidence per ground-truth pair."""
    preds = PredictionSet(num_relations)
    for s in scenes:
        rows = scores.get(s.scene_id)
        if rows is None:
            continue
        for row, t in zip(rows, s.triplets):
            r = int(np.argmax(row))
            preds.add(s.scene_id, s.objects[t.subject].box, s.objects[t.object].box, r, row[r])
    return preds


def per_relation_accuracy(scores, scenes):
    """Top-1 accuracy per relation over ground-truth pairs; absent relations are omitted."""
    correct, count = {}, {}
    for s in scenes:
        rows = scores.get(s.scene_id)
        if rows is None:
            continue
        for row, t in zip(rows, s.triplets):
            count[t.relation] = count.get(t.relation, 0) + 1
            correct[t.relation] = correct.get(t.relation, 0) + int(np.argmax(row) == t.relation)
    return {r: correct[r] / count[r] for r in sorted(count)}


def relation_bias(scenes):
    """(relation, N_R / N_C) in ascending bias order, ties by relation id."""
    if not scenes:
        raise MetricError("relation bias needs training scenes")
    n_r, configs = {}, {}
    for s in scenes:
        for t in s.triplets:
            n_r[t.relation] = n_r.get(t.relation, 0) + 1
            configs.setdefault(t.relation, set()).add(
                (s.objects[t.subject].category, s.objects[t.object].category))
    bias = [(r, n_r[r] / len(configs[r])) for r in n_r]
    return sorted(bias, key=lambda x: (x[1], x[0]))


def bias_curve(bias, accuracy):
    """Per-relation accuracy listed in the bias order; relations without test data are skipped."""
    return [(r, b, accuracy[r]) for r, b in bias if r in accuracy]


def overlap_ratio(oa_map, box_s, box_o):
    """Share of channel-averaged |activation| over the box union that lies in the intersection."""
    data = oa_map.data if isinstance(oa_map, T.Tensor) else np.asarray(oa_map, dtype=np.float64)
    h, w = data.shape[:2]
    box_s, box_o = Box(*box_s), Box(*box_o)
    box_s.validate(w, h)
    box_o.validate(w, h)
    f = np.abs(data).mean(axis=-1)
    joint = box_s.mask(h, w) | box_o.mask(h, w)
    mass = f[joint].sum()
    if not mass > 0:
        raise MetricError("zero activation mass over the joint region")
    inter = intersection(box_s, box_o)
    if inter is None:
        return 0.0
    return float(f[inter.mask(h, w)].sum() / mass)


def mean_overlap_ratio(bundle, scenes):
    vals = []
    with T.no_grad():
        for s in scenes:
            if not s.triplets:
                continue
            fmap = bundle.feature_map(s.features).data
            for t in s.triplets:
                vals.append(overlap_ratio(fmap, s.objects[t.subject].box, s.objects[t.object].box))
    if not vals:
        raise MetricError("no triplets to measure overlap on")
    return float(np.mean(vals))


def _queries(scene):
    """(subject index, candidate indices, true partners) per distinct triplet subject."""
    partners = {}
    for t in scene.triplets:
        partners.setdefault(t.subject, set()).add(t.object)
    for subj in sorted(partners):
        cands = [i for i in range(len(scene.objects)) if i != subj]
        if len(cands) >= 2:
            yield subj, cands, partners[subj]


def alignment_recovery(bundle, scenes):
    """Rate at which F(a) lands nearest (L2) to a true partner of subject a.

    Candidates are all other objects of the scene; ties go to the lowest index.
    Scenes offering fewer than two candidates are skipped.
    """
    hits = total = 0
    with T.no_grad():
        for s in scenes:
            queries = list(_queries(s))
            if not queries:
                continue
            fmap = bundle.feature_map(s.features)
            feats = bundle.roi_features(fmap, [o.box for o in s.objects]).data
            mapped = bundle.F(T.Tensor(feats[[q[0] for q in queries]])).data
            for (subj, cands, partners), fa in zip(queries, mapped):
                d = np.sum((feats[cands] - fa) ** 2, axis=1)
                hits += int(cands[int(np.argmin(d))] in partners)
                total += 1
    if total == 0:
        raise MetricError("no scene offers two or more candidate objects")
    return hits / total


def alignment_baseline(scenes):
    """Expected recovery rate of a uniformly random match over the same queries."""
    rates = [len(p & set(c)) / len(c) for s in scenes for _, c, p in _queries(s)]
    if not rates:
        raise MetricError("no scene offers two or more candidate objects")
    return float(np.mean(rates))


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config):
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()[:16]


@dataclass
class MetricsReport:
    setting: str
    variant: str
    recall_50: float
    recall_100: float
    per_relation: dict
    overlap_ratio: float | None
    alignment_recovery: float | None
    bias_curve: list
    seed: int
    config_hash: str
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("recall_50", "recall_100"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise MetricError(f"{name} = {v} outside [0, 1]")
        if self.recall_100 < self.recall_50:
            raise MetricError("recall@100 below recall@50")
        self.per_relation = {int(k): float(v) for k, v in self.per_relation.items()}
        self.bias_curve = [[int(r), float(b), float(a)] for r, b, a in self.bias_curve]

    def to_dict(self):
        d = asdict(self)
        d["per_relation"] = {str(k): v for k, v in sorted(self.per_relation.items())}
        return d

    def to_json(self):
        return canonical_json(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def comparable(self):
        """The report minus wall time, for determinism checks."""
        d = self.to_dict()
        d.pop("wall_time")
        return d
