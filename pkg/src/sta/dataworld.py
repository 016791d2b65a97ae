"""Synthetic relationship worlds, the shuffle step, RoI augmentation,
experiment splits and the scene file format."""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .boxes import Box, clip_box, intersection, iou
from .errors import AugmentationError, ConfigError, FormatError, GenerationError, IntegrityError

SUBJECT_NAMES = ["person", "child", "dog", "cat", "horse", "sheep", "bird", "cow", "bear", "boy", "girl", "man"]
OBJECT_NAMES = ["road", "chair", "table", "grass", "bed", "car", "bench", "sofa", "box", "tree", "wall", "cart"]
RELATION_NAMES = ["on", "under", "next_to", "hold", "ride", "sit_on", "behind", "in_front_of",
                  "near", "touch", "carry", "watch"]

SETTINGS = ("supervised", "detected", "weak", "zero-shot")


@dataclass
class WorldSpec:
    height: int = 32
    width: int = 32
    channels: int = 8
    num_object_categories: int = 12
    num_relations: int = 8
    # (subject category, relation, object category); None -> drawn from seed
    compositions: list | None = None
    holdout: list | None = None
    holdout_count: int = 4
    objects_per_scene: tuple = (3, 6)
    n_train: int = 200
    n_test: int = 50
    box_size: tuple = (5, 10)
    noise: float = 0.5
    category_strength: float = 3.0
    relation_strength: float = 1.5
    category_dims: int = 4
    relation_jitter: float = 0.5
    holdout_rate: float = 0.5
    seed: int = 0

    def resolved(self):
        """Copy with the composition table and holdout filled in and checked."""
        spec = replace(self, objects_per_scene=tuple(self.objects_per_scene), box_size=tuple(self.box_size))
        if spec.compositions is None:
            comps, hold = default_compositions(spec.num_object_categories, spec.num_relations,
                                               spec.holdout_count, spec.seed)
            spec.compositions = comps
            spec.holdout = hold if spec.holdout is None else spec.holdout
        spec.compositions = [tuple(int(v) for v in c) for c in spec.compositions]
        spec.holdout = [tuple(int(v) for v in c) for c in (spec.holdout or [])]
        spec.validate()
        return spec

    def validate(self):
        if self.num_relations < 2:
            raise ConfigError("num_relations", "need at least 2 relations")
        if self.num_object_categories < 2:
            raise ConfigError("num_object_categories", "need at least 2 categories")
        if min(self.height, self.width, self.channels) < 1:
            raise ConfigError("height/width/channels", "must be positive")
        lo, hi = self.objects_per_scene
        if not 2 <= lo <= hi:
            raise ConfigError("objects_per_scene", "need 2 <= min <= max")
        if not 1 <= self.category_dims < self.channels:
            raise ConfigError("category_dims", "must leave room for relation channels")
        if self.box_size[0] < 2 or self.box_size[1] < self.box_size[0]:
            raise ConfigError("box_size", "need 2 <= min <= max")
        if self.noise < 0:
            raise ConfigError("noise", "must be >= 0")
        comps = set(self.compositions or [])
        for s, r, o in comps:
            if not (0 <= s < self.num_object_categories and 0 <= o < self.num_object_categories):
                raise ConfigError("compositions", f"category out of range in {(s, r, o)}")
            if not 0 <= r < self.num_relations:
                raise ConfigError("compositions", f"relation out of range in {(s, r, o)}")
        hold = set(self.holdout or [])
        if not hold <= comps:
            raise ConfigError("holdout", "held-out compositions must be in the composition table")
        seen = comps - hold
        for r in range(self.num_relations):
            if len({c for c in seen if c[1] == r}) < 2:
                raise ConfigError("compositions", f"relation {r} needs >= 2 compositions outside the holdout")

    def to_dict(self):
        d = asdict(self)
        d["objects_per_scene"] = list(self.objects_per_scene)
        d["box_size"] = list(self.box_size)
        if self.compositions is not None:
            d["compositions"] = [list(c) for c in self.compositions]
        if self.holdout is not None:
            d["holdout"] = [list(c) for c in self.holdout]
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown world field")
        d = dict(d)
        for key in ("compositions", "holdout"):
            if d.get(key) is not None:
                d[key] = [tuple(c) for c in d[key]]
        for key in ("objects_per_scene", "box_size"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def category_name(self, c):
        half = self.num_object_categories // 2
        names = SUBJECT_NAMES[:half] + OBJECT_NAMES[:self.num_object_categories - half]
        return names[c] if c < len(names) else f"obj{c}"

    def relation_name(self, r):
        return RELATION_NAMES[r] if r < len(RELATION_NAMES) else f"rel{r}"


def default_compositions(num_categories, num_relations, holdout_count, seed):
    """Composition table biased toward few category pairs per relation.

    Subjects come from the first half of the categories, objects from the
    second. Relation r gets 2 + (r mod 4) category pairs, and every category
    pair is used by at most one relation in training. Held-out compositions
    reuse a pair that another relation owns, so a classifier keyed on
    categories predicts the wrong relation for them.
    """
    rng = np.random.default_rng([seed, 7001])
    half = num_categories // 2
    pairs = [(s, o) for s in range(half) for o in range(half, num_categories)]
    rng.shuffle(pairs)
    need = sum(2 + (r % 4) for r in range(num_relations))
    if need > len(pairs):
        raise ConfigError("num_object_categories", "too few category pairs for the composition table")
    comps, owner, k = [], {}, 0
    for r in range(num_relations):
        for _ in range(2 + (r % 4)):
            s, o = pairs[k]
            k += 1
            comps.append((s, r, o))
            owner[(s, o)] = r
    holdout = []
    rels = rng.permutation(num_relations)[:holdout_count]
    for r in rels:
        candidates = [p for p, q in owner.items() if q != r and (p[0], int(r), p[1]) not in holdout]
        s, o = candidates[rng.integers(len(candidates))]
        holdout.append((s, int(r), o))
    comps += holdout
    return comps, holdout


@dataclass(frozen=True)
class SceneObject:
    box: Box
    category: int


@dataclass(frozen=True)
class Triplet:
    subject: int
    relation: int
    object: int


@dataclass
class Scene:
    scene_id: str
    features: np.ndarray  # (H, W, C)
    objects: list
    triplets: list

    @property
    def image_labels(self):
        return sorted({t.relation for t in self.triplets})

    def pairs(self):
        return [(self.objects[t.subject].box, self.objects[t.object].box) for t in self.triplets]

    def compositions(self):
        return [(self.objects[t.subject].category, t.relation, self.objects[t.object].category)
                for t in self.triplets]

    def __eq__(self, other):
        return (isinstance(other, Scene) and self.scene_id == other.scene_id
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features)
                and list(self.objects) == list(other.objects) and list(self.triplets) == list(other.triplets))


@dataclass
class WeakScene:
    """Training view with image-level labels only: no pair-level fields."""

    scene_id: str
    features: np.ndarray
    objects: list
    image_labels: list


@dataclass
class World:
    spec: WorldSpec
    train: list
    test: list


def signatures(spec):
    """Category and relation channel signatures (rows), in a rotated basis."""
    rng = np.random.default_rng([spec.seed, 7002])
    c, k = spec.channels, spec.category_dims
    cat = rng.standard_normal((spec.num_object_categories, k))
    cat *= spec.category_strength / np.linalg.norm(cat, axis=1, keepdims=True)
    rel = rng.standard_normal((spec.num_relations, c - k))
    rel *= spec.relation_strength / np.linalg.norm(rel, axis=1, keepdims=True)
    q, r = np.linalg.qr(rng.standard_normal((c, c)))
    q *= np.sign(np.diag(r))
    cat_full = np.zeros((spec.num_object_categories, c))
    cat_full[:, :k] = cat
    rel_full = np.zeros((spec.num_relations, c))
    rel_full[:, k:] = rel
    return cat_full @ q.T, rel_full @ q.T


def interaction_region(b1, b2, height, width):
    """Cells shared by two boxes; for disjoint boxes, the band between them
    widened by one cell into each box so both RoIs see it."""
    inter = intersection(b1, b2)
    if inter is not None:
        return inter.mask(height, width)
    gap_x = max(b1.x0, b2.x0) - min(b1.x1, b2.x1)
    gap_y = max(b1.y0, b2.y0) - min(b1.y1, b2.y1)
    if gap_x >= gap_y:
        x0, x1 = min(b1.x1, b2.x1) - 1, max(b1.x0, b2.x0) + 1
        y0, y1 = max(b1.y0, b2.y0), min(b1.y1, b2.y1)
        if y0 >= y1:
            y0, y1 = min(b1.y0, b2.y0), max(b1.y1, b2.y1)
    else:
        y0, y1 = min(b1.y1, b2.y1) - 1, max(b1.y0, b2.y0) + 1
        x0, x1 = max(b1.x0, b2.x0), min(b1.x1, b2.x1)
        if x0 >= x1:
            x0, x1 = min(b1.x0, b2.x0), max(b1.x1, b2.x1)
    return clip_box(Box(x0, y0, x1, y1), width, height).mask(height, width)


def _random_box(rng, spec):
    w, h = (int(v) for v in rng.integers(spec.box_size[0], spec.box_size[1] + 1, size=2))
    x0 = int(rng.integers(0, spec.width - w + 1))
    y0 = int(rng.integers(0, spec.height - h + 1))
    return Box(x0, y0, x0 + w, y0 + h)


def _partner_box(rng, spec, sub):
    """A box overlapping ``sub`` by at least 2 cells per axis, IoU <= 0.5."""
    w, h = (int(v) for v in rng.integers(spec.box_size[0], spec.box_size[1] + 1, size=2))
    sw, sh = int(sub.width), int(sub.height)
    dx = int(rng.integers(-(w - 2), sw - 2 + 1))
    dy = int(rng.integers(-(h - 2), sh - 2 + 1))
    box = Box(sub.x0 + dx, sub.y0 + dy, sub.x0 + dx + w, sub.y0 + dy + h)
    if box.x0 < 0 or box.y0 < 0 or box.x1 > spec.width or box.y1 > spec.height:
        return None
    if iou(box, sub) > 0.5:
        return None
    return box


def _disjoint(box, placed):
    return all(intersection(box, other) is None for other in placed)


def _pick_composition(rng, spec, train, forced=None):
    if forced is not None:
        return forced
    hold = set(spec.holdout)
    seen = [c for c in spec.compositions if c not in hold]
    if not train and spec.holdout and rng.random() < spec.holdout_rate:
        return spec.holdout[rng.integers(len(spec.holdout))]
    # later entries of each relation are rarer
    weights = []
    for c in seen:
        rank = [x for x in seen if x[1] == c[1]].index(c)
        weights.append(1.0 / (1 + rank))
    weights = np.asarray(weights) / np.sum(weights)
    return seen[rng.choice(len(seen), p=weights)]


def render_scene(spec, layout, rng, sigs=None):
    """Feature map for a layout: objects list and (subject, relation, object) triplets."""
    cat_sig, rel_sig = sigs if sigs is not None else signatures(spec)
    objects, triplets = layout
    fmap = spec.noise * rng.standard_normal((spec.height, spec.width, spec.channels))
    for obj in objects:
        fmap[obj.box.mask(spec.height, spec.width)] += cat_sig[obj.category]
    for t in triplets:
        region = interaction_region(objects[t.subject].box, objects[t.object].box, spec.height, spec.width)
        strength = 1.0 - spec.relation_jitter * rng.random()
        fmap[region] += strength * rel_sig[t.relation]
    return fmap


def _layout(spec, rng, train, forced):
    lo, hi = spec.objects_per_scene
    n = int(rng.integers(lo, hi + 1))
    k = n // 2
    objects, triplets, placed = [], [], []
    for t in range(k):
        s_cat, rel, o_cat = _pick_composition(rng, spec, train, forced if t == 0 else None)
        for _ in range(200):
            sub = _random_box(rng, spec)
            obj = _partner_box(rng, spec, sub)
            if obj is not None and _disjoint(sub, placed) and _disjoint(obj, placed):
                break
        else:
            return None
        placed += [sub, obj]
        triplets.append(Triplet(len(objects), rel, len(objects) + 1))
        objects += [SceneObject(sub, s_cat), SceneObject(obj, o_cat)]
    while len(objects) < n:
        for _ in range(200):
            box = _random_box(rng, spec)
            if _disjoint(box, placed):
                break
        else:
            return None
        placed.append(box)
        objects.append(SceneObject(box, int(rng.integers(spec.num_object_categories))))
    return objects, triplets


def generate_scene(spec, split, index, sigs=None, forced=None):
    code = {"train": 0, "test": 1}[split]
    rng = np.random.default_rng([spec.seed, code, index])
    for _ in range(50):
        layout = _layout(spec, rng, split == "train", forced)
        if layout is not None:
            break
    else:
        raise GenerationError(f"could not place objects for scene {split}-{index:05d}")
    fmap = render_scene(spec, layout, rng, sigs)
    return Scene(f"{split}-{index:05d}", fmap, layout[0], layout[1])


def generate_world(spec):
    """Train and test scenes; every held-out composition appears in the test split."""
    spec = spec.resolved()
    sigs = signatures(spec)
    train = [generate_scene(spec, "train", i, sigs) for i in range(spec.n_train)]
    test = []
    for i in range(spec.n_test):
        forced = spec.holdout[i] if i < len(spec.holdout) else None
        test.append(generate_scene(spec, "test", i, sigs, forced))
    return World(spec, train, test)


@dataclass(frozen=True)
class DomainRecord:
    scene_id: str
    box: Box


@dataclass
class DomainSets:
    """Unpaired subject (A) and object (B) RoI records."""

    a: list = field(default_factory=list)
    b: list = field(default_factory=list)

    def to_json(self):
        return json.dumps({"a": [asdict(r) for r in self.a], "b": [asdict(r) for r in self.b]},
                          sort_keys=True)

    def by_scene(self):
        out = {}
        for side, recs in (("a", self.a), ("b", self.b)):
            for r in recs:
                out.setdefault(r.scene_id, {"a": [], "b": []})[side].append(r.box)
        return out


def shuffle_domains(scenes, seed=0):
    """Split triplets into subject and object records with pairing removed.

    Records are canonically sorted before the seeded permutation, so the
    output depends only on the multisets of boxes, never on which subject
    was linked to which object.
    """
    a, b = [], []
    for scene in scenes:
        for t in scene.triplets:
            a.append(DomainRecord(scene.scene_id, Box(*scene.objects[t.subject].box)))
            b.append(DomainRecord(scene.scene_id, Box(*scene.objects[t.object].box)))
    rng = np.random.default_rng([seed, 7003])
    a.sort(key=lambda r: (r.scene_id, tuple(r.box)))
    b.sort(key=lambda r: (r.scene_id, tuple(r.box)))
    a = [a[i] for i in rng.permutation(len(a))]
    b = [b[i] for i in rng.permutation(len(b))]
    return DomainSets(a, b)


def augment_rois(box, n, iou_min, bounds, seed, max_tries=1000):
    """``n`` boxes with IoU >= iou_min to ``box``; the first is ``box`` itself.

    Candidates come from uniform jitter of each edge (up to a quarter of the
    box side), clipped to ``bounds = (width, height)``, with rejection.
    """
    if n < 1:
        raise AugmentationError("n must be >= 1")
    if not 0 < iou_min <= 1:
        raise AugmentationError(f"iou_min must be in (0, 1], got {iou_min}")
    box = Box(*(float(v) for v in box))
    width, height = bounds
    box.validate(width, height)
    out = [box]
    if iou_min >= 1.0:
        return out * n
    rng = np.random.default_rng(seed)
    span = 0.25 * np.array([box.width, box.height, box.width, box.height])
    tries = 0
    while len(out) < n:
        if tries > max_tries * n:
            raise AugmentationError(f"no box with IoU >= {iou_min} after {tries} tries")
        cand = np.asarray(box) + rng.uniform(-1.0, 1.0, size=(4 * n, 4)) * span
        tries += 4 * n
        cand[:, 0::2] = np.clip(cand[:, 0::2], 0.0, width)
        cand[:, 1::2] = np.clip(cand[:, 1::2], 0.0, height)
        ix = np.clip(np.minimum(cand[:, 2], box.x1) - np.maximum(cand[:, 0], box.x0), 0, None)
        iy = np.clip(np.minimum(cand[:, 3], box.y1) - np.maximum(cand[:, 1], box.y0), 0, None)
        inter = ix * iy
        area = np.clip(cand[:, 2] - cand[:, 0], 0, None) * np.clip(cand[:, 3] - cand[:, 1], 0, None)
        good = (area > 0) & (inter >= iou_min * (area + box.area - inter))
        for row in cand[good]:
            b = Box(*(float(v) for v in row))
            if len(out) < n and iou(b, box) >= iou_min:
                out.append(b)
    return out


def detected_box(box, bounds, rng, iou_min=0.5):
    """A single jittered stand-in for a detector output, IoU >= iou_min."""
    box = Box(*(float(v) for v in box))
    width, height = bounds
    jw, jh = 0.3 * box.width, 0.3 * box.height
    for _ in range(10000):
        d = rng.uniform(-1.0, 1.0, size=4) * np.array([jw, jh, jw, jh])
        cand = clip_box(Box(box.x0 + d[0], box.y0 + d[1], box.x1 + d[2], box.y1 + d[3]), width, height)
        if cand.x1 - cand.x0 >= 1 and cand.y1 - cand.y0 >= 1 and iou(cand, box) >= iou_min:
            return cand
    raise AugmentationError("could not sample a detection box")


@dataclass
class ExperimentData:
    setting: str
    train: list
    test: list


def make_splits(world, setting, seed=0):
    """Training and test views of a world for one evaluation setting."""
    if setting not in SETTINGS:
        raise ConfigError("setting", f"unknown setting {setting!r}")
    spec = world.spec
    hold = set(spec.holdout)
    for scene in world.train:
        if hold & set(scene.compositions()):
            raise ConfigError("holdout", f"training scene {scene.scene_id} contains a held-out composition")
    train, test = list(world.train), list(world.test)
    if setting == "weak":
        train = [WeakScene(s.scene_id, s.features, list(s.objects), s.image_labels) for s in train]
    elif setting == "zero-shot":
        if not hold:
            raise ConfigError("holdout", "zero-shot evaluation needs a non-empty holdout")
        test = []
        for s in world.test:
            keep = [t for t in s.triplets
                    if (s.objects[t.subject].category, t.relation, s.objects[t.object].category) in hold]
            if keep:
                test.append(Scene(s.scene_id, s.features, list(s.objects), keep))
    elif setting == "detected":
        rng = np.random.default_rng([seed, 7004])
        test = []
        for s in world.test:
            objs = [SceneObject(detected_box(o.box, (spec.width, spec.height), rng), o.category)
                    for o in s.objects]
            test.append(Scene(s.scene_id, s.features, objs, list(s.triplets)))
    return ExperimentData(setting, train, test)


# ---------------------------------------------------------------- scene files

MAGIC = b"STAWORLD"
VERSION = 1


def _json_line(obj):
    return (json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n").encode()


def _scene_record(scene):
    h, w, c = scene.features.shape
    sid = scene.scene_id.encode()
    objects = _json_line([[list(map(float, o.box)), int(o.category)] for o in scene.objects])
    triplets = _json_line([[t.subject, t.relation, t.object] for t in scene.triplets])
    body = b"".join([
        struct.pack("<I", len(sid)), sid,
        struct.pack("<III", h, w, c),
        np.ascontiguousarray(scene.features, dtype="<f8").tobytes(),
        struct.pack("<I", len(objects)), objects,
        struct.pack("<I", len(triplets)), triplets,
    ])
    return body + struct.pack("<I", zlib.crc32(body))


def dumps_scenes(scenes, spec=None):
    spec_json = _json_line(spec.to_dict() if spec is not None else {})
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(spec_json)), spec_json,
             struct.pack("<I", len(scenes))]
    parts += [_scene_record(s) for s in scenes]
    return b"".join(parts)


def write_scenes(path, scenes, spec=None):
    with open(path, "wb") as fh:
        fh.write(dumps_scenes(scenes, spec))


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise IntegrityError(f"truncated {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def loads_scenes(buf):
    """Parse a scene file; returns (world-spec dict, scenes). All or nothing."""
    rd = _Reader(buf)
    if rd.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("bad magic, not a scene file", 0)
    version = rd.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported scene file version {version}", len(MAGIC))
    n = rd.u32("spec length")
    at = rd.pos
    try:
        spec = json.loads(rd.take(n, "spec").decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("malformed world-spec header", at) from None
    count = rd.u32("scene count")
    scenes = []
    for _ in range(count):
        start = rd.pos
        sid = rd.take(rd.u32("scene id length"), "scene id").decode()
        h, w, c = struct.unpack("<III", rd.take(12, "scene dimensions"))
        payload = rd.take(8 * h * w * c, "feature payload")
        objects = rd.take(rd.u32("object table length"), "object table")
        triplets = rd.take(rd.u32("triplet table length"), "triplet table")
        body = buf[start:rd.pos]
        crc = rd.u32("scene checksum")
        if crc != zlib.crc32(body):
            raise IntegrityError(f"checksum mismatch in scene {sid!r}", start)
        feats = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(h, w, c)
        try:
            objs = [SceneObject(Box(*b), int(cat)) for b, cat in json.loads(objects)]
            trips = [Triplet(int(s), int(r), int(o)) for s, r, o in json.loads(triplets)]
        except (ValueError, TypeError):
            raise FormatError(f"malformed tables in scene {sid!r}", start) from None
        scenes.append(Scene(sid, feats, objs, trips))
    if rd.pos != len(buf):
        raise FormatError("trailing bytes after the last scene", rd.pos)
    return spec, scenes


def read_scenes(path):
    with open(path, "rb") as fh:
        return loads_scenes(fh.read())
