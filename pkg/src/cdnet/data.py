"""Behavior-log ingestion, CTR sample construction, batching and synthetic data.

Samples are stored column-wise in a :class:`SampleSet` (one integer array per
field) so batching is plain fancy indexing. Indexing a ``SampleSet`` with an
int yields a :class:`Sample` view of one impression.
"""

from __future__ import annotations

import json
import logging
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

BEHAVIOR_TYPES = ("pv", "buy", "cart", "fav")
PAD, OOV = 0, 1
DEFAULT_FIELDS = ("user_id", "target_item", "target_category", "hour", "dow")
ITEM_FIELD, CATEGORY_FIELD = "target_item", "target_category"

CACHE_MAGIC = b"CDNS"
CACHE_VERSION = 1


class DataQualityError(ValueError):
    """Too many malformed lines in an input log."""


class ConfigError(ValueError):
    """Invalid configuration value."""


@dataclass(frozen=True)
class InteractionRecord:
    user_id: str
    item_id: str
    category_id: str
    behavior_type: str
    timestamp: int

    def __post_init__(self):
        if self.behavior_type not in BEHAVIOR_TYPES:
            raise ValueError(f"unknown behavior type {self.behavior_type!r}")
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")


@dataclass
class ParseStats:
    lines: int = 0
    malformed: int = 0


def parse_log(path, limit: int | None = None, stats: ParseStats | None = None,
              max_malformed: float = 0.01) -> Iterator[InteractionRecord]:
    """Stream records from a ``user,item,category,behavior,timestamp`` CSV.

    Malformed lines are skipped and counted in ``stats``. Once the file is
    exhausted, a :class:`DataQualityError` is raised if more than
    ``max_malformed`` of the lines were malformed.
    """
    stats = stats if stats is not None else ParseStats()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if limit is not None and stats.lines >= limit:
                break
            line = line.strip()
            if not line:
                continue
            stats.lines += 1
            parts = line.split(",")
            try:
                if len(parts) != 5:
                    raise ValueError
                rec = InteractionRecord(parts[0], parts[1], parts[2], parts[3], int(parts[4]))
            except ValueError:
                stats.malformed += 1
                continue
            yield rec
    if stats.malformed:
        log.warning("%s: skipped %d of %d malformed lines", path, stats.malformed, stats.lines)
    if stats.lines and stats.malformed > max_malformed * stats.lines:
        raise DataQualityError(
            f"{path}: {stats.malformed}/{stats.lines} lines malformed (limit {max_malformed:.0%})")


class Vocabulary:
    """Raw string id to dense index. Index 0 is padding, 1 is out-of-vocabulary."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._index: dict[str, int] = {}
        self._tokens: list[str] = ["<pad>", "<oov>"]
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        idx = self._index.get(token)
        if idx is None:
            idx = self._index[token] = len(self._tokens)
            self._tokens.append(token)
        return idx

    def encode(self, token: str) -> int:
        return self._index.get(token, OOV)

    def decode(self, idx: int) -> str:
        return self._tokens[idx]

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __len__(self) -> int:
        return len(self._tokens)

    @property
    def tokens(self) -> list[str]:
        return self._tokens[2:]


@dataclass
class Schema:
    """Field layout and table sizes a model is built against.

    ``table_sizes`` has one entry per embedding table: ``item``, ``category``
    and one per contextual field that is not the target item or category.
    """

    fields: tuple[str, ...]
    table_sizes: dict[str, int]
    max_len: int

    def table_for(self, field_name: str) -> str:
        if field_name == ITEM_FIELD:
            return "item"
        if field_name == CATEGORY_FIELD:
            return "category"
        return field_name

    @property
    def n_fields(self) -> int:
        return len(self.fields)

    def to_dict(self) -> dict:
        return {"fields": list(self.fields), "table_sizes": dict(self.table_sizes), "max_len": self.max_len}

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        return cls(tuple(d["fields"]), {k: int(v) for k, v in d["table_sizes"].items()}, int(d["max_len"]))


@dataclass
class Sample:
    context: np.ndarray
    items: np.ndarray
    categories: np.ndarray
    valid_len: int
    label: int
    user: int = 0
    timestamp: int = 0

    @property
    def behavior_sequence(self) -> list[tuple[int, int]]:
        return list(zip(self.items[:self.valid_len].tolist(), self.categories[:self.valid_len].tolist()))


@dataclass
class SampleSet:
    """Column-wise storage of many :class:`Sample` rows sharing a schema."""

    schema: Schema
    context: np.ndarray        # [N, n_fields]
    items: np.ndarray          # [N, max_len]
    categories: np.ndarray     # [N, max_len]
    valid_len: np.ndarray      # [N]
    label: np.ndarray          # [N]
    user: np.ndarray           # [N]
    timestamp: np.ndarray      # [N]
    extras: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.label)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.context[i], self.items[i], self.categories[i], int(self.valid_len[i]),
                      int(self.label[i]), int(self.user[i]), int(self.timestamp[i]))

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    def subset(self, index) -> "SampleSet":
        index = np.asarray(index)
        return SampleSet(self.schema, self.context[index], self.items[index], self.categories[index],
                         self.valid_len[index], self.label[index], self.user[index], self.timestamp[index],
                         {k: v[index] for k, v in self.extras.items()})

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], schema: Schema) -> "SampleSet":
        n, length = len(samples), schema.max_len
        out = cls.empty(schema, n)
        for i, s in enumerate(samples):
            out.context[i] = s.context
            m = min(len(s.items), length)
            out.items[i, :m] = s.items[:m]
            out.categories[i, :m] = s.categories[:m]
            out.valid_len[i] = s.valid_len
            out.label[i] = s.label
            out.user[i] = s.user
            out.timestamp[i] = s.timestamp
        return out

    @classmethod
    def empty(cls, schema: Schema, n: int) -> "SampleSet":
        z = lambda *shape: np.zeros(shape, dtype=np.int64)  # noqa: E731
        return cls(schema, z(n, schema.n_fields), z(n, schema.max_len), z(n, schema.max_len),
                   z(n), z(n), z(n), z(n))


# -- Taobao-style sample construction -----------------------------------------

def hour_of_day(ts: int) -> int:
    return (ts // 3600) % 24


def day_of_week(ts: int) -> int:
    # 1970-01-01 was a Thursday; Monday = 0
    return (ts // 86400 + 3) % 7


@dataclass
class Vocabularies:
    user: Vocabulary = field(default_factory=Vocabulary)
    item: Vocabulary = field(default_factory=Vocabulary)
    category: Vocabulary = field(default_factory=Vocabulary)
    hour: Vocabulary = field(default_factory=lambda: Vocabulary(str(h) for h in range(24)))
    dow: Vocabulary = field(default_factory=lambda: Vocabulary(str(d) for d in range(7)))

    def schema(self, max_len: int) -> Schema:
        sizes = {"item": len(self.item), "category": len(self.category), "user_id": len(self.user),
                 "hour": len(self.hour), "dow": len(self.dow)}
        return Schema(DEFAULT_FIELDS, sizes, max_len)


def build_samples(records: Iterable[InteractionRecord], max_len: int, neg_ratio: int = 1, seed: int = 0,
                  vocabs: Vocabularies | None = None, warmup: int = 5, extend_vocab: bool = True) -> SampleSet:
    """Next-click samples with uniformly sampled negatives.

    Per user, clicks (``pv`` events) are ordered by timestamp. Every click
    preceded by at least ``warmup`` clicks becomes a positive whose sequence
    is the latest ``max_len`` preceding clicks. Each positive gets
    ``neg_ratio`` negatives: the target is replaced by an item drawn
    uniformly from the item vocabulary, excluding anything in the user's
    history. Rows are ordered by (user, timestamp); each positive is followed
    by its negatives.

    New raw ids are added to ``vocabs`` unless ``extend_vocab`` is false, in
    which case unseen ids map to the out-of-vocabulary row.
    """
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    if neg_ratio < 1:
        raise ConfigError("neg_ratio must be >= 1")
    building = extend_vocab
    vocabs = vocabs if vocabs is not None else Vocabularies()
    by_user: dict[str, list] = defaultdict(list)
    history: dict[str, set] = defaultdict(set)
    item_cat: dict[int, int] = {}
    for pos, r in enumerate(records):
        enc = vocabs.item.add if building else vocabs.item.encode
        cenc = vocabs.category.add if building else vocabs.category.encode
        item, cat = enc(r.item_id), cenc(r.category_id)
        if building:
            vocabs.user.add(r.user_id)
        item_cat.setdefault(item, cat)
        history[r.user_id].add(item)
        if r.behavior_type == "pv":
            by_user[r.user_id].append((r.timestamp, pos, item, cat))

    pool = np.arange(2, len(vocabs.item), dtype=np.int64)
    rng = np.random.default_rng(seed)
    schema = vocabs.schema(max_len)
    rows: list[Sample] = []
    for user_id in sorted(by_user):
        clicks = sorted(by_user[user_id])
        if len(clicks) <= warmup:
            continue
        uidx = vocabs.user.encode(user_id)
        seen = history[user_id]
        if len(seen) >= len(pool):
            continue
        items = np.array([c[2] for c in clicks], dtype=np.int64)
        cats = np.array([c[3] for c in clicks], dtype=np.int64)
        for t in range(warmup, len(clicks)):
            ts = clicks[t][0]
            lo = max(0, t - max_len)
            seq_i, seq_c = items[lo:t], cats[lo:t]
            ctx_extra = (vocabs.hour.encode(str(hour_of_day(ts))), vocabs.dow.encode(str(day_of_week(ts))))
            rows.append(_sample(uidx, items[t], cats[t], ctx_extra, seq_i, seq_c, 1, ts))
            for _ in range(neg_ratio):
                neg = int(pool[rng.integers(len(pool))])
                while neg in seen:
                    neg = int(pool[rng.integers(len(pool))])
                rows.append(_sample(uidx, neg, item_cat.get(neg, OOV), ctx_extra, seq_i, seq_c, 0, ts))
    return SampleSet.from_samples(rows, schema)


def _sample(user, item, cat, ctx_extra, seq_i, seq_c, label, ts) -> Sample:
    ctx = np.array((user, item, cat) + ctx_extra, dtype=np.int64)
    return Sample(ctx, seq_i, seq_c, len(seq_i), label, user, ts)


def temporal_split(samples: SampleSet, test_frac: float = 0.1, valid_frac: float = 0.1
                   ) -> tuple[SampleSet, SampleSet, SampleSet]:
    """Per user: latest ``test_frac`` of impressions to test, the preceding ``valid_frac`` to validation.

    Impressions sharing a timestamp (a positive and its negatives) stay together.
    """
    train, valid, test = [], [], []
    order = np.lexsort((np.arange(len(samples)), samples.timestamp, samples.user))
    users = samples.user[order]
    bounds = np.flatnonzero(np.diff(users)) + 1
    for rows in np.split(order, bounds):
        groups = np.split(rows, np.flatnonzero(np.diff(samples.timestamp[rows])) + 1)
        g = len(groups)
        n_test = int(np.ceil(test_frac * g))
        n_valid = int(np.ceil(valid_frac * g)) if g > n_test + 1 else 0
        for j, grp in enumerate(groups):
            if j >= g - n_test:
                test.append(grp)
            elif j >= g - n_test - n_valid:
                valid.append(grp)
            else:
                train.append(grp)
    cat = lambda parts: np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)  # noqa: E731
    return samples.subset(cat(train)), samples.subset(cat(valid)), samples.subset(cat(test))


# -- batching ------------------------------------------------------------------

@dataclass
class Batch:
    context: np.ndarray
    items: np.ndarray
    categories: np.ndarray
    valid_len: np.ndarray
    label: np.ndarray
    user: np.ndarray

    @property
    def size(self) -> int:
        return len(self.label)

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.items.shape[1])[None, :] < self.valid_len[:, None]


def make_batch(samples: SampleSet, index, pad_to_max: bool = False) -> Batch:
    index = np.asarray(index)
    vl = samples.valid_len[index]
    width = samples.schema.max_len if pad_to_max else max(1, int(vl.max(initial=1)))
    return Batch(samples.context[index], samples.items[index, :width], samples.categories[index, :width],
                 vl, samples.label[index], samples.user[index])


def batches(samples: SampleSet, batch_size: int, shuffle_seed: int | None = None,
            pad_to_max: bool = False) -> Iterator[Batch]:
    """Yield batches in a seeded shuffled order; the last batch may be short.

    Sequences are padded to the batch's longest ``valid_len`` unless
    ``pad_to_max`` is set, in which case every batch is ``max_len`` wide.
    """
    if batch_size < 1:
        raise ConfigError("batch size must be >= 1")
    order = np.arange(len(samples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(samples))
    for start in range(0, len(order), batch_size):
        yield make_batch(samples, order[start:start + batch_size], pad_to_max)


# -- synthetic data ---------------------------------------------------------------

@dataclass
class SynthConfig:
    """Planted-signal generator settings.

    Each impression has a target item and a behavior sequence of ``seq_len``
    slots (``min_valid`` to ``seq_len`` of them filled). Items belong to
    ``n_categories`` categories and carry a hidden binary style. Behaviors
    sharing the target's category with style 1 are planted-relevant (with
    ``context_gated`` the style must instead match the impression's
    day/night context). The sequence holds up to ``max_relevant`` relevant
    behaviors, same-category distractors up to ``max_same_category`` in
    total, and behaviors from other categories.

    The click logit is
    ``w_core * n_relevant + w_dist * [n_same_category >= k_true] + noise``
    centred so the base rate is near 0.5.
    """

    n_users: int = 500
    n_items: int = 2000
    n_categories: int = 40
    seq_len: int = 32
    min_valid: int = 16
    max_relevant: int = 4
    max_same_category: int = 12
    k_true: int = 7
    w_core: float = 1.0
    w_dist: float = 1.0
    noise: float = 0.5
    context_gated: bool = False

    def validate(self):
        if self.n_items < 4 * self.n_categories:
            raise ConfigError("n_items too small for the category grid")
        if not 1 <= self.min_valid <= self.seq_len:
            raise ConfigError("need 1 <= min_valid <= seq_len")
        if self.max_same_category > self.min_valid:
            raise ConfigError("max_same_category must fit inside min_valid")
        if self.max_relevant > self.max_same_category:
            raise ConfigError("max_relevant must not exceed max_same_category")
        if self.k_true < 1 or self.noise < 0:
            raise ConfigError("k_true must be >= 1 and noise >= 0")


def synth_schema(cfg: SynthConfig) -> Schema:
    sizes = {"item": cfg.n_items + 2, "category": cfg.n_categories + 2, "user_id": cfg.n_users + 2,
             "hour": 26, "dow": 9}
    return Schema(DEFAULT_FIELDS, sizes, cfg.seq_len)


def synth_generate(cfg: SynthConfig, n_samples: int, seed: int) -> SampleSet:
    """Generate ``n_samples`` labeled impressions with planted signal.

    ``extras["relevant"]`` marks the planted-relevant sequence positions and
    ``extras["logit"]`` holds the noiseless click logit.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    n, L = n_samples, cfg.seq_len
    raw_items = np.arange(cfg.n_items)
    item_cat = raw_items % cfg.n_categories
    item_style = (raw_items // cfg.n_categories) % 2
    by_cs = [[raw_items[(item_cat == c) & (item_style == st)] for st in (0, 1)]
             for c in range(cfg.n_categories)]

    target = rng.integers(0, cfg.n_items, n)
    tcat = item_cat[target]
    hour = rng.integers(0, 24, n)
    want = (hour >= 12).astype(np.int64) if cfg.context_gated else np.ones(n, dtype=np.int64)
    valid = rng.integers(cfg.min_valid, L + 1, n)
    n_rel = rng.integers(0, cfg.max_relevant + 1, n)
    n_same = np.maximum(n_rel, rng.integers(0, cfg.max_same_category + 1, n))

    seq = np.zeros((n, L), dtype=np.int64)
    relevant = np.zeros((n, L), dtype=bool)
    for i in range(n):
        c = tcat[i]
        planted = rng.choice(by_cs[c][want[i]], n_rel[i])
        distract = rng.choice(by_cs[c][1 - want[i]], n_same[i] - n_rel[i])
        other = rng.integers(0, cfg.n_items, valid[i] - n_same[i])
        clash = item_cat[other] == c
        while clash.any():
            other[clash] = rng.integers(0, cfg.n_items, int(clash.sum()))
            clash = item_cat[other] == c
        row = np.concatenate([planted, distract, other])
        perm = rng.permutation(valid[i])
        seq[i, :valid[i]] = row[perm]
        relevant[i, :valid[i]] = perm < n_rel[i]

    dist_hit = (n_same >= cfg.k_true).astype(float)
    logit = cfg.w_core * (n_rel - cfg.max_relevant / 2) + cfg.w_dist * (dist_hit - dist_hit.mean())
    noisy = logit + cfg.noise * rng.standard_normal(n)
    label = (rng.random(n) < 1.0 / (1.0 + np.exp(-noisy))).astype(np.int64)

    schema = synth_schema(cfg)
    user = rng.integers(0, cfg.n_users, n) + 2
    pos = np.arange(L)[None, :] < valid[:, None]
    items = np.where(pos, seq + 2, PAD)
    cats = np.where(pos, item_cat[seq] + 2, PAD)
    ctx = np.stack([user, target + 2, tcat + 2, hour + 2, rng.integers(0, 7, n) + 2], axis=1)
    return SampleSet(schema, ctx, items, cats, valid.astype(np.int64), label, user,
                     np.arange(n, dtype=np.int64), {"relevant": relevant, "logit": logit})


# -- binary cache ----------------------------------------------------------------

def save_cache(samples: SampleSet, path) -> None:
    """Write samples as ``CDNS`` + u32 version + schema + length-prefixed int64 records."""
    schema_blob = _encode_schema(samples.schema)
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC + struct.pack("<I", CACHE_VERSION))
        fh.write(struct.pack("<I", len(schema_blob)) + schema_blob)
        fh.write(struct.pack("<Q", len(samples)))
        for i in range(len(samples)):
            vl = int(samples.valid_len[i])
            rec = np.concatenate([
                [samples.user[i], samples.label[i], samples.timestamp[i], vl],
                samples.context[i], samples.items[i, :vl], samples.categories[i, :vl]]).astype("<i8")
            fh.write(struct.pack("<I", rec.size))
            fh.write(rec.tobytes())


def load_cache(path) -> SampleSet:
    raw = Path(path).read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a sample cache (bad magic)")
    try:
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != CACHE_VERSION:
            raise ValueError(f"{path}: cache version {version}, expected {CACHE_VERSION}")
        (slen,) = struct.unpack_from("<I", raw, 8)
        schema = _decode_schema(raw[12:12 + slen])
        off = 12 + slen
        (n,) = struct.unpack_from("<Q", raw, off)
        off += 8
        out = SampleSet.empty(schema, n)
        nf = schema.n_fields
        for i in range(n):
            (size,) = struct.unpack_from("<I", raw, off)
            off += 4
            if off + 8 * size > len(raw):
                raise ValueError(f"{path}: truncated sample cache at record {i}")
            rec = np.frombuffer(raw, dtype="<i8", count=size, offset=off)
            off += 8 * size
            user, label, ts, vl = (int(v) for v in rec[:4])
            if size != 4 + nf + 2 * vl:
                raise ValueError(f"{path}: record {i} has inconsistent length")
            out.user[i], out.label[i], out.timestamp[i], out.valid_len[i] = user, label, ts, vl
            out.context[i] = rec[4:4 + nf]
            out.items[i, :vl] = rec[4 + nf:4 + nf + vl]
            out.categories[i, :vl] = rec[4 + nf + vl:]
    except struct.error as e:
        raise ValueError(f"{path}: truncated sample cache") from e
    return out


def _encode_schema(schema: Schema) -> bytes:
    return json.dumps(schema.to_dict(), sort_keys=True).encode("utf-8")


def _decode_schema(blob: bytes) -> Schema:
    return Schema.from_dict(json.loads(blob.decode("utf-8")))
