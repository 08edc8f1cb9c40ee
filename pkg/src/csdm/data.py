"""MovieLens-1M ingestion, synthetic data, cold/warm split protocol and cache."""

from __future__ import annotations

import hashlib
import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

FIELD_KINDS = ("user-id", "item-id", "user-feature", "item-feature", "context")

OLD, WARM_A, WARM_B, WARM_C, TEST, EXCLUDED = range(6)
GROUP_NAMES = ("old_train", "warm_a", "warm_b", "warm_c", "test", "excluded")

ML_GENRES = (
    "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime",
    "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror", "Musical",
    "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
)
ML_AGES = (1, 18, 25, 35, 45, 50, 56)
ML_FIRST_DECADE = 1910


class ParseError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = str(path)
        self.lineno = lineno


class DatasetEmptyError(ValueError):
    pass


class ProtocolError(ValueError):
    pass


class CacheFormatError(ValueError):
    pass


# --------------------------------------------------------------------------- schema


@dataclass(frozen=True)
class Field:
    name: str
    kind: str
    vocab_size: int
    side_info: bool = False
    multi_hot: bool = False

    def __post_init__(self):
        if self.kind not in FIELD_KINDS:
            raise ValueError(f"unknown field kind {self.kind!r}")
        if self.kind == "item-id" and self.side_info:
            raise ValueError("the item-id field cannot be side information")


@dataclass(frozen=True)
class FeatureSchema:
    fields: tuple[Field, ...]

    def __post_init__(self):
        kinds = [f.kind for f in self.fields]
        if kinds.count("item-id") != 1 or kinds.count("user-id") != 1:
            raise ValueError("schema needs exactly one user-id and one item-id field")

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.fields]

    def index(self, name: str) -> int:
        return self.names.index(name)

    @property
    def item_field(self) -> int:
        return next(i for i, f in enumerate(self.fields) if f.kind == "item-id")

    @property
    def user_field(self) -> int:
        return next(i for i, f in enumerate(self.fields) if f.kind == "user-id")

    @property
    def side_fields(self) -> list[int]:
        return [i for i, f in enumerate(self.fields) if f.side_info]

    def to_json(self) -> list[dict]:
        return [
            {"name": f.name, "kind": f.kind, "vocab_size": f.vocab_size, "side_info": f.side_info, "multi_hot": f.multi_hot}
            for f in self.fields
        ]

    @classmethod
    def from_json(cls, obj: list[dict]) -> "FeatureSchema":
        return cls(tuple(Field(**d) for d in obj))

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class EncodedInstance:
    user_idx: int
    item_idx: int
    feature_idxs: tuple
    label: int
    timestamp: int


# --------------------------------------------------------------------------- dataset


@dataclass
class EncodedDataset:
    """Columnar interactions plus per-user / per-item feature lookup tables.

    ``tables`` maps each non-id field name to an int64 ``[n_owner, k]`` array,
    padded with -1 for multi-hot fields. The owner is the user for user
    features and the item for item features.
    """

    schema: FeatureSchema
    user: np.ndarray
    item: np.ndarray
    label: np.ndarray
    timestamp: np.ndarray
    tables: dict[str, np.ndarray]

    def __post_init__(self):
        n = len(self.user)
        for arr in (self.item, self.label, self.timestamp):
            if len(arr) != n:
                raise ValueError("interaction columns must have equal length")
        for f in self.schema.fields:
            if f.kind in ("user-id", "item-id"):
                continue
            t = self.tables[f.name]
            if t.ndim != 2 or t.max() >= f.vocab_size:
                raise ValueError(f"table for {f.name} inconsistent with vocabulary {f.vocab_size}")

    def __len__(self) -> int:
        return len(self.user)

    @property
    def n_users(self) -> int:
        return self.schema.fields[self.schema.user_field].vocab_size

    @property
    def n_items(self) -> int:
        return self.schema.fields[self.schema.item_field].vocab_size

    def field_indices(self, field_pos: int, users: np.ndarray, items: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Index/weight pair for one field; weights mean-pool multi-hot slots."""
        f = self.schema.fields[field_pos]
        if f.kind == "user-id":
            raw = users[:, None]
        elif f.kind == "item-id":
            raw = items[:, None]
        elif f.kind == "user-feature":
            raw = self.tables[f.name][users]
        else:
            raw = self.tables[f.name][items]
        valid = raw >= 0
        counts = valid.sum(axis=1, keepdims=True)
        weights = np.where(valid, 1.0 / np.maximum(counts, 1), 0.0)
        return np.where(valid, raw, 0), weights

    def side_info(self, items: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Side-information (index, weight) pairs for a batch of items."""
        items = np.asarray(items)
        dummy_users = np.zeros_like(items)
        return [self.field_indices(i, dummy_users, items) for i in self.schema.side_fields]

    def item_side_info(self, item: int) -> dict[str, tuple[int, ...]]:
        out = {}
        for i in self.schema.side_fields:
            name = self.schema.fields[i].name
            row = self.tables[name][item]
            out[name] = tuple(int(x) for x in row if x >= 0)
        return out

    def instance(self, row: int) -> EncodedInstance:
        u, it = np.array([self.user[row]]), np.array([self.item[row]])
        feats = []
        for pos in range(len(self.schema.fields)):
            idx, w = self.field_indices(pos, u, it)
            vals = tuple(int(x) for x, ww in zip(idx[0], w[0]) if ww > 0)
            feats.append(vals[0] if len(vals) == 1 else vals)
        return EncodedInstance(int(self.user[row]), int(self.item[row]), tuple(feats), int(self.label[row]), int(self.timestamp[row]))

    def instances(self) -> Iterator[EncodedInstance]:
        for r in range(len(self)):
            yield self.instance(r)


# --------------------------------------------------------------------------- MovieLens


@dataclass
class MovieLensRaw:
    users: dict[int, tuple[str, int, int]]
    movies: dict[int, tuple[str, int | None, tuple[str, ...]]]
    ratings: np.ndarray  # int64 [n, 4]: user, movie, rating, timestamp


def _read_lines(path: Path) -> list[str]:
    if not path.exists():
        raise FileNotFoundError(f"missing MovieLens file: {path}")
    return path.read_bytes().decode("latin-1").splitlines()


_YEAR = re.compile(r"\((\d{4})\)\s*$")


def load_movielens(directory) -> MovieLensRaw:
    """Parse ``ratings.dat``, ``users.dat`` and ``movies.dat`` ("::"-separated)."""
    d = Path(directory)
    rpath = d / "ratings.dat"
    rows = []
    for n, line in enumerate(_read_lines(rpath), start=1):
        if not line.strip():
            continue
        parts = line.split("::")
        if len(parts) != 4:
            raise ParseError(rpath, n, f"expected 4 fields, got {len(parts)}")
        try:
            rows.append(tuple(int(p) for p in parts))
        except ValueError:
            raise ParseError(rpath, n, "non-integer field") from None
    if not rows:
        raise DatasetEmptyError(f"{rpath} contains no ratings")

    upath = d / "users.dat"
    users = {}
    for n, line in enumerate(_read_lines(upath), start=1):
        if not line.strip():
            continue
        parts = line.split("::")
        if len(parts) != 5:
            raise ParseError(upath, n, f"expected 5 fields, got {len(parts)}")
        try:
            users[int(parts[0])] = (parts[1], int(parts[2]), int(parts[3]))
        except ValueError:
            raise ParseError(upath, n, "non-integer field") from None

    mpath = d / "movies.dat"
    movies = {}
    for n, line in enumerate(_read_lines(mpath), start=1):
        if not line.strip():
            continue
        parts = line.split("::")
        if len(parts) != 3:
            raise ParseError(mpath, n, f"expected 3 fields, got {len(parts)}")
        try:
            mid = int(parts[0])
        except ValueError:
            raise ParseError(mpath, n, "non-integer movie id") from None
        m = _YEAR.search(parts[1])
        genres = tuple(g for g in parts[2].split("|") if g)
        movies[mid] = (parts[1], int(m.group(1)) if m else None, genres)

    return MovieLensRaw(users, movies, np.array(rows, dtype=np.int64))


def binarize(rating) -> int:
    r = int(rating)
    if r != rating or not 1 <= r <= 5:
        raise ValueError(f"rating must be an integer in 1..5, got {rating!r}")
    return int(r >= 4)


def movielens_schema(n_users: int, n_items: int) -> FeatureSchema:
    n_decades = (2000 - ML_FIRST_DECADE) // 10 + 2  # bucket 0 collects pre-1910 and unknown years
    return FeatureSchema((
        Field("user_id", "user-id", n_users),
        Field("gender", "user-feature", 2),
        Field("age", "user-feature", len(ML_AGES)),
        Field("occupation", "user-feature", 21),
        Field("item_id", "item-id", n_items),
        Field("decade", "item-feature", n_decades, side_info=True),
        Field("genres", "item-feature", len(ML_GENRES), side_info=True, multi_hot=True),
    ))


def encode_movielens(raw: MovieLensRaw) -> EncodedDataset:
    user_ids = sorted(raw.users)
    movie_ids = sorted(raw.movies)
    umap = {u: i for i, u in enumerate(user_ids)}
    mmap = {m: i for i, m in enumerate(movie_ids)}
    r = raw.ratings
    try:
        user = np.array([umap[u] for u in r[:, 0]], dtype=np.int64)
    except KeyError as e:
        raise ValueError(f"rating references unknown user {e.args[0]}") from None
    try:
        item = np.array([mmap[m] for m in r[:, 1]], dtype=np.int64)
    except KeyError as e:
        raise ValueError(f"rating references unknown movie {e.args[0]}") from None
    label = np.array([binarize(x) for x in r[:, 2]], dtype=np.int64)

    age_pos = {a: i for i, a in enumerate(ML_AGES)}
    gender = np.array([[0 if raw.users[u][0] == "M" else 1] for u in user_ids], dtype=np.int64)
    age = np.array([[age_pos[raw.users[u][1]]] for u in user_ids], dtype=np.int64)
    occ = np.array([[raw.users[u][2]] for u in user_ids], dtype=np.int64)

    genre_pos = {g: i for i, g in enumerate(ML_GENRES)}
    max_g = max(len(raw.movies[m][2]) for m in movie_ids)
    genres = np.full((len(movie_ids), max(max_g, 1)), -1, dtype=np.int64)
    decade = np.zeros((len(movie_ids), 1), dtype=np.int64)
    for i, m in enumerate(movie_ids):
        _, year, gs = raw.movies[m]
        for j, g in enumerate(gs):
            genres[i, j] = genre_pos[g]
        if year is not None and year >= ML_FIRST_DECADE:
            decade[i, 0] = min((year - ML_FIRST_DECADE) // 10 + 1, (2000 - ML_FIRST_DECADE) // 10 + 1)

    schema = movielens_schema(len(user_ids), len(movie_ids))
    tables = {"gender": gender, "age": age, "occupation": occ, "decade": decade, "genres": genres}
    return EncodedDataset(schema, user, item, label, r[:, 3].copy(), tables)


# --------------------------------------------------------------------------- synthetic


def synth_schema(n_users: int, n_items: int, n_groups: int = 4, n_cats: int = 10, n_tags: int = 12) -> FeatureSchema:
    return FeatureSchema((
        Field("user_id", "user-id", n_users),
        Field("user_group", "user-feature", n_groups),
        Field("item_id", "item-id", n_items),
        Field("category", "item-feature", n_cats, side_info=True),
        Field("tags", "item-feature", n_tags, side_info=True, multi_hot=True),
    ))


def synth_dataset(
    seed: int,
    n_users: int = 600,
    n_items: int = 400,
    n_instances: int = 60_000,
    side_weight: float = 0.9,
    latent_dim: int = 8,
    zipf: float = 0.8,
) -> EncodedDataset:
    """Logistic click model over user/item factors with side-driven item factors.

    Item factors are ``side_weight * s_i + sqrt(1 - side_weight**2) * n_i`` where
    ``s_i`` is a function of the item's category and tags and ``n_i`` is private
    noise, so ``side_weight=0`` removes any link between side info and clicks.
    Item popularity is Zipf-distributed to mimic a long tail.
    """
    if min(n_users, n_items, n_instances) <= 0:
        raise ValueError("dataset sizes must be positive")
    if not 0.0 <= side_weight <= 1.0:
        raise ValueError("side_weight must lie in [0, 1]")
    schema = synth_schema(n_users, n_items)
    n_groups = schema.fields[1].vocab_size
    n_cats = schema.fields[3].vocab_size
    n_tags = schema.fields[4].vocab_size
    rng = np.random.default_rng(seed)
    k = latent_dim

    cat_vec = rng.normal(size=(n_cats, k))
    tag_vec = rng.normal(size=(n_tags, k))
    cat_bias = rng.normal(scale=0.6, size=n_cats)

    category = rng.integers(0, n_cats, size=n_items)
    tags = np.full((n_items, 3), -1, dtype=np.int64)
    side_vec = np.empty((n_items, k))
    for i in range(n_items):
        m = int(rng.integers(1, 4))
        chosen = rng.choice(n_tags, size=m, replace=False)
        tags[i, :m] = np.sort(chosen)
        side_vec[i] = (cat_vec[category[i]] + tag_vec[chosen].mean(axis=0)) / np.sqrt(2.0)
    noise_w = np.sqrt(1.0 - side_weight**2)
    item_vec = side_weight * side_vec + noise_w * rng.normal(size=(n_items, k))
    item_bias = side_weight * cat_bias[category] + noise_w * rng.normal(scale=0.6, size=n_items)

    group = rng.integers(0, n_groups, size=n_users)
    group_vec = rng.normal(scale=0.5, size=(n_groups, k))
    user_vec = group_vec[group] + rng.normal(scale=0.8, size=(n_users, k))
    user_bias = rng.normal(scale=0.4, size=n_users)

    ranks = rng.permutation(n_items) + 1
    pop = ranks.astype(float) ** (-zipf)
    pop /= pop.sum()
    item = rng.choice(n_items, size=n_instances, p=pop)
    user = rng.integers(0, n_users, size=n_instances)
    logit = (user_vec[user] * item_vec[item]).sum(axis=1) * (1.2 / np.sqrt(k)) + item_bias[item] + user_bias[user]
    label = (rng.random(n_instances) < 1.0 / (1.0 + np.exp(-logit))).astype(np.int64)
    timestamp = rng.integers(0, 10_000_000, size=n_instances)

    tables = {"user_group": group[:, None].astype(np.int64), "category": category[:, None].astype(np.int64), "tags": tags}
    return EncodedDataset(schema, user.astype(np.int64), item.astype(np.int64), label, timestamp.astype(np.int64), tables)


# --------------------------------------------------------------------------- splits


@dataclass
class DatasetSplits:
    """Cold/warm protocol as row indices into an :class:`EncodedDataset`."""

    group: np.ndarray  # per-interaction group code (OLD..EXCLUDED)
    n_items: int
    threshold: int
    k: int
    old_item_ids: np.ndarray = field(repr=False)
    new_item_ids: np.ndarray = field(repr=False)
    warm_item_ids: np.ndarray = field(repr=False)

    def rows(self, group: int) -> np.ndarray:
        return np.flatnonzero(self.group == group)

    @property
    def old_train(self) -> np.ndarray:
        return self.rows(OLD)

    @property
    def warm_a(self) -> np.ndarray:
        return self.rows(WARM_A)

    @property
    def warm_b(self) -> np.ndarray:
        return self.rows(WARM_B)

    @property
    def warm_c(self) -> np.ndarray:
        return self.rows(WARM_C)

    @property
    def test(self) -> np.ndarray:
        return self.rows(TEST)

    @property
    def excluded(self) -> np.ndarray:
        return self.rows(EXCLUDED)

    def counts_through(self, data: EncodedDataset, last_group: int) -> np.ndarray:
        """Item interaction counts over old_train plus warm groups up to ``last_group``."""
        mask = (self.group >= OLD) & (self.group <= last_group) & (self.group <= WARM_C)
        return np.bincount(data.item[mask], minlength=self.n_items)

    def item_freq(self, data: EncodedDataset) -> np.ndarray:
        return self.counts_through(data, WARM_C)


def split_cold_warm(data: EncodedDataset, threshold: int, k: int) -> DatasetSplits:
    """Old items have more than ``threshold`` interactions; new items are split by time.

    For each new item with more than ``3k`` interactions the first ``k`` go to
    warm-a, the next ``k`` to warm-b, the next ``k`` to warm-c and the rest to
    the test set. Shorter new items are excluded. Timestamp ties keep file order.
    """
    if threshold <= 0 or k <= 0:
        raise ValueError("threshold and k must be positive")
    n_items = data.n_items
    freq = np.bincount(data.item, minlength=n_items)
    is_old = freq > threshold
    group = np.full(len(data), EXCLUDED, dtype=np.int64)
    group[is_old[data.item]] = OLD

    order = np.lexsort((np.arange(len(data)), data.timestamp, data.item))
    sorted_items = data.item[order]
    starts = np.searchsorted(sorted_items, np.arange(n_items), side="left")
    pos = np.arange(len(data)) - starts[sorted_items]  # rank of each row within its item
    rank = np.empty(len(data), dtype=np.int64)
    rank[order] = pos

    qualifying = (~is_old) & (freq > 3 * k)
    q_rows = qualifying[data.item]
    group[q_rows] = np.minimum(rank[q_rows] // k, 3) + WARM_A

    old_ids = np.flatnonzero(is_old & (freq > 0))
    if len(old_ids) == 0:
        raise ProtocolError(f"no item has more than {threshold} interactions")
    if not qualifying.any():
        raise ProtocolError(f"no new item has more than 3*K={3 * k} interactions")
    new_ids = np.flatnonzero(~is_old)
    return DatasetSplits(group, n_items, threshold, k, old_ids, new_ids, np.flatnonzero(qualifying))


def split_summary(data: EncodedDataset, splits: DatasetSplits) -> dict:
    rated = np.bincount(data.item, minlength=data.n_items) > 0
    n_old = int(len(splits.old_item_ids))
    n_new = int((rated & np.isin(np.arange(data.n_items), splits.new_item_ids)).sum())
    out = {"old_items": n_old, "new_items": n_new, "warm_items": int(len(splits.warm_item_ids))}
    out["new_fraction"] = n_new / max(n_new + n_old, 1)
    for g, name in enumerate(GROUP_NAMES):
        out[name] = int((splits.group == g).sum())
    return out


# --------------------------------------------------------------------------- cache

CACHE_MAGIC = b"CSDMSPLT"
CACHE_VERSION = 1


def write_cache(path, data: EncodedDataset, splits: DatasetSplits, params: dict | None = None) -> str:
    """Write dataset + split to a versioned binary file; returns its sha256.

    Layout: magic, u32 version, u32 header length, JSON header (sorted keys),
    then little-endian int64 interaction records ``(user, item, label,
    timestamp, group)`` followed by each feature table in header order.
    """
    tables = [name for name in data.schema.names if name in data.tables]
    header = {
        "schema": data.schema.to_json(),
        "counts": {"interactions": len(data), "users": data.n_users, "items": data.n_items},
        "split": {"N": splits.threshold, "K": splits.k},
        "tables": [{"name": n, "shape": list(data.tables[n].shape)} for n in tables],
        "params": params or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    records = np.stack([data.user, data.item, data.label, data.timestamp, splits.group], axis=1).astype("<i8")
    blob = b"".join(
        [CACHE_MAGIC, struct.pack("<II", CACHE_VERSION, len(head)), head, records.tobytes()]
        + [np.ascontiguousarray(data.tables[n], dtype="<i8").tobytes() for n in tables]
    )
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def read_cache(path) -> tuple[EncodedDataset, DatasetSplits, dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != CACHE_MAGIC:
        raise CacheFormatError(f"{path} is not a splits cache")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != CACHE_VERSION:
        raise CacheFormatError(f"unsupported cache version {version}")
    header = json.loads(blob[16 : 16 + hlen])
    off = 16 + hlen
    n = header["counts"]["interactions"]
    records = np.frombuffer(blob, dtype="<i8", count=5 * n, offset=off).reshape(n, 5).astype(np.int64)
    off += 40 * n
    tables = {}
    for t in header["tables"]:
        rows, cols = t["shape"]
        tables[t["name"]] = np.frombuffer(blob, dtype="<i8", count=rows * cols, offset=off).reshape(rows, cols).astype(np.int64)
        off += 8 * rows * cols
    schema = FeatureSchema.from_json(header["schema"])
    data = EncodedDataset(schema, records[:, 0].copy(), records[:, 1].copy(), records[:, 2].copy(), records[:, 3].copy(), tables)
    splits = split_cold_warm(data, header["split"]["N"], header["split"]["K"])
    if not np.array_equal(splits.group, records[:, 4]):
        raise CacheFormatError("stored split disagrees with the split recomputed from the data")
    return data, splits, header
