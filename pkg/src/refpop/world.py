"""Synthetic object universe and its compositional canonical language.

Objects are fixed-length attribute-value vectors. The canonical language maps
attribute a taking value v to token 2 + a*Va + v (token 0 = PAD, 1 = EOS), one
token per attribute in ascending order, then EOS. Deterministic oracle
speaker/listener over this language stand in for human players.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

PAD = 0
EOS = 1


@dataclass(frozen=True)
class WorldSpec:
    """Shape of the object universe plus an optional sampling bias.

    ``bias`` is a per-attribute categorical distribution over values; it
    weights how targets and grounding pairs are drawn (robustness worlds),
    not which objects exist. ``synonyms`` > 1 gives each (attribute, value)
    that many interchangeable surface tokens (default one, i.e. off).
    """

    n_attrs: int
    n_values: int
    seed: int = 0
    bias: tuple[tuple[float, ...], ...] | None = None
    synonyms: int = 1

    def __post_init__(self):
        if self.n_attrs < 1 or self.n_values < 2:
            raise ValueError("need n_attrs >= 1 and n_values >= 2")
        if self.bias is not None:
            if len(self.bias) != self.n_attrs:
                raise ValueError("bias must have one row per attribute")
            for row in self.bias:
                if len(row) != self.n_values or abs(sum(row) - 1.0) > 1e-9:
                    raise ValueError("each bias row must be a distribution over values")
        if self.synonyms < 1:
            raise ValueError("synonyms must be >= 1")

    @property
    def universe_size(self) -> int:
        return self.n_values ** self.n_attrs

    @property
    def vocab_size(self) -> int:
        return 2 + self.n_attrs * self.n_values * self.synonyms

    def token_for(self, attr: int, value: int, synonym: int = 0) -> int:
        return 2 + (attr * self.n_values + value) * self.synonyms + synonym

    def parse_token(self, token: int) -> tuple[int, int] | None:
        """Inverse of token_for; None for PAD/EOS/out-of-range tokens."""
        t = token - 2
        if t < 0 or t >= self.n_attrs * self.n_values * self.synonyms:
            return None
        pair = t // self.synonyms
        return pair // self.n_values, pair % self.n_values

    def to_dict(self) -> dict:
        return {
            "n_attrs": self.n_attrs,
            "n_values": self.n_values,
            "seed": self.seed,
            "bias": None if self.bias is None else [list(r) for r in self.bias],
            "synonyms": self.synonyms,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        bias = d.get("bias")
        return cls(
            n_attrs=int(d["n_attrs"]),
            n_values=int(d["n_values"]),
            seed=int(d.get("seed", 0)),
            bias=None if bias is None else tuple(tuple(float(x) for x in r) for r in bias),
            synonyms=int(d.get("synonyms", 1)),
        )


def world_hash(spec: WorldSpec) -> str:
    blob = json.dumps(spec.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def zipf_bias(spec: WorldSpec, exponent: float = 1.0) -> WorldSpec:
    """Skewed-variant world: per-attribute value probability ~ 1/(v+1)^s."""
    w = 1.0 / np.arange(1, spec.n_values + 1) ** exponent
    row = tuple(w / w.sum())
    return WorldSpec(spec.n_attrs, spec.n_values, seed=spec.seed,
                     bias=tuple(row for _ in range(spec.n_attrs)),
                     synonyms=spec.synonyms)


def enumerate_universe(spec: WorldSpec) -> np.ndarray:
    """All objects as an (N, A) int array, in mixed-radix order."""
    n = spec.universe_size
    idx = np.arange(n)
    cols = []
    for a in range(spec.n_attrs - 1, -1, -1):
        cols.append(idx % spec.n_values)
        idx = idx // spec.n_values
    return np.stack(cols[::-1], axis=1).astype(np.int64)


def check_objects(spec: WorldSpec, objects: np.ndarray) -> np.ndarray:
    objects = np.asarray(objects, dtype=np.int64)
    if objects.ndim == 1:
        objects = objects[None, :]
    if objects.shape[1] != spec.n_attrs:
        raise ValueError(f"objects must have {spec.n_attrs} attributes, got {objects.shape[1]}")
    if objects.min() < 0 or objects.max() >= spec.n_values:
        raise ValueError("attribute value out of range")
    return objects


def canonical_describe(spec: WorldSpec, obj, rng: np.random.Generator | None = None) -> list[int]:
    """Canonical token sequence for one object: attribute tokens then EOS.

    With synonyms enabled each token is drawn uniformly among that value's
    synonym set (rng required); otherwise fully deterministic.
    """
    obj = check_objects(spec, obj)[0]
    tokens = []
    for a, v in enumerate(obj):
        syn = 0
        if spec.synonyms > 1:
            if rng is None:
                raise ValueError("synonym emission needs an rng")
            syn = int(rng.integers(spec.synonyms))
        tokens.append(spec.token_for(a, int(v), syn))
    tokens.append(EOS)
    return tokens


def canonical_batch(spec: WorldSpec, objects: np.ndarray) -> np.ndarray:
    """Canonical descriptions for many objects, (B, A+1) with trailing EOS."""
    objects = check_objects(spec, objects)
    attrs = np.arange(spec.n_attrs)[None, :]
    toks = 2 + (attrs * spec.n_values + objects) * spec.synonyms
    return np.concatenate([toks, np.full((objects.shape[0], 1), EOS)], axis=1).astype(np.int64)


def parse_message(spec: WorldSpec, tokens) -> dict[int, int]:
    """Attribute assignments mentioned in a message; later mentions override."""
    parsed: dict[int, int] = {}
    for tok in tokens:
        pair = spec.parse_token(int(tok))
        if pair is not None:
            parsed[pair[0]] = pair[1]
    return parsed


def oracle_listener(spec: WorldSpec, tokens, candidates: np.ndarray) -> int:
    """Pick the candidate matching the most parsed attributes (ties: lowest index)."""
    candidates = check_objects(spec, candidates)
    if candidates.shape[0] == 0:
        raise ValueError("need at least one candidate")
    parsed = parse_message(spec, tokens)
    if not parsed:
        return 0
    attrs = np.fromiter(parsed.keys(), dtype=np.int64)
    vals = np.fromiter(parsed.values(), dtype=np.int64)
    scores = (candidates[:, attrs] == vals[None, :]).sum(axis=1)
    return int(np.argmax(scores))


def similarity(a, b, spec: WorldSpec | None = None) -> float:
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.shape != b.shape:
        raise ValueError("objects from different worlds")
    return float((a == b).mean())


def object_weights(spec: WorldSpec, objects: np.ndarray) -> np.ndarray:
    """Per-object draw probability under the world bias (uniform if unbiased)."""
    objects = check_objects(spec, objects)
    if spec.bias is None:
        return np.full(objects.shape[0], 1.0 / objects.shape[0])
    bias = np.asarray(spec.bias)
    w = np.prod(bias[np.arange(spec.n_attrs)[None, :], objects], axis=1)
    return w / w.sum()


def draw_objects(spec: WorldSpec, pool: np.ndarray, size: int,
                 rng: np.random.Generator, replace: bool = True) -> np.ndarray:
    """Draw targets from a pool, weighted by the world bias if present."""
    pool = check_objects(spec, pool)
    p = object_weights(spec, pool) if spec.bias is not None else None
    idx = rng.choice(pool.shape[0], size=size, replace=replace, p=p)
    return pool[idx]


def sample_distractors(spec: WorldSpec, pool: np.ndarray, target, k: int,
                       rng: np.random.Generator, mode: str = "uniform",
                       threshold: float = 0.75) -> np.ndarray:
    """K distinct pool objects, never the target.

    ``hard`` mode restricts to objects with attribute-overlap >= threshold and
    falls back to the K most similar when too few qualify.
    """
    pool = check_objects(spec, pool)
    target = check_objects(spec, target)[0]
    not_target = ~np.all(pool == target[None, :], axis=1)
    eligible = np.flatnonzero(not_target)
    if eligible.size < k:
        raise ValueError(f"pool of {pool.shape[0]} cannot supply {k} distractors")
    if k == 0:
        return pool[:0]
    if mode == "uniform":
        pick = rng.choice(eligible, size=k, replace=False)
    elif mode == "hard":
        sims = (pool[eligible] == target[None, :]).mean(axis=1)
        hard = eligible[sims >= threshold]
        if hard.size >= k:
            pick = rng.choice(hard, size=k, replace=False)
        else:
            order = np.lexsort((eligible, -sims))  # most similar first, stable
            pick = eligible[order][:k]
    else:
        raise ValueError(f"unknown distractor mode '{mode}'")
    return pool[pick]


@dataclass
class WorldSplit:
    """Disjoint train/validation/test object sets over the universe."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def split_train(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Fresh 50/50 partition of the training objects (inner/outer pools)."""
        perm = rng.permutation(self.train.shape[0])
        half = self.train.shape[0] // 2
        return self.train[perm[:half]], self.train[perm[half:]]


def make_splits(spec: WorldSpec, val_size: int, test_size: int,
                rng: np.random.Generator) -> WorldSplit:
    universe = enumerate_universe(spec)
    n = universe.shape[0]
    if val_size + test_size >= n:
        raise ValueError("validation + test larger than the universe")
    perm = rng.permutation(n)
    test = universe[perm[:test_size]]
    val = universe[perm[test_size:test_size + val_size]]
    train = universe[perm[test_size + val_size:]]
    return WorldSplit(train=train, val=val, test=test)


@dataclass
class GroundingDataset:
    """(object, canonical description) pairs drawn from the training split."""

    spec: WorldSpec
    objects: np.ndarray          # (n, A)
    messages: np.ndarray         # (n, A+1) canonical tokens incl. EOS
    source: str = "train"
    _index: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return self.objects.shape[0]

    def batch(self, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        idx = rng.integers(0, len(self), size=size)
        return self.objects[idx], self.messages[idx]

    def to_json(self) -> str:
        return json.dumps({
            "world": self.spec.to_dict(),
            "world_hash": world_hash(self.spec),
            "pairs": [
                {"object": [int(v) for v in o], "tokens": [int(t) for t in m]}
                for o, m in zip(self.objects, self.messages)
            ],
        })

    @classmethod
    def from_json(cls, text: str) -> "GroundingDataset":
        d = json.loads(text)
        spec = WorldSpec.from_dict(d["world"])
        objects = np.array([p["object"] for p in d["pairs"]], dtype=np.int64)
        messages = np.array([p["tokens"] for p in d["pairs"]], dtype=np.int64)
        return cls(spec=spec, objects=objects, messages=messages)


def build_dataset(spec: WorldSpec, train_pool: np.ndarray, size: int,
                  rng: np.random.Generator) -> GroundingDataset:
    """Sample ``size`` grounding pairs without replacement from the train split."""
    train_pool = check_objects(spec, train_pool)
    if size > train_pool.shape[0]:
        raise ValueError(f"dataset size {size} exceeds train split {train_pool.shape[0]}")
    p = object_weights(spec, train_pool) if spec.bias is not None else None
    idx = rng.choice(train_pool.shape[0], size=size, replace=False, p=p)
    objects = train_pool[np.sort(idx)]
    if spec.synonyms > 1:
        messages = np.array(
            [canonical_describe(spec, o, rng) for o in objects], dtype=np.int64
        )
    else:
        messages = canonical_batch(spec, objects)
    return GroundingDataset(spec=spec, objects=objects, messages=messages)
