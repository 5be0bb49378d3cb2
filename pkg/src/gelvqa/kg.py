"""Knowledge-graph triples, vocabularies and negative sampling."""
from __future__ import annotations

import hashlib
import logging
from typing import Iterable, NamedTuple

from .autodiff import Rng
from .errors import (ArgumentError, CannotCorruptError, EmptyGraphError,
                     ParseError, SaturationError)
from .tensorio import atomic_write

log = logging.getLogger(__name__)

MAX_CORRUPT_ATTEMPTS = 100


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


class Vocab:
    """Dense bijection between surface strings and ids, in insertion order."""

    def __init__(self, items: Iterable[str] = ()):
        self._to_id: dict[str, int] = {}
        self._items: list[str] = []
        for s in items:
            self.add(s)

    def add(self, s: str) -> int:
        if s not in self._to_id:
            self._to_id[s] = len(self._items)
            self._items.append(s)
        return self._to_id[s]

    def id(self, s: str) -> int:
        return self._to_id[s]

    def get(self, s: str, default=None):
        return self._to_id.get(s, default)

    def surface(self, i: int) -> str:
        return self._items[i]

    def __contains__(self, s):
        return s in self._to_id

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    @property
    def items(self) -> list[str]:
        return list(self._items)

    def digest(self) -> str:
        return hashlib.sha256("\0".join(self._items).encode("utf-8")).hexdigest()


class KgVocab:
    def __init__(self, entities: Iterable[str] = (), relations: Iterable[str] = ()):
        self.entities = Vocab(entities)
        self.relations = Vocab(relations)

    @property
    def n_entities(self):
        return len(self.entities)

    @property
    def n_relations(self):
        return len(self.relations)

    def digest(self) -> str:
        h = hashlib.sha256()
        for s in self.entities:
            h.update(b"E" + s.encode("utf-8") + b"\0")
        for s in self.relations:
            h.update(b"R" + s.encode("utf-8") + b"\0")
        return h.hexdigest()

    def export_tsv(self, entity_path, relation_path):
        atomic_write(entity_path, "".join(f"{s}\t{i}\n" for i, s in enumerate(self.entities)))
        atomic_write(relation_path, "".join(f"{s}\t{i}\n" for i, s in enumerate(self.relations)))


class KnowledgeGraph:
    """Immutable set of triples over a :class:`KgVocab`."""

    def __init__(self, vocab: KgVocab, triples: Iterable[Triple] = ()):
        self.vocab = vocab
        self.triples: list[Triple] = []
        self._index: set[Triple] = set()
        self.duplicates_dropped = 0
        for t in triples:
            t = Triple(*map(int, t))
            if not (0 <= t.head < vocab.n_entities and 0 <= t.tail < vocab.n_entities
                    and 0 <= t.relation < vocab.n_relations):
                raise ArgumentError(f"triple {t} outside vocabulary bounds")
            if t in self._index:
                self.duplicates_dropped += 1
                continue
            self._index.add(t)
            self.triples.append(t)

    @classmethod
    def from_surface(cls, rows: Iterable[tuple[str, str, str]]) -> "KnowledgeGraph":
        vocab = KgVocab()
        ids = []
        for h, r, t in rows:
            ids.append(Triple(vocab.entities.add(h), vocab.relations.add(r), vocab.entities.add(t)))
        return cls(vocab, ids)

    def __len__(self):
        return len(self.triples)

    def __contains__(self, t):
        return Triple(*t) in self._index

    @property
    def n_entities(self):
        return self.vocab.n_entities

    @property
    def n_relations(self):
        return self.vocab.n_relations

    def surface(self, t: Triple) -> tuple[str, str, str]:
        v = self.vocab
        return v.entities.surface(t.head), v.relations.surface(t.relation), v.entities.surface(t.tail)

    def encode(self, h: str, r: str, t: str) -> Triple:
        v = self.vocab
        return Triple(v.entities.id(h), v.relations.id(r), v.entities.id(t))


def contains_triple(kg: KnowledgeGraph, t) -> bool:
    return tuple(t) in kg


def load_triples_tsv(path) -> KnowledgeGraph:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(parts):
                raise ParseError(f"expected head<TAB>relation<TAB>tail, got {len(parts)} field(s)", line=lineno)
            rows.append(tuple(parts))
    if not rows:
        raise EmptyGraphError(f"{path} contains no triples")
    kg = KnowledgeGraph.from_surface(rows)
    if kg.duplicates_dropped:
        log.info("dropped %d duplicate triple(s) from %s", kg.duplicates_dropped, path)
    return kg


def save_triples_tsv(kg: KnowledgeGraph, path):
    atomic_write(path, "".join("\t".join(kg.surface(t)) + "\n" for t in kg.triples))


def corrupt_triple(t: Triple, kg: KnowledgeGraph, rng: Rng, filtered: bool = True) -> Triple:
    """Replace the head or the tail (fair coin) with a different random entity."""
    n = kg.n_entities
    if n < 2:
        raise CannotCorruptError("need at least two entities to corrupt a triple")
    gen = rng.generator
    for _ in range(MAX_CORRUPT_ATTEMPTS):
        corrupt_head = gen.random() < 0.5
        cur = t.head if corrupt_head else t.tail
        e = int(gen.integers(n - 1))
        if e >= cur:
            e += 1
        cand = Triple(e, t.relation, t.tail) if corrupt_head else Triple(t.head, t.relation, e)
        if not filtered or cand not in kg:
            return cand
    raise SaturationError(f"no unseen corruption of {tuple(t)} after {MAX_CORRUPT_ATTEMPTS} attempts")


def batch_negatives(batch, ratio: int, kg: KnowledgeGraph, rng: Rng, filtered: bool = True):
    """Each positive (label +1) followed by ``ratio`` corruptions (label -1)."""
    if ratio < 1:
        raise ArgumentError(f"negative ratio must be >= 1, got {ratio}")
    out = []
    for t in batch:
        t = Triple(*t)
        out.append((t, 1))
        for _ in range(ratio):
            out.append((corrupt_triple(t, kg, rng, filtered), -1))
    return out


def split_triples(kg: KnowledgeGraph, fractions, rng: Rng):
    """Seeded train/valid/test split in which train covers every id used elsewhere."""
    fr = [float(f) for f in fractions]
    if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9 or fr[0] <= 0:
        raise ArgumentError(f"bad split fractions {fractions}")
    order = rng.permutation(len(kg.triples))
    shuffled = [kg.triples[i] for i in order]
    n = len(shuffled)
    n_train = int(round(fr[0] * n))
    n_valid = int(round(fr[1] * n))
    train = shuffled[:n_train]
    valid = shuffled[n_train:n_train + n_valid]
    test = shuffled[n_train + n_valid:]
    ents = {e for t in train for e in (t.head, t.tail)}
    rels = {t.relation for t in train}
    moved = 0
    kept = []
    for part in (valid, test):
        keep = []
        for t in part:
            if t.head in ents and t.tail in ents and t.relation in rels:
                keep.append(t)
            else:
                train.append(t)
                ents.update((t.head, t.tail))
                rels.add(t.relation)
                moved += 1
        kept.append(keep)
    if moved:
        log.info("moved %d triple(s) into train for vocabulary coverage", moved)
    return train, kept[0], kept[1]
