"""Seeded synthetic knowledge-grounded VQA benchmark.

Objects are rendered as coloured glyphs; each question names a relation and
the answer is the object's tail under that relation. The (object, relation)
pairs asked at test time never occur in VQA training, so the answer can only
be recovered from the knowledge graph, which contains every pair.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Rng
from .errors import ArgumentError
from .kg import KnowledgeGraph, save_triples_tsv
from .tensorio import atomic_write, save_feature_file

RELATION_WORDS = [
    "color", "habitat", "material", "origin", "genus", "maker", "style", "flavor",
    "era", "region", "purpose", "texture", "climate", "family", "sound", "season",
]
_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"

TEMPLATE = "which {relation} does the object in the image belong to?"
TEMPLATE_HEAD = "which {relation} does the {head} in the image belong to?"


@dataclass
class SynthSpec:
    n_entities: int = 100
    n_relations: int = 8
    tails_per_relation: int = 4
    samples: int = 2000
    image_size: int = 32
    heldout_pair_fraction: float = 0.2
    valid_pair_fraction: float = 0.2
    noise: float = 0.08
    head_mention_fraction: float = 0.3
    inverse_relations: bool = True
    seed: int = 42

    def validate(self):
        if self.tails_per_relation < 2:
            raise ArgumentError("tails_per_relation must be >= 2")
        if self.n_relations < 1 or self.n_relations > len(RELATION_WORDS):
            raise ArgumentError(f"n_relations must be in 1..{len(RELATION_WORDS)}")
        n_values = self.n_relations * self.tails_per_relation
        if self.tails_per_relation > self.n_entities or self.n_entities - n_values < self.tails_per_relation:
            raise ArgumentError("infeasible spec: not enough entities for objects and tail values")
        if self.image_size < 8:
            raise ArgumentError("image_size must be >= 8")
        if not (0 < self.heldout_pair_fraction < 1 and 0 <= self.valid_pair_fraction < 1
                and self.heldout_pair_fraction + self.valid_pair_fraction < 1):
            raise ArgumentError("pair fractions must leave room for training pairs")
        if self.samples < 1:
            raise ArgumentError("samples must be positive")


@dataclass
class SynthSample:
    id: str
    image: str
    question: str
    answer: str
    triple: tuple
    lang: str = "en"
    given_case: str = "none"

    def to_json(self):
        d = asdict(self)
        d["triple"] = list(self.triple)
        return d


@dataclass
class SynthBenchmark:
    spec: SynthSpec
    kg: KnowledgeGraph
    objects: list
    relations: list
    splits: dict
    images: dict
    lexicon: dict
    pairs: dict = field(default_factory=dict)

    def records(self) -> dict:
        return {name: [s.to_json() for s in rows] for name, rows in self.splits.items()}

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_triples_tsv(self.kg, out / "kg.tsv")
        for name, rows in self.splits.items():
            atomic_write(out / f"{name}.jsonl",
                         "".join(json.dumps(s.to_json(), sort_keys=True) + "\n" for s in rows))
        ids = sorted(self.images)
        save_feature_file(out / "images.gelt", ids, np.stack([self.images[i] for i in ids]))
        atomic_write(out / "lexicon.json", json.dumps(self.lexicon, indent=1, sort_keys=True))
        atomic_write(out / "synth_spec.json", json.dumps(asdict(self.spec), indent=1, sort_keys=True))
        return out


def _names(gen: np.random.Generator, n: int, taken: set) -> list:
    out = []
    while len(out) < n:
        k = int(gen.integers(2, 4))
        word = "".join(_CONSONANTS[gen.integers(len(_CONSONANTS))] + _VOWELS[gen.integers(len(_VOWELS))]
                       for _ in range(k))
        if word not in taken:
            taken.add(word)
            out.append(word)
    return out


def _glyph_mask(kind: int, size: int, scale: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    y, x = (yy - c) / size, (xx - c) / size
    r = 0.42 * scale
    if kind == 0:
        return (np.abs(x) < r) & (np.abs(y) < r)
    if kind == 1:
        return x * x + y * y < r * r
    if kind == 2:
        return ((np.abs(x) < r / 3) & (np.abs(y) < r)) | ((np.abs(y) < r / 3) & (np.abs(x) < r))
    if kind == 3:
        return (y > -r) & (y < r) & (np.abs(x) < (y + r) / 2)
    if kind == 4:
        return (np.abs(y) < r / 2.5) & (np.abs(x) < r * 1.1)
    d2 = x * x + y * y
    return (d2 < r * r) & (d2 > (0.55 * r) ** 2)


def render(signature: dict, size: int, noise: float, gen: np.random.Generator) -> np.ndarray:
    mask = _glyph_mask(signature["shape"], size, signature["scale"])
    img = np.empty((3, size, size))
    for ch in range(3):
        img[ch] = np.where(mask, signature["fg"][ch], signature["bg"][ch])
    img += gen.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_lexicon(relations: list) -> dict:
    """Perturbation lexicon matched to the question templates.

    Relation words carry only hypernyms/hyponyms, so lexical swaps that hit
    them remove the relation; synonyms exist only for the filler nouns and verb.
    """
    lex = {
        "object": {"pos": "noun", "synonyms": ["item"], "hypernyms": ["entity"], "hyponyms": ["artifact"]},
        "image": {"pos": "noun", "synonyms": ["picture"], "hypernyms": ["representation"]},
        "belong": {"pos": "verb", "synonyms": ["pertain"], "antonyms": ["differ"]},
        "does": {"pos": "verb", "synonyms": ["do"]},
    }
    for rel in relations:
        lex[rel] = {"pos": "noun", "hypernyms": ["attribute"], "hyponyms": [f"sub{rel}"]}
    return lex


def generate_synthetic_benchmark(spec: SynthSpec | None = None) -> SynthBenchmark:
    spec = spec or SynthSpec()
    spec.validate()
    root = Rng(spec.seed)
    gen = root.substream("names").generator
    relations = RELATION_WORDS[:spec.n_relations]
    n_values = spec.n_relations * spec.tails_per_relation
    n_objects = spec.n_entities - n_values
    taken = set(relations) | {"object", "image", "which", "does", "the", "in", "belong", "to"}
    objects = _names(gen, n_objects, taken)
    values = {rel: _names(gen, spec.tails_per_relation, taken) for rel in relations}

    # balanced functional relations: each tail receives an equal share of objects
    assign = root.substream("assign").generator
    tail_of = {}
    for rel in relations:
        perm = assign.permutation(n_objects)
        for rank, oi in enumerate(perm):
            tail_of[(objects[oi], rel)] = values[rel][rank % spec.tails_per_relation]

    rows = [(o, rel, tail_of[(o, rel)]) for o in objects for rel in relations]
    if spec.inverse_relations:
        rows += [(tail_of[(o, rel)], f"{rel}_of", o) for o in objects for rel in relations]
    kg = KnowledgeGraph.from_surface(rows)

    # pair split with coverage repair
    pairs = [(o, rel) for o in objects for rel in relations]
    order = root.substream("pairs").generator.permutation(len(pairs))
    n_test = int(round(spec.heldout_pair_fraction * len(pairs)))
    n_valid = int(round(spec.valid_pair_fraction * len(pairs)))
    test_p = [pairs[i] for i in order[:n_test]]
    valid_p = [pairs[i] for i in order[n_test:n_test + n_valid]]
    train_p = [pairs[i] for i in order[n_test + n_valid:]]
    train_objs = {o for o, _ in train_p}
    train_tails = {tail_of[p] for p in train_p}
    kept = {}
    for name, part in (("valid", valid_p), ("test", test_p)):
        keep = []
        for p in part:
            if p[0] in train_objs and tail_of[p] in train_tails:
                keep.append(p)
            else:
                train_p.append(p)
                train_objs.add(p[0])
                train_tails.add(tail_of[p])
        kept[name] = keep
    pair_split = {"train": train_p, "valid": kept["valid"], "test": kept["test"]}

    sig_gen = root.substream("signatures").generator
    signatures = {}
    for k, o in enumerate(objects):
        signatures[o] = {"shape": k % 6, "scale": float(sig_gen.uniform(0.7, 1.1)),
                         "fg": sig_gen.uniform(0, 1, 3), "bg": sig_gen.uniform(0, 1, 3)}

    all_pairs = [(name, p) for name in ("train", "valid", "test") for p in pair_split[name]]
    sample_order = root.substream("samples").generator.permutation(len(all_pairs))
    noise_gen = root.substream("noise").generator
    q_gen = root.substream("questions").generator
    splits = {"train": [], "valid": [], "test": []}
    images = {}
    for i in range(spec.samples):
        name, (obj, rel) = all_pairs[sample_order[i % len(all_pairs)]]
        sid = f"s{i:05d}"
        images[sid] = render(signatures[obj], spec.image_size, spec.noise, noise_gen)
        mention = q_gen.random() < spec.head_mention_fraction
        q = TEMPLATE_HEAD.format(relation=rel, head=obj) if mention else TEMPLATE.format(relation=rel)
        splits[name].append(SynthSample(sid, sid, q, tail_of[(obj, rel)], (obj, rel, tail_of[(obj, rel)]),
                                        given_case="H" if mention else "none"))
    return SynthBenchmark(spec, kg, objects, relations, splits, images, make_lexicon(relations),
                          pairs=pair_split)


def majority_tail_accuracy(bench: SynthBenchmark) -> float:
    """Accuracy on test of answering each relation with its most frequent training tail."""
    counts: dict = {}
    for s in bench.splits["train"]:
        rel = s.triple[1]
        counts.setdefault(rel, {})
        counts[rel][s.answer] = counts[rel].get(s.answer, 0) + 1
    best = {rel: sorted(c.items(), key=lambda kv: (-kv[1], kv[0]))[0][0] for rel, c in counts.items()}
    test = bench.splits["test"]
    return float(np.mean([best.get(s.triple[1]) == s.answer for s in test]))
