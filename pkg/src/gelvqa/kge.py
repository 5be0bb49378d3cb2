"""Knowledge-graph embedding scorers, training and link-prediction evaluation.

Every scorer returns a plausibility where higher means more likely valid.
ConvKB's raw score ``f`` is exposed negated, so the softplus loss applies
unchanged to all five scorers.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .autodiff import ParamStore, Rng, Tensor
from .errors import ArgumentError, CompatibilityError, FormatError
from .kg import KgVocab, KnowledgeGraph, Triple, batch_negatives
from .tensorio import atomic_write, load_tensor, save_tensor

log = logging.getLogger(__name__)

SCORERS = ("TransE", "TorusE", "HolE", "DistMult", "ConvKB")


def _canonical_scorer(name: str) -> str:
    for s in SCORERS:
        if s.lower() == str(name).lower():
            return s
    raise ArgumentError(f"unknown scorer {name!r}; expected one of {SCORERS}")


class KgeModel:
    """Entity/relation tables plus scorer-specific parameters."""

    def __init__(self, scorer: str, n_entities: int, n_relations: int, dim: int = 256, norm: int = 2,
                 n_filters: int = 64, rng: Rng | None = None, vocab: KgVocab | None = None):
        self.scorer = _canonical_scorer(scorer)
        if dim < 1:
            raise ArgumentError("embedding dim must be >= 1")
        if norm not in (1, 2):
            raise ArgumentError("norm must be 1 or 2")
        self.n_entities, self.n_relations = int(n_entities), int(n_relations)
        self.dim, self.norm, self.n_filters = int(dim), int(norm), int(n_filters)
        self.vocab = vocab
        self.params = ParamStore()
        gen = (rng or Rng(0)).generator
        bound = 6.0 / np.sqrt(dim)
        self.params.add("kge.entity", gen.uniform(-bound, bound, (n_entities, dim)))
        self.params.add("kge.relation", gen.uniform(-bound, bound, (n_relations, dim)))
        if self.scorer == "ConvKB":
            base = np.array([0.1, 0.1, -0.1])
            noise = np.clip(gen.normal(0.0, 0.05, (n_filters, 3)), -0.1, 0.1)
            self.params.add("kge.filters", base + noise)
            wb = np.sqrt(6.0 / (dim * n_filters + 1))
            self.params.add("kge.proj", gen.uniform(-wb, wb, (dim * n_filters, 1)))
            self.params.add("kge.bias", np.zeros(1))

    @property
    def vocab_digest(self):
        return self.vocab.digest() if self.vocab is not None else None

    @property
    def entity_table(self) -> np.ndarray:
        return self.params["kge.entity"].data

    @property
    def relation_table(self) -> np.ndarray:
        return self.params["kge.relation"].data

    def plausibility(self, heads, relations, tails) -> Tensor:
        """Batched plausibility ``[B]`` for id arrays of equal length."""
        heads, relations, tails = (np.atleast_1d(np.asarray(a, dtype=np.int64)) for a in (heads, relations, tails))
        ent, rel = self.params["kge.entity"], self.params["kge.relation"]
        e_h = ad.gather(ent, heads)
        e_r = ad.gather(rel, relations)
        e_t = ad.gather(ent, tails)
        return score_embeddings(self, e_h, e_r, e_t)

    def score(self, t) -> float:
        t = Triple(*t)
        with ad.no_grad():
            return float(self.plausibility([t.head], [t.relation], [t.tail]).data[0])


def score_embeddings(m: KgeModel, e_h: Tensor, e_r: Tensor, e_t: Tensor) -> Tensor:
    s = m.scorer
    if s == "TransE":
        return ad.neg(ad.norm(e_h + e_r - e_t, ord=m.norm))
    if s == "TorusE":
        return ad.neg(ad.torus_distance(e_h + e_r - e_t))
    if s == "DistMult":
        # h*t first: IEEE products commute, so swapping h and t is bit-exact
        return ad.sum(ad.mul(ad.mul(e_h, e_t), e_r), axis=-1)
    if s == "HolE":
        return ad.sum(ad.mul(e_r, ad.circular_correlation(e_h, e_t)), axis=-1)
    # ConvKB: f = W . vec(ReLU([h; r; t] * filters)) + b, plausibility = -f
    p = m.params
    rows = ad.rows_3xd(e_h, e_r, e_t)
    maps = ad.relu(ad.conv_triple_rows(rows, p["kge.filters"]))
    flat = ad.reshape(maps, (maps.shape[0], -1))
    f = ad.add(ad.reshape(ad.matmul(flat, p["kge.proj"]), (maps.shape[0],)), ad.reshape(p["kge.bias"], ()))
    return ad.neg(f)


def _single(m: KgeModel, t, expected: str) -> float:
    if m.scorer != expected:
        raise ArgumentError(f"model scorer is {m.scorer}, not {expected}")
    return m.score(t)


def score_transe(m, t):
    return _single(m, t, "TransE")


def score_toruse(m, t):
    return _single(m, t, "TorusE")


def score_hole(m, t):
    return _single(m, t, "HolE")


def score_distmult(m, t):
    return _single(m, t, "DistMult")


def score_convkb(m, t):
    return _single(m, t, "ConvKB")


def kge_loss(m: KgeModel, labeled, lam: float = 1e-3) -> Tensor:
    """Summed softplus over labeled triples plus ``lam/2`` times the squared L2 of all parameters."""
    if not labeled:
        raise ArgumentError("kge_loss: empty batch")
    trip = np.array([tuple(t) for t, _ in labeled], dtype=np.int64)
    labels = np.array([lab for _, lab in labeled], dtype=np.float32)
    if not np.all(np.isin(labels, (1.0, -1.0))):
        raise ArgumentError("labels must be +1 (valid) or -1 (invalid)")
    s = m.plausibility(trip[:, 0], trip[:, 1], trip[:, 2])
    g = ad.mul(s, Tensor(-labels))
    loss = ad.sum(ad.softplus(g))
    if lam:
        reg = None
        for name, p in m.params.items():
            if name in m.params.frozen:
                continue
            term = ad.sum(ad.square(p))
            reg = term if reg is None else ad.add(reg, term)
        loss = ad.add(loss, ad.scale(reg, lam / 2.0))
    return loss


@dataclass
class KgeConfig:
    scorer: str = "ConvKB"
    dim: int = 256
    iterations: int = 50_000
    batch_size: int = 512
    lr: float = 5e-5
    lam: float = 1e-3
    neg_ratio: int = 1
    seed: int = 42
    norm: int = 2
    n_filters: int = 64
    filtered: bool = True
    renorm: bool = True
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0


def _renormalize(m: KgeModel):
    ent = m.params["kge.entity"]
    n = np.linalg.norm(ent.data.astype(np.float64), axis=1, keepdims=True)
    ent.data = (ent.data / np.where(n > 0, n, 1.0)).astype(ent.data.dtype)


def train_kge(kg: KnowledgeGraph, config: KgeConfig, triples=None):
    """Pretrain a :class:`KgeModel`; returns ``(model, loss_trace)``.

    ``triples`` restricts the positives (e.g. a training split); negatives
    are still filtered against the whole ``kg``.
    """
    rng = Rng(config.seed)
    m = KgeModel(config.scorer, kg.n_entities, kg.n_relations, config.dim, config.norm,
                 config.n_filters, rng=rng.substream("init"), vocab=kg.vocab)
    positives = list(triples if triples is not None else kg.triples)
    if not positives:
        raise ArgumentError("train_kge: no positive triples")
    shuffle = rng.substream("shuffle")
    sampling = rng.substream("sampling")
    order = shuffle.permutation(len(positives))
    cursor = 0
    trace = []
    bs = min(config.batch_size, len(positives))
    for _ in range(config.iterations):
        if cursor + bs > len(order):
            order = shuffle.permutation(len(positives))
            cursor = 0
        batch = [positives[i] for i in order[cursor:cursor + bs]]
        cursor += bs
        labeled = batch_negatives(batch, config.neg_ratio, kg, sampling, config.filtered)
        loss = kge_loss(m, labeled, config.lam)
        grads = ad.backward(loss, m.params)
        ad.adamw_step(m.params, grads, config.lr, config.beta1, config.beta2, config.weight_decay)
        if m.scorer == "TransE" and config.renorm:
            _renormalize(m)
        trace.append(float(loss.data))
    return m, trace


# ---------------------------------------------------------------------------
# link prediction


class RankResult(NamedTuple):
    triple: Triple
    slot: str
    rank: int
    filtered: bool


def candidate_scores(m: KgeModel, t: Triple, slot: str) -> np.ndarray:
    """Plausibility of every entity substituted into ``slot``."""
    n = m.n_entities
    cand = np.arange(n)
    with ad.no_grad():
        if slot == "head":
            s = m.plausibility(cand, np.full(n, t.relation), np.full(n, t.tail))
        elif slot == "tail":
            s = m.plausibility(np.full(n, t.head), np.full(n, t.relation), cand)
        else:
            raise ArgumentError(f"slot must be 'head' or 'tail', got {slot!r}")
    return s.data


def rank_from_scores(scores: np.ndarray, gold: int, excluded=()) -> int:
    """1 + candidates strictly above gold + tied candidates with a smaller id."""
    keep = np.ones(len(scores), dtype=bool)
    keep[list(excluded)] = False
    keep[gold] = True
    g = scores[gold]
    ids = np.arange(len(scores))
    above = (scores > g) | ((scores == g) & (ids < gold))
    return 1 + int(np.count_nonzero(above & keep))


def rank_candidates(m: KgeModel, t, slot: str, kg: KnowledgeGraph | None = None, filtered: bool = True) -> RankResult:
    t = Triple(*t)
    scores = candidate_scores(m, t, slot)
    gold = t.head if slot == "head" else t.tail
    excluded = []
    if filtered and kg is not None:
        for e in range(m.n_entities):
            if e == gold:
                continue
            other = Triple(e, t.relation, t.tail) if slot == "head" else Triple(t.head, t.relation, e)
            if other in kg:
                excluded.append(e)
    return RankResult(t, slot, rank_from_scores(scores, gold, excluded), filtered)


def summarize_ranks(ranks, k_list=(1, 3, 10)) -> dict:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ArgumentError("no ranks to summarize")
    out = {f"hit@{k}": float(np.mean(ranks <= k)) for k in k_list}
    out["mrr"] = float(np.mean(1.0 / ranks))
    out["n_queries"] = int(ranks.size)
    return out


def eval_link_prediction(m: KgeModel, test, kg: KnowledgeGraph | None = None, k_list=(1, 3, 10),
                         filtered: bool = True) -> dict:
    test = list(test)
    if not test:
        raise ArgumentError("eval_link_prediction: empty test set")
    ranks = []
    for t in test:
        for slot in ("head", "tail"):
            ranks.append(rank_candidates(m, t, slot, kg, filtered).rank)
    report = summarize_ranks(ranks, k_list)
    report["scorer"] = m.scorer
    report["filtered"] = bool(filtered)
    return report


def random_ranking_mrr(n_entities: int) -> float:
    """Expected MRR when the gold rank is uniform on 1..n, i.e. H(n)/n."""
    return float(np.sum(1.0 / np.arange(1, n_entities + 1)) / n_entities)


# ---------------------------------------------------------------------------
# lookup and persistence


def lookup_triple_embedding(m: KgeModel, t):
    t = Triple(*t)
    if not (0 <= t.head < m.n_entities and 0 <= t.tail < m.n_entities and 0 <= t.relation < m.n_relations):
        raise ArgumentError(f"triple {tuple(t)} outside the model vocabulary")
    e_h = m.entity_table[t.head].copy()
    e_r = m.relation_table[t.relation].copy()
    e_t = m.entity_table[t.tail].copy()
    return e_h, e_r, e_t, np.concatenate([e_h, e_r, e_t])


def lookup_batch(m: KgeModel, triples: np.ndarray) -> np.ndarray:
    """``[B, 3, d]`` embeddings for an ``[B, 3]`` id array (copies, no gradient)."""
    triples = np.asarray(triples, dtype=np.int64)
    if triples.size and (triples[:, [0, 2]].max() >= m.n_entities or triples[:, 1].max() >= m.n_relations
                         or triples.min() < 0):
        raise ArgumentError("triple id outside the model vocabulary")
    return np.stack([m.entity_table[triples[:, 0]], m.relation_table[triples[:, 1]],
                     m.entity_table[triples[:, 2]]], axis=1)


def save_kge(m: KgeModel, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "gelvqa-kge", "scorer": m.scorer, "dim": m.dim, "norm": m.norm,
        "n_filters": m.n_filters, "n_entities": m.n_entities, "n_relations": m.n_relations,
        "vocab_digest": m.vocab_digest,
        "entities": m.vocab.entities.items if m.vocab else None,
        "relations": m.vocab.relations.items if m.vocab else None,
        "tensors": {},
    }
    for name, t in m.params.items():
        fname = name.replace(".", "_") + ".gelt"
        save_tensor(path / fname, t.data)
        manifest["tensors"][name] = {"file": fname, "shape": list(t.shape)}
    atomic_write(path / "manifest.json", json.dumps(manifest, indent=1))


def load_kge(path, expected_vocab_digest: str | None = None) -> KgeModel:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise FormatError(f"no KGE manifest in {path}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt KGE manifest: {exc}") from exc
    if manifest.get("format") != "gelvqa-kge":
        raise FormatError("not a KGE checkpoint")
    if expected_vocab_digest is not None and manifest.get("vocab_digest") != expected_vocab_digest:
        raise CompatibilityError("KGE vocabulary does not match the knowledge graph")
    vocab = None
    if manifest.get("entities") is not None:
        vocab = KgVocab(manifest["entities"], manifest["relations"])
    m = KgeModel(manifest["scorer"], manifest["n_entities"], manifest["n_relations"], manifest["dim"],
                 manifest["norm"], manifest["n_filters"], vocab=vocab)
    for name, info in manifest["tensors"].items():
        arr = load_tensor(path / info["file"])
        if list(arr.shape) != info["shape"] or name not in m.params:
            raise FormatError(f"tensor {name} has unexpected shape {arr.shape}")
        m.params.set(name, arr)
    return m


# ---------------------------------------------------------------------------
# estimator facade


class KGEEmbedder(TransformerMixin, BaseEstimator):
    """Pretrains a knowledge-graph embedding and maps triples to ``[e_h; e_r; e_t]``.

    ``fit`` takes a :class:`~gelvqa.kg.KnowledgeGraph`; ``transform`` takes
    an ``[N, 3]`` array of (head, relation, tail) ids and returns ``[N, 3*dim]``.
    ``score`` is filtered MRR on the given triples.
    """

    def __init__(self, scorer="ConvKB", dim=256, iterations=50_000, batch_size=512, lr=5e-5, lam=1e-3,
                 neg_ratio=1, norm=2, n_filters=64, filtered=True, renorm=True, weight_decay=0.0, seed=42):
        self.scorer = scorer
        self.dim = dim
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr = lr
        self.lam = lam
        self.neg_ratio = neg_ratio
        self.norm = norm
        self.n_filters = n_filters
        self.filtered = filtered
        self.renorm = renorm
        self.weight_decay = weight_decay
        self.seed = seed

    def _config(self) -> KgeConfig:
        return KgeConfig(scorer=self.scorer, dim=self.dim, iterations=self.iterations,
                         batch_size=self.batch_size, lr=self.lr, lam=self.lam, neg_ratio=self.neg_ratio,
                         seed=self.seed, norm=self.norm, n_filters=self.n_filters, filtered=self.filtered,
                         renorm=self.renorm, weight_decay=self.weight_decay)

    def fit(self, kg: KnowledgeGraph, y=None, triples=None):
        if not isinstance(kg, KnowledgeGraph):
            raise ArgumentError("KGEEmbedder.fit expects a KnowledgeGraph")
        self.model_, self.loss_trace_ = train_kge(kg, self._config(), triples)
        self.kg_ = kg
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = np.asarray(X, dtype=np.int64)
        if X.ndim != 2 or X.shape[1] != 3:
            raise ArgumentError(f"expected an [N, 3] id array, got shape {X.shape}")
        return lookup_batch(self.model_, X).reshape(len(X), -1)

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = np.asarray(X, dtype=np.int64)
        with ad.no_grad():
            return self.model_.plausibility(X[:, 0], X[:, 1], X[:, 2]).data.copy()

    def evaluate(self, triples, k_list=(1, 3, 10), filtered=None):
        check_is_fitted(self, "model_")
        return eval_link_prediction(self.model_, triples, self.kg_, k_list,
                                    self.filtered if filtered is None else filtered)

    def score(self, X, y=None):
        return self.evaluate([Triple(*row) for row in np.asarray(X)])["mrr"]
