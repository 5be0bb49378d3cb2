"""Multitask VQA training with knowledge-graph embedding fusion.

Five model variants share one loop. Every variant encodes the image and
question and fuses them; the KGE variants additionally pick a triple
(gold, predicted or the fixed random one), look its embeddings up in a
frozen KGE table and multiply the concatenation into the fused feature
before the answer MLP.
"""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .autodiff import ParamStore, Rng, Tensor
from .config import VARIANTS, Config
from .encoders import (TokenVocab, UNK, build_token_vocab, encode_image, encode_question,
                       init_image_encoder, init_question_encoder, tokenize)
from .errors import (ArgumentError, CompatibilityError, ConfigError, DataError, DimensionError,
                     FormatError)
from .kg import KgVocab, KnowledgeGraph, load_triples_tsv
from .kge import KgeModel, load_kge, lookup_batch, save_kge
from .tensorio import atomic_write, load_stacked, load_tensor, save_tensor
from .vqa import (AnswerVocab, TripleLogits, init_mlp, init_triple_heads, linear, mlp_logits,
                  predict_triple, predict_triple_logits, triple_accuracy, triple_loss, vqa_loss,
                  _linear_init)

log = logging.getLogger(__name__)

KGE_VARIANTS = ("ideal", "gel", "gel-tf", "gel-tf-attn")
MULTITASK_VARIANTS = ("gel", "gel-tf", "gel-tf-attn")
CHECKPOINT_FORMAT = "gelvqa-checkpoint"


class ModelVariant:
    BASELINE = "baseline"
    IDEAL = "ideal"
    GEL = "gel"
    GEL_TF = "gel-tf"
    GEL_TF_ATTN = "gel-tf-attn"
    ALL = VARIANTS

    @staticmethod
    def check(name: str) -> str:
        if name not in VARIANTS:
            raise ConfigError(f"variant: expected one of {VARIANTS}, got {name!r}")
        return name


# ---------------------------------------------------------------------------
# data


@dataclass
class VqaDataset:
    """Column-oriented split: one row per sample."""
    ids: list
    questions: list
    token_ids: list
    answers: np.ndarray
    triples: Optional[np.ndarray] = None
    given_case: list = field(default_factory=list)
    images: Optional[np.ndarray] = None
    image_features: Optional[np.ndarray] = None
    question_features: Optional[np.ndarray] = None
    langs: list = field(default_factory=list)

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "VqaDataset":
        idx = np.asarray(idx, dtype=np.int64)
        take = lambda a: None if a is None else a[idx]  # noqa: E731
        pick = lambda xs: [xs[i] for i in idx] if xs else []  # noqa: E731
        return VqaDataset(pick(self.ids), pick(self.questions), pick(self.token_ids), self.answers[idx],
                          take(self.triples), pick(self.given_case), take(self.images),
                          take(self.image_features), take(self.question_features), pick(self.langs))

    def with_questions(self, questions, vocab: TokenVocab) -> "VqaDataset":
        """Same samples with replaced question text (used by the robustness harness)."""
        if len(questions) != len(self):
            raise ArgumentError("one question per sample required")
        out = copy.copy(self)
        out.questions = list(questions)
        out.token_ids = [_token_ids(vocab, q) for q in questions]
        return out


@dataclass
class GelData:
    kg: KnowledgeGraph
    token_vocab: TokenVocab
    answer_vocab: AnswerVocab
    splits: dict


def _token_ids(vocab: TokenVocab, text: str) -> list:
    ids = tokenize(vocab, text)
    return ids or [UNK]


def read_jsonl(path) -> list:
    rows = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except FileNotFoundError as exc:
        raise DataError(f"dataset file {path} not found") from exc
    for n, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: line {n}: invalid JSON ({exc.msg})") from exc
        if not isinstance(rec, dict) or "question" not in rec or "answer" not in rec:
            raise DataError(f"{path}: line {n}: record needs 'question' and 'answer'")
        rows.append(rec)
    return rows


def encode_records(records, kg: KnowledgeGraph, token_vocab: TokenVocab, answer_vocab: AnswerVocab,
                   images: dict | None = None, image_features: dict | None = None,
                   question_features: dict | None = None) -> VqaDataset:
    """Turn JSON-style records into a :class:`VqaDataset`.

    Answers outside the vocabulary become class -1 (always wrong); a
    triple that is missing or not in the KG vocabulary becomes ``[-1]*3``.
    """
    ids, qs, toks, answers, triples, cases, langs = [], [], [], [], [], [], []
    ents, rels = kg.vocab.entities, kg.vocab.relations
    for k, rec in enumerate(records):
        sid = str(rec.get("id", k))
        ids.append(sid)
        qs.append(rec["question"])
        toks.append(_token_ids(token_vocab, rec["question"]))
        answers.append(answer_vocab.get(rec["answer"], -1))
        tr = rec.get("triple")
        if tr is not None and len(tr) == 3 and tr[0] in ents and tr[1] in rels and tr[2] in ents:
            triples.append((ents.id(tr[0]), rels.id(tr[1]), ents.id(tr[2])))
        else:
            triples.append((-1, -1, -1))
        cases.append(rec.get("given_case"))
        langs.append(rec.get("lang", "en"))

    def gather(table, what):
        if table is None:
            return None
        keys = [str(r.get("image", r.get("id"))) if what == "image" else ids[i] for i, r in enumerate(records)]
        missing = [k for k in keys if k not in table]
        if missing:
            raise DataError(f"{len(missing)} samples have no {what} entry (first: {missing[0]!r})")
        return np.stack([np.asarray(table[k], dtype=np.float32) for k in keys]) if keys else None

    return VqaDataset(ids, qs, toks, np.asarray(answers, dtype=np.int64),
                      np.asarray(triples, dtype=np.int64).reshape(-1, 3), cases,
                      gather(images, "image"), gather(image_features, "image"),
                      gather(question_features, "question"), langs)


def build_data(kg: KnowledgeGraph, records: dict, images: dict | None = None, min_count: int = 1,
               image_features: dict | None = None, question_features: dict | None = None) -> GelData:
    """Vocabularies come from the train split only."""
    train = records.get("train") or []
    if not train:
        raise DataError("training split is empty")
    token_vocab = build_token_vocab([r["question"] for r in train], min_count)
    answer_vocab = AnswerVocab(sorted({r["answer"] for r in train}))
    splits = {name: encode_records(rows, kg, token_vocab, answer_vocab, images, image_features,
                                   question_features)
              for name, rows in records.items()}
    return GelData(kg, token_vocab, answer_vocab, splits)


def data_from_benchmark(bench, min_count: int = 1) -> GelData:
    """In-memory twin of writing a synthetic benchmark and loading it back."""
    return build_data(bench.kg, bench.records(), bench.images, min_count)


def _load_vectors(path) -> dict:
    ids, arr = load_stacked(path)
    return dict(zip(ids, arr))


def load_data(config: Config, data_dir=None) -> GelData:
    """Read KG, JSONL splits and image tensors from config paths (or a benchmark directory)."""
    base = Path(data_dir) if data_dir is not None else None

    def resolve(explicit, default_name):
        if explicit:
            return Path(explicit)
        if base is not None and (base / default_name).exists():
            return base / default_name
        return None

    kg_path = resolve(config.kg_path, "kg.tsv")
    if kg_path is None:
        raise ConfigError("kg_path: no knowledge-graph file given")
    kg = load_triples_tsv(kg_path)
    records = {}
    for split in ("train", "valid", "test"):
        p = resolve(getattr(config, f"{split}_path"), f"{split}.jsonl")
        if p is not None:
            records[split] = read_jsonl(p)
    if "train" not in records:
        raise ConfigError("train_path: no training split given")
    feats = _load_vectors(config.image_features) if config.image_features else None
    qfeats = _load_vectors(config.question_features) if config.question_features else None
    img_path = resolve(config.images_path, "images.gelt")
    images = _load_vectors(img_path) if (img_path is not None and feats is None) else None
    if images is None and feats is None:
        raise ConfigError("images_path: neither raw images nor image features given")
    for vecs, what in ((feats, "image_features"), (qfeats, "question_features")):
        if vecs and next(iter(vecs.values())).shape != (config.d_feat,):
            raise CompatibilityError(f"{what}: vectors do not have length d_feat={config.d_feat}")
    return build_data(kg, records, images, config.min_count, feats, qfeats)


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    config: Config
    variant: str
    params: ParamStore
    kge: Optional[KgeModel]
    token_vocab: TokenVocab
    answer_vocab: AnswerVocab
    kg_vocab: Optional[KgVocab]
    random_embedding: Optional[np.ndarray]
    dropout_rng: Rng
    shuffle_rng: Rng
    tau: int = 0
    epoch: int = 0
    history: list = field(default_factory=list)

    @property
    def seed(self):
        return self.config.seed


def init_state(config: Config, token_vocab: TokenVocab, answer_vocab: AnswerVocab,
               kg_vocab: KgVocab | None = None, kge: KgeModel | None = None) -> TrainState:
    config.validate()
    variant = ModelVariant.check(config.variant)
    if variant in KGE_VARIANTS:
        if kge is None:
            raise ConfigError(f"variant {variant} needs a pretrained KGE checkpoint (kge_checkpoint)")
        if 3 * kge.dim != config.d_feat:
            raise ConfigError(f"d_feat={config.d_feat} must equal 3 x KGE dim ({kge.dim})")
        if kg_vocab is not None and kge.vocab is not None and kge.vocab.digest() != kg_vocab.digest():
            raise CompatibilityError("KGE vocabulary does not match the knowledge graph")
    elif kge is not None:
        log.warning("baseline variant ignores the provided KGE model")
        kge = None
    if variant in MULTITASK_VARIANTS and kg_vocab is None:
        raise ConfigError(f"variant {variant} needs the knowledge-graph vocabulary")
    root = Rng(config.seed)
    init = root.substream("init")
    store = ParamStore()
    init_question_encoder(store, len(token_vocab), config.d_feat, config.q_embed_dim, init.substream("question"))
    if not config.image_features:
        init_image_encoder(store, config.d_feat, tuple(config.image_channels), init.substream("image"))
    init_mlp(store, config.d_feat, config.mlp_hidden, len(answer_vocab), init.substream("mlp"))
    if kg_vocab is not None:
        init_triple_heads(store, config.d_feat, kg_vocab.n_entities, kg_vocab.n_relations,
                          init.substream("triple"))
    random_embedding = None
    if kge is not None and config.kge_finetune:
        store.add("kge.entity", kge.entity_table)
        store.add("kge.relation", kge.relation_table)
    if kge is not None:
        if variant == "gel-tf-attn":
            init_attention(store, kge.dim, config.attention_heads, config.attention_head_dim,
                           init.substream("attention"))
        scale = float(np.std(kge.entity_table)) or 1.0
        random_embedding = init.substream("tau0").normal(0.0, scale, (3, kge.dim)).astype(np.float32)
    return TrainState(config, variant, store, kge, token_vocab, answer_vocab, kg_vocab, random_embedding,
                      root.substream("dropout"), root.substream("shuffle"))


# ---------------------------------------------------------------------------
# fusion pieces


def fuse_with_kge(f_u: Tensor, emb) -> Tensor:
    """``f_u * [e_h; e_r; e_t]``; ``emb`` is ``[..., 3, d]`` or already concatenated."""
    e = emb if isinstance(emb, Tensor) else Tensor(np.asarray(emb, dtype=np.float32))
    if e.ndim == f_u.ndim + 1:
        e = ad.reshape(e, e.shape[:-2] + (e.shape[-2] * e.shape[-1],))
    if e.shape != f_u.shape:
        raise DimensionError(f"triple embedding {e.shape} does not match fused feature {f_u.shape}")
    return ad.mul(f_u, e)


def init_attention(store: ParamStore, d: int, heads: int = 4, head_dim: int = 64, rng: Rng | None = None):
    gen = (rng or Rng(0)).generator
    inner = heads * head_dim
    for name in ("attn.q", "attn.k", "attn.v"):
        _linear_init(store, name, d, inner, gen)
    _linear_init(store, "attn.o", inner, d, gen)


def attend_triple(store: ParamStore, emb, heads: int = 4):
    """One self-attention layer over the (h, r, t) tokens, with a residual add.

    Returns the new ``[B, 3, d]`` embeddings and ``[B, 3]`` scores: the
    attention weights averaged over heads and query positions.
    """
    e = emb if isinstance(emb, Tensor) else Tensor(np.asarray(emb, dtype=np.float32))
    single = e.ndim == 2
    if single:
        e = ad.reshape(e, (1,) + e.shape)
    if e.ndim != 3 or e.shape[1] != 3:
        raise DimensionError(f"attend_triple: expected [B, 3, d], got {e.shape}")
    if e.shape[2] != store["attn.q.W"].shape[0]:
        raise DimensionError(f"attend_triple: embedding dim {e.shape[2]} != {store['attn.q.W'].shape[0]}")
    B = e.shape[0]
    inner = store["attn.q.W"].shape[1]
    if inner % heads:
        raise DimensionError(f"{inner} projection width is not divisible by {heads} heads")
    hd = inner // heads

    def split(x):
        return ad.transpose(ad.reshape(x, (B, 3, heads, hd)), (0, 2, 1, 3))

    q, k, v = (split(linear(store, n, e)) for n in ("attn.q", "attn.k", "attn.v"))
    logits = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    weights = ad.softmax(logits, axis=-1)
    ctx = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)), (B, 3, inner))
    out = ad.add(e, linear(store, "attn.o", ctx))
    scores = weights.data.astype(np.float64).mean(axis=(1, 2))
    if single:
        return ad.reshape(out, out.shape[1:]), scores[0]
    return out, scores


def _lookup(state: TrainState, triples: np.ndarray):
    if not state.config.kge_finetune:
        return lookup_batch(state.kge, triples)
    p = state.params
    parts = [ad.gather(p["kge.entity"], triples[:, 0]), ad.gather(p["kge.relation"], triples[:, 1]),
             ad.gather(p["kge.entity"], triples[:, 2])]
    return ad.reshape(ad.concat(parts, axis=-1), (len(triples), 3, -1))


def select_triple_embedding(state: TrainState, mode: str, gold=None, predicted=None):
    """``[B, 3, d]`` triple embeddings.

    Frozen tables give plain arrays, so nothing flows back into them. With
    ``kge_finetune`` the lookup is a gather from trainable copies; the
    argmax that picks predicted ids still passes no gradient.
    """
    if state.kge is None:
        raise ConfigError("no KGE model in this state")
    if mode == "gold":
        if gold is None:
            raise DataError("gold mode needs the gold triples")
        gold = np.asarray(gold, dtype=np.int64).reshape(-1, 3)
        if (gold < 0).any():
            raise DataError("sample without a gold triple in the KG vocabulary")
        return _lookup(state, gold)
    if mode == "predicted":
        if predicted is None:
            raise ArgumentError("predicted mode needs predicted triples")
        return _lookup(state, np.asarray(predicted, dtype=np.int64).reshape(-1, 3))
    if mode == "random":
        n = len(np.asarray(gold if gold is not None else predicted).reshape(-1, 3))
        return np.broadcast_to(state.random_embedding, (n,) + state.random_embedding.shape).copy()
    raise ArgumentError(f"unknown embedding mode {mode!r}")


def embedding_mode(variant: str, training: bool, tau: int) -> Optional[str]:
    if variant == "baseline":
        return None
    if variant == "ideal":
        return "gold"
    if training and variant in ("gel-tf", "gel-tf-attn"):
        return "gold"
    if training and tau == 0:
        return "random"
    return "predicted"


# ---------------------------------------------------------------------------
# forward / step / evaluate


class Forward(NamedTuple):
    logits: Tensor
    triple_logits: Optional[TripleLogits]
    predicted: Optional[np.ndarray]
    mode: Optional[str]
    attention: Optional[np.ndarray]


def features(state: TrainState, data: VqaDataset):
    if data.question_features is not None:
        f_q = Tensor(data.question_features)
    else:
        f_q = encode_question(state.params, data.token_ids)
    if data.image_features is not None:
        f_v = Tensor(data.image_features)
    elif data.images is not None:
        f_v = encode_image(state.params, data.images)
    else:
        raise DataError("samples carry neither images nor image features")
    if f_v.shape[-1] != state.config.d_feat or f_q.shape[-1] != state.config.d_feat:
        raise DimensionError("feature width differs from d_feat")
    return f_v, f_q


def forward(state: TrainState, data: VqaDataset, training: bool = False) -> Forward:
    f_v, f_q = features(state, data)
    f_u = ad.mul(f_v, f_q)
    mode = embedding_mode(state.variant, training, state.tau)
    tl = pred = attn = None
    if state.variant in MULTITASK_VARIANTS:
        tl = predict_triple_logits(state.params, f_u, f_q)
        pred = predict_triple(tl).reshape(-1, 3)
    f = f_u
    if mode is not None:
        emb = select_triple_embedding(state, mode, gold=data.triples, predicted=pred)
        if state.variant == "gel-tf-attn":
            emb, attn = attend_triple(state.params, emb, state.config.attention_heads)
        f = fuse_with_kge(f_u, emb)
    logits = mlp_logits(state.params, f, training, state.config.dropout, state.dropout_rng if training else None)
    return Forward(logits, tl, pred, mode, attn)


def train_step(state: TrainState, batch: VqaDataset) -> dict:
    """One optimizer step; returns ``{"L_VQA", "L_T", "L_total"}`` as floats."""
    if len(batch) == 0:
        raise ArgumentError("train_step: empty batch")
    if (batch.answers < 0).any():
        raise DataError("training answer outside the answer vocabulary")
    out = forward(state, batch, training=True)
    l_vqa = vqa_loss(out.logits, batch.answers)
    total, l_t = l_vqa, None
    if state.variant in MULTITASK_VARIANTS:
        if (batch.triples < 0).any():
            raise DataError("training sample without a gold triple")
        l_t = triple_loss(out.triple_logits, batch.triples)
        total = ad.add(l_vqa, l_t)
    grads = ad.backward(total, state.params)
    if state.variant not in MULTITASK_VARIANTS:
        # unused heads get no update at all, not even weight decay
        grads = {n: g for n, g in grads.items() if state.params.partition(n) not in ("head", "relation", "tail")}
    c = state.config
    ad.adamw_step(state.params, grads, c.lr, c.beta1, c.beta2, c.weight_decay, c.adam_eps)
    state.tau += 1
    return {"L_VQA": float(l_vqa.data), "L_T": float(l_t.data) if l_t is not None else 0.0,
            "L_total": float(total.data)}


@dataclass
class EvalResult:
    accuracy: float
    correct: int
    total: int
    predictions: np.ndarray
    triple_metrics: Optional[dict] = None
    predicted_triples: Optional[np.ndarray] = None
    attention: list = field(default_factory=list)

    def summary(self) -> dict:
        out = {"accuracy": self.accuracy, "correct": self.correct, "total": self.total}
        if self.triple_metrics is not None:
            out["triple"] = dict(self.triple_metrics)
        return out


def evaluate_vqa(state: TrainState, data: VqaDataset, batch_size: int | None = None) -> EvalResult:
    """Dropout off; KGE variants other than Ideal fuse predicted triples."""
    n = len(data)
    if n == 0:
        raise ArgumentError("evaluate_vqa: empty split")
    bs = batch_size or state.config.eval_batch_size
    preds, triples, attn = [], [], []
    with ad.no_grad():
        for start in range(0, n, bs):
            part = data.subset(np.arange(start, min(n, start + bs)))
            out = forward(state, part, training=False)
            preds.append(np.argmax(out.logits.data, axis=-1))
            if out.predicted is not None:
                triples.append(out.predicted)
            if out.attention is not None:
                attn.append(out.attention)
    preds = np.concatenate(preds)
    correct = int(np.count_nonzero(preds == data.answers))
    res = EvalResult(correct / n, correct, n, preds)
    if triples:
        res.predicted_triples = np.concatenate(triples)
        if data.triples is not None and (data.triples >= 0).all():
            res.triple_metrics = triple_accuracy(res.predicted_triples, data.triples)
    if attn:
        scores = np.concatenate(attn)
        cases = data.given_case or [None] * n
        res.attention = [AttentionRecord(data.ids[i], tuple(float(x) for x in scores[i]), cases[i])
                         for i in range(n)]
    return res


class AttentionRecord(NamedTuple):
    sample_id: str
    scores: tuple
    given_case: Optional[str]


# ---------------------------------------------------------------------------
# training run


@dataclass
class RunResult:
    state: TrainState
    history: list
    valid: Optional[EvalResult]
    test: Optional[EvalResult]
    best_epoch: int


def _snapshot(state: TrainState) -> dict:
    p = state.params
    return {"params": p.state_dict(), "m": {k: v.copy() for k, v in p.m.items()},
            "v": {k: v.copy() for k, v in p.v.items()}, "step": p.step, "tau": state.tau,
            "epoch": state.epoch, "dropout": copy.deepcopy(state.dropout_rng.state()),
            "shuffle": copy.deepcopy(state.shuffle_rng.state())}


def _restore(state: TrainState, snap: dict):
    p = state.params
    p.load_state_dict(snap["params"])
    p.m = {k: v.copy() for k, v in snap["m"].items()}
    p.v = {k: v.copy() for k, v in snap["v"].items()}
    p.step = snap["step"]
    state.tau, state.epoch = snap["tau"], snap["epoch"]
    state.dropout_rng.set_state(copy.deepcopy(snap["dropout"]))
    state.shuffle_rng.set_state(copy.deepcopy(snap["shuffle"]))


def train_epochs(state: TrainState, data: GelData, epochs: int, on_epoch=None) -> tuple:
    """Run ``epochs`` more epochs from the current state; returns ``(best_snapshot, best_epoch)``."""
    train = data.splits["train"]
    valid = data.splits.get("valid")
    if len(train) == 0:
        raise DataError("training split is empty")
    bs = state.config.batch_size
    best, best_acc, best_epoch = _snapshot(state), -1.0, state.epoch
    for _ in range(epochs):
        order = state.shuffle_rng.permutation(len(train))
        sums = {"L_VQA": 0.0, "L_T": 0.0, "L_total": 0.0}
        steps = 0
        for start in range(0, len(train), bs):
            losses = train_step(state, train.subset(order[start:start + bs]))
            for k in sums:
                sums[k] += losses[k]
            steps += 1
        state.epoch += 1
        rec = {"epoch": state.epoch, "tau": state.tau, **{k: v / steps for k, v in sums.items()}}
        if valid is not None and len(valid):
            rec["valid_accuracy"] = evaluate_vqa(state, valid).accuracy
        state.history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        score = rec.get("valid_accuracy", float(state.epoch))
        if score > best_acc:
            best, best_acc, best_epoch = _snapshot(state), score, state.epoch
    return best, best_epoch


def train_run(config: Config, data: GelData, kge: KgeModel | None = None, on_epoch=None) -> RunResult:
    """Train one variant, keep the best-validation parameters, evaluate on test."""
    if kge is None and config.kge_checkpoint and config.variant in KGE_VARIANTS:
        kge = load_kge(config.kge_checkpoint, data.kg.vocab.digest())
    if config.variant == "baseline" and config.kge_checkpoint:
        log.warning("baseline variant ignores kge_checkpoint=%s", config.kge_checkpoint)
    state = init_state(config, data.token_vocab, data.answer_vocab, data.kg.vocab, kge)
    best, best_epoch = train_epochs(state, data, config.epochs, on_epoch)
    history = list(state.history)
    _restore(state, best)
    state.history = history
    valid = data.splits.get("valid")
    test = data.splits.get("test")
    return RunResult(state, history,
                     evaluate_vqa(state, valid) if valid is not None and len(valid) else None,
                     evaluate_vqa(state, test) if test is not None and len(test) else None,
                     best_epoch)


# ---------------------------------------------------------------------------
# checkpoints


def _vocab_digests(state: TrainState) -> dict:
    return {"token": state.token_vocab.digest(), "answer": state.answer_vocab.digest(),
            "kg": state.kg_vocab.digest() if state.kg_vocab is not None else None}


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    (path / "adam").mkdir(exist_ok=True)
    tensors = {}
    for name, t in state.params.items():
        fname = f"params/{name}.gelt"
        save_tensor(path / fname, t.data)
        tensors[name] = {"file": fname, "shape": list(t.shape)}
        for which, moments in (("m", state.params.m), ("v", state.params.v)):
            if name in moments:
                save_tensor(path / f"adam/{which}.{name}.gelt", moments[name])
    if state.random_embedding is not None:
        save_tensor(path / "random_embedding.gelt", state.random_embedding)
    if state.kge is not None:
        save_kge(state.kge, path / "kge")
    manifest = {
        "format": CHECKPOINT_FORMAT, "version": 1, "variant": state.variant, "seed": state.seed,
        "tau": state.tau, "epoch": state.epoch, "step": state.params.step,
        "config": state.config.to_dict(), "config_hash": state.config.digest(),
        "vocab_hashes": _vocab_digests(state),
        "token_vocab": state.token_vocab.tokens[2:], "answer_vocab": state.answer_vocab.items,
        "kg_entities": state.kg_vocab.entities.items if state.kg_vocab else None,
        "kg_relations": state.kg_vocab.relations.items if state.kg_vocab else None,
        "rng": {"dropout": state.dropout_rng.state(), "shuffle": state.shuffle_rng.state()},
        "tensors": tensors, "moments": sorted(state.params.m), "history": state.history,
    }
    atomic_write(path / "manifest.json", json.dumps(manifest, indent=1))
    return path


def load_checkpoint(path, expected_config_hash: str | None = None,
                    expected_vocab_hashes: dict | None = None) -> TrainState:
    from .config import parse_config

    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise FormatError(f"no checkpoint manifest in {path}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint manifest: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != CHECKPOINT_FORMAT:
        raise FormatError("not a VQA checkpoint")
    try:
        config = parse_config(None, manifest["config"])
        if config.digest() != manifest["config_hash"]:
            raise FormatError("config hash does not match the stored config")
        if expected_config_hash is not None and expected_config_hash != manifest["config_hash"]:
            raise CompatibilityError("checkpoint was trained with a different config")
        token_vocab = TokenVocab(manifest["token_vocab"])
        answer_vocab = AnswerVocab(manifest["answer_vocab"])
        kg_vocab = (KgVocab(manifest["kg_entities"], manifest["kg_relations"])
                    if manifest.get("kg_entities") is not None else None)
        stored = manifest["vocab_hashes"]
        actual = {"token": token_vocab.digest(), "answer": answer_vocab.digest(),
                  "kg": kg_vocab.digest() if kg_vocab is not None else None}
        if actual != stored:
            raise FormatError("vocabulary hashes do not match the stored vocabularies")
        for key, want in (expected_vocab_hashes or {}).items():
            if want is not None and stored.get(key) != want:
                raise CompatibilityError(f"{key} vocabulary hash mismatch")
        kge = load_kge(path / "kge") if (path / "kge").exists() else None
        state = init_state(config, token_vocab, answer_vocab, kg_vocab, kge)
        names = set(state.params.names())
        if names != set(manifest["tensors"]):
            raise FormatError("checkpoint parameter set does not match the model")
        for name, info in manifest["tensors"].items():
            arr = load_tensor(path / info["file"])
            if list(arr.shape) != info["shape"]:
                raise FormatError(f"{name}: stored shape {arr.shape} != manifest {info['shape']}")
            state.params.set(name, arr)
        for name in manifest["moments"]:
            state.params.m[name] = load_tensor(path / f"adam/m.{name}.gelt")
            state.params.v[name] = load_tensor(path / f"adam/v.{name}.gelt")
        state.params.step = int(manifest["step"])
        if state.random_embedding is not None:
            state.random_embedding = load_tensor(path / "random_embedding.gelt")
        state.tau, state.epoch = int(manifest["tau"]), int(manifest["epoch"])
        state.dropout_rng.set_state(manifest["rng"]["dropout"])
        state.shuffle_rng.set_state(manifest["rng"]["shuffle"])
        state.history = list(manifest.get("history", []))
    except KeyError as exc:
        raise FormatError(f"checkpoint manifest lacks {exc}") from exc
    except FileNotFoundError as exc:
        raise FormatError(f"checkpoint file missing: {exc.filename}") from exc
    return state


# ---------------------------------------------------------------------------
# dumps


def prediction_records(state: TrainState, data: VqaDataset, res: EvalResult) -> list:
    rows = []
    ans = state.answer_vocab
    for i, sid in enumerate(data.ids):
        p = int(res.predictions[i])
        row = {"id": sid, "pred": ans.surface(p), "gold": ans.surface(int(data.answers[i]))
               if data.answers[i] >= 0 else None, "correct": bool(p == data.answers[i])}
        if res.predicted_triples is not None:
            h, r, t = (int(x) for x in res.predicted_triples[i])
            row["triple"] = [h, r, t]
            if data.triples is not None and data.triples[i][0] >= 0:
                g = [int(x) for x in data.triples[i]]
                row["gold_triple"] = g
                row["slot_correct"] = {"head": h == g[0], "relation": r == g[1], "tail": t == g[2]}
        rows.append(row)
    return rows


def write_predictions(path, rows):
    atomic_write(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def write_attention_csv(path, records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "h_score", "r_score", "t_score", "given_case"])
    for rec in records:
        w.writerow([rec.sample_id, *(f"{x:.8f}" for x in rec.scores), rec.given_case or ""])
    atomic_write(path, buf.getvalue())


def write_history(path, history):
    atomic_write(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in history))


# ---------------------------------------------------------------------------
# estimator facade


class GELVQAClassifier(ClassifierMixin, BaseEstimator):
    """Estimator wrapper around :func:`train_run`.

    ``fit`` takes a :class:`GelData` (train split required, valid optional)
    and keeps the best-validation parameters. ``predict`` and ``score`` take
    a :class:`VqaDataset` encoded with the same vocabularies. ``params``
    overrides configuration keys on top of the desk or full-size preset.
    """

    def __init__(self, variant="gel", kge=None, preset="desk", params=None, seed=42):
        self.variant = variant
        self.kge = kge
        self.preset = preset
        self.params = params
        self.seed = seed

    def _config(self) -> Config:
        from .config import DESK_OVERRIDES, parse_config

        if self.preset not in ("desk", "full"):
            raise ConfigError(f"preset: expected 'desk' or 'full', got {self.preset!r}")
        overrides = {**(self.params or {}), "variant": self.variant, "seed": self.seed}
        return parse_config(None, overrides, preset=DESK_OVERRIDES if self.preset == "desk" else None)

    def fit(self, X: GelData, y=None):
        if not isinstance(X, GelData):
            raise ArgumentError("GELVQAClassifier.fit expects a GelData bundle")
        result = train_run(self._config(), X, self.kge)
        self.state_ = result.state
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.classes_ = np.array(X.answer_vocab.items, dtype=object)
        return self

    def _eval(self, X: VqaDataset) -> EvalResult:
        check_is_fitted(self, "state_")
        if not isinstance(X, VqaDataset):
            raise ArgumentError("expected a VqaDataset")
        return evaluate_vqa(self.state_, X)

    def predict(self, X: VqaDataset) -> np.ndarray:
        return self.classes_[self._eval(X).predictions]

    def predict_triples(self, X: VqaDataset) -> Optional[np.ndarray]:
        return self._eval(X).predicted_triples

    def score(self, X: VqaDataset, y=None, sample_weight=None) -> float:
        return self._eval(X).accuracy
