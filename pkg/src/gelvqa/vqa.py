"""Answer classifier and triple-prediction heads.

The answer classifier fuses image and question features by elementwise
product and feeds them through a one-hidden-layer MLP. The triple heads
share the encoders with it: the head entity is read from the fused feature,
relation and tail from the question feature alone.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Rng, Tensor
from .errors import ArgumentError, DimensionError
from .kg import Triple, Vocab


@dataclass
class VqaSample:
    id: str
    question: str
    answer: int
    triple: Optional[Triple] = None
    image: Optional[np.ndarray] = None
    image_ref: Optional[str] = None
    lang: str = "en"
    given_case: Optional[str] = None
    token_ids: list = field(default_factory=list)


class AnswerVocab(Vocab):
    """Answer surface forms <-> class ids, built from the training split."""


def _linear_init(store: ParamStore, name: str, n_in: int, n_out: int, gen):
    bound = np.sqrt(6.0 / (n_in + n_out))
    store.add(f"{name}.W", gen.uniform(-bound, bound, (n_in, n_out)))
    store.add(f"{name}.b", np.zeros(n_out))


def linear(store: ParamStore, name: str, x: Tensor) -> Tensor:
    W = store[f"{name}.W"]
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(f"{name}: input width {x.shape[-1]} != {W.shape[0]}")
    if x.ndim == 1:
        return ad.add(ad.reshape(ad.matmul(ad.reshape(x, (1, -1)), W), (W.shape[1],)), store[f"{name}.b"])
    return ad.add_bias(ad.matmul(x, W), store[f"{name}.b"])


def init_mlp(store: ParamStore, d_feat: int, hidden: int, n_classes: int, rng: Rng | None = None):
    gen = (rng or Rng(0)).generator
    _linear_init(store, "vqa.beta", d_feat, hidden, gen)
    _linear_init(store, "vqa.alpha", hidden, n_classes, gen)


def fuse_modalities(f_v: Tensor, f_q: Tensor) -> Tensor:
    if f_v.shape != f_q.shape:
        raise DimensionError(f"cannot fuse features of shapes {f_v.shape} and {f_q.shape}")
    return ad.mul(f_v, f_q)


def mlp_logits(store: ParamStore, f: Tensor, training: bool = False, dropout: float = 0.2,
               rng: Rng | None = None) -> Tensor:
    """``W_alpha . ReLU(W_beta . dropout(f) + b_beta) + b_alpha``."""
    x = ad.dropout(f, dropout, training, rng)
    hidden = ad.relu(linear(store, "vqa.beta", x))
    return linear(store, "vqa.alpha", hidden)


def argmax_lowest(logits) -> np.ndarray:
    """Row-wise argmax; ``np.argmax`` already returns the first (lowest) index on ties."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(arr, axis=-1)


def predict_answer(logits) -> int | np.ndarray:
    out = argmax_lowest(logits)
    return int(out) if np.ndim(out) == 0 else out


def vqa_loss(logits: Tensor, targets) -> Tensor:
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if targets.size == 0:
        raise ArgumentError("vqa_loss: empty batch")
    if logits.ndim == 1:
        logits = ad.reshape(logits, (1, -1))
    return ad.cross_entropy(logits, targets)


# ---------------------------------------------------------------------------
# triple prediction


class TripleLogits(NamedTuple):
    head: Tensor
    relation: Tensor
    tail: Tensor


def init_triple_heads(store: ParamStore, d_feat: int, n_entities: int, n_relations: int, rng: Rng | None = None):
    gen = (rng or Rng(0)).generator
    _linear_init(store, "head", d_feat, n_entities, gen)
    _linear_init(store, "relation", d_feat, n_relations, gen)
    _linear_init(store, "tail", d_feat, n_entities, gen)


def predict_triple_logits(store: ParamStore, f_u: Tensor, f_q: Tensor) -> TripleLogits:
    if f_u.shape != f_q.shape:
        raise DimensionError(f"f_u {f_u.shape} and f_q {f_q.shape} differ")
    return TripleLogits(linear(store, "head", f_u), linear(store, "relation", f_q), linear(store, "tail", f_q))


def triple_loss(tl: TripleLogits, gold) -> Tensor:
    """Sum of the three per-slot mean cross-entropies."""
    gold = np.asarray(gold, dtype=np.int64).reshape(-1, 3)
    if gold.size == 0:
        raise ArgumentError("triple_loss: empty batch")
    parts = [vqa_loss(logits, gold[:, k]) for k, logits in enumerate(tl)]
    return ad.add(ad.add(parts[0], parts[1]), parts[2])


def predict_triple(tl: TripleLogits):
    h, r, t = (argmax_lowest(x) for x in tl)
    if np.ndim(h) == 0:
        return Triple(int(h), int(r), int(t))
    return np.stack([h, r, t], axis=-1)


def triple_accuracy(preds, golds) -> dict:
    preds = np.asarray([tuple(p) for p in preds], dtype=np.int64).reshape(-1, 3)
    golds = np.asarray([tuple(g) for g in golds], dtype=np.int64).reshape(-1, 3)
    if len(preds) == 0 or preds.shape != golds.shape:
        raise ArgumentError("triple_accuracy needs equal, non-empty prediction and gold lists")
    hit = preds == golds
    return {"head": float(hit[:, 0].mean()), "relation": float(hit[:, 1].mean()),
            "tail": float(hit[:, 2].mean()), "overall": float(hit.all(axis=1).mean())}


def export_answer_vocab(vocab: AnswerVocab, path):
    from .tensorio import atomic_write
    atomic_write(path, "".join(f"{s}\t{i}\n" for i, s in enumerate(vocab.items)))
