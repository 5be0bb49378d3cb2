"""Toy question and image encoders plus the tokenizer they consume.

Both encoders are small, fully differentiable stand-ins for pretrained
backbones: a mean-pooled bag of token embeddings and a two-layer strided
convnet. Users with real backbone features can load them from a feature
file instead.
"""
from __future__ import annotations

import re
import string
from collections import Counter

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Rng, Tensor
from .errors import ArgumentError, DimensionError
from .tensorio import load_feature_vectors  # noqa: F401 - re-exported

PAD, UNK = 0, 1
_PUNCT = re.compile("[" + re.escape(string.punctuation) + "]")


def normalize(text: str) -> list[str]:
    return _PUNCT.sub(" ", text.lower()).split()


class TokenVocab:
    """Token <-> id map; ids 0 and 1 are reserved for padding and unknown."""

    def __init__(self, tokens=()):
        self.tokens = ["<pad>", "<unk>"] + list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, tok):
        return tok in self.index

    def digest(self) -> str:
        import hashlib
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()


def build_token_vocab(questions, min_count: int = 1) -> TokenVocab:
    questions = list(questions)
    if not questions:
        raise ArgumentError("cannot build a vocabulary from an empty corpus")
    counts = Counter(tok for q in questions for tok in normalize(q))
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return TokenVocab(kept)


def tokenize(vocab: TokenVocab, text: str) -> list[int]:
    return [vocab.index.get(tok, UNK) for tok in normalize(text)]


# Positive projection biases keep most ReLU units alive at init; with the
# elementwise fusion a dead feature also silences its embedding slot.
BIAS_INIT = 1.0


def pad_batch(id_lists) -> np.ndarray:
    width = max((len(x) for x in id_lists), default=0)
    out = np.full((len(id_lists), max(width, 1)), PAD, dtype=np.int64)
    for i, ids in enumerate(id_lists):
        out[i, :len(ids)] = ids
    return out


def init_question_encoder(store: ParamStore, vocab_size: int, d_feat: int = 768, embed_dim: int = 64,
                          rng: Rng | None = None, prefix: str = "shared"):
    gen = (rng or Rng(0)).generator
    store.add(f"{prefix}.q_embed", gen.normal(0.0, 1.0, (vocab_size, embed_dim)))
    bound = np.sqrt(6.0 / (embed_dim + d_feat))
    store.add(f"{prefix}.q_W", gen.uniform(-bound, bound, (embed_dim, d_feat)))
    store.add(f"{prefix}.q_b", np.full(d_feat, BIAS_INIT))


def init_image_encoder(store: ParamStore, d_feat: int = 768, channels=(16, 32), rng: Rng | None = None,
                       prefix: str = "shared"):
    gen = (rng or Rng(0)).generator
    c_in = 3
    for k, c_out in enumerate(channels, start=1):
        std = np.sqrt(2.0 / (c_in * 9))
        store.add(f"{prefix}.v_conv{k}_w", gen.normal(0.0, std, (c_out, c_in, 3, 3)))
        store.add(f"{prefix}.v_conv{k}_b", np.zeros(c_out))
        c_in = c_out
    bound = np.sqrt(6.0 / (c_in + d_feat))
    store.add(f"{prefix}.v_W", gen.uniform(-bound, bound, (c_in, d_feat)))
    store.add(f"{prefix}.v_b", np.full(d_feat, BIAS_INIT))


def encode_question(store: ParamStore, ids, prefix: str = "shared") -> Tensor:
    """Embed, mean-pool over non-pad positions, project, ReLU.

    ``ids`` is one id list (returns ``[d_feat]``) or a list of lists
    (returns ``[B, d_feat]``).
    """
    single = len(ids) == 0 or np.ndim(ids[0]) == 0
    batch = [list(ids)] if single else [list(x) for x in ids]
    if any(len(x) == 0 for x in batch):
        raise ArgumentError("encode_question: empty token list")
    padded = pad_batch(batch)
    emb = ad.gather(store[f"{prefix}.q_embed"], padded)
    pooled = ad.masked_mean(emb, padded != PAD)
    out = ad.relu(ad.add_bias(ad.matmul(pooled, store[f"{prefix}.q_W"]), store[f"{prefix}.q_b"]))
    return ad.reshape(out, (out.shape[1],)) if single else out


def encode_image(store: ParamStore, images, prefix: str = "shared", n_layers: int = 2) -> Tensor:
    """Two stride-2 3x3 conv+ReLU layers, global average pool, linear projection.

    ``images`` is ``[3, H, W]`` (returns ``[d_feat]``) or ``[B, 3, H, W]``.
    """
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float32))
    single = x.ndim == 3
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != 3:
        raise DimensionError(f"encode_image: expected [B, 3, H, W], got {x.shape}")
    if x.shape[2] < 8 or x.shape[3] < 8:
        raise DimensionError(f"encode_image: image {x.shape[2]}x{x.shape[3]} is smaller than 8x8")
    h = x
    for k in range(1, n_layers + 1):
        h = ad.relu(ad.conv2d(h, store[f"{prefix}.v_conv{k}_w"], store[f"{prefix}.v_conv{k}_b"]))
    pooled = ad.mean(ad.reshape(h, (h.shape[0], h.shape[1], -1)), axis=2)
    out = ad.add_bias(ad.matmul(pooled, store[f"{prefix}.v_W"]), store[f"{prefix}.v_b"])
    return ad.reshape(out, (out.shape[1],)) if single else out
