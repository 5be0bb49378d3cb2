"""Experiment analytics: folds, given-case taxonomy, attention means,
correlation, question perturbations and report tables."""
from __future__ import annotations

import json
import re
import unicodedata
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .autodiff import Rng
from .errors import ArgumentError, DataError, UndefinedError

N_FOLDS = 5
CASES = ("H", "T", "HT", "none")
PERTURBATIONS = ("punctuation", "antonym", "syn_verb", "syn_noun", "hypernym", "hyponym")
IDENTITY = "identity"
# lexicon category and required part of speech per lexical method (None = any)
_METHOD_SLOTS = {
    "antonym": ("antonyms", None),
    "syn_verb": ("synonyms", "verb"),
    "syn_noun": ("synonyms", "noun"),
    "hypernym": ("hypernyms", "noun"),
    "hyponym": ("hyponyms", "noun"),
}
_CATEGORIES = ("synonyms", "antonyms", "hypernyms", "hyponyms")


# ---------------------------------------------------------------------------
# folds


class FoldSpec(NamedTuple):
    index: int
    train: list
    valid: list
    test: list


def make_folds(samples, seed: int = 42) -> list:
    """Five rotating 20% blocks: test = block i, valid = block i+1, train = the rest.

    ``samples`` is a count or a sequence of sample ids.
    """
    ids = list(range(samples)) if isinstance(samples, (int, np.integer)) else list(samples)
    if len(ids) < N_FOLDS:
        raise ArgumentError(f"need at least {N_FOLDS} samples for {N_FOLDS} folds, got {len(ids)}")
    order = Rng(seed).substream("folds").permutation(len(ids))
    blocks = [[ids[j] for j in block] for block in np.array_split(order, N_FOLDS)]
    folds = []
    for i in range(N_FOLDS):
        v = (i + 1) % N_FOLDS
        train = [x for k, b in enumerate(blocks) if k not in (i, v) for x in b]
        folds.append(FoldSpec(i, train, list(blocks[v]), list(blocks[i])))
    return folds


# ---------------------------------------------------------------------------
# given-case taxonomy and attention


def _field(sample, name, default=None):
    if isinstance(sample, dict):
        return sample.get(name, default)
    return getattr(sample, name, default)


def _surface(x, vocab):
    if isinstance(x, str):
        return x
    if vocab is None:
        raise ArgumentError("integer triple ids need the KG vocabulary to resolve surfaces")
    return vocab.surface(int(x))


def classify_given_case(sample, kg_vocab=None) -> str:
    """H, T, HT or none; an explicit ``given_case`` annotation takes precedence."""
    note = _field(sample, "given_case")
    if note in CASES:
        return note
    question = (_field(sample, "question") or "").lower()
    triple = _field(sample, "triple")
    if triple is None:
        return "none"
    ents = kg_vocab.entities if kg_vocab is not None else None
    head = _surface(triple[0], ents).replace("_", " ").lower()
    tail = _surface(triple[2], ents).replace("_", " ").lower()
    has_h = bool(head) and head in question
    has_t = bool(tail) and tail in question
    return "HT" if has_h and has_t else "H" if has_h else "T" if has_t else "none"


class AttentionStats(NamedTuple):
    means: dict
    counts: dict
    notes: list


def attention_stats(records, cases=("H", "T", "HT")) -> AttentionStats:
    """Per-case mean (h, r, t) attention; cases without records are skipped with a note."""
    groups: dict = {}
    for rec in records:
        scores = _field(rec, "scores")
        case = _field(rec, "given_case") or "none"
        groups.setdefault(case, []).append(np.asarray(scores, dtype=np.float64))
    means, counts, notes = {}, {}, []
    for case in cases:
        rows = groups.get(case, [])
        if not rows:
            notes.append(f"{case}-Given: no records")
            continue
        means[case] = tuple(float(x) for x in np.mean(rows, axis=0))
        counts[case] = len(rows)
    if not means:
        raise ArgumentError("no attention records in any reported case")
    return AttentionStats(means, counts, notes)


# ---------------------------------------------------------------------------
# correlation and KGE impact


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ArgumentError("pearson needs two 1-D series of equal length")
    if len(x) < 2:
        raise ArgumentError("pearson needs at least two points")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(dx @ dx), np.sqrt(dy @ dy)
    if sx == 0 or sy == 0:
        raise UndefinedError("correlation is undefined for a constant series")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


def kge_impact_report(vqa_accuracy: dict, hit10: dict) -> dict:
    """Align per-scorer VQA accuracy with intrinsic Hit@10 and correlate them."""
    scorers = [s for s in vqa_accuracy if s in hit10]
    if len(scorers) < 2:
        raise ArgumentError("kge_impact_report needs at least two scorers present in both series")
    rows = [{"scorer": s, "vqa_accuracy": float(vqa_accuracy[s]), "hit@10": float(hit10[s])} for s in scorers]
    r = pearson([row["vqa_accuracy"] for row in rows], [row["hit@10"] for row in rows])
    return {"rows": rows, "pearson_r": r}


# ---------------------------------------------------------------------------
# question perturbation


def load_lexicon(path_or_dict) -> dict:
    if isinstance(path_or_dict, dict):
        lex = path_or_dict
    else:
        try:
            lex = json.loads(Path(path_or_dict).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise DataError(f"lexicon {path_or_dict} not found") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"lexicon is not valid JSON: {exc}") from exc
    return validate_lexicon(lex)


def validate_lexicon(lex: dict) -> dict:
    if not isinstance(lex, dict):
        raise DataError("lexicon must be a JSON object")
    for word, entry in lex.items():
        if word != word.lower():
            raise DataError(f"lexicon word {word!r} is not lowercase")
        if not isinstance(entry, dict) or entry.get("pos") not in ("noun", "verb"):
            raise DataError(f"lexicon entry {word!r}: pos must be noun or verb")
        for cat in _CATEGORIES:
            if cat not in entry:
                continue
            alts = entry[cat]
            if not isinstance(alts, list) or not alts:
                raise DataError(f"lexicon entry {word!r}: {cat} must be a non-empty list")
            if any(not isinstance(a, str) or a != a.lower() for a in alts):
                raise DataError(f"lexicon entry {word!r}: {cat} must be lowercase strings")
    return lex


def strip_punctuation(text: str) -> str:
    return "".join(ch for ch in text if not unicodedata.category(ch).startswith("P"))


_WORD = re.compile(r"\w+")


def perturb_question(text: str, method: str, lex: dict | None = None, rng=None) -> tuple:
    """Apply one modification; returns ``(new_text, changed)``.

    Lexical methods replace the first token (left to right) whose entry has
    the wanted category and part of speech with that category's first
    alternative. ``rng`` is accepted for interface symmetry; the choice is
    deterministic.
    """
    if method == IDENTITY:
        return text, False
    if method == "punctuation":
        out = strip_punctuation(text)
        return out, out != text
    if method not in _METHOD_SLOTS:
        raise ArgumentError(f"unknown perturbation {method!r}; expected one of {PERTURBATIONS + (IDENTITY,)}")
    category, pos = _METHOD_SLOTS[method]
    lex = lex or {}
    for m in _WORD.finditer(text):
        entry = lex.get(m.group(0).lower())
        if not entry or not entry.get(category):
            continue
        if pos is not None and entry.get("pos") != pos:
            continue
        alt = entry[category][0]
        if m.group(0)[:1].isupper():
            alt = alt[:1].upper() + alt[1:]
        return text[:m.start()] + alt + text[m.end():], True
    return text, False


def robustness_eval(state, dataset, lex: dict, methods=PERTURBATIONS) -> dict:
    """Accuracy on raw questions and under each modification.

    ``delta`` is the accuracy drop (raw minus perturbed); samples a method
    does not change are evaluated as-is.
    """
    from .gel import evaluate_vqa

    raw = evaluate_vqa(state, dataset).accuracy
    table = {"raw": raw, "methods": {}}
    for method in methods:
        pairs = [perturb_question(q, method, lex) for q in dataset.questions]
        changed = sum(1 for _, c in pairs if c)
        if changed:
            acc = evaluate_vqa(state, dataset.with_questions([q for q, _ in pairs], state.token_vocab)).accuracy
        else:
            acc = raw
        table["methods"][method] = {"accuracy": acc, "delta": raw - acc, "changed": changed}
    return table


# ---------------------------------------------------------------------------
# aggregation and text tables


def mean_std(values) -> tuple:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ArgumentError("no values to aggregate")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def aggregate_runs(runs) -> dict:
    """Mean accuracy with both spreads: over folds (seed-averaged) and over seeds (fold-averaged).

    ``runs`` holds dicts with ``seed``, ``fold`` and ``accuracy``.
    """
    runs = list(runs)
    if not runs:
        raise ArgumentError("no runs to aggregate")
    acc = np.array([r["accuracy"] for r in runs], dtype=np.float64)
    by_fold: dict = {}
    by_seed: dict = {}
    for r in runs:
        by_fold.setdefault(r.get("fold", 0), []).append(r["accuracy"])
        by_seed.setdefault(r.get("seed", 0), []).append(r["accuracy"])
    _, std_folds = mean_std([np.mean(v) for v in by_fold.values()])
    _, std_seeds = mean_std([np.mean(v) for v in by_seed.values()])
    return {"mean": float(acc.mean()), "std_over_folds": std_folds, "std_over_seeds": std_seeds,
            "n_runs": len(runs)}


def format_table(rows, columns) -> str:
    """Aligned plain-text table; floats get four decimals."""
    def cell(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    body = [[cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines) + "\n"
