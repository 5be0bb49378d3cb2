"""``gelvqa`` command line: benchmark generation, KGE training, VQA runs, reports.

Exit codes: 0 success, 1 usage error, 2 data or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import analysis
from .config import VARIANTS, parse_config
from .errors import ConfigError, DataError, GelError
from .autodiff import Rng
from .kg import KnowledgeGraph, load_triples_tsv, save_triples_tsv, split_triples

log = logging.getLogger("gelvqa")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def git_blob_hash(path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _input_hashes(paths) -> dict:
    out = {}
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        files = sorted(x for x in p.rglob("*") if x.is_file()) if p.is_dir() else [p] if p.exists() else []
        for f in files:
            out[str(f)] = git_blob_hash(f)
    return out


def write_run_manifest(out_dir, command, argv, inputs, started, config=None, extra=None):
    from .tensorio import atomic_write

    manifest = {"command": command, "argv": list(argv), "inputs": _input_hashes(inputs),
                "started": started, "finished": time.time(), "wall_seconds": time.time() - started}
    if config is not None:
        manifest["config_hash"] = config.digest()
    manifest.update(extra or {})
    atomic_write(Path(out_dir) / "run_manifest.json", json.dumps(manifest, indent=1, sort_keys=True))


def _emit(obj, text=None):
    sys.stdout.write(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    if text:
        sys.stderr.write(text)


def _config(args):
    """Defaults < desk preset < --config file < --set < --seed/--variant."""
    from .config import DESK_OVERRIDES, parse_override

    overrides = dict(parse_override(o) for o in (getattr(args, "set", None) or []))
    for key in ("seed", "variant"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    return parse_config(args.config, overrides, preset=DESK_OVERRIDES if getattr(args, "desk", False) else None)


def _kge_config(cfg):
    from .kge import KgeConfig
    return KgeConfig(scorer=cfg.kge_scorer, dim=cfg.d_kge, iterations=cfg.kge_iterations,
                     batch_size=cfg.kge_batch_size, lr=cfg.kge_lr, lam=cfg.kge_lambda,
                     neg_ratio=cfg.kge_neg_ratio, seed=cfg.seed, norm=cfg.kge_norm, n_filters=cfg.kge_filters,
                     filtered=cfg.kge_filtered_negatives, renorm=cfg.kge_renorm, beta1=cfg.beta1,
                     beta2=cfg.beta2)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synthgen(args):
    from .synth import SynthSpec, generate_synthetic_benchmark

    spec = SynthSpec(n_entities=args.entities, n_relations=args.relations,
                     tails_per_relation=args.tails_per_relation, samples=args.samples,
                     image_size=args.image_size, heldout_pair_fraction=args.heldout,
                     valid_pair_fraction=args.valid, noise=args.noise,
                     head_mention_fraction=args.head_mention, seed=args.seed)
    started = time.time()
    bench = generate_synthetic_benchmark(spec)
    out = bench.write(args.out)
    write_run_manifest(out, "synthgen", sys.argv, [], started, extra={"spec": asdict(spec)})
    _emit({"out": str(out), "triples": len(bench.kg), "entities": bench.kg.n_entities,
           "relations": bench.kg.n_relations, **{k: len(v) for k, v in bench.splits.items()}})


def cmd_kge_train(args):
    from .kge import eval_link_prediction, random_ranking_mrr, save_kge, train_kge

    cfg = _config(args)
    started = time.time()
    kg = load_triples_tsv(args.kg)
    train, test = kg.triples, []
    if args.holdout > 0:
        train, _, test = split_triples(kg, (1.0 - args.holdout, 0.0, args.holdout), Rng(cfg.seed))
    model, trace = train_kge(kg, _kge_config(cfg), train)
    out = Path(args.out)
    save_kge(model, out)
    if test:
        save_triples_tsv(KnowledgeGraph(kg.vocab, test), out / "heldout.tsv")
    report = {"scorer": model.scorer, "iterations": len(trace), "final_loss": float(np.mean(trace[-50:])),
              "random_mrr": random_ranking_mrr(kg.n_entities)}
    if test:
        report["heldout"] = eval_link_prediction(model, test, kg, filtered=cfg.eval_filtered)
    from .tensorio import atomic_write
    atomic_write(out / "loss_trace.json", json.dumps([float(x) for x in trace]))
    write_run_manifest(out, "kge-train", sys.argv, [args.kg, args.config], started, cfg, {"report": report})
    _emit(report)


def cmd_kge_eval(args):
    from .kge import eval_link_prediction, load_kge, random_ranking_mrr

    kg = load_triples_tsv(args.kg)
    model = load_kge(args.model, kg.vocab.digest())
    if args.triples:
        rows = [tuple(r) for r in _read_tsv_rows(args.triples)]
        triples = [kg.encode(*r) for r in rows]
    else:
        held = Path(args.model) / "heldout.tsv"
        triples = [kg.encode(*r) for r in _read_tsv_rows(held)] if held.exists() else kg.triples
    report = eval_link_prediction(model, triples, kg, filtered=not args.raw)
    report["random_mrr"] = random_ranking_mrr(kg.n_entities)
    _emit(report)


def _read_tsv_rows(path):
    rows = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}: line {n}: expected 3 tab-separated fields")
        rows.append(parts)
    return rows


def _load_data(args, cfg):
    from .gel import load_data

    data = load_data(cfg, args.data)
    if getattr(args, "fold", None) is not None:
        data = _refold(data, args.fold, cfg.seed if args.fold_seed is None else args.fold_seed)
    return data


def _refold(data, fold: int, seed: int):
    """Pool every split and re-partition by the rotating five-fold protocol."""
    from .gel import GelData

    if not 0 <= fold < analysis.N_FOLDS:
        raise ConfigError(f"fold must be in 0..{analysis.N_FOLDS - 1}")
    parts = [data.splits[k] for k in ("train", "valid", "test") if k in data.splits]
    pooled = parts[0]
    for p in parts[1:]:
        pooled = _concat(pooled, p)
    spec = analysis.make_folds(len(pooled), seed)[fold]
    return GelData(data.kg, data.token_vocab, data.answer_vocab,
                   {"train": pooled.subset(spec.train), "valid": pooled.subset(spec.valid),
                    "test": pooled.subset(spec.test)})


def _concat(a, b):
    from .gel import VqaDataset

    cat = lambda x, y: None if x is None else np.concatenate([x, y])  # noqa: E731
    return VqaDataset(a.ids + b.ids, a.questions + b.questions, a.token_ids + b.token_ids,
                      np.concatenate([a.answers, b.answers]), cat(a.triples, b.triples),
                      list(a.given_case) + list(b.given_case), cat(a.images, b.images),
                      cat(a.image_features, b.image_features), cat(a.question_features, b.question_features),
                      list(a.langs) + list(b.langs))


def _dump_eval(state, data, res, out_dir, split):
    from .gel import prediction_records, write_attention_csv, write_predictions

    write_predictions(Path(out_dir) / f"predictions_{split}.jsonl", prediction_records(state, data, res))
    if res.attention:
        write_attention_csv(Path(out_dir) / f"attention_{split}.csv", res.attention)


def cmd_vqa_train(args):
    from .gel import KGE_VARIANTS, save_checkpoint, train_run, write_history
    from .kge import load_kge
    from .tensorio import atomic_write

    cfg = _config(args)
    if args.kge:
        cfg = parse_config(None, {**cfg.to_dict(), "kge_checkpoint": str(args.kge)})
    if cfg.variant in KGE_VARIANTS and not cfg.kge_checkpoint:
        raise ConfigError(f"variant {cfg.variant} needs a pretrained KGE model (--kge)")
    if cfg.variant == "baseline" and cfg.kge_checkpoint:
        log.warning("baseline variant ignores the KGE model at %s", cfg.kge_checkpoint)
    started = time.time()
    data = _load_data(args, cfg)
    kge = load_kge(cfg.kge_checkpoint, data.kg.vocab.digest()) if cfg.variant in KGE_VARIANTS else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train_run(cfg, data, kge, on_epoch=lambda rec: log.info("epoch %s", rec))
    save_checkpoint(result.state, out / "checkpoint")
    write_history(out / "history.jsonl", result.history)
    metrics = {"variant": cfg.variant, "seed": cfg.seed, "fold": args.fold, "best_epoch": result.best_epoch,
               "valid": result.valid.summary() if result.valid else None,
               "test": result.test.summary() if result.test else None}
    for split, res in (("valid", result.valid), ("test", result.test)):
        if res is not None:
            _dump_eval(result.state, data.splits[split], res, out, split)
    atomic_write(out / "metrics.json", json.dumps(metrics, indent=1, sort_keys=True))
    write_run_manifest(out, "vqa-train", sys.argv, [args.data, args.config, cfg.kge_checkpoint], started, cfg,
                       {"metrics": metrics})
    _emit(metrics)


def _load_state_and_data(args):
    """Checkpoint plus the dataset encoded with the checkpoint's own vocabularies."""
    from .gel import GelData, _load_vectors, encode_records, load_checkpoint, read_jsonl

    state = load_checkpoint(args.checkpoint)
    cfg = state.config
    base = Path(args.data)
    kg = load_triples_tsv(cfg.kg_path or base / "kg.tsv")
    if state.kg_vocab is not None and kg.vocab.digest() != state.kg_vocab.digest():
        raise DataError("knowledge graph vocabulary differs from the checkpoint's")
    feats = _load_vectors(cfg.image_features) if cfg.image_features else None
    qfeats = _load_vectors(cfg.question_features) if cfg.question_features else None
    images = None if feats is not None else _load_vectors(cfg.images_path or base / "images.gelt")
    splits = {}
    for s in ("train", "valid", "test"):
        p = getattr(cfg, f"{s}_path") or base / f"{s}.jsonl"
        if Path(p).exists():
            splits[s] = encode_records(read_jsonl(p), kg, state.token_vocab, state.answer_vocab, images, feats,
                                       qfeats)
    data = GelData(kg, state.token_vocab, state.answer_vocab, splits)
    if getattr(args, "fold", None) is not None:
        data = _refold(data, args.fold, cfg.seed if args.fold_seed is None else args.fold_seed)
    if args.split not in data.splits:
        raise DataError(f"split {args.split!r} not present in {args.data}")
    return state, data


def cmd_vqa_eval(args):
    from .gel import evaluate_vqa

    state, data = _load_state_and_data(args)
    split = data.splits[args.split]
    res = evaluate_vqa(state, split)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        _dump_eval(state, split, res, args.out, args.split)
    report = {"variant": state.variant, "split": args.split, **res.summary()}
    if res.attention:
        records = [r._replace(given_case=analysis.classify_given_case(
            {"given_case": r.given_case, "question": q, "triple": t if t[0] >= 0 else None}, state.kg_vocab))
            for r, q, t in zip(res.attention, split.questions, split.triples)]
        stats = analysis.attention_stats(records)
        report["attention"] = {"means": stats.means, "counts": stats.counts, "notes": stats.notes}
    _emit(report)


def cmd_perturb(args):
    state, data = _load_state_and_data(args)
    lex = analysis.load_lexicon(args.lexicon)
    methods = args.methods or list(analysis.PERTURBATIONS)
    for m in methods:
        if m not in analysis.PERTURBATIONS + (analysis.IDENTITY,):
            raise UsageError(f"unknown perturbation method {m!r}")
    table = analysis.robustness_eval(state, data.splits[args.split], lex, methods)
    rows = [{"method": "raw", "accuracy": table["raw"], "delta": 0.0, "changed": 0}]
    rows += [{"method": m, **v} for m, v in table["methods"].items()]
    _emit(table, analysis.format_table(rows, ["method", "accuracy", "delta", "changed"]))


def cmd_report(args):
    if args.kind == "kfold":
        runs = []
        for p in args.inputs:
            m = json.loads(Path(p).read_text(encoding="utf-8"))
            runs.append({"seed": m.get("seed"), "fold": m.get("fold") or 0, "accuracy": m["test"]["accuracy"],
                         "variant": m.get("variant")})
        by_variant = {}
        for r in runs:
            by_variant.setdefault(r["variant"], []).append(r)
        out = {v: analysis.aggregate_runs(rs) for v, rs in by_variant.items()}
        rows = [{"variant": v, **s} for v, s in out.items()]
        _emit(out, analysis.format_table(rows, ["variant", "mean", "std_over_folds", "std_over_seeds", "n_runs"]))
    elif args.kind == "attention":
        records = []
        for p in args.inputs:
            with open(p, encoding="utf-8", newline="") as fh:
                for row in csv.DictReader(fh):
                    records.append({"scores": (float(row["h_score"]), float(row["r_score"]), float(row["t_score"])),
                                    "given_case": row["given_case"] or "none"})
        stats = analysis.attention_stats(records)
        rows = [{"case": f"{c}-Given", "head": m[0], "relation": m[1], "tail": m[2], "n": stats.counts[c]}
                for c, m in stats.means.items()]
        _emit({"means": stats.means, "counts": stats.counts, "notes": stats.notes},
              analysis.format_table(rows, ["case", "head", "relation", "tail", "n"]))
    else:
        if len(args.inputs) != 1:
            raise UsageError("report kge-impact takes one JSON file {scorer: {vqa_accuracy, hit10}}")
        table = json.loads(Path(args.inputs[0]).read_text(encoding="utf-8"))
        rep = analysis.kge_impact_report({s: v["vqa_accuracy"] for s, v in table.items()},
                                         {s: v["hit10"] for s, v in table.items()})
        _emit(rep, analysis.format_table(rep["rows"], ["scorer", "vqa_accuracy", "hit@10"])
              + f"pearson r = {rep['pearson_r']:.4f}\n")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gelvqa", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def config_args(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--desk", action="store_true", help="start from the desk-scale preset")
        sp.add_argument("--seed", type=int)

    s = sub.add_parser("synthgen", help="write the seeded synthetic benchmark")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--entities", type=int, default=100)
    s.add_argument("--relations", type=int, default=8)
    s.add_argument("--tails-per-relation", type=int, default=4)
    s.add_argument("--samples", type=int, default=2000)
    s.add_argument("--image-size", type=int, default=32)
    s.add_argument("--heldout", type=float, default=0.2)
    s.add_argument("--valid", type=float, default=0.2)
    s.add_argument("--noise", type=float, default=0.08)
    s.add_argument("--head-mention", type=float, default=0.3)
    s.set_defaults(func=cmd_synthgen)

    s = sub.add_parser("kge-train", help="pretrain a knowledge-graph embedding")
    s.add_argument("--kg", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--holdout", type=float, default=0.0, help="fraction of triples held out for evaluation")
    config_args(s)
    s.set_defaults(func=cmd_kge_train)

    s = sub.add_parser("kge-eval", help="link-prediction report for a saved KGE model")
    s.add_argument("--model", required=True)
    s.add_argument("--kg", required=True)
    s.add_argument("--triples", help="TSV of query triples (default: the model's held-out set)")
    s.add_argument("--raw", action="store_true", help="raw instead of filtered ranking")
    s.set_defaults(func=cmd_kge_eval)

    s = sub.add_parser("vqa-train", help="train one model variant")
    s.add_argument("--variant", choices=VARIANTS, required=True)
    s.add_argument("--data", help="benchmark directory (kg.tsv, *.jsonl, images.gelt)")
    s.add_argument("--kge", help="pretrained KGE directory")
    s.add_argument("--out", required=True)
    s.add_argument("--fold", type=int, help="re-split all samples by the five-fold protocol")
    s.add_argument("--fold-seed", type=int)
    config_args(s)
    s.set_defaults(func=cmd_vqa_train)

    for name, fn, hlp in (("vqa-eval", cmd_vqa_eval, "evaluate a checkpoint"),
                          ("perturb", cmd_perturb, "robustness under question modifications")):
        s = sub.add_parser(name, help=hlp)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--split", default="test")
        s.add_argument("--fold", type=int)
        s.add_argument("--fold-seed", type=int)
        if name == "vqa-eval":
            s.add_argument("--out", help="directory for prediction and attention dumps")
        else:
            s.add_argument("--lexicon", required=True)
            s.add_argument("--methods", nargs="+")
        s.set_defaults(func=fn)

    s = sub.add_parser("report", help="aggregate metrics files into tables")
    s.add_argument("kind", choices=("kfold", "attention", "kge-impact"))
    s.add_argument("inputs", nargs="+")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except UsageError as exc:
        sys.stderr.write(str(exc).rstrip() + "\n")
        return EXIT_USAGE
    except (GelError, FileNotFoundError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
