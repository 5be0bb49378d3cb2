"""A very small benchmark and config shared by the trainer-level tests."""
from gelvqa.config import parse_config
from gelvqa.gel import data_from_benchmark, init_state
from gelvqa.kge import KgeConfig, train_kge
from gelvqa.synth import SynthSpec, generate_synthetic_benchmark

TINY = {"d_feat": 24, "d_kge": 8, "mlp_hidden": 16, "q_embed_dim": 8, "image_channels": [4, 4],
        "attention_head_dim": 4, "batch_size": 16, "epochs": 2, "lr": 3e-3, "dropout": 0.0}
TINY_SPEC = dict(n_entities=30, n_relations=3, tails_per_relation=3, samples=120, image_size=8, seed=7)


def tiny_config(variant="gel", **kw):
    return parse_config(None, {**TINY, "variant": variant, **kw})


def make_tiny():
    bench = generate_synthetic_benchmark(SynthSpec(**TINY_SPEC))
    data = data_from_benchmark(bench)
    kge, _ = train_kge(data.kg, KgeConfig(scorer="DistMult", dim=8, iterations=50, batch_size=16, lr=1e-2))
    return data, kge


def tiny_state(tiny, variant, **kw):
    data, kge = tiny
    return init_state(tiny_config(variant, **kw), data.token_vocab, data.answer_vocab, data.kg.vocab,
                      None if variant == "baseline" else kge)


def tiny_lexicon():
    return generate_synthetic_benchmark(SynthSpec(**TINY_SPEC)).lexicon
