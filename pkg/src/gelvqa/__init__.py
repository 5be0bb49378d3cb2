"""Knowledge-grounded VQA with pretrained knowledge-graph embeddings.

Submodules: ``autodiff`` (tensors, AdamW, gradient check), ``kg`` and
``kge`` (graphs, scorers, link prediction), ``encoders`` and ``vqa`` (toy
feature extractors, answer and triple heads), ``gel`` (multitask training),
``analysis`` (folds, attention, robustness, correlation), ``synth`` and
``cli``.
"""
from .config import Config, desk_config, parse_config
from .errors import GelError
from .gel import GELVQAClassifier, GelData, VqaDataset, data_from_benchmark, evaluate_vqa, train_run
from .kg import KnowledgeGraph, Triple
from .kge import KGEEmbedder, KgeConfig, KgeModel, train_kge
from .synth import SynthSpec, generate_synthetic_benchmark

__version__ = "0.1.0"

__all__ = [
    "Config", "desk_config", "parse_config", "GelError", "GELVQAClassifier", "GelData", "VqaDataset",
    "data_from_benchmark", "evaluate_vqa", "train_run", "KnowledgeGraph", "Triple", "KGEEmbedder",
    "KgeConfig", "KgeModel", "train_kge", "SynthSpec", "generate_synthetic_benchmark",
]
