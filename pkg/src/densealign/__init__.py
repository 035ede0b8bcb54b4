"""Dense text-to-patch alignment: training, evaluation, and data tooling."""

__version__ = "0.1.0"

from .alignment import AlignmentHead, pool_text_concept, pool_visual_concept
from .concepts import ConceptVocabulary, build_concept_vocab, extract_concepts
from .data import (
    CaptionRecord,
    ClassSet,
    FeatureRecord,
    FeatureStore,
    SyntheticWorldSpec,
    degrade_captions,
    generate_synthetic_world,
    read_captions,
    read_feature_store,
    write_captions,
    write_feature_store,
)
from .encoder import EncoderConfig, TextEncoder, Vocabulary, build_vocab, tokenize
from .estimator import DenseAligner
from .segeval import EvalConfig, MIoUReport, embed_classes, evaluate, predict_image
from .tensor import Tensor
from .trainer import TrainConfig, fit, load_model

__all__ = [
    "AlignmentHead",
    "CaptionRecord",
    "ClassSet",
    "ConceptVocabulary",
    "DenseAligner",
    "EncoderConfig",
    "EvalConfig",
    "FeatureRecord",
    "FeatureStore",
    "MIoUReport",
    "SyntheticWorldSpec",
    "Tensor",
    "TextEncoder",
    "TrainConfig",
    "Vocabulary",
    "build_concept_vocab",
    "build_vocab",
    "degrade_captions",
    "embed_classes",
    "evaluate",
    "extract_concepts",
    "fit",
    "generate_synthetic_world",
    "load_model",
    "pool_text_concept",
    "pool_visual_concept",
    "predict_image",
    "read_captions",
    "read_feature_store",
    "tokenize",
    "write_captions",
    "write_feature_store",
]
