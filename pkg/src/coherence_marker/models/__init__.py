"""Coherence scorer families, their backends and training."""

from .backends import (
    BackendError,
    BigramLM,
    CapabilityError,
    EncoderBackend,
    GenerativeBackend,
    HashEncoder,
    UniformLM,
    get_encoder,
    get_generator,
)
from .heads import MLP, ConvMaxPool, concat_features, margin_loss
from .scorers import (
    FAMILIES,
    ClassifierScorer,
    CNNScorer,
    DiscriminativeScorer,
    GenerativeScorer,
    ScoringError,
    SimilarityScorer,
    baseline_similarity_score,
    classifier_score,
    discriminative_score,
    generative_score,
    sequence_perplexity,
)
from .training import (
    Checkpoint,
    EarlyStopping,
    ScorerConfig,
    TrainingError,
    build_scorer,
    finetune_generative,
    grid_search,
    train_classifier,
    train_discriminative,
    train_runs,
    train_scorer,
)
