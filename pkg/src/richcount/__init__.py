"""Two-stage zero-shot object counting: text/visual alignment, then a text-conditioned density counter."""

from .alignment import (
    AlignmentData,
    ContrastiveConfig,
    build_pairs,
    contrastive_loss,
    separation_report,
    train_adapter_phase,
    train_ffn_phase,
)
from .counter import CounterConfig, density_loss, forward, fuse, total_loss, train_counter
from .data import (
    SynthConfig,
    fetch_descriptions,
    generalize_description,
    generate_synthetic,
    gt_density_from_dots,
    load_manifest,
)
from .domain import DensityMap, EmbeddingBatch, ImageSample, PromptSet, TrainState, count_of, validate_sample
from .encoders import encode_text, encode_visual, load_embedding_dump
from .evaluation import baseline_mean_count, count_image, evaluate
from .model import ModelConfig, init_state, toy_config

__version__ = "0.1.0"
