"""Multi-spectral object re-identification with structured text guidance."""

from .captions import (
    AttributeRecord,
    Caption,
    MLLMClient,
    MockMLLMClient,
    Modality,
    annotate_image,
    build_prompt,
    extract_attributes,
    fill_template,
)
from .encoders import FeatureBundle, IdeaModel, ModelDims, PrefixConfig
from .retrieval_eval import RetrievalResult, cmc_map, distance_matrix, rank_list
from .synth_data import DatasetManifest, SynthConfig, generate_dataset, load_manifest, pk_batches
from .training import LossConfig, ModelConfig, batch_hard_triplet, label_smoothing_ce, objective, train

__all__ = [
    "AttributeRecord",
    "Caption",
    "DatasetManifest",
    "FeatureBundle",
    "IdeaModel",
    "LossConfig",
    "MLLMClient",
    "MockMLLMClient",
    "Modality",
    "ModelConfig",
    "ModelDims",
    "PrefixConfig",
    "RetrievalResult",
    "SynthConfig",
    "annotate_image",
    "batch_hard_triplet",
    "build_prompt",
    "cmc_map",
    "distance_matrix",
    "extract_attributes",
    "fill_template",
    "generate_dataset",
    "label_smoothing_ce",
    "load_manifest",
    "objective",
    "pk_batches",
    "rank_list",
    "train",
]
