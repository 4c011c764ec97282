import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from idea_reid.encoders import IdeaModel, ModelDims, PrefixConfig
from idea_reid.synth_data import SynthConfig, generate_dataset


def micro_dims() -> ModelDims:
    """Smallest geometry that still exercises every path (16x8 images)."""
    return ModelDims(
        embed_dim=8,
        text_width=8,
        pseudo_width=8,
        patch_size=4,
        image_size=(16, 8),
        depth=1,
        heads=2,
        context_length=28,
        mlp_ratio=2,
    )


def build_micro_model(variant="idea", n_learnable=1, seed=0, mixer_stride=(2, 2)) -> IdeaModel:
    torch.manual_seed(seed)
    return IdeaModel(
        micro_dims(),
        PrefixConfig(n_learnable=n_learnable),
        variant=variant,
        offset_scale=5.0,
        mixer_stride=mixer_stride,
    )


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """10 identities x 4 samples; shared across fast tests."""
    cfg = SynthConfig(num_identities=10, samples_per_identity=4, num_cameras=2, seed=1)
    out = tmp_path_factory.mktemp("tiny_ds")
    return generate_dataset(cfg, out)
