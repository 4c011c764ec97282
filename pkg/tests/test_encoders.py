import numpy as np
import pytest
import torch

from conftest import build_micro_model, micro_dims
from idea_reid.captions import MODALITIES, Modality
from idea_reid.cda import ShapeMismatch
from idea_reid.encoders import (
    InverseNet,
    ModelDims,
    PrefixConfig,
    SequenceTooLong,
    TextEncoder,
    build_sequence,
)
from idea_reid.tokenizer import PREFIX_TEXT, Vocabulary

VOCAB = Vocabulary()
CAPTION = (
    "The man is wearing a red jacket with blue jeans and black boots. The man has "
    "short black hair and appears to be elderly. The man is carrying nothing."
)


def batch_inputs(model, caption=CAPTION, b=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    h, w = model.dims.image_size
    images = {m: torch.rand(b, h, w, 3, generator=g) for m in MODALITIES}
    seqs = {m: [model.sequence(caption, m) for _ in range(b)] for m in MODALITIES}
    return images, seqs


# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------


def test_vocabulary_deterministic_and_closed():
    v2 = Vocabulary()
    assert v2.words == VOCAB.words and v2.size == VOCAB.size
    for word in ("wearing", "t-shirt", "dark", "spectrum"):
        assert word in VOCAB.word_to_id


def test_tokenizer_known_words_single_ids():
    ids = VOCAB.encode("The man is wearing a white t-shirt.")
    assert all(i < VOCAB.byte_base for i in ids)
    assert VOCAB.decode(ids) == "the man is wearing a white t-shirt ."


def test_tokenizer_byte_fallback():
    ids = VOCAB.encode("KQQ819")
    assert all(i >= VOCAB.byte_base for i in ids)
    assert len(ids) == 6
    assert VOCAB.decode(ids) == "kqq819"


# ---------------------------------------------------------------------------
# Sequences
# ---------------------------------------------------------------------------


def test_sequence_structure():
    prefix = PrefixConfig(n_learnable=2)
    seq = build_sequence(VOCAB, "The man is carrying a purse.", Modality.RGB, prefix, 77)
    seq.validate()
    assert len(seq.prompt_positions) == 2
    assert seq.token_ids[seq.end_position] == VOCAB.eot_id
    assert all(seq.token_ids[p] == VOCAB.prompt_id for p in seq.prompt_positions)
    assert len(seq.token_ids) == 77
    # XXXX span sits after "an image of a"
    assert seq.prompt_positions[0] == 1 + len(VOCAB.encode("An image of a"))


def test_sequence_blank_caption_prefix_only():
    prefix = PrefixConfig(n_learnable=1)
    seq = build_sequence(VOCAB, "", Modality.NIR, prefix, 77)
    before, _, after = PREFIX_TEXT[Modality.NIR].partition("XXXX")
    expected = 1 + len(VOCAB.encode(before)) + 1 + len(VOCAB.encode(after))
    assert seq.end_position == expected


def test_sequence_truncation_keeps_prefix_and_end_token():
    prefix = PrefixConfig(n_learnable=2)
    long_caption = " ".join(["backpack"] * 300)
    seq = build_sequence(VOCAB, long_caption, Modality.RGB, prefix, 77)
    assert len(seq.token_ids) == 77
    assert seq.end_position == 76
    assert seq.token_ids[seq.end_position] == VOCAB.eot_id
    assert all(seq.token_ids[p] == VOCAB.prompt_id for p in seq.prompt_positions)
    with pytest.raises(SequenceTooLong):
        build_sequence(VOCAB, long_caption, Modality.RGB, prefix, 77, allow_truncation=False)


def test_sequence_context_too_small_for_prefix():
    with pytest.raises(SequenceTooLong):
        build_sequence(VOCAB, "", Modality.RGB, PrefixConfig(n_learnable=2), 8)


# ---------------------------------------------------------------------------
# Text encoder pooling
# ---------------------------------------------------------------------------


def test_pooling_arithmetic_matches_stub_example():
    end = torch.tensor([3.0, 0.0])
    prompts = torch.tensor([[0.0, 0.0], [3.0, 0.0]])
    pooled = TextEncoder.pool(end, prompts)
    assert torch.equal(pooled, torch.tensor([2.0, 0.0]))


def test_pooling_no_learnable_tokens_is_end_state():
    end = torch.randn(4, 8)
    assert torch.equal(TextEncoder.pool(end, None), end)


def test_encode_text_np0_equals_end_hidden_state():
    model = build_micro_model(variant="imfe", n_learnable=0)
    seq = model.sequence(CAPTION, Modality.RGB)
    assert seq.prompt_positions == ()
    ids = torch.tensor([seq.token_ids])
    ends = torch.tensor([seq.end_position])
    hidden = model.text_encoder.hidden_states(ids, (), None)
    pooled = model.encode_text(seq, Modality.RGB)
    assert torch.allclose(pooled, hidden[0, seq.end_position], atol=0, rtol=0)


def test_encode_text_blank_caption_no_error():
    model = build_micro_model(variant="idea", n_learnable=1)
    pooled = model.encode_text(model.sequence("", Modality.RGB), Modality.RGB)
    assert pooled.shape == (model.dims.text_width,)
    assert torch.isfinite(pooled).all()


def test_prefix_awareness_changes_pooled_feature():
    model = build_micro_model(variant="idea", n_learnable=1)
    body = "The man is carrying a purse."
    rgb = model.encode_text(model.sequence(body, Modality.RGB), Modality.RGB)
    nir = model.encode_text(model.sequence(body, Modality.NIR), Modality.NIR)
    assert (rgb - nir).abs().max().item() > 1e-9


def test_causal_padding_invariance():
    # tokens after the end position must not influence the pooled output
    model = build_micro_model(variant="imfe", n_learnable=1)
    seq = model.sequence("The man is carrying a purse.", Modality.RGB)
    tampered_ids = list(seq.token_ids)
    for i in range(seq.end_position + 1, len(tampered_ids)):
        tampered_ids[i] = VOCAB.word_to_id["purse"]
    ids = torch.tensor([seq.token_ids, tampered_ids])
    ends = torch.tensor([seq.end_position, seq.end_position])
    pooled = model.text_encoder(
        ids, seq.prompt_positions, model.prompt_embeds["RGB"], ends
    )
    assert torch.allclose(pooled[0], pooled[1], atol=1e-7)


# ---------------------------------------------------------------------------
# InverseNet
# ---------------------------------------------------------------------------


def test_inverse_net_zero_weights_gives_zero():
    net = InverseNet(8, 6, p=0.1).eval()
    for p in net.parameters():
        torch.nn.init.zeros_(p)
    out = net(torch.randn(3, 8).double().float())
    assert torch.equal(out, torch.zeros(3, 6))


def test_inverse_net_eval_deterministic():
    net = InverseNet(8, 6, p=0.5).eval()
    x = torch.randn(5, 8)
    assert torch.equal(net(x), net(x))


def test_inverse_net_training_mask_recompute():
    torch.manual_seed(0)
    net = InverseNet(4, 3, p=0.5).train()
    x = torch.randn(2, 4)
    masks = []

    def record(_module, _inp, out):
        masks.append(out.detach().clone())

    hook = net.drop.register_forward_hook(record)
    torch.manual_seed(123)
    out = net(x)
    hook.remove()
    # recompute from the recorded post-dropout activations and the weights
    mid = masks[0]
    expected = mid @ net.fc2.weight.T.detach() + net.fc2.bias.detach()
    scale = masks[1] / torch.where(expected == 0, torch.ones_like(expected), expected)
    recomputed = expected * scale
    assert torch.allclose(out, recomputed, atol=1e-6)
    # the first dropout indeed matches linear1+gelu rescaled by the mask
    pre = torch.nn.functional.gelu(net.fc1(x).detach())
    ratio = mid / torch.where(pre == 0, torch.ones_like(pre), pre)
    kept = torch.isclose(ratio, torch.full_like(ratio, 2.0), atol=1e-6)
    dropped = torch.isclose(ratio, torch.zeros_like(ratio), atol=1e-6)
    assert bool((kept | dropped).all())


# ---------------------------------------------------------------------------
# Vision encoder
# ---------------------------------------------------------------------------


def test_encode_vision_row_count():
    model = build_micro_model()
    dims = model.dims
    img = torch.rand(dims.image_size[0], dims.image_size[1], 3)
    pseudo = torch.zeros(dims.pseudo_width)
    out = model.encode_vision(img, pseudo, Modality.RGB)
    assert out.shape == (dims.n_patches + 2, dims.embed_dim)


def test_encode_vision_modality_weight_separation():
    model = build_micro_model()
    dims = model.dims
    img = torch.rand(dims.image_size[0], dims.image_size[1], 3)
    pseudo = torch.randn(dims.pseudo_width)
    a = model.encode_vision(img, pseudo, Modality.RGB)
    b = model.encode_vision(img, pseudo, Modality.NIR)
    assert (a - b).abs().max().item() > 1e-9


def test_encode_vision_shape_mismatch():
    model = build_micro_model()
    with pytest.raises(ShapeMismatch):
        model.encode_vision(torch.rand(15, 8, 3), torch.zeros(8), Modality.RGB)
    with pytest.raises(ShapeMismatch):
        model.encode_vision(torch.rand(16, 8, 3), torch.zeros(5), Modality.RGB)


def test_vision_token_assembly_stub():
    model = build_micro_model()
    enc = model.vision["RGB"]
    with torch.no_grad():
        enc.patch_proj.weight.zero_()
        enc.patch_proj.bias.zero_()
    img = torch.zeros(1, 16, 8, 3)
    pseudo = torch.zeros(1, 8)
    tokens = enc.assemble(img, pseudo)
    expected = enc.positional.detach().clone()
    expected[-1] += enc.class_token.detach()
    assert torch.allclose(tokens[0], expected, atol=1e-7)


def test_patch_order_row_major():
    model = build_micro_model()
    enc = model.vision["RGB"]
    img = torch.zeros(1, 16, 8, 3)
    img[0, 4:8, 4:8, :] = 1.0  # patch row 1, col 1 -> index 1*2+1=3
    patches = enc.patchify(img)
    nonzero = patches.abs().sum(-1)[0].nonzero().flatten().tolist()
    assert nonzero == [3]


# ---------------------------------------------------------------------------
# Bundle shape contracts
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_bundle_shapes_random_dims(seed):
    rng = np.random.default_rng(seed)
    heads = int(rng.choice([1, 2, 4]))
    dims = ModelDims(
        embed_dim=int(rng.choice([8, 16]) * heads) if heads > 1 else int(rng.choice([8, 12])),
        text_width=8 * heads,
        pseudo_width=int(rng.choice([8, 16])),
        patch_size=4,
        image_size=(int(rng.choice([8, 16])), int(rng.choice([8, 16]))),
        depth=int(rng.choice([1, 2])),
        heads=heads,
        context_length=40,
        mlp_ratio=2,
    )
    torch.manual_seed(seed)
    from idea_reid.encoders import IdeaModel

    model = IdeaModel(dims, PrefixConfig(n_learnable=int(rng.integers(0, 3))), variant="idea")
    b = 2
    images = {m: torch.rand(b, dims.image_size[0], dims.image_size[1], 3) for m in MODALITIES}
    seqs = {m: [model.sequence("The man is carrying a purse.", m)] * b for m in MODALITIES}
    bundle = model(images, seqs)
    hs = dims.map_hw[0] // model.cda.stride[0]
    ws = dims.map_hw[1] // model.cda.stride[1]
    bundle.validate(dims, n_sampled=hs * ws)
    assert bundle.global_tokens.shape == (b, 6, dims.embed_dim)
    assert bundle.sampled_tokens.shape == (b, 3 * hs * ws, dims.embed_dim)
    assert bundle.fused_tokens.shape == (b, 6, dims.embed_dim)
    for name, feat in bundle.split_features().items():
        assert feat.shape == (b, 3 * dims.embed_dim), name


def test_global_rows_ordered_class_then_pseudo():
    model = build_micro_model()
    images, seqs = batch_inputs(model)
    bundle = model(images, seqs)
    for i, m in enumerate(MODALITIES):
        assert torch.equal(bundle.global_tokens[:, 2 * i], bundle.modality_tokens[m][:, -1])
        assert torch.equal(bundle.global_tokens[:, 2 * i + 1], bundle.modality_tokens[m][:, 0])
    gv = torch.cat([bundle.modality_tokens[m][:, -1] for m in MODALITIES], dim=-1)
    assert torch.equal(bundle.global_visual, gv)


def test_variant_feature_presence():
    cases = {
        "baseline": {"global_visual"},
        "parallel_text": {"global_visual", "global_text"},
        "imfe": {"global_visual", "global_text"},
        "idea": {"global_visual", "global_text", "fused_visual", "fused_text"},
    }
    for variant, expected in cases.items():
        model = build_micro_model(variant=variant)
        images, seqs = batch_inputs(model)
        bundle = model(images, seqs if model.uses_text else None)
        assert set(bundle.split_features()) == expected, variant
        vec = bundle.retrieval_vector(variant)
        assert vec.ndim == 2 and vec.shape[0] == 2


def test_parallel_text_concat_width():
    model = build_micro_model(variant="parallel_text")
    images, seqs = batch_inputs(model)
    bundle = model(images, seqs)
    assert bundle.global_text.shape == (2, 3 * model.dims.text_width)
    assert bundle.retrieval_vector("parallel_text").shape == (
        2,
        3 * model.dims.embed_dim + 3 * model.dims.text_width,
    )
