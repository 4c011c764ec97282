"""Toy dual-encoder backbone for multi-spectral image/text fusion.

One shared causal text transformer encodes prefix-tagged captions; pooled
text features are inverted into pseudo image tokens; three per-modality
vision transformers process [pseudo, patches, class] token sequences. The
model also assembles the 6-row global token matrix and, for the full
variant, runs cooperative deformable aggregation on the local maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
from torch import nn

from . import tokenizer as tok
from .captions import MODALITIES, Modality
from .cda import CooperativeAggregation, SamplingGrid, ShapeMismatch

VARIANTS = ("baseline", "parallel_text", "imfe", "idea")


class SequenceTooLong(ValueError):
    """Token sequence exceeds the context length and truncation is disabled."""


@dataclass
class ModelDims:
    """Width/shape knobs of the toy encoders."""

    embed_dim: int = 64  # fused token width
    text_width: int = 64
    pseudo_width: int = 64
    patch_size: int = 8
    image_size: tuple = (64, 32)
    depth: int = 2
    heads: int = 4
    context_length: int = 77
    mlp_ratio: int = 4
    inverse_dropout: float = 0.1

    def validate(self):
        if min(self.embed_dim, self.text_width, self.pseudo_width, self.depth, self.heads) < 1:
            raise ValueError("all dims must be >= 1")
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"image {h}x{w} not divisible by patch {self.patch_size}")
        if self.embed_dim % self.heads or self.text_width % self.heads:
            raise ValueError("widths must be divisible by head count")

    @property
    def map_hw(self) -> tuple:
        return (self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size)

    @property
    def n_patches(self) -> int:
        h, w = self.map_hw
        return h * w


@dataclass
class PrefixConfig:
    """Fixed modality prefix sentences plus the learnable token count."""

    n_learnable: int = 2
    fixed_text: dict = field(default_factory=lambda: dict(tok.PREFIX_TEXT))
    init_std: float = 0.02


@dataclass
class TextSequence:
    """Padded token ids plus the positions the pooling step needs."""

    token_ids: list
    prompt_positions: tuple
    end_position: int
    context_length: int

    def validate(self):
        assert len(self.token_ids) == self.context_length
        assert 0 <= self.end_position < self.context_length
        for p in self.prompt_positions:
            assert 0 <= p < self.end_position


def build_sequence(
    vocab: tok.Vocabulary,
    text: str,
    modality: Modality,
    prefix: PrefixConfig,
    context_length: int,
    allow_truncation: bool = True,
) -> TextSequence:
    """Tokenize prefix + caption into a fixed-length sequence.

    Truncation keeps the prefix and the head of the caption and drops the
    tail; the end token always survives.
    """
    before, _, after = prefix.fixed_text[modality].partition("XXXX")
    ids = [vocab.sot_id]
    ids.extend(vocab.encode(before))
    prompt_positions = tuple(range(len(ids), len(ids) + prefix.n_learnable))
    ids.extend([vocab.prompt_id] * prefix.n_learnable)
    ids.extend(vocab.encode(after))
    if len(ids) + 1 > context_length:
        raise SequenceTooLong(
            f"prefix alone needs {len(ids) + 1} tokens, context is {context_length}"
        )
    caption_ids = vocab.encode(text)
    budget = context_length - len(ids) - 1
    if len(caption_ids) > budget:
        if not allow_truncation:
            raise SequenceTooLong(
                f"sequence needs {len(ids) + len(caption_ids) + 1} tokens, "
                f"context is {context_length}"
            )
        caption_ids = caption_ids[:budget]
    ids.extend(caption_ids)
    end_position = len(ids)
    ids.append(vocab.eot_id)
    ids.extend([vocab.pad_id] * (context_length - len(ids)))
    seq = TextSequence(ids, prompt_positions, end_position, context_length)
    seq.validate()
    return seq


class TransformerBlock(nn.Module):
    """Pre-LN block: self-attention + MLP, optionally causal."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, causal: bool):
        super().__init__()
        self.heads = heads
        self.causal = causal
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.attn_out = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )

    def _attend(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        dh = d // self.heads
        q, k, v = self.qkv(x).chunk(3, dim=-1)

        def split(t):
            return t.reshape(b, n, self.heads, dh).transpose(1, 2)

        scores = split(q) @ split(k).transpose(-1, -2) / math.sqrt(dh)
        if self.causal:
            mask = torch.full((n, n), float("-inf"), device=x.device, dtype=x.dtype)
            scores = scores + torch.triu(mask, diagonal=1)
        mixed = (torch.softmax(scores, dim=-1) @ split(v)).transpose(1, 2).reshape(b, n, d)
        return self.attn_out(mixed)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self._attend(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class TextEncoder(nn.Module):
    """Causal transformer over caption tokens with learnable-token pooling."""

    def __init__(self, vocab_size: int, width: int, depth: int, heads: int,
                 context_length: int, mlp_ratio: int = 4):
        super().__init__()
        self.token_embedding = nn.Embedding(vocab_size, width)
        nn.init.normal_(self.token_embedding.weight, std=0.02)
        self.positional = nn.Parameter(torch.randn(context_length, width) * 0.01)
        self.blocks = nn.ModuleList(
            TransformerBlock(width, heads, mlp_ratio, causal=True) for _ in range(depth)
        )
        self.final_norm = nn.LayerNorm(width)

    def hidden_states(
        self,
        ids: torch.Tensor,
        prompt_positions: tuple,
        prompt_embeds: Optional[torch.Tensor],
    ) -> torch.Tensor:
        x = self.token_embedding(ids) + self.positional[: ids.shape[1]]
        if prompt_positions:
            x = x.clone()
            x[:, list(prompt_positions)] = prompt_embeds
        for block in self.blocks:
            x = block(x)
        return self.final_norm(x)

    @staticmethod
    def pool(end_state: torch.Tensor, prompt_states: Optional[torch.Tensor]) -> torch.Tensor:
        """End-token state, averaged with the learnable-token states if any."""
        if prompt_states is None or prompt_states.shape[-2] == 0:
            return end_state
        n_p = prompt_states.shape[-2]
        return (end_state + prompt_states.sum(dim=-2)) / (n_p + 1)

    def forward(
        self,
        ids: torch.Tensor,
        prompt_positions: tuple,
        prompt_embeds: Optional[torch.Tensor],
        end_positions: torch.Tensor,
    ) -> torch.Tensor:
        h = self.hidden_states(ids, prompt_positions, prompt_embeds)
        f_end = h[torch.arange(h.shape[0], device=h.device), end_positions]
        prompt_states = h[:, list(prompt_positions)] if prompt_positions else None
        return self.pool(f_end, prompt_states)


class InverseNet(nn.Module):
    """Maps pooled text features to pseudo image tokens.

    linear -> GELU -> dropout -> linear -> dropout; dropout is the identity
    in eval mode.
    """

    def __init__(self, in_dim: int, out_dim: int, hidden: Optional[int] = None, p: float = 0.1):
        super().__init__()
        hidden = 4 * in_dim if hidden is None else hidden
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)
        self.drop = nn.Dropout(p)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.drop(self.fc2(self.drop(torch.nn.functional.gelu(self.fc1(x)))))


class VisionEncoder(nn.Module):
    """Transformer over [pseudo, patch_1..patch_Nl, class] tokens."""

    def __init__(self, dims: ModelDims):
        super().__init__()
        self.dims = dims
        p = dims.patch_size
        self.patch_proj = nn.Linear(p * p * 3, dims.pseudo_width)
        self.class_token = nn.Parameter(torch.randn(dims.pseudo_width) * 0.02)
        self.positional = nn.Parameter(torch.randn(dims.n_patches + 2, dims.pseudo_width) * 0.01)
        if dims.pseudo_width != dims.embed_dim:
            self.in_proj = nn.Linear(dims.pseudo_width, dims.embed_dim)
        else:
            self.in_proj = nn.Identity()
        self.blocks = nn.ModuleList(
            TransformerBlock(dims.embed_dim, dims.heads, dims.mlp_ratio, causal=False)
            for _ in range(dims.depth)
        )
        self.final_norm = nn.LayerNorm(dims.embed_dim)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        h, w = self.dims.image_size
        p = self.dims.patch_size
        if images.ndim != 4 or images.shape[1:] != (h, w, 3):
            raise ShapeMismatch(
                f"expected images [B, {h}, {w}, 3], got {tuple(images.shape)}"
            )
        b = images.shape[0]
        x = images.reshape(b, h // p, p, w // p, p, 3)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, self.dims.n_patches, p * p * 3)
        return x

    def assemble(self, images: torch.Tensor, pseudo: torch.Tensor) -> torch.Tensor:
        """Token layout [pseudo, patches (row-major), class] plus positions."""
        if pseudo.ndim != 2 or pseudo.shape[-1] != self.dims.pseudo_width:
            raise ShapeMismatch(f"pseudo token has shape {tuple(pseudo.shape)}")
        patches = self.patch_proj(self.patchify(images))
        cls = self.class_token.expand(images.shape[0], 1, -1)
        tokens = torch.cat([pseudo[:, None], patches, cls], dim=1)
        return tokens + self.positional

    def forward(self, images: torch.Tensor, pseudo: torch.Tensor) -> torch.Tensor:
        x = self.in_proj(self.assemble(images, pseudo))
        for block in self.blocks:
            x = block(x)
        return self.final_norm(x)


@dataclass
class FeatureBundle:
    """Every feature produced by one forward pass (batch-leading shapes).

    global_tokens rows are ordered (class_RGB, pseudo_RGB, class_NIR,
    pseudo_NIR, class_TIR, pseudo_TIR). Retrieval vectors are the
    concatenations of the class rows (visual) or pseudo rows (text).
    """

    modality_tokens: dict
    global_tokens: torch.Tensor
    global_visual: torch.Tensor
    pooled_text: Optional[dict] = None
    pseudo_tokens: Optional[dict] = None
    global_text: Optional[torch.Tensor] = None
    sampled_tokens: Optional[torch.Tensor] = None
    fused_tokens: Optional[torch.Tensor] = None
    fused_visual: Optional[torch.Tensor] = None
    fused_text: Optional[torch.Tensor] = None
    grid: Optional[SamplingGrid] = None

    def validate(self, dims: ModelDims, n_sampled: Optional[int] = None):
        n_tokens = dims.n_patches + 2
        b = self.global_tokens.shape[0]
        for m in MODALITIES:
            assert self.modality_tokens[m].shape == (b, n_tokens, dims.embed_dim)
        assert self.global_tokens.shape == (b, 6, dims.embed_dim)
        assert self.global_visual.shape == (b, 3 * dims.embed_dim)
        if self.fused_tokens is not None:
            assert self.fused_tokens.shape == (b, 6, dims.embed_dim)
            assert self.sampled_tokens.shape[0] == b and self.sampled_tokens.shape[2] == dims.embed_dim
            if n_sampled is not None:
                assert self.sampled_tokens.shape[1] == 3 * n_sampled

    def split_features(self) -> dict:
        """The per-feature retrieval vectors present in this pass, by name."""
        out = {"global_visual": self.global_visual}
        if self.global_text is not None:
            out["global_text"] = self.global_text
        if self.fused_visual is not None:
            out["fused_visual"] = self.fused_visual
            out["fused_text"] = self.fused_text
        return out

    def retrieval_vector(self, variant: str) -> torch.Tensor:
        if variant == "baseline":
            return self.global_visual
        if variant == "parallel_text":
            return torch.cat([self.global_visual, self.global_text], dim=-1)
        if variant == "imfe":
            return self.global_text
        if variant == "idea":
            return self.fused_text
        raise ValueError(f"unknown variant {variant!r}")


class IdeaModel(nn.Module):
    """Assembled multi-spectral model; `variant` selects the active paths.

    baseline: three vision branches only (zero pseudo input, no text).
    parallel_text: text encoded and concatenated at the output.
    imfe: text inverted into pseudo tokens that condition the vision pass.
    idea: imfe plus cooperative deformable aggregation.
    """

    def __init__(
        self,
        dims: ModelDims,
        prefix: PrefixConfig,
        variant: str = "idea",
        offset_scale: float = 5.0,
        vocab: Optional[tok.Vocabulary] = None,
        freeze_text: bool = False,
        mixer_bias: bool = True,
        mixer_stride: Optional[tuple] = None,
        fusion_heads: int = 4,
    ):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        dims.validate()
        self.dims = dims
        self.prefix = prefix
        self.variant = variant
        self.vocab = vocab if vocab is not None else tok.Vocabulary()
        self.text_encoder = TextEncoder(
            self.vocab.size, dims.text_width, dims.depth, dims.heads,
            dims.context_length, dims.mlp_ratio,
        )
        self.prompt_embeds = nn.ParameterDict(
            {
                m.value: nn.Parameter(
                    torch.randn(prefix.n_learnable, dims.text_width) * prefix.init_std
                )
                for m in MODALITIES
            }
        ) if prefix.n_learnable > 0 else None
        self.inverse = InverseNet(
            dims.text_width, dims.pseudo_width, p=dims.inverse_dropout
        )
        self.vision = nn.ModuleDict({m.value: VisionEncoder(dims) for m in MODALITIES})
        self.cda = (
            CooperativeAggregation(
                dims.embed_dim,
                dims.map_hw,
                offset_scale,
                stride=mixer_stride,
                heads=fusion_heads,
                mixer_bias=mixer_bias,
            )
            if variant == "idea"
            else None
        )
        if freeze_text:
            for p in self.text_encoder.parameters():
                p.requires_grad_(False)
        self.freeze_text = freeze_text

    @property
    def uses_text(self) -> bool:
        return self.variant != "baseline"

    @property
    def uses_inverse(self) -> bool:
        return self.variant in ("imfe", "idea")

    def sequence(self, text: str, modality: Modality, allow_truncation: bool = True) -> TextSequence:
        return build_sequence(
            self.vocab, text, modality, self.prefix, self.dims.context_length, allow_truncation
        )

    def _device(self):
        return next(self.parameters()).device

    def _dtype(self):
        return next(self.parameters()).dtype

    def encode_text(self, seqs, modality: Modality) -> torch.Tensor:
        """Pooled text feature(s) for one modality; accepts one sequence or a list."""
        single = isinstance(seqs, TextSequence)
        if single:
            seqs = [seqs]
        positions = seqs[0].prompt_positions
        assert all(s.prompt_positions == positions for s in seqs)
        ids = torch.tensor([s.token_ids for s in seqs], dtype=torch.long, device=self._device())
        ends = torch.tensor([s.end_position for s in seqs], dtype=torch.long, device=self._device())
        embeds = self.prompt_embeds[modality.value] if self.prompt_embeds is not None else None
        pooled = self.text_encoder(ids, positions, embeds, ends)
        return pooled[0] if single else pooled

    def encode_vision(self, images: torch.Tensor, pseudo: torch.Tensor, modality: Modality) -> torch.Tensor:
        single = images.ndim == 3
        if single:
            images = images[None]
            pseudo = pseudo[None]
        out = self.vision[modality.value](images, pseudo)
        return out[0] if single else out

    def forward(self, images: dict, sequences: Optional[dict] = None) -> FeatureBundle:
        """images: Modality -> [B, H, W, 3]; sequences: Modality -> list[TextSequence]."""
        b = images[Modality.RGB].shape[0]
        pooled: Optional[dict] = {} if self.uses_text else None
        pseudo: dict = {}
        for m in MODALITIES:
            if self.uses_text:
                pooled[m] = self.encode_text(sequences[m], m)
            if self.uses_inverse:
                pseudo[m] = self.inverse(pooled[m])
            else:
                pseudo[m] = torch.zeros(
                    b, self.dims.pseudo_width, device=self._device(), dtype=self._dtype()
                )
        tokens = {m: self.vision[m.value](images[m], pseudo[m]) for m in MODALITIES}

        rows = []
        for m in MODALITIES:
            rows.append(tokens[m][:, -1])
            rows.append(tokens[m][:, 0])
        global_tokens = torch.stack(rows, dim=1)
        global_visual = torch.cat([tokens[m][:, -1] for m in MODALITIES], dim=-1)

        global_text = None
        if self.variant == "parallel_text":
            global_text = torch.cat([pooled[m] for m in MODALITIES], dim=-1)
        elif self.uses_inverse:
            global_text = torch.cat([tokens[m][:, 0] for m in MODALITIES], dim=-1)

        bundle = FeatureBundle(
            modality_tokens=tokens,
            global_tokens=global_tokens,
            global_visual=global_visual,
            pooled_text=pooled,
            pseudo_tokens=pseudo if self.uses_inverse else None,
            global_text=global_text,
        )
        if self.cda is not None:
            sampled, fused, grid = self.cda(
                [tokens[m] for m in MODALITIES], global_tokens
            )
            bundle.sampled_tokens = sampled
            bundle.fused_tokens = fused
            bundle.fused_visual = torch.cat([fused[:, 0], fused[:, 2], fused[:, 4]], dim=-1)
            bundle.fused_text = torch.cat([fused[:, 1], fused[:, 3], fused[:, 5]], dim=-1)
            bundle.grid = grid
        return bundle
