"""Losses, the four-term objective and the optimization loop."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt
from .captions import MODALITIES, Modality
from .encoders import (
    FeatureBundle,
    IdeaModel,
    ModelDims,
    PrefixConfig,
    VARIANTS,
)
from .retrieval_eval import RetrievalResult, cmc_map, distance_matrix
from .synth_data import DatasetManifest, pk_batches


class InvalidLabel(ValueError):
    """A class label falls outside the classifier range."""


class DegenerateBatch(ValueError):
    """An anchor has no positive or no negative partner in the batch."""


class ConfigError(ValueError):
    """Inconsistent run configuration."""


@dataclass
class LossConfig:
    smoothing_eps: float = 0.1
    triplet_margin: float = 0.3
    lr_init: float = 3.5e-6
    lr_final: float = 3.5e-7
    epochs: int = 12
    weight_decay: float = 1e-4

    def validate(self):
        if not 0.0 <= self.smoothing_eps < 1.0:
            raise ConfigError("smoothing_eps must lie in [0, 1)")
        if self.triplet_margin < 0.0:
            raise ConfigError("triplet_margin must be >= 0")
        if self.lr_final > self.lr_init:
            raise ConfigError("lr_final must not exceed lr_init")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")


@dataclass
class ModelConfig:
    """Everything needed to instantiate the model, minus the class count."""

    dims: ModelDims = field(default_factory=ModelDims)
    prefix: PrefixConfig = field(default_factory=PrefixConfig)
    offset_scale: float = 5.0
    freeze_text: bool = False
    mixer_bias: bool = True
    mixer_stride: Optional[tuple] = None
    fusion_heads: int = 4

    def build(self, variant: str) -> IdeaModel:
        if self.prefix.n_learnable < 0:
            raise ConfigError("learnable token count must be >= 0")
        if self.offset_scale <= 0:
            raise ConfigError("offset scale must be > 0")
        return IdeaModel(
            self.dims,
            self.prefix,
            variant=variant,
            offset_scale=self.offset_scale,
            freeze_text=self.freeze_text,
            mixer_bias=self.mixer_bias,
            mixer_stride=self.mixer_stride,
            fusion_heads=self.fusion_heads,
        )

    def head_dims(self, variant: str) -> dict:
        c, ct = self.dims.embed_dim, self.dims.text_width
        dims = {"global_visual": 3 * c}
        if variant == "parallel_text":
            dims["global_text"] = 3 * ct
        elif variant in ("imfe", "idea"):
            dims["global_text"] = 3 * c
        if variant == "idea":
            dims["fused_visual"] = 3 * c
            dims["fused_text"] = 3 * c
        return dims


class HeadBank(nn.Module):
    """Independent linear classifiers, one per retrieval feature."""

    def __init__(self, head_dims: dict, num_classes: int):
        super().__init__()
        self.num_classes = num_classes
        self.heads = nn.ModuleDict(
            {name: nn.Linear(dim, num_classes) for name, dim in head_dims.items()}
        )

    def forward(self, name: str, features: torch.Tensor) -> torch.Tensor:
        return self.heads[name](features)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def label_smoothing_ce(logits: torch.Tensor, labels: torch.Tensor, eps: float = 0.1) -> torch.Tensor:
    """Cross-entropy against (1-eps) one-hot + eps/K uniform targets."""
    n_classes = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise InvalidLabel(f"labels must lie in [0, {n_classes})")
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(1, labels[:, None]).squeeze(1)
    return ((1.0 - eps) * nll - eps * logp.mean(dim=-1)).mean()


def pairwise_euclidean(features: torch.Tensor) -> torch.Tensor:
    # 1e-12 under the sqrt keeps the gradient finite at zero distance.
    diff = features[:, None, :] - features[None, :, :]
    return torch.sqrt((diff * diff).sum(-1) + 1e-12)


def batch_hard_triplet(features: torch.Tensor, labels: torch.Tensor, margin: float = 0.3) -> torch.Tensor:
    """Hardest-positive minus hardest-negative hinge, averaged over anchors."""
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool, device=features.device)
    pos_mask = same & ~eye
    neg_mask = ~same
    if not bool(pos_mask.any(dim=1).all()) or not bool(neg_mask.any(dim=1).all()):
        raise DegenerateBatch("every anchor needs at least one positive and one negative")
    dist = pairwise_euclidean(features)
    ninf = torch.tensor(float("-inf"), dtype=dist.dtype, device=dist.device)
    pinf = torch.tensor(float("inf"), dtype=dist.dtype, device=dist.device)
    d_ap = torch.where(pos_mask, dist, ninf).max(dim=1).values
    d_an = torch.where(neg_mask, dist, pinf).min(dim=1).values
    return torch.relu(d_ap - d_an + margin).mean()


def objective(
    bundle: FeatureBundle,
    labels: torch.Tensor,
    heads: HeadBank,
    cfg: LossConfig,
    ce_fn=None,
    tri_fn=None,
):
    """Sum of (smoothed CE + batch-hard triplet) over every present feature.

    Returns (total, report) where the report carries one entry per sub-term.
    """
    if ce_fn is None:
        ce_fn = lambda logits, y: label_smoothing_ce(logits, y, cfg.smoothing_eps)
    if tri_fn is None:
        tri_fn = lambda feats, y: batch_hard_triplet(feats, y, cfg.triplet_margin)
    total = None
    report = {}
    for name, feats in bundle.split_features().items():
        ce = ce_fn(heads(name, feats), labels)
        tri = tri_fn(feats, labels)
        report[f"ce/{name}"] = float(ce.detach())
        report[f"tri/{name}"] = float(tri.detach())
        term = ce + tri
        total = term if total is None else total + term
    return total, report


def cosine_lr(step: int, total_steps: int, lr_init: float, lr_final: float) -> float:
    """Cosine decay from lr_init at step 0 to lr_final at total_steps."""
    if total_steps <= 0:
        return lr_init
    t = min(max(step / total_steps, 0.0), 1.0)
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------------------
# Batch assembly
# ---------------------------------------------------------------------------


def load_batch(
    manifest: DatasetManifest,
    sample_ids: list,
    model: IdeaModel,
    blank_modalities: frozenset = frozenset(),
    dtype: torch.dtype = torch.float32,
):
    """Stack images, tokenized captions and identity labels for sample_ids.

    blank_modalities lists spectra whose caption text is replaced by the
    empty string (the prefix-only path used by text-missing evaluation).
    """
    triplets = [manifest.load_sample(sid) for sid in sample_ids]
    images = {}
    sequences = {}
    for m in MODALITIES:
        stack = np.stack([t.images[m] for t in triplets])
        images[m] = torch.as_tensor(stack, dtype=dtype)
        if model.uses_text:
            sequences[m] = [
                model.sequence("" if m in blank_modalities else t.captions[m].text, m)
                for t in triplets
            ]
    labels = torch.tensor([t.identity for t in triplets], dtype=torch.long)
    return images, sequences if model.uses_text else None, labels


# ---------------------------------------------------------------------------
# Checkpoint save/load (model-aware wrappers around the container format)
# ---------------------------------------------------------------------------


def _model_manifest(model: IdeaModel, heads: HeadBank, extra: dict) -> dict:
    dims = asdict(model.dims)
    dims["image_size"] = list(model.dims.image_size)
    manifest = {
        "dims": dims,
        "prefix": {
            "n_learnable": model.prefix.n_learnable,
            "init_std": model.prefix.init_std,
            "fixed_text": {m.value: model.prefix.fixed_text[m] for m in MODALITIES},
        },
        "variant": model.variant,
        "offset_scale": model.cda.offset_scale if model.cda is not None else None,
        "freeze_text": model.freeze_text,
        "mixer_stride": list(model.cda.stride) if model.cda is not None else None,
        "num_classes": heads.num_classes,
        "head_dims": {n: h.in_features for n, h in heads.heads.items()},
    }
    manifest.update(extra)
    return manifest


def save_model(path, model: IdeaModel, heads: HeadBank, extra: Optional[dict] = None) -> Path:
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays.update(
        {f"headbank.{k}": v.detach().cpu().numpy() for k, v in heads.state_dict().items()}
    )
    return ckpt.save_arrays(path, arrays, _model_manifest(model, heads, extra or {}))


def load_model(path) -> tuple:
    """Rebuild (model, heads, manifest) from a checkpoint file."""
    manifest, arrays = ckpt.load_arrays(path)
    dims_kw = dict(manifest["dims"])
    dims_kw["image_size"] = tuple(dims_kw["image_size"])
    dims = ModelDims(**dims_kw)
    prefix = PrefixConfig(
        n_learnable=manifest["prefix"]["n_learnable"],
        fixed_text={Modality(k): v for k, v in manifest["prefix"]["fixed_text"].items()},
        init_std=manifest["prefix"]["init_std"],
    )
    stride = manifest.get("mixer_stride")
    model = IdeaModel(
        dims,
        prefix,
        variant=manifest["variant"],
        offset_scale=manifest["offset_scale"] or 5.0,
        freeze_text=manifest["freeze_text"],
        mixer_stride=tuple(stride) if stride else None,
    )
    heads = HeadBank(manifest["head_dims"], manifest["num_classes"])
    model_state = {}
    head_state = {}
    for name, arr in arrays.items():
        tensor = torch.from_numpy(arr)
        if name.startswith("headbank."):
            head_state[name[len("headbank."):]] = tensor
        else:
            model_state[name] = tensor
    model.load_state_dict(model_state)
    heads.load_state_dict(head_state)
    model.eval()
    heads.eval()
    return model, heads, manifest


# ---------------------------------------------------------------------------
# Evaluation and the training loop
# ---------------------------------------------------------------------------


@dataclass
class EvalRun:
    result: RetrievalResult
    distances: np.ndarray
    query_ids: list
    gallery_ids: list


def encode_split(
    model: IdeaModel,
    manifest: DatasetManifest,
    sample_ids: list,
    blank_modalities: frozenset = frozenset(),
    chunk: int = 32,
) -> np.ndarray:
    feats = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(sample_ids), chunk):
            ids = sample_ids[start: start + chunk]
            images, seqs, _ = load_batch(manifest, ids, model, blank_modalities)
            bundle = model(images, seqs)
            feats.append(bundle.retrieval_vector(model.variant).numpy())
    return np.concatenate(feats, axis=0)


def evaluate_model(
    model: IdeaModel,
    manifest: DatasetManifest,
    metric: str = "cosine",
    blank_modalities: frozenset = frozenset(),
    ranks: tuple = (1, 5, 10),
) -> EvalRun:
    """Cross-camera retrieval over the manifest's query/gallery splits."""
    query_ids = sorted(manifest.sample_ids("query"))
    gallery_ids = sorted(manifest.sample_ids("gallery"))
    q = encode_split(model, manifest, query_ids, blank_modalities)
    g = encode_split(model, manifest, gallery_ids, blank_modalities)
    dist = distance_matrix(q, g, metric)
    result = cmc_map(
        dist,
        np.array([manifest.by_id[s].identity for s in query_ids]),
        np.array([manifest.by_id[s].identity for s in gallery_ids]),
        np.array([manifest.by_id[s].camera for s in query_ids]),
        np.array([manifest.by_id[s].camera for s in gallery_ids]),
        ranks=ranks,
    )
    return EvalRun(result, dist, query_ids, gallery_ids)


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    final_loss: float
    eval_result: Optional[RetrievalResult] = None


def train(
    manifest: DatasetManifest,
    model_cfg: ModelConfig,
    loss_cfg: LossConfig,
    variant: str,
    seed: int,
    out_dir,
    batch_p: int = 4,
    batch_k: int = 4,
    eval_every: int = 0,
    eval_metric: str = "cosine",
    final_eval: bool = True,
) -> TrainResult:
    """Deterministic training run; writes checkpoint.bin and metrics.jsonl."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    loss_cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(seed)
    torch.set_num_threads(1)
    model = model_cfg.build(variant)
    train_identities = manifest.train_identities()
    label_of = {ident: i for i, ident in enumerate(train_identities)}
    heads = HeadBank(model_cfg.head_dims(variant), num_classes=len(train_identities))
    params = [p for p in model.parameters() if p.requires_grad]
    params += list(heads.parameters())
    opt = torch.optim.AdamW(
        params, lr=loss_cfg.lr_init, betas=(0.9, 0.999), weight_decay=loss_cfg.weight_decay
    )

    metrics_path = out / "metrics.jsonl"
    final_loss = float("nan")
    with open(metrics_path, "w", encoding="utf-8") as log:
        for epoch in range(loss_cfg.epochs):
            lr = cosine_lr(epoch, max(loss_cfg.epochs - 1, 1), loss_cfg.lr_init, loss_cfg.lr_final)
            for group in opt.param_groups:
                group["lr"] = lr
            model.train()
            heads.train()
            sums: dict = {}
            count = 0
            for sample_ids in pk_batches(manifest, batch_p, batch_k, seed * 1009 + epoch):
                images, seqs, identities = load_batch(manifest, sample_ids, model)
                labels = torch.tensor([label_of[int(i)] for i in identities], dtype=torch.long)
                bundle = model(images, seqs)
                total, report = objective(bundle, labels, heads, loss_cfg)
                opt.zero_grad()
                total.backward()
                opt.step()
                for key, value in report.items():
                    sums[key] = sums.get(key, 0.0) + value
                sums["total"] = sums.get("total", 0.0) + float(total.detach())
                count += 1
            terms = {k: v / count for k, v in sorted(sums.items())}
            final_loss = terms["total"]
            line = {"epoch": epoch, "lr": lr, "loss_terms": terms}
            if eval_every and (epoch + 1) % eval_every == 0:
                run = evaluate_model(model, manifest, eval_metric)
                line["eval"] = run.result.to_dict()
            log.write(json.dumps(line, sort_keys=True) + "\n")

    eval_result = None
    if final_eval:
        eval_result = evaluate_model(model, manifest, eval_metric).result

    checkpoint_path = save_model(
        out / "checkpoint.bin",
        model,
        heads,
        extra={"seed": seed, "subject_kind": manifest.subject_kind, "eval_metric": eval_metric},
    )
    return TrainResult(checkpoint_path, metrics_path, final_loss, eval_result)
