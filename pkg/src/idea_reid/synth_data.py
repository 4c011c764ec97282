"""Synthetic multi-spectral ReID data with genuine identity signal.

Each identity owns a latent attribute record. Images are flat-color glyph
renderings of that record (full color in RGB, luminance in NIR, heat
silhouette in TIR) plus camera jitter and configured corruptions; captions
come from the same record through per-modality visibility masking. The
directory layout mirrors common multi-modal ReID datasets so a real dataset
can be dropped in.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image

from .captions import (
    AttributeRecord,
    Caption,
    MODALITIES,
    Modality,
    PERSON_VOCAB,
    UNKNOWN,
    VEHICLE_VOCAB,
    caption_record,
    fill_template,
    parse_caption_record,
)


class InsufficientIdentities(ValueError):
    """Fewer train identities than the requested batch needs."""


COLOR_RGB = {
    "black": (0.05, 0.05, 0.05),
    "white": (0.95, 0.95, 0.95),
    "gray": (0.50, 0.50, 0.50),
    "red": (0.85, 0.10, 0.10),
    "blue": (0.10, 0.20, 0.85),
    "green": (0.10, 0.70, 0.20),
    "yellow": (0.90, 0.85, 0.10),
    "purple": (0.55, 0.15, 0.70),
    "orange": (0.95, 0.55, 0.10),
    "brown": (0.55, 0.35, 0.15),
    "pink": (0.95, 0.60, 0.75),
    "beige": (0.90, 0.85, 0.70),
    "dark blue": (0.05, 0.10, 0.45),
    "light gray": (0.75, 0.75, 0.75),
}

# Slots whose value can be read off each spectrum before any corruption.
PERSON_VISIBILITY = {
    Modality.RGB: set(PERSON_VOCAB),
    Modality.NIR: set(PERSON_VOCAB) - {"upper_color", "lower_color", "shoe_color", "hair_color"},
    Modality.TIR: {"gender", "hairstyle", "age_group", "belongings"},
}
VEHICLE_VISIBILITY = {
    Modality.RGB: set(VEHICLE_VOCAB),
    Modality.NIR: {"vehicle_type", "logo", "roof_rack"},
    Modality.TIR: {"vehicle_type", "logo"},
}


@dataclass
class SynthConfig:
    """Knobs for the generator; every count is >= 1, rates are in [0, 1]."""

    num_identities: int = 24
    samples_per_identity: int = 8
    num_cameras: int = 4
    image_size: tuple = (64, 32)
    subject_kind: str = "person"
    train_fraction: float = 0.5
    attribute_vocab_size: int = 0  # 0 = full vocabulary
    occlusion_rates: dict = field(
        default_factory=lambda: {Modality.RGB: 0.1, Modality.NIR: 0.2, Modality.TIR: 0.2}
    )
    noise_rates: dict = field(
        default_factory=lambda: {Modality.RGB: 0.3, Modality.NIR: 0.3, Modality.TIR: 0.3}
    )
    noise_sigma: float = 0.05
    seed: int = 0

    def validate(self):
        if min(self.num_identities, self.samples_per_identity, self.num_cameras) < 1:
            raise ValueError("identity/sample/camera counts must be >= 1")
        if min(self.image_size) < 8:
            raise ValueError("image size too small to render")
        for rates in (self.occlusion_rates, self.noise_rates):
            for m in MODALITIES:
                if not 0.0 <= float(rates[m]) <= 1.0:
                    raise ValueError("corruption rates must lie in [0, 1]")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")

    def vocab(self) -> dict:
        base = PERSON_VOCAB if self.subject_kind == "person" else VEHICLE_VOCAB
        if self.attribute_vocab_size <= 0:
            return base
        return {k: (v[: self.attribute_vocab_size] if v else v) for k, v in base.items()}


@dataclass
class SampleTriplet:
    """One observation: three spectral images plus three captions."""

    sample_id: str
    identity: int
    camera: int
    images: dict
    captions: dict

    def validate(self):
        assert set(self.images) == set(MODALITIES) and set(self.captions) == set(MODALITIES)
        shapes = {self.images[m].shape for m in MODALITIES}
        assert len(shapes) == 1, "modalities must share image dimensions"
        assert self.identity >= 0 and self.camera >= 0


@dataclass
class SampleEntry:
    sample_id: str
    identity: int
    camera: int
    split: str  # train | query | gallery


class DatasetManifest:
    """Index over a generated (or drop-in) dataset directory."""

    def __init__(self, root: Path, payload: dict):
        self.root = Path(root)
        self.subject_kind = payload["subject_kind"]
        self.image_size = tuple(payload["image_size"])
        self.num_identities = payload["num_identities"]
        self.config = payload.get("config", {})
        self.entries = [SampleEntry(**e) for e in payload["samples"]]
        self.by_id = {e.sample_id: e for e in self.entries}
        self._captions: Optional[dict] = None
        self._sample_cache: dict = {}
        self.captions_file = payload.get("captions_file", "captions.jsonl")
        train = {e.identity for e in self.entries if e.split == "train"}
        evald = {e.identity for e in self.entries if e.split != "train"}
        if train & evald:
            raise ValueError("train identities must be disjoint from evaluation identities")

    def sample_ids(self, split: str) -> list:
        return [e.sample_id for e in self.entries if e.split == split]

    def train_identities(self) -> list:
        return sorted({e.identity for e in self.entries if e.split == "train"})

    def _caption_index(self) -> dict:
        if self._captions is None:
            index = {}
            with open(self.root / self.captions_file, encoding="utf-8") as fh:
                for line in fh:
                    sample_id, caption, attrs = parse_caption_record(line)
                    index[(sample_id, caption.modality)] = (caption, attrs)
            self._captions = index
        return self._captions

    def image_path(self, entry: SampleEntry, modality: Modality) -> Path:
        ident = f"id{entry.identity:04d}"
        return self.root / entry.split / ident / f"{entry.sample_id}_{modality.value}.png"

    def load_sample(self, sample_id: str) -> SampleTriplet:
        """Load one triplet; cached, so treat the returned arrays as read-only."""
        cached = self._sample_cache.get(sample_id)
        if cached is not None:
            return cached
        entry = self.by_id[sample_id]
        images, caps = {}, {}
        for m in MODALITIES:
            arr = np.asarray(Image.open(self.image_path(entry, m)), dtype=np.float32) / 255.0
            images[m] = arr
            caps[m] = self._caption_index()[(sample_id, m)][0]
        triplet = SampleTriplet(sample_id, entry.identity, entry.camera, images, caps)
        triplet.validate()
        self._sample_cache[sample_id] = triplet
        return triplet

    def attributes(self, sample_id: str, modality: Modality) -> dict:
        return self._caption_index()[(sample_id, modality)][1]


def _draw_record(rng: np.random.Generator, kind: str, vocab: dict) -> AttributeRecord:
    slots = {}
    for name, values in vocab.items():
        if name == "plate":
            letters = "".join(rng.choice(list("ABCDEFGHJKLMNPQRSTUVWXYZ"), size=3))
            digits = "".join(str(d) for d in rng.integers(0, 10, size=3))
            slots[name] = letters + digits
        else:
            slots[name] = str(values[rng.integers(0, len(values))])
    return AttributeRecord.from_slots(kind, slots)


def _color(name: str) -> np.ndarray:
    return np.array(COLOR_RGB.get(name, (0.5, 0.5, 0.5)), dtype=np.float64)


def _render_base(record: AttributeRecord, identity: int, size: tuple) -> np.ndarray:
    """Flat-color glyph rendering of the latent record (RGB, pre-jitter)."""
    H, W = size
    img = np.full((H, W, 3), 0.82, dtype=np.float64)
    id_rng = np.random.default_rng(identity + 101)
    body_w = int(W * (0.45 + 0.25 * id_rng.random()))
    x0 = (W - body_w) // 2
    x1 = x0 + body_w

    if record.subject_kind == "person":
        bands = [
            (0.00, 0.18, _color(record.hair_color)),
            (0.18, 0.26, np.array([0.90, 0.75, 0.60])),
            (0.26, 0.55, _color(record.upper_color)),
            (0.55, 0.85, _color(record.lower_color)),
            (0.85, 1.00, _color(record.shoe_color)),
        ]
    else:
        bands = [
            (0.00, 0.20, np.array([0.30, 0.30, 0.35])),  # windows
            (0.20, 0.80, _color(record.color)),
            (0.80, 1.00, np.array([0.10, 0.10, 0.10])),  # wheels
        ]
    for top, bot, col in bands:
        img[int(top * H): int(bot * H), x0:x1] = col

    # Identity glyph: a small binary pattern stamped on the torso/body. This
    # is the local cue that survives color collisions between identities.
    glyph = id_rng.random((4, 4)) < 0.5
    gy0, gy1 = int(0.30 * H), int(0.52 * H)
    gx0 = x0 + max(1, body_w // 6)
    gx1 = x1 - max(1, body_w // 6)
    cell_h = max(1, (gy1 - gy0) // 4)
    cell_w = max(1, (gx1 - gx0) // 4)
    for r in range(4):
        for c in range(4):
            if glyph[r, c]:
                ys = slice(gy0 + r * cell_h, min(gy1, gy0 + (r + 1) * cell_h))
                xs = slice(gx0 + c * cell_w, min(gx1, gx0 + (c + 1) * cell_w))
                img[ys, xs] *= 0.45

    if record.subject_kind == "person" and record.belongings != "nothing":
        digest = sum(record.belongings.encode()) % len(COLOR_RGB)
        col = _color(list(COLOR_RGB)[digest])
        by0, by1 = int(0.40 * H), int(0.60 * H)
        img[by0:by1, max(0, x0 - max(2, W // 10)): x0] = col
    return img


def _modality_view(base: np.ndarray, modality: Modality, size: tuple) -> np.ndarray:
    if modality is Modality.RGB:
        return base.copy()
    if modality is Modality.NIR:
        lum = base @ np.array([0.35, 0.45, 0.20])
        return np.repeat(lum[:, :, None] ** 0.8, 3, axis=2)
    # TIR: warm silhouette against a cold background.
    lum = base @ np.array([1.0 / 3] * 3)
    body = np.abs(base - 0.82).max(axis=2) > 0.03
    heat = np.where(body, 0.75 + 0.2 * (1.0 - lum), 0.06)
    tir = np.stack([heat, heat * 0.55, 0.25 * (1.0 - heat)], axis=2)
    return tir


def _apply_camera(img: np.ndarray, camera: int, rng: np.random.Generator) -> np.ndarray:
    bright = 0.85 + 0.1 * (camera % 4) / 3.0 + 0.05 * rng.random()
    out = img * bright
    shift = int(rng.integers(-2, 3))
    out = np.roll(out, shift, axis=1)
    return out


def generate_dataset(cfg: SynthConfig, out_dir) -> DatasetManifest:
    """Render the full dataset to out_dir and return its manifest.

    Deterministic: the same config (seed included) produces byte-identical
    manifests, caption files and PNGs.
    """
    cfg.validate()
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    vocab = cfg.vocab()
    visibility = PERSON_VISIBILITY if cfg.subject_kind == "person" else VEHICLE_VISIBILITY

    n_train = max(1, int(round(cfg.num_identities * cfg.train_fraction)))
    if cfg.num_identities >= 2:
        n_train = min(n_train, cfg.num_identities - 1)
    records = {
        ident: _draw_record(np.random.default_rng([cfg.seed, 7, ident]), cfg.subject_kind, vocab)
        for ident in range(cfg.num_identities)
    }

    entries = []
    caption_lines = []
    for ident in range(cfg.num_identities):
        is_train = ident < n_train
        record = records[ident]
        samples = []
        for j in range(cfg.samples_per_identity):
            camera = (ident + j) % cfg.num_cameras
            samples.append((f"id{ident:04d}_s{j:02d}", j, camera))

        splits = {}
        if is_train:
            for sample_id, _, _ in samples:
                splits[sample_id] = "train"
        else:
            want = max(1, cfg.samples_per_identity // 4)
            chosen = []
            for sample_id, _, camera in samples:
                others = [c for s, _, c in samples if s != sample_id and s not in chosen]
                if len(chosen) < want and any(c != camera for c in others):
                    chosen.append(sample_id)
            for sample_id, _, _ in samples:
                splits[sample_id] = "query" if sample_id in chosen else "gallery"

        for sample_id, j, camera in samples:
            rng = np.random.default_rng([cfg.seed, ident, j])
            base = _render_base(record, ident, cfg.image_size)
            split = splits[sample_id]
            ident_dir = root / split / f"id{ident:04d}"
            ident_dir.mkdir(parents=True, exist_ok=True)
            for m in MODALITIES:
                img = _modality_view(base, m, cfg.image_size)
                img = _apply_camera(img, camera, rng)
                occluded = rng.random() < cfg.occlusion_rates[m]
                if rng.random() < cfg.noise_rates[m]:
                    img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
                if occluded:
                    H, W = cfg.image_size
                    oh = int(H * (0.25 + 0.25 * rng.random()))
                    oy = int(rng.integers(0, max(1, H - oh)))
                    img[oy: oy + oh, :] = 0.5
                img = np.clip(img, 0.0, 1.0)
                arr = np.round(img * 255.0).astype(np.uint8)
                Image.fromarray(arr).save(ident_dir / f"{sample_id}_{m.value}.png")

                visible = set(visibility[m])
                if occluded and visible:
                    names = sorted(visible)
                    drop = rng.random(len(names)) < 0.5
                    visible -= {n for n, d in zip(names, drop) if d}
                masked = {
                    name: (getattr(record, name) if name in visible else UNKNOWN)
                    for name in vocab
                }
                attrs = AttributeRecord.from_slots(cfg.subject_kind, masked)
                caption_lines.append(caption_record(sample_id, fill_template(attrs, m), attrs))
            entries.append(
                {"sample_id": sample_id, "identity": ident, "camera": camera, "split": split}
            )

    with open(root / "captions.jsonl", "w", encoding="utf-8") as fh:
        fh.write("\n".join(caption_lines) + "\n")

    payload = {
        "subject_kind": cfg.subject_kind,
        "image_size": list(cfg.image_size),
        "num_identities": cfg.num_identities,
        "captions_file": "captions.jsonl",
        "samples": sorted(entries, key=lambda e: e["sample_id"]),
        "config": _config_snapshot(cfg),
    }
    with open(root / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return DatasetManifest(root, payload)


def _config_snapshot(cfg: SynthConfig) -> dict:
    snap = asdict(cfg)
    snap["occlusion_rates"] = {m.value: cfg.occlusion_rates[m] for m in MODALITIES}
    snap["noise_rates"] = {m.value: cfg.noise_rates[m] for m in MODALITIES}
    snap["image_size"] = list(cfg.image_size)
    return snap


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    with open(root / "manifest.json", encoding="utf-8") as fh:
        return DatasetManifest(root, json.load(fh))


def pk_batches(
    manifest: DatasetManifest, P: int, K: int, seed: int
) -> Iterator[list]:
    """Yield identity-balanced batches of sample ids for one epoch.

    Every batch holds exactly P identities with K samples each (drawing with
    replacement when an identity has fewer than K samples); every train
    identity appears in at least one batch per epoch.
    """
    by_identity: dict = {}
    for e in manifest.entries:
        if e.split == "train":
            by_identity.setdefault(e.identity, []).append(e.sample_id)
    identities = sorted(by_identity)
    if len(identities) < P:
        raise InsufficientIdentities(
            f"need at least P={P} train identities, found {len(identities)}"
        )
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(identities))
    while order:
        chunk = order[:P]
        order = order[P:]
        if len(chunk) < P:
            extras = [i for i in identities if i not in chunk]
            fill = rng.choice(len(extras), size=P - len(chunk), replace=False)
            chunk = chunk + [extras[i] for i in fill]
        batch = []
        for ident in chunk:
            pool = sorted(by_identity[ident])
            if len(pool) >= K:
                picks = rng.choice(len(pool), size=K, replace=False)
            else:
                picks = rng.choice(len(pool), size=K, replace=True)
            batch.extend(pool[i] for i in picks)
        yield batch
