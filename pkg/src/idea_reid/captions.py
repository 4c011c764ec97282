"""Structured caption generation for multi-spectral ReID images.

Two-step pipeline: an MLLM writes a free description of one spectral image,
the description is reduced to a fixed attribute set, and the attributes are
poured back into a fixed sentence template. The refill step guarantees that
every caption in the system is template-shaped, so downstream parsing never
has to deal with free prose.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import time
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Optional

logger = logging.getLogger(__name__)

UNKNOWN = "unknown"


class Modality(Enum):
    """Spectral band of an image: visible, near infrared, thermal infrared."""

    RGB = "RGB"
    NIR = "NIR"
    TIR = "TIR"


MODALITIES = (Modality.RGB, Modality.NIR, Modality.TIR)


class UnparseableCaption(ValueError):
    """No attribute slot could be recovered from a sentence."""


class ClientError(RuntimeError):
    """An MLLM client failed after exhausting its retries."""


# ---------------------------------------------------------------------------
# Attribute records
# ---------------------------------------------------------------------------

PERSON_FIELDS = (
    "gender",
    "upper_color",
    "upper_garment",
    "lower_color",
    "lower_garment",
    "shoe_color",
    "shoes",
    "hairstyle",
    "hair_color",
    "age_group",
    "belongings",
)

VEHICLE_FIELDS = (
    "vehicle_type",
    "color",
    "plate",
    "logo",
    "window_sticker",
    "roof_rack",
)


@dataclass
class AttributeRecord:
    """Fixed attribute slots for one subject; absent values are "unknown"."""

    subject_kind: str = "person"
    gender: str = UNKNOWN
    upper_color: str = UNKNOWN
    upper_garment: str = UNKNOWN
    lower_color: str = UNKNOWN
    lower_garment: str = UNKNOWN
    shoe_color: str = UNKNOWN
    shoes: str = UNKNOWN
    hairstyle: str = UNKNOWN
    hair_color: str = UNKNOWN
    age_group: str = UNKNOWN
    belongings: str = UNKNOWN
    vehicle_type: str = UNKNOWN
    color: str = UNKNOWN
    plate: str = UNKNOWN
    logo: str = UNKNOWN
    window_sticker: str = UNKNOWN
    roof_rack: str = UNKNOWN

    def __post_init__(self):
        if self.subject_kind not in ("person", "vehicle"):
            raise ValueError(f"unknown subject kind: {self.subject_kind!r}")

    def slots(self) -> dict:
        """Return only the slots that belong to this subject kind."""
        names = PERSON_FIELDS if self.subject_kind == "person" else VEHICLE_FIELDS
        return {name: getattr(self, name) for name in names}

    def replace(self, **updates) -> "AttributeRecord":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(updates)
        return AttributeRecord(**values)

    @classmethod
    def all_unknown(cls, subject_kind: str) -> "AttributeRecord":
        return cls(subject_kind=subject_kind)

    @classmethod
    def from_slots(cls, subject_kind: str, slots: dict) -> "AttributeRecord":
        return cls(subject_kind=subject_kind, **slots)


@dataclass
class Caption:
    """One caption for one spectral image; char_length is derived from text."""

    text: str
    modality: Optional[Modality] = None
    char_length: int = field(init=False)

    def __post_init__(self):
        self.char_length = len(self.text)


# ---------------------------------------------------------------------------
# Prompt and template text
#
# The generation prompt is assembled from three parts: a modality-specific
# prefix, the generic annotation template and an anti-hallucination
# instruction. All strings are frozen; a golden-file test pins the bytes.
# ---------------------------------------------------------------------------

PERSON_GENERATE_PREFIX = (
    "Write a comprehensive description of the person's overall appearance "
    "based on the {modality} image, strictly following this template. "
    "Include the following attributes: 'upper garment', 'lower garment', "
    "'shoes', 'hairstyle', 'gender', 'age group' and 'belongings'. "
    "Use specific details, including color, patterns and texture details. "
    "Please follow this structure: "
)

PERSON_TEMPLATE = (
    "The {Gender} is wearing a {Upper_Color} {Upper_Garment} with "
    "{Lower_Color} {Lower_Garment} and {Shoe_Color} {Shoes}. The {Gender} "
    "has {Hairstyle} {Hair_Color} hair and appears to be {Age_Group}. "
    "The {Gender} is carrying {Belongings}."
)

ANTI_HALLUCINATION = (
    "If certain attributes are not visible, ignore them. Do not imagine "
    "contents not present in the image. Adhere strictly to the format "
    "without adding extra explanations."
)

PERSON_EXTRACT_PROMPT = (
    "Extract the key attributes from the sentence I give you and fill them "
    "into the following template: " + PERSON_TEMPLATE + " Strictly follow "
    "the template, do not add any extra information."
)

# Vehicle wording mirrors the person pipeline; the six slots are fixed here.
VEHICLE_GENERATE_PREFIX = (
    "Write a comprehensive description of the vehicle's overall appearance "
    "based on the {modality} image, strictly following this template. "
    "Include the following attributes: 'vehicle type', 'color', 'license "
    "plate', 'logo', 'window sticker' and 'roof rack'. "
    "Use specific details, including color, patterns and texture details. "
    "Please follow this structure: "
)

VEHICLE_TEMPLATE = (
    "The {Color} {Vehicle_Type} has a license plate reading {Plate} and "
    "displays a {Logo} logo. The windshield shows {Window_Sticker} and the "
    "roof is fitted with {Roof_Rack}."
)

VEHICLE_EXTRACT_PROMPT = (
    "Extract the key attributes from the sentence I give you and fill them "
    "into the following template: " + VEHICLE_TEMPLATE + " Strictly follow "
    "the template, do not add any extra information."
)


def build_prompt(modality: Modality, subject_kind: str, phase: str) -> str:
    """Return the full MLLM prompt for one modality, subject kind and phase.

    phase="generate" produces prefix + template + anti-hallucination
    instruction; phase="extract" returns the extraction prompt (which is
    modality-independent).
    """
    if phase == "extract":
        return PERSON_EXTRACT_PROMPT if subject_kind == "person" else VEHICLE_EXTRACT_PROMPT
    if phase != "generate":
        raise ValueError(f"unknown prompt phase: {phase!r}")
    prefix = PERSON_GENERATE_PREFIX if subject_kind == "person" else VEHICLE_GENERATE_PREFIX
    template = PERSON_TEMPLATE if subject_kind == "person" else VEHICLE_TEMPLATE
    return prefix.format(modality=modality.value) + template + " " + ANTI_HALLUCINATION


# ---------------------------------------------------------------------------
# Attribute vocabulary
#
# Closed word lists shared by the synthetic renderer, the deterministic mock
# client and the tokenizer. Values never contain the template's connective
# words, which keeps the anchored parser exact on pipeline-internal text.
# ---------------------------------------------------------------------------

COLOR_WORDS = (
    "black", "white", "gray", "red", "blue", "green", "yellow", "purple",
    "orange", "brown", "pink", "beige", "dark blue", "light gray",
)

GENDERS = ("man", "woman", "person")
UPPER_GARMENTS = ("t-shirt", "jacket", "sweater", "hoodie", "coat", "shirt", "vest", "blouse")
LOWER_GARMENTS = ("jeans", "trousers", "shorts", "skirt", "pants", "leggings")
SHOE_KINDS = ("sneakers", "boots", "sandals", "loafers", "shoes")
HAIRSTYLES = ("short", "long", "curly", "straight", "wavy", "buzzed", "shoulder length", "tied back")
AGE_GROUPS = ("a child", "a teenager", "a young adult", "middle-aged", "elderly")
BELONGINGS = ("a backpack", "a purse", "a shopping bag", "a suitcase", "an umbrella", "a laptop bag", "nothing")

VEHICLE_TYPES = ("sedan", "suv", "truck", "bus", "van", "hatchback", "pickup")
LOGOS = ("hyundai", "toyota", "ford", "bmw", "honda", "kia", "volvo")
WINDOW_STICKERS = ("an inspection sticker", "a parking permit", "a toll tag", "no sticker")
ROOF_RACKS = ("a cargo rack", "a ski rack", "rail bars", "no rack")

PERSON_VOCAB = {
    "gender": GENDERS,
    "upper_color": COLOR_WORDS,
    "upper_garment": UPPER_GARMENTS,
    "lower_color": COLOR_WORDS,
    "lower_garment": LOWER_GARMENTS,
    "shoe_color": COLOR_WORDS,
    "shoes": SHOE_KINDS,
    "hairstyle": HAIRSTYLES,
    "hair_color": COLOR_WORDS,
    "age_group": AGE_GROUPS,
    "belongings": BELONGINGS,
}

VEHICLE_VOCAB = {
    "vehicle_type": VEHICLE_TYPES,
    "color": COLOR_WORDS,
    "plate": (),  # free-form; generated as letters+digits
    "logo": LOGOS,
    "window_sticker": WINDOW_STICKERS,
    "roof_rack": ROOF_RACKS,
}

# Longest first so multi-word colors win the prefix/suffix match.
_COLORS_BY_LENGTH = sorted(COLOR_WORDS + (UNKNOWN,), key=lambda c: -len(c.split()))


def fill_template(attrs: AttributeRecord, modality: Optional[Modality] = None) -> Caption:
    """Substitute every slot of the subject template; "unknown" stays literal."""
    if attrs.subject_kind == "person":
        text = PERSON_TEMPLATE.format(
            Gender=attrs.gender,
            Upper_Color=attrs.upper_color,
            Upper_Garment=attrs.upper_garment,
            Lower_Color=attrs.lower_color,
            Lower_Garment=attrs.lower_garment,
            Shoe_Color=attrs.shoe_color,
            Shoes=attrs.shoes,
            Hairstyle=attrs.hairstyle,
            Hair_Color=attrs.hair_color,
            Age_Group=attrs.age_group,
            Belongings=attrs.belongings,
        )
    else:
        text = VEHICLE_TEMPLATE.format(
            Color=attrs.color,
            Vehicle_Type=attrs.vehicle_type,
            Plate=attrs.plate,
            Logo=attrs.logo,
            Window_Sticker=attrs.window_sticker,
            Roof_Rack=attrs.roof_rack,
        )
    return Caption(text=text, modality=modality)


# ---------------------------------------------------------------------------
# Pattern-based extraction
#
# Anchored on the fixed connective words of the templates. The refill step
# guarantees these anchors exist in pipeline-internal text, so the parser is
# exact there; on free prose it recovers whatever clauses it can find.
# ---------------------------------------------------------------------------

_CLAUSE_END = r"(?=[.;,]|$)"

_P_GENDER = re.compile(r"\bthe\s+([\w' -]+?)\s+is\s+wearing\b", re.IGNORECASE)
_P_WEARING = re.compile(
    r"\bis\s+wearing\s+an?\s+(.+?)\s+with\s+(.+?)\s+and\s+(.+?)" + _CLAUSE_END,
    re.IGNORECASE,
)
_P_HAIR = re.compile(r"\bhas\s+(.+?)\s+hair\b", re.IGNORECASE)
_P_AGE = re.compile(r"\bappears\s+to\s+be\s+(.+?)" + _CLAUSE_END, re.IGNORECASE)
_P_CARRY = re.compile(r"\bis\s+carrying\s+(.+?)" + _CLAUSE_END, re.IGNORECASE)

_V_COLOR_TYPE = re.compile(r"\bthe\s+(.+?)\s+has\s+a\s+license\b", re.IGNORECASE)
_V_PLATE = re.compile(
    r"\blicense\s+plate(?:\s+number)?\s+(?:reading\s+|reads\s+|of\s+)?['\"]?([\w-]+)",
    re.IGNORECASE,
)
_V_LOGO = re.compile(
    r"\b(?:a|an|the)\s+((?:[\w-]+\s+){0,2}?[\w-]+)\s+logo\b", re.IGNORECASE
)
_V_STICKER = re.compile(
    r"\bwindshield\s+(?:shows|displays|has)\s+(.+?)(?=\s+and\s+the\s+roof|[.;,]|$)",
    re.IGNORECASE,
)
_V_RACK = re.compile(r"\broof\s+is\s+(?:fitted|equipped)\s+with\s+(.+?)" + _CLAUSE_END, re.IGNORECASE)


def _split_color_prefix(phrase: str) -> tuple[str, str]:
    """Split "white t-shirt" into ("white", "t-shirt") using the color lexicon."""
    words = phrase.split()
    for color in _COLORS_BY_LENGTH:
        cw = color.split()
        if len(words) > len(cw) and words[: len(cw)] == cw:
            return color, " ".join(words[len(cw):])
        if words == cw:
            return color, UNKNOWN
    return UNKNOWN, phrase


def _split_color_suffix(phrase: str) -> tuple[str, str]:
    """Split "short black" into ("short", "black"); color taken from the end."""
    words = phrase.split()
    for color in _COLORS_BY_LENGTH:
        cw = color.split()
        if len(words) > len(cw) and words[-len(cw):] == cw:
            return " ".join(words[: -len(cw)]), color
        if words == cw:
            return UNKNOWN, color
    return phrase, UNKNOWN


def _parse_person(text: str) -> tuple[dict, int]:
    slots = {name: UNKNOWN for name in PERSON_FIELDS}
    hits = 0
    m = _P_GENDER.search(text)
    if m:
        slots["gender"] = m.group(1).strip()
        hits += 1
    m = _P_WEARING.search(text)
    if m:
        slots["upper_color"], slots["upper_garment"] = _split_color_prefix(m.group(1).strip())
        slots["lower_color"], slots["lower_garment"] = _split_color_prefix(m.group(2).strip())
        slots["shoe_color"], slots["shoes"] = _split_color_prefix(m.group(3).strip())
        hits += 1
    m = _P_HAIR.search(text)
    if m:
        slots["hairstyle"], slots["hair_color"] = _split_color_suffix(m.group(1).strip())
        hits += 1
    m = _P_AGE.search(text)
    if m:
        slots["age_group"] = m.group(1).strip()
        hits += 1
    m = _P_CARRY.search(text)
    if m:
        slots["belongings"] = m.group(1).strip()
        hits += 1
    return slots, hits


def _parse_vehicle(text: str) -> tuple[dict, int]:
    slots = {name: UNKNOWN for name in VEHICLE_FIELDS}
    hits = 0
    m = _V_COLOR_TYPE.search(text)
    if m:
        slots["color"], slots["vehicle_type"] = _split_color_prefix(m.group(1).strip())
        hits += 1
    m = _V_PLATE.search(text)
    if m:
        slots["plate"] = m.group(1).strip()
        hits += 1
    m = _V_LOGO.search(text)
    if m:
        slots["logo"] = m.group(1).strip()
        hits += 1
    m = _V_STICKER.search(text)
    if m:
        slots["window_sticker"] = m.group(1).strip()
        hits += 1
    m = _V_RACK.search(text)
    if m:
        slots["roof_rack"] = m.group(1).strip()
        hits += 1
    return slots, hits


def extract_attributes(
    text: str,
    subject_kind: str,
    client: Optional["MLLMClient"] = None,
) -> AttributeRecord:
    """Recover the attribute record from a sentence.

    Without a client this is the deterministic anchored parser. With a
    client, the sentence is sent through the extraction prompt first and the
    response (expected to be template-shaped) is parsed. Slots that cannot
    be recovered become "unknown"; only a zero-slot result raises.
    """
    if not text:
        raise UnparseableCaption("empty caption text")
    if client is not None:
        prompt = build_prompt(Modality.RGB, subject_kind, "extract")
        text = _send_with_retry(client, prompt + "\n" + text, None)
        if not text:
            raise UnparseableCaption("client returned empty extraction")
    parse = _parse_person if subject_kind == "person" else _parse_vehicle
    slots, hits = parse(text)
    if hits == 0:
        raise UnparseableCaption(f"no attribute slot matched in: {text!r}")
    return AttributeRecord.from_slots(subject_kind, slots)


# ---------------------------------------------------------------------------
# MLLM clients
# ---------------------------------------------------------------------------


class MLLMClient:
    """Interface for caption-generation backends.

    Implementations must be safe for concurrent send() calls or document
    single-flight behaviour. Retry policy lives in the pipeline helpers and
    reads max_retries/backoff_base from the client.
    """

    max_retries: int = 3
    backoff_base: float = 1.0

    def send(self, prompt: str, image_ref) -> str:
        raise NotImplementedError


def _send_with_retry(client: MLLMClient, prompt: str, image_ref) -> str:
    retries = max(1, int(getattr(client, "max_retries", 1)))
    backoff = float(getattr(client, "backoff_base", 0.0))
    last: Optional[Exception] = None
    for attempt in range(retries):
        try:
            return client.send(prompt, image_ref)
        except ClientError as exc:
            last = exc
            if attempt + 1 < retries and backoff > 0:
                time.sleep(backoff * (2 ** attempt))
    raise ClientError(f"send failed after {retries} attempts: {last}")


class MockMLLMClient(MLLMClient):
    """Deterministic offline stand-in for the captioning service.

    Generation responses are derived from a hash of the image reference, so
    the same (prompt, image_ref) pair always yields the same text. With
    verbose=True the generated description is wrapped in extra prose, which
    exercises the extraction step's ability to find the template clauses.
    """

    def __init__(self, verbose: bool = False):
        self.verbose = verbose
        self.max_retries = 3
        self.backoff_base = 0.0

    def send(self, prompt: str, image_ref) -> str:
        if prompt.startswith("Extract the key attributes"):
            return self._extract(prompt)
        return self._generate(prompt, image_ref)

    def _pick(self, digest: bytes, index: int, options) -> str:
        return options[digest[index % len(digest)] % len(options)]

    def _generate(self, prompt: str, image_ref) -> str:
        digest = hashlib.sha256(repr(image_ref).encode("utf-8")).digest()
        if "vehicle" in prompt.split("overall appearance")[0]:
            plate = "".join(
                "ABCDEFGHJKLMNPQRSTUVWXYZ"[digest[8 + i] % 24] for i in range(3)
            ) + "".join(str(digest[11 + i] % 10) for i in range(3))
            attrs = AttributeRecord(
                subject_kind="vehicle",
                color=self._pick(digest, 0, COLOR_WORDS),
                vehicle_type=self._pick(digest, 1, VEHICLE_TYPES),
                plate=plate,
                logo=self._pick(digest, 2, LOGOS),
                window_sticker=self._pick(digest, 3, WINDOW_STICKERS),
                roof_rack=self._pick(digest, 4, ROOF_RACKS),
            )
        else:
            attrs = AttributeRecord(
                subject_kind="person",
                gender=self._pick(digest, 0, GENDERS),
                upper_color=self._pick(digest, 1, COLOR_WORDS),
                upper_garment=self._pick(digest, 2, UPPER_GARMENTS),
                lower_color=self._pick(digest, 3, COLOR_WORDS),
                lower_garment=self._pick(digest, 4, LOWER_GARMENTS),
                shoe_color=self._pick(digest, 5, COLOR_WORDS),
                shoes=self._pick(digest, 6, SHOE_KINDS),
                hairstyle=self._pick(digest, 7, HAIRSTYLES),
                hair_color=self._pick(digest, 8, COLOR_WORDS),
                age_group=self._pick(digest, 9, AGE_GROUPS),
                belongings=self._pick(digest, 10, BELONGINGS),
            )
        body = fill_template(attrs).text
        if not self.verbose:
            return body
        openers = (
            "Here is what can be seen in this image.",
            "Looking closely at the frame, several details stand out.",
            "The following observations were made.",
        )
        closers = (
            "The background is plain and carries no further information.",
            "Lighting conditions make some regions harder to judge.",
            "No other objects of interest are visible.",
        )
        return " ".join(
            (self._pick(digest, 12, openers), body, self._pick(digest, 13, closers))
        )

    def _extract(self, prompt: str) -> str:
        head, _, sentence = prompt.partition("\n")
        kind = "vehicle" if "license plate" in head else "person"
        try:
            attrs = extract_attributes(sentence, kind, client=None)
        except UnparseableCaption:
            return sentence
        return fill_template(attrs).text


class HttpMLLMClient(MLLMClient):
    """Minimal HTTP backend: POSTs {prompt, image_ref}, expects {"text": ...}.

    The credential is read from the IDEA_MLLM_KEY environment variable;
    vendor-specific payload shapes are out of scope.
    """

    def __init__(
        self,
        endpoint: str,
        timeout: float = 30.0,
        max_retries: int = 3,
        backoff_base: float = 1.0,
        session=None,
    ):
        if session is None:
            import requests

            session = requests.Session()
        self.endpoint = endpoint
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.session = session
        self.credential = os.environ.get("IDEA_MLLM_KEY", "")

    def send(self, prompt: str, image_ref) -> str:
        payload = {"prompt": prompt, "image_ref": None if image_ref is None else str(image_ref)}
        headers = {"Authorization": f"Bearer {self.credential}"}
        try:
            resp = self.session.post(
                self.endpoint, json=payload, headers=headers, timeout=self.timeout
            )
        except Exception as exc:
            raise ClientError(f"transport failure: {exc}") from exc
        if getattr(resp, "status_code", 500) != 200:
            raise ClientError(f"endpoint returned status {resp.status_code}")
        try:
            return resp.json()["text"]
        except Exception as exc:
            raise ClientError(f"malformed response body: {exc}") from exc


def annotate_image(
    image_ref,
    modality: Modality,
    subject_kind: str,
    client: MLLMClient,
) -> Caption:
    """Run generate -> extract -> refill for one image.

    The output is always template-shaped. If the extraction step cannot
    recover a single slot, the caption degrades to all-"unknown" slots and a
    warning is logged; client failures propagate after the retry budget.
    """
    description = _send_with_retry(
        client, build_prompt(modality, subject_kind, "generate"), image_ref
    )
    try:
        attrs = extract_attributes(description, subject_kind, client=client)
    except UnparseableCaption:
        logger.warning(
            "unparseable description for %r (%s); caption degraded to unknown slots",
            image_ref,
            modality.value,
        )
        attrs = AttributeRecord.all_unknown(subject_kind)
    return fill_template(attrs, modality)


def caption_record(sample_id: str, caption: Caption, attrs: AttributeRecord) -> str:
    """Serialize one caption to the on-disk JSON line format."""
    payload = {
        "sample_id": sample_id,
        "modality": caption.modality.value if caption.modality else None,
        "text": caption.text,
        "attributes": dict(sorted(attrs.slots().items())),
    }
    return json.dumps(payload, sort_keys=True, ensure_ascii=False)


def parse_caption_record(line: str) -> tuple[str, Caption, dict]:
    payload = json.loads(line)
    modality = Modality(payload["modality"]) if payload["modality"] else None
    return payload["sample_id"], Caption(payload["text"], modality), payload["attributes"]
