"""Whitespace/punctuation tokenizer over the closed caption vocabulary.

Captions are template-generated, so the word list is small and known at
build time. Words outside the vocabulary (e.g. license plates) fall back to
per-byte tokens, which keeps encoding total and deterministic.
"""

from __future__ import annotations

import re

from . import captions

PAD, SOT, EOT, PROMPT = "<pad>", "<sot>", "<eot>", "<prompt>"
SPECIALS = (PAD, SOT, EOT, PROMPT)

_TOKEN_RE = re.compile(r"[a-z0-9]+(?:[-'][a-z0-9]+)*|[^\sa-z0-9]")

# Fixed prefix sentences for the three spectra; the XXXX span is where the
# learnable tokens go.
PREFIX_TEXT = {
    captions.Modality.RGB: (
        "An image of a XXXX person in the visible spectrum, "
        "capturing natural colors and fine details: "
    ),
    captions.Modality.NIR: (
        "An image of a XXXX person in the near infrared spectrum, "
        "capturing contrasts and surface reflectance: "
    ),
    captions.Modality.TIR: (
        "An image of a XXXX person in the thermal infrared spectrum, "
        "capturing heat emissions as temperature gradients: "
    ),
}


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _known_strings() -> list[str]:
    scrub = re.compile(r"\{[^}]*\}")
    out = [scrub.sub(" ", captions.PERSON_TEMPLATE), scrub.sub(" ", captions.VEHICLE_TEMPLATE)]
    out.extend(t.replace("XXXX", " ") for t in PREFIX_TEXT.values())
    for vocab in (captions.PERSON_VOCAB, captions.VEHICLE_VOCAB):
        for values in vocab.values():
            out.extend(values)
    return out


class Vocabulary:
    """Fixed token inventory: specials, known words, then 256 byte tokens."""

    def __init__(self):
        words = set()
        for text in _known_strings():
            words.update(split_words(text))
        words.discard("xxxx")
        self.words = sorted(words)
        self.word_to_id = {w: i + len(SPECIALS) for i, w in enumerate(self.words)}
        self.byte_base = len(SPECIALS) + len(self.words)
        self.size = self.byte_base + 256

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def sot_id(self) -> int:
        return 1

    @property
    def eot_id(self) -> int:
        return 2

    @property
    def prompt_id(self) -> int:
        return 3

    def encode_word(self, word: str) -> list[int]:
        wid = self.word_to_id.get(word)
        if wid is not None:
            return [wid]
        return [self.byte_base + b for b in word.encode("utf-8")]

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for word in split_words(text):
            ids.extend(self.encode_word(word))
        return ids

    def decode(self, ids) -> str:
        parts = []
        byte_run: list[int] = []

        def flush():
            if byte_run:
                parts.append(bytes(byte_run).decode("utf-8", errors="replace"))
                byte_run.clear()

        for tid in ids:
            if tid >= self.byte_base:
                byte_run.append(tid - self.byte_base)
                continue
            flush()
            if tid < len(SPECIALS):
                parts.append(SPECIALS[tid])
            else:
                parts.append(self.words[tid - len(SPECIALS)])
        flush()
        return " ".join(parts)
