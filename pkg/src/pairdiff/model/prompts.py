"""Structured prompts and the frozen prompt encoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

VOCABULARY: dict[str, tuple[str, ...]] = {
    "target_label": ("liver", "kidney", "spleen", "tumor", "polyp"),
    "modality": ("ct", "mri", "ultrasound", "endoscopy"),
    "region": ("abdomen", "chest", "pelvis", "head"),
    "condition": ("healthy", "lesion", "enlarged", "cystic"),
}
FIELDS = tuple(VOCABULARY)
# prompt-string key for each field
STRING_KEYS = {"label": "target_label", "modality": "modality", "region": "region", "condition": "condition"}
STREAM_TAGS = ("image", "mask")
PROMPT_GRAMMAR = "label=<{}>,modality=<{}>,region=<{}>,condition=<{}>".format(
    *("|".join(VOCABULARY[f]) for f in FIELDS)
)
# slot 0 carries the stream tag, then one slot per prompt field
SEQ_LEN = 1 + len(FIELDS)


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class PromptSpec:
    target_label: str | None = None
    modality: str | None = None
    region: str | None = None
    condition: str | None = None

    def __post_init__(self):
        for f in FIELDS:
            tok = getattr(self, f)
            if tok is not None and tok not in VOCABULARY[f]:
                raise PromptError(
                    f"unknown {f} token {tok!r}; vocabulary: {', '.join(VOCABULARY[f])}"
                )

    @property
    def is_null(self) -> bool:
        return all(getattr(self, f) is None for f in FIELDS)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PromptSpec":
        unknown = set(d) - set(FIELDS)
        if unknown:
            raise PromptError(f"unknown prompt fields {sorted(unknown)}")
        return cls(**{f: d.get(f) for f in FIELDS})

    def to_string(self) -> str:
        parts = [f"{k}={getattr(self, f)}" for k, f in STRING_KEYS.items() if getattr(self, f) is not None]
        return ",".join(parts)

    @classmethod
    def parse(cls, text: str) -> "PromptSpec":
        """Parse ``label=...,modality=...,region=...,condition=...``; omitted keys are null."""
        values: dict[str, str] = {}
        text = text.strip()
        if text:
            for part in text.split(","):
                if "=" not in part:
                    raise PromptError(f"malformed prompt item {part!r}; grammar: {PROMPT_GRAMMAR}")
                key, val = (s.strip() for s in part.split("=", 1))
                if key not in STRING_KEYS:
                    raise PromptError(f"unknown prompt key {key!r}; grammar: {PROMPT_GRAMMAR}")
                if STRING_KEYS[key] in values:
                    raise PromptError(f"duplicate prompt key {key!r}")
                values[STRING_KEYS[key]] = val
        return cls(**values)


NULL_PROMPT = PromptSpec()


def all_prompts() -> list[PromptSpec]:
    """Every fully specified prompt in the vocabulary, in a fixed order."""
    from itertools import product
    return [PromptSpec(*combo) for combo in product(*(VOCABULARY[f] for f in FIELDS))]


def token_table_rows() -> dict[tuple[str, str | None], int]:
    """Row index of every token in the frozen embedding table.

    Rows: the two stream tags, then for each field a null token followed by
    the field's vocabulary.
    """
    rows: dict[tuple[str, str | None], int] = {}
    for tag in STREAM_TAGS:
        rows[("stream", tag)] = len(rows)
    for f in FIELDS:
        rows[(f, None)] = len(rows)
        for tok in VOCABULARY[f]:
            rows[(f, tok)] = len(rows)
    return rows


def init_token_table(dim: int, seed: int) -> np.ndarray:
    rows = token_table_rows()
    rng = np.random.default_rng(seed)
    return rng.standard_normal((len(rows), dim)).astype(np.float32)


def token_ids(p: PromptSpec, stream: str) -> list[int]:
    rows = token_table_rows()
    return [rows[("stream", stream)]] + [rows[(f, getattr(p, f))] for f in FIELDS]
