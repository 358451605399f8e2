"""Byte tokenizer, prompt templates, example rendering and dataset splits."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, InputError
from .numerics import seeded_rng

PAD, BOS, EOS = 0, 1, 2
BYTE_OFFSET = 3
VOCAB_SIZE = 256 + BYTE_OFFSET


class SentimentLabel(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    NEUTRAL = "neutral"

    @classmethod
    def parse(cls, value: str) -> "SentimentLabel":
        try:
            return cls(value)
        except ValueError:
            raise InputError(f"unknown sentiment label {value!r}") from None


LABELS: tuple[SentimentLabel, ...] = (SentimentLabel.POSITIVE, SentimentLabel.NEGATIVE, SentimentLabel.NEUTRAL)

QUESTIONS: tuple[str, ...] = (
    "Can you analyze this financial sentiment?",
    "Please evaluate the sentiment of the following text:",
    "Determine the sentiment of this financial statement.",
    "Assess whether this text is positive, negative, or neutral.",
    "Here is a financial text for sentiment analysis:",
    "Classify the sentiment of this passage:",
    "Identify the tone of the following financial text:",
    "Evaluate this statement for sentiment polarity.",
    "What is the sentiment of this financial report?",
    "Is this sentiment optimistic, pessimistic, or neutral?",
    "Analyze the sentiment of the following:",
    "Assess the mood of this financial description.",
    "What sentiment does this statement convey?",
    "Classify the financial sentiment in the text below.",
    "Analyze the sentiment expressed in this passage.",
)

PREFIXES: tuple[str, ...] = (
    "The sentiment of this text is:",
    "This passage conveys a sentiment of:",
    "Analyze and determine the sentiment as:",
    "The tone of the statement is:",
    "Classify the following text's sentiment as:",
    "The correct sentiment is:",
    "This statement reflects a sentiment of:",
    "The mood expressed in this text is:",
    "Determine the sentiment conveyed as:",
    "The following text exhibits a sentiment of:",
)


@dataclass(frozen=True)
class TemplateSet:
    questions: tuple[str, ...] = QUESTIONS
    prefixes: tuple[str, ...] = PREFIXES


TEMPLATES = TemplateSet()


def byte_tokenize(s: str) -> list[int]:
    return [BOS] + [b + BYTE_OFFSET for b in s.encode("utf-8")] + [EOS]


def detokenize(ids: Iterable[int]) -> str:
    """Inverse of :func:`byte_tokenize`; special tokens are dropped."""
    return bytes(i - BYTE_OFFSET for i in ids if i >= BYTE_OFFSET).decode("utf-8")


@dataclass(frozen=True)
class SftExample:
    source_text: str
    label: SentimentLabel
    q_idx: int
    p_idx: int
    prompt: str
    full: str
    answer_span: tuple[int, int]  # [start, end) into byte_tokenize(full)

    def token_ids(self) -> list[int]:
        return byte_tokenize(self.full)

    def to_json(self) -> dict:
        d = asdict(self)
        d["label"] = self.label.value
        d["answer_span"] = list(self.answer_span)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SftExample":
        return cls(
            source_text=d["source_text"],
            label=SentimentLabel.parse(d["label"]),
            q_idx=int(d["q_idx"]),
            p_idx=int(d["p_idx"]),
            prompt=d["prompt"],
            full=d["full"],
            answer_span=(int(d["answer_span"][0]), int(d["answer_span"][1])),
        )


def render_prompt(text: str, q_idx: int, p_idx: int, templates: TemplateSet = TEMPLATES) -> str:
    if not 0 <= q_idx < len(templates.questions):
        raise IndexError(f"question index {q_idx} out of range 0..{len(templates.questions) - 1}")
    if not 0 <= p_idx < len(templates.prefixes):
        raise IndexError(f"prefix index {p_idx} out of range 0..{len(templates.prefixes) - 1}")
    if not text:
        raise InputError("source text is empty")
    return f"{templates.questions[q_idx]}\n{text}\n{templates.prefixes[p_idx]}"


def render_example(text: str, label: SentimentLabel | str, q_idx: int, p_idx: int) -> SftExample:
    label = SentimentLabel.parse(label) if isinstance(label, str) else label
    prompt = render_prompt(text, q_idx, p_idx)
    full = f"{prompt} {label.value}"
    # +1 for BOS; the span ends before EOS
    start = 1 + len(prompt.encode("utf-8"))
    end = 1 + len(full.encode("utf-8"))
    return SftExample(text, label, q_idx, p_idx, prompt, full, (start, end))


@dataclass
class DatasetSplits:
    train: list[SftExample]
    validation: list[SftExample]
    test: list[SftExample]
    split_seed: int


POLICIES = ("round_robin", "seeded_random")


def build_dataset(
    corpus: Sequence[tuple[str, SentimentLabel | str]],
    policy: str = "round_robin",
    ratios: tuple[float, float] = (0.9, 0.1),
    test_count: int = 50,
    seed: int = 0,
) -> DatasetSplits:
    """Assign templates, shuffle and split into train / validation / test.

    The held-out fraction is carved into a test sample of ``test_count`` items
    and the remaining validation set; the three splits are disjoint.
    """
    if not corpus:
        raise InputError("corpus is empty")
    if len(ratios) != 2 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be two nonnegative numbers summing to 1, got {ratios}", "ratios")
    n_pairs = len(QUESTIONS) * len(PREFIXES)
    rng = seeded_rng(seed)

    if policy == "round_robin":
        pairs = [divmod(i % n_pairs, len(PREFIXES)) for i in range(len(corpus))]
    elif policy == "seeded_random":
        pairs = [(int(rng.integers(len(QUESTIONS))), int(rng.integers(len(PREFIXES)))) for _ in corpus]
    else:
        raise ConfigError(f"unknown template policy {policy!r}", "policy")

    examples = [render_example(text, label, q, p) for (text, label), (q, p) in zip(corpus, pairs)]
    order = rng.permutation(len(examples))
    n_train = int(round(ratios[0] * len(examples)))
    held = [examples[i] for i in order[n_train:]]
    if test_count > len(held):
        raise ConfigError(f"test_count {test_count} exceeds the {len(held)} held-out examples", "test_count")
    test_idx = set(rng.choice(len(held), size=test_count, replace=False).tolist())
    return DatasetSplits(
        train=[examples[i] for i in order[:n_train]],
        validation=[e for i, e in enumerate(held) if i not in test_idx],
        test=[e for i, e in enumerate(held) if i in test_idx],
        split_seed=seed,
    )


_COMPANIES = [
    "Acme Corp", "Nordic Steel", "Helix Pharma", "Bluewater Bank", "Orion Motors",
    "Vertex Retail", "Summit Energy", "Pioneer Foods", "Atlas Telecom", "Crescent Mining",
]
_PHRASES = {
    SentimentLabel.POSITIVE: [
        "profit surged", "sales beat forecasts", "shares rallied", "revenue jumped",
        "margins improved", "earnings rose sharply", "raised its outlook",
    ],
    SentimentLabel.NEGATIVE: [
        "profit collapsed", "sales missed forecasts", "shares plunged", "revenue slumped",
        "cut its outlook", "posted a heavy loss", "warned of layoffs",
    ],
    SentimentLabel.NEUTRAL: [
        "held its annual meeting", "named a new auditor", "moved its head office",
        "published its report", "kept its dividend unchanged", "listed new bonds",
        "scheduled a conference call",
    ],
}
_WHEN = ["in the third quarter", "this year", "last month", "on Tuesday", "in 2024"]


def synth_corpus(n: int, seed: int = 0) -> list[tuple[str, SentimentLabel]]:
    """Headline-like sentences whose label is carried by obvious vocabulary.

    Labels cycle positive/negative/neutral before shuffling, so class counts
    differ by at most one.
    """
    if n < 3:
        raise InputError("synthetic corpus needs at least 3 items")
    rng = seeded_rng(seed)
    out = []
    for i in range(n):
        label = LABELS[i % 3]
        company = _COMPANIES[int(rng.integers(len(_COMPANIES)))]
        phrase = _PHRASES[label][int(rng.integers(len(_PHRASES[label])))]
        when = _WHEN[int(rng.integers(len(_WHEN)))]
        out.append((f"{company} {phrase} {when}.", label))
    order = rng.permutation(n)
    return [out[i] for i in order]


def load_corpus(path: str | Path) -> list[tuple[str, SentimentLabel]]:
    """Read a JSON-lines corpus of ``{"text": ..., "label": ...}`` objects."""
    items = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            text, label = obj.get("text"), obj.get("label")
            if not isinstance(text, str) or not text:
                raise InputError(f"{path}:{lineno}: missing or empty 'text'")
            if label not in {lab.value for lab in LABELS}:
                raise InputError(f"{path}:{lineno}: bad label {label!r}")
            items.append((text, SentimentLabel(label)))
    return items


def save_corpus(corpus: Sequence[tuple[str, SentimentLabel]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for text, label in corpus:
            fh.write(json.dumps({"text": text, "label": SentimentLabel(label).value}) + "\n")


def save_examples(examples: Sequence[SftExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_json(), ensure_ascii=False) + "\n")


def load_examples(path: str | Path) -> list[SftExample]:
    with open(path, encoding="utf-8") as fh:
        return [SftExample.from_json(json.loads(line)) for line in fh if line.strip()]


def answer_mask_positions(example: SftExample) -> np.ndarray:
    """Positions whose next-token target lies inside the answer span."""
    start, end = example.answer_span
    return np.arange(start - 1, end - 1)
