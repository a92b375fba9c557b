"""Deterministic corpus segmentation, anchor extraction and rule-based fact typing.

Everything in this module is a pure function of its inputs plus the versioned
lexicon files shipped under ``fedmem/data``. There is no statistical NER: the
anchor and typing rules are an explicit, diffable stand-in for "salient span"
extraction, chosen so that the whole downstream pipeline is reproducible
without any model dependency.
"""

from __future__ import annotations

import json
import re
import unicodedata
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

FACT_TYPES = ("PERSON", "ORG", "LOC", "DATE", "NUMBER", "TERM")

# Order in which typing rules are applied; also the preference order used when
# a bounded number of facts must be selected downstream.
_TYPE_PRIORITY = {t: i for i, t in enumerate(FACT_TYPES)}

_PUNCT = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~«»“”‘’—–…"
_NUMERIC_RE = re.compile(r"^\d[\d.,:/\-]*$")
_YEAR_RE = re.compile(r"^[12]\d{3}$")


class CorpusError(ValueError):
    pass


def _load_lexicon(name: str) -> frozenset[str]:
    text = resources.files("fedmem.data").joinpath(name).read_text(encoding="utf-8")
    return frozenset(line.strip() for line in text.splitlines() if line.strip())


@lru_cache(maxsize=None)
def stopwords() -> frozenset[str]:
    return _load_lexicon("stopwords.txt")


@lru_cache(maxsize=None)
def abbreviations() -> frozenset[str]:
    return _load_lexicon("abbreviations.txt")


@lru_cache(maxsize=None)
def honorifics() -> frozenset[str]:
    return _load_lexicon("honorifics.txt")


@lru_cache(maxsize=None)
def org_suffixes() -> frozenset[str]:
    return _load_lexicon("org_suffixes.txt")


@lru_cache(maxsize=None)
def month_names() -> frozenset[str]:
    return _load_lexicon("months.txt")


@lru_cache(maxsize=8)
def _gazetteer_from(path: str | None) -> frozenset[str]:
    if path is None:
        return _load_lexicon("gazetteer.txt")
    return frozenset(
        line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()
    )


def normalize(text: str) -> str:
    """Canonical form used everywhere spans are compared.

    NFC, lowercase, per-token strip of leading/trailing punctuation, whitespace
    collapsed to single spaces.
    """
    text = unicodedata.normalize("NFC", text).lower()
    tokens = [tok.strip(_PUNCT) for tok in text.split()]
    return " ".join(tok for tok in tokens if tok)


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str
    client_hint: str | None = None


@dataclass(frozen=True)
class TextUnit:
    unit_id: str
    granularity: str  # "paragraph" | "sentence"
    text: str
    doc_id: str
    position: int
    char_start: int
    char_end: int


@dataclass(frozen=True)
class TypedFact:
    span: str
    fact_type: str
    source_unit_id: str


@dataclass(frozen=True)
class AnchorSet:
    anchors: frozenset[str] = field(default_factory=frozenset)

    def __iter__(self):
        return iter(self.anchors)

    def __len__(self) -> int:
        return len(self.anchors)

    def __contains__(self, item: str) -> bool:
        return item in self.anchors

    def sorted(self) -> list[str]:
        return sorted(self.anchors)


_BLANK_RUN_RE = re.compile(r"\n(?:[ \t]*\n)+")
_SENT_BOUNDARY_RE = re.compile(r"[.!?]+(?=\s)")


def _paragraph_spans(text: str) -> list[tuple[int, int]]:
    spans = []
    cursor = 0
    for m in _BLANK_RUN_RE.finditer(text):
        spans.append((cursor, m.start()))
        cursor = m.end()
    spans.append((cursor, len(text)))
    trimmed = []
    for start, end in spans:
        seg = text[start:end]
        lead = len(seg) - len(seg.lstrip())
        tail = len(seg) - len(seg.rstrip())
        if seg.strip():
            trimmed.append((start + lead, end - tail))
    return trimmed


def _token_before(text: str, idx: int) -> str:
    # Maximal non-whitespace run ending at idx (inclusive), e.g. "U.S." as one token.
    start = idx
    while start > 0 and not text[start - 1].isspace():
        start -= 1
    return text[start : idx + 1]


def _sentence_spans(text: str, offset: int) -> list[tuple[int, int]]:
    guards = abbreviations()
    cuts = []
    for m in _SENT_BOUNDARY_RE.finditer(text):
        after = m.end()
        while after < len(text) and text[after].isspace():
            after += 1
        if after >= len(text):
            continue
        if not (text[after].isupper() or text[after].isdigit()):
            continue
        if _token_before(text, m.end() - 1).lower() in guards:
            continue
        cuts.append((m.end(), after))
    spans = []
    start = 0
    for cut_end, next_start in cuts:
        spans.append((start, cut_end))
        start = next_start
    spans.append((start, len(text)))
    out = []
    for s, e in spans:
        seg = text[s:e]
        lead = len(seg) - len(seg.lstrip())
        tail = len(seg) - len(seg.rstrip())
        if seg.strip():
            out.append((offset + s + lead, offset + e - tail))
    return out


def segment(docs: list[Document]) -> tuple[list[TextUnit], list[TextUnit]]:
    """Split documents into paragraph and sentence units with absolute spans.

    Paragraphs are separated by runs of one or more blank lines. Sentences are
    split on terminal punctuation followed by whitespace and an uppercase
    letter or digit, with the abbreviation guard list suppressing false cuts.
    """
    if not docs:
        raise CorpusError("no documents supplied")
    seen: set[str] = set()
    paragraphs: list[TextUnit] = []
    sentences: list[TextUnit] = []
    for doc in docs:
        if doc.doc_id in seen:
            raise CorpusError(f"duplicate doc_id: {doc.doc_id}")
        seen.add(doc.doc_id)
        if not doc.text.strip():
            raise CorpusError(f"empty document after trim: {doc.doc_id}")
        p_pos = 0
        s_pos = 0
        for p_start, p_end in _paragraph_spans(doc.text):
            paragraphs.append(
                TextUnit(
                    unit_id=f"{doc.doc_id}/p{p_pos}",
                    granularity="paragraph",
                    text=doc.text[p_start:p_end],
                    doc_id=doc.doc_id,
                    position=p_pos,
                    char_start=p_start,
                    char_end=p_end,
                )
            )
            for s_start, s_end in _sentence_spans(doc.text[p_start:p_end], p_start):
                sentences.append(
                    TextUnit(
                        unit_id=f"{doc.doc_id}/s{s_pos}",
                        granularity="sentence",
                        text=doc.text[s_start:s_end],
                        doc_id=doc.doc_id,
                        position=s_pos,
                        char_start=s_start,
                        char_end=s_end,
                    )
                )
                s_pos += 1
            p_pos += 1
    return paragraphs, sentences


def _tokens_with_flags(text: str) -> list[tuple[str, bool, bool]]:
    """(core, capitalized, sentence_start) per whitespace token, punctuation-stripped."""
    guards = abbreviations()
    raw_tokens = text.split()
    out = []
    prev_raw = None
    for raw in raw_tokens:
        core = raw.strip(_PUNCT)
        if prev_raw is None:
            at_start = True
        else:
            ends_sentence = prev_raw.rstrip("\"')]}»”’")[-1:] in {".", "!", "?"}
            at_start = ends_sentence and prev_raw.lower().strip("\"')]}»”’") not in guards
        cap = bool(core) and core[0].isupper()
        out.append((core, cap, at_start))
        prev_raw = raw
    return out


def extract_anchors(text: str) -> AnchorSet:
    """Salient-span extraction: capitalized runs, numeric tokens, long content words.

    The rule set is a deterministic stand-in for NER-grade "salience" and is
    documented as such; see README.
    """
    if not text or not text.strip():
        return AnchorSet()
    stops = stopwords()
    tokens = _tokens_with_flags(text)
    anchors: set[str] = set()
    in_run = [False] * len(tokens)

    i = 0
    while i < len(tokens):
        core, cap, at_start = tokens[i]
        if cap and core:
            j = i
            # Runs never extend across a sentence boundary.
            while (j + 1 < len(tokens) and tokens[j + 1][1] and tokens[j + 1][0]
                   and not tokens[j + 1][2]):
                j += 1
            run_len = j - i + 1
            if run_len >= 2 or not at_start:
                parts = [tokens[k][0] for k in range(i, j + 1)]
                # Drop leading/trailing determiner-ish tokens glued into the run
                # by sentence-initial capitalization.
                while parts and parts[0].lower() in stops:
                    parts = parts[1:]
                while parts and parts[-1].lower() in stops:
                    parts = parts[:-1]
                if parts:
                    anchors.add(normalize(" ".join(parts)))
                    for k in range(i, j + 1):
                        in_run[k] = True
            i = j + 1
        else:
            i += 1

    for idx, (core, _cap, _s) in enumerate(tokens):
        if in_run[idx] or not core:
            continue
        norm = normalize(core)
        if not norm:
            continue
        if _NUMERIC_RE.match(norm):
            anchors.add(norm)
        elif len(norm) >= 4 and norm not in stops:
            anchors.add(norm)
    anchors.discard("")
    return AnchorSet(frozenset(anchors))


def classify_span(span: str, gazetteer_path: str | None = None) -> str:
    """Type a normalized span with the fixed rule cascade."""
    tokens = span.split()
    if len(tokens) >= 2 and (tokens[0] in honorifics() or tokens[-1] in honorifics()):
        return "PERSON"
    if tokens and tokens[-1] in org_suffixes():
        return "ORG"
    if span in _gazetteer_from(gazetteer_path):
        return "LOC"
    if any(_YEAR_RE.match(t) for t in tokens) or any(t in month_names() for t in tokens):
        return "DATE"
    if all(_NUMERIC_RE.match(t) for t in tokens):
        return "NUMBER"
    return "TERM"


def extract_typed_facts(
    units: list[TextUnit], gazetteer_path: str | None = None
) -> list[TypedFact]:
    """Type every anchor of every unit; order is (unit order, type priority, span)."""
    facts: list[TypedFact] = []
    for unit in units:
        anchors = extract_anchors(unit.text)
        typed = [
            (span, classify_span(span, gazetteer_path)) for span in anchors.sorted()
        ]
        typed.sort(key=lambda st: (_TYPE_PRIORITY[st[1]], st[0]))
        facts.extend(TypedFact(span, ftype, unit.unit_id) for span, ftype in typed)
    return facts


def sort_facts(facts: list[TypedFact]) -> list[TypedFact]:
    return sorted(facts, key=lambda f: (_TYPE_PRIORITY[f.fact_type], f.span, f.source_unit_id))


def read_corpus_jsonl(path: str | Path) -> list[Document]:
    """Corpus input: one JSON object per line: doc_id, text, optional client."""
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            if "doc_id" not in obj or "text" not in obj:
                raise CorpusError(f"{path}:{lineno}: missing doc_id or text")
            docs.append(Document(obj["doc_id"], obj["text"], obj.get("client")))
    return docs
