"""Vector store of labeled bug-report sentences.

Labeled reports are segmented into sentences, embedded, and kept in an
immutable exact-scan index.  At extraction time the most similar corpus
sentences (cosine similarity) are retrieved to ground the language model.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grammar import S2REntity, S2RScript, ScriptStep

NORM_TOLERANCE = 1e-6


class RagError(Exception):
    """Base error for corpus and index failures."""


class EmptyText(RagError):
    pass


class EmptyCorpus(RagError):
    pass


class EmptyIndex(RagError):
    pass


class DimensionMismatch(RagError):
    pass


class ProviderMismatch(RagError):
    pass


class ProviderUnavailable(RagError):
    pass


class CorpusError(RagError):
    pass


class IndexFormatError(RagError):
    pass


# ---------------------------------------------------------------------------
# Sentence segmentation

_MARKER = re.compile(r"^\d+[.)]\s*")
_HAS_LETTER = re.compile(r"[A-Za-z]")


def _split_terminal(text: str) -> list[str]:
    """Split on sentence-final ., ! or ? outside parentheses.

    A split point followed by an opening parenthesis is suppressed so that
    parenthesized asides stay attached to their sentence.
    """
    out: list[str] = []
    depth = 0
    start = 0
    i = 0
    n = len(text)
    while i < n:
        c = text[i]
        if c == "(":
            depth += 1
        elif c == ")":
            depth = max(0, depth - 1)
        elif c in ".!?" and depth == 0:
            j = i
            while j + 1 < n and text[j + 1] in ".!?":
                j += 1
            k = j + 1
            while k < n and text[k].isspace():
                k += 1
            if k < n and text[k] != "(":
                out.append(text[start : j + 1].strip())
                start = k
            i = j
        i += 1
    tail = text[start:].strip()
    if tail:
        out.append(tail)
    return out


def segment_report(report_text: str) -> list[str]:
    """Split a bug report into sentences, in document order.

    Lines and numbered list items split first; a line opening with ``(``
    re-attaches to the previous line.  Terminal punctuation then splits
    within each unit, keeping parenthesized asides attached.  Empty and
    letterless fragments are dropped.
    """
    units: list[str] = []
    for raw in report_text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("(") and units:
            units[-1] = f"{units[-1]} {line}"
        else:
            units.append(line)

    sentences: list[str] = []
    for unit in units:
        unit = _MARKER.sub("", unit)
        for fragment in _split_terminal(unit):
            fragment = _MARKER.sub("", fragment).strip()
            if fragment and _HAS_LETTER.search(fragment):
                sentences.append(fragment)
    return sentences


# ---------------------------------------------------------------------------
# Embedding providers


class EmbeddingProvider:
    """Contract every embedder fulfils: a fixed dimension and a stable id."""

    provider_id: str
    dimension: int

    def embed_raw(self, text: str) -> np.ndarray:
        raise NotImplementedError


class HashedTrigramProvider(EmbeddingProvider):
    """Deterministic offline embedder.

    Lowercases the text, extracts character trigrams, hashes each trigram
    into a fixed-size term-frequency vector.  Needs no network and no model
    weights, so every test can run against it.
    """

    def __init__(self, dimension: int = 384):
        if dimension <= 0:
            raise ValueError("dimension must be positive")
        self.dimension = dimension
        self.provider_id = f"hashed-trigram-{dimension}"

    def embed_raw(self, text: str) -> np.ndarray:
        lowered = text.lower()
        grams = [lowered[i : i + 3] for i in range(len(lowered) - 2)] or [lowered]
        vec = np.zeros(self.dimension, dtype=np.float64)
        for gram in grams:
            digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
            vec[int.from_bytes(digest, "big") % self.dimension] += 1.0
        return vec


class HttpEmbeddingProvider(EmbeddingProvider):
    """Remote embedder over a JSON POST endpoint.

    Request: ``{"texts": ["..."]}``; response: ``{"embeddings": [[...]]}``.
    """

    def __init__(self, endpoint: str, dimension: int, provider_id: str | None = None, timeout: float = 30.0):
        self.endpoint = endpoint
        self.dimension = dimension
        self.provider_id = provider_id or f"http:{endpoint}"
        self.timeout = timeout

    def embed_raw(self, text: str) -> np.ndarray:
        import requests

        try:
            resp = requests.post(self.endpoint, json={"texts": [text]}, timeout=self.timeout)
            resp.raise_for_status()
            payload = resp.json()
        except requests.RequestException as exc:
            raise ProviderUnavailable(f"embedding endpoint failed: {exc}") from exc
        try:
            vec = np.asarray(payload["embeddings"][0], dtype=np.float64)
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise ProviderUnavailable(f"bad embedding payload: {exc}") from exc
        if vec.shape != (self.dimension,):
            raise DimensionMismatch(
                f"endpoint returned dimension {vec.shape}, expected ({self.dimension},)"
            )
        return vec


def embed(text: str, provider: EmbeddingProvider) -> np.ndarray:
    """Embed ``text`` and L2-normalize the result, whatever the provider returned."""
    if not text.strip():
        raise EmptyText("cannot embed empty text")
    vec = np.asarray(provider.embed_raw(text), dtype=np.float64)
    if vec.ndim != 1 or vec.shape[0] != provider.dimension:
        raise DimensionMismatch(
            f"provider {provider.provider_id} returned shape {vec.shape}, expected ({provider.dimension},)"
        )
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ProviderUnavailable(f"provider {provider.provider_id} returned a zero vector")
    return vec / norm


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine undefined for zero vectors")
    return float(np.dot(a, b) / (na * nb))


# ---------------------------------------------------------------------------
# Corpus


@dataclass(frozen=True)
class LabeledSentence:
    text: str
    labels: tuple[S2REntity, ...]


@dataclass(frozen=True)
class LabeledReport:
    report_id: str
    app_id: str
    sentences: tuple[LabeledSentence, ...]

    def validate(self) -> None:
        if not self.report_id:
            raise CorpusError("report_id must be nonempty")
        for i, sentence in enumerate(self.sentences):
            if not sentence.text.strip():
                raise CorpusError(f"report {self.report_id}: sentence {i} is empty")


def load_corpus(path: str | Path) -> list[LabeledReport]:
    """Read a line-delimited corpus file (one JSON report object per line)."""
    reports: list[LabeledReport] = []
    seen: set[str] = set()
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            sentences = tuple(
                LabeledSentence(
                    text=entry["text"],
                    labels=tuple(S2REntity.from_label(label) for label in entry.get("labels", [])),
                )
                for entry in raw["sentences"]
            )
            report = LabeledReport(
                report_id=raw["report_id"], app_id=raw.get("app_id", ""), sentences=sentences
            )
        except Exception as exc:
            raise CorpusError(f"{path}:{line_no}: {exc}") from exc
        report.validate()
        if report.report_id in seen:
            raise CorpusError(f"{path}:{line_no}: duplicate report_id {report.report_id!r}")
        seen.add(report.report_id)
        reports.append(report)
    return reports


def script_from_report(report: LabeledReport) -> S2RScript:
    """Flatten a report's per-sentence labels into a gold script."""
    steps = []
    for index, sentence in enumerate(report.sentences, start=1):
        for entity in sentence.labels:
            steps.append(ScriptStep(entity, index))
    return S2RScript(steps=tuple(steps), source_report=report.report_id)


# ---------------------------------------------------------------------------
# Index


@dataclass(frozen=True)
class RagRecord:
    record_id: str
    sentence: str
    embedding: np.ndarray
    labels: tuple[S2REntity, ...]
    source_report: str


@dataclass(frozen=True)
class RetrievalHit:
    record: RagRecord
    score: float


class RagIndex:
    """Immutable exact-scan index over embedded corpus sentences."""

    def __init__(self, provider_id: str, dimension: int, records: tuple[RagRecord, ...]):
        self.provider_id = provider_id
        self.dimension = dimension
        self.records = records

    def __len__(self) -> int:
        return len(self.records)


def build_index(corpus: list[LabeledReport], provider: EmbeddingProvider) -> RagIndex:
    """Embed every labeled sentence into one record; record order follows the corpus."""
    if not corpus:
        raise EmptyCorpus("corpus has no reports")
    records: list[RagRecord] = []
    for report in corpus:
        report.validate()
        for ordinal, sentence in enumerate(report.sentences, start=1):
            vec = embed(sentence.text, provider)
            if vec.shape[0] != provider.dimension:
                raise DimensionMismatch("provider dimension changed mid-build")
            records.append(
                RagRecord(
                    record_id=f"{report.report_id}:{ordinal:04d}",
                    sentence=sentence.text,
                    embedding=vec,
                    labels=sentence.labels,
                    source_report=report.report_id,
                )
            )
    return RagIndex(provider.provider_id, provider.dimension, tuple(records))


def retrieve(index: RagIndex, query_sentence: str, k: int, provider: EmbeddingProvider) -> list[RetrievalHit]:
    """Return the ``k`` most similar records, scores descending.

    Ties break by ascending record_id so repeated calls are identical.
    """
    if provider.provider_id != index.provider_id:
        raise ProviderMismatch(
            f"index built with {index.provider_id!r}, queried with {provider.provider_id!r}"
        )
    if k < 1:
        raise ValueError("k must be >= 1")
    if not index.records:
        raise EmptyIndex("index has no records")
    query = embed(query_sentence, provider).tolist()
    # Correctly-rounded exact dot products (fsum): the score of a record is a
    # unique, summation-order-independent double, so rankings and the
    # record-id tie rule are reproducible by any independent implementation.
    scores = [
        math.fsum(e * q for e, q in zip(record.embedding.tolist(), query))
        for record in index.records
    ]
    order = sorted(range(len(index.records)), key=lambda i: (-scores[i], index.records[i].record_id))
    return [RetrievalHit(index.records[i], scores[i]) for i in order[:k]]


def save_index(index: RagIndex, path: str | Path) -> None:
    payload = {
        "provider_id": index.provider_id,
        "dimension": index.dimension,
        "records": [
            {
                "record_id": r.record_id,
                "sentence": r.sentence,
                "embedding": [float(x) for x in r.embedding],
                "labels": [e.to_label() for e in r.labels],
                "source_report": r.source_report,
            }
            for r in index.records
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")


def load_index(path: str | Path) -> RagIndex:
    """Load a persisted index, validating dimensions and unit norms."""
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        provider_id = payload["provider_id"]
        dimension = int(payload["dimension"])
        raw_records = payload["records"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise IndexFormatError(f"{path}: {exc}") from exc
    records: list[RagRecord] = []
    for i, raw in enumerate(raw_records):
        try:
            vec = np.asarray(raw["embedding"], dtype=np.float64)
            record = RagRecord(
                record_id=raw["record_id"],
                sentence=raw["sentence"],
                embedding=vec,
                labels=tuple(S2REntity.from_label(label) for label in raw.get("labels", [])),
                source_report=raw.get("source_report", ""),
            )
        except Exception as exc:
            raise IndexFormatError(f"{path}: record {i}: {exc}") from exc
        if vec.shape != (dimension,):
            raise IndexFormatError(f"{path}: record {record.record_id} has dimension {vec.shape[0]}")
        if abs(float(np.linalg.norm(vec)) - 1.0) > NORM_TOLERANCE:
            raise IndexFormatError(f"{path}: record {record.record_id} is not unit-norm")
        records.append(record)
    return RagIndex(provider_id, dimension, tuple(records))
