"""Local retrieval over a corpus: sparse BM25 and exact dense cosine search.

Both indexes are flat and exact — no approximation, no incremental updates.
Results are totally ordered by (score desc, doc id asc) so reruns are
byte-reproducible. Persistence writes a manifest carrying a corpus
fingerprint; loading against a different corpus fails loudly.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .backends import DimensionMismatch, Embedder
from .model import ComposedQuery, Corpus, Document, RetrievalResult

_TOKEN_RE = re.compile(r"\w+", re.UNICODE)

DEFAULT_SNIPPET_TOKENS = 512
DEFAULT_K1 = 1.2
DEFAULT_B = 0.75


class EmptyCorpus(ValueError):
    pass


class IndexCorpusMismatch(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation."""
    return _TOKEN_RE.findall(text.lower())


# --- snippet truncation -----------------------------------------------------


class WhitespaceTokenizer:
    """Counts and truncates on whitespace-delimited tokens, preserving spacing."""

    _WORD = re.compile(r"\S+")

    def count(self, text: str) -> int:
        return sum(1 for _ in self._WORD.finditer(text))

    def truncate(self, text: str, budget: int) -> str:
        spans = list(self._WORD.finditer(text))
        if len(spans) <= budget:
            return text
        return text[: spans[budget - 1].end()]


class VocabTokenizer:
    """Greedy longest-match subword tokenizer over a plain-text vocabulary file.

    One token per line; unknown characters fall back to single-char tokens.
    Truncation returns a prefix of the original text, never a re-join.
    """

    def __init__(self, vocab_path: str | Path):
        tokens = [line.rstrip("\n") for line in Path(vocab_path).read_text(encoding="utf-8").splitlines()]
        self._vocab = {t for t in tokens if t}
        self._max_len = max((len(t) for t in self._vocab), default=1)

    def _spans(self, text: str):
        pos = 0
        while pos < len(text):
            if text[pos].isspace():
                pos += 1
                continue
            length = min(self._max_len, len(text) - pos)
            while length > 1 and text[pos : pos + length] not in self._vocab:
                length -= 1
            yield pos + length
            pos += length

    def count(self, text: str) -> int:
        return sum(1 for _ in self._spans(text))

    def truncate(self, text: str, budget: int) -> str:
        for i, end in enumerate(self._spans(text), start=1):
            if i == budget:
                last_end = end
            elif i > budget:
                return text[:last_end]
        return text


def snippet(doc: Document, token_budget: int = DEFAULT_SNIPPET_TOKENS,
            tokenizer: WhitespaceTokenizer | VocabTokenizer | None = None) -> str:
    """First ``token_budget`` tokens of the document text."""
    if token_budget < 1:
        raise ValueError("token_budget must be >= 1")
    tok = tokenizer or WhitespaceTokenizer()
    return tok.truncate(doc.text, token_budget)


def attach_snippets(results: Sequence[RetrievalResult], corpus: Corpus,
                    token_budget: int = DEFAULT_SNIPPET_TOKENS,
                    tokenizer=None) -> list[RetrievalResult]:
    """Fill result snippets from the corpus under the given token budget."""
    return [
        RetrievalResult(r.doc_id, r.score, snippet(corpus.get(r.doc_id), token_budget, tokenizer))
        for r in results
    ]


# --- BM25 -------------------------------------------------------------------


@dataclass
class Bm25Index:
    """Inverted index with per-term postings of (doc ordinal, term frequency)."""

    postings: dict[str, list[tuple[int, int]]]
    doc_lengths: list[int]
    avg_doc_length: float
    doc_ids: list[str]
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B

    @property
    def doc_count(self) -> int:
        return len(self.doc_ids)

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        n = self.doc_count
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))


def build_bm25(corpus: Corpus, k1: float = DEFAULT_K1, b: float = DEFAULT_B) -> Bm25Index:
    if len(corpus) == 0:
        raise EmptyCorpus("cannot index an empty corpus")
    postings: dict[str, list[tuple[int, int]]] = {}
    doc_lengths: list[int] = []
    doc_ids: list[str] = []
    for ordinal, doc in enumerate(corpus):
        tokens = tokenize(doc.text)
        doc_lengths.append(len(tokens))
        doc_ids.append(doc.id)
        counts: dict[str, int] = {}
        for t in tokens:
            counts[t] = counts.get(t, 0) + 1
        for term, tf in counts.items():
            postings.setdefault(term, []).append((ordinal, tf))
    avg = sum(doc_lengths) / len(doc_lengths)
    return Bm25Index(postings=postings, doc_lengths=doc_lengths, avg_doc_length=avg,
                     doc_ids=doc_ids, k1=k1, b=b)


def search_bm25(index: Bm25Index, query: str, k: int) -> list[RetrievalResult]:
    """Top-k documents by BM25 score; ties broken by ascending doc id.

    Documents containing none of the query terms score 0 and never appear.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores: dict[int, float] = {}
    for term in tokenize(query):
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = index.idf(term)
        for ordinal, tf in plist:
            dl = index.doc_lengths[ordinal]
            denom = tf + index.k1 * (1.0 - index.b + index.b * dl / index.avg_doc_length)
            scores[ordinal] = scores.get(ordinal, 0.0) + idf * tf * (index.k1 + 1.0) / denom
    ranked = sorted(scores.items(), key=lambda item: (-item[1], index.doc_ids[item[0]]))
    return [RetrievalResult(index.doc_ids[o], s, "") for o, s in ranked[:k]]


# --- dense ------------------------------------------------------------------


@dataclass
class DenseIndex:
    """Row-per-document matrix of unit vectors; exact cosine search."""

    matrix: np.ndarray  # (n, dim) float32, unit-norm rows
    doc_ids: list[str]

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    @property
    def doc_count(self) -> int:
        return len(self.doc_ids)


def document_embedding_text(doc: Document) -> str:
    return f"{doc.title}\n{doc.text}" if doc.title else doc.text


def build_dense(corpus: Corpus, embedder: Embedder,
                document_instruction: str | None = None) -> DenseIndex:
    if len(corpus) == 0:
        raise EmptyCorpus("cannot index an empty corpus")
    texts = [document_embedding_text(d) for d in corpus]
    vectors = embedder.embed(texts, instruction=document_instruction)
    matrix = np.asarray([v.values for v in vectors], dtype=np.float32)
    return DenseIndex(matrix=matrix, doc_ids=corpus.ids())


def search_dense(index: DenseIndex, composed: ComposedQuery, embedder: Embedder,
                 k: int) -> list[RetrievalResult]:
    """Embed the rendered prompt of ``composed``; top-k by cosine, ties by doc id."""
    from .composer import render_retrieval_prompt

    if k < 1:
        raise ValueError("k must be >= 1")
    query_vec = embedder.embed([render_retrieval_prompt(composed)])[0].as_array()
    if query_vec.shape[0] != index.dim:
        raise DimensionMismatch(f"query dim {query_vec.shape[0]} != index dim {index.dim}")
    scores = index.matrix.astype(np.float64) @ query_vec
    order = sorted(range(index.doc_count), key=lambda o: (-scores[o], index.doc_ids[o]))
    return [RetrievalResult(index.doc_ids[o], float(scores[o]), "") for o in order[:k]]


# --- persistence ------------------------------------------------------------

_FORMAT_VERSION = 1


def corpus_fingerprint(corpus: Corpus) -> str:
    """Stable content hash over (id, title, url, text) of every document in order."""
    h = hashlib.sha256()
    for doc in corpus:
        for part in (doc.id, doc.title or "", doc.url or "", doc.text):
            h.update(part.encode("utf-8"))
            h.update(b"\x1f")
        h.update(b"\x1e")
    return h.hexdigest()


def save_bm25(index: Bm25Index, dirpath: str | Path, corpus_hash: str) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "kind": "bm25",
        "version": _FORMAT_VERSION,
        "corpus_hash": corpus_hash,
        "params": {"k1": index.k1, "b": index.b},
        "count": index.doc_count,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    payload = {
        "postings": {term: [[o, tf] for o, tf in plist] for term, plist in index.postings.items()},
        "doc_lengths": index.doc_lengths,
        "doc_ids": index.doc_ids,
    }
    (d / "postings.json").write_text(json.dumps(payload), encoding="utf-8")


def save_dense(index: DenseIndex, dirpath: str | Path, corpus_hash: str,
               params: dict | None = None) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "kind": "dense",
        "version": _FORMAT_VERSION,
        "corpus_hash": corpus_hash,
        "params": params or {},
        "dim": index.dim,
        "count": index.doc_count,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    (d / "vectors.bin").write_bytes(index.matrix.astype("<f4").tobytes(order="C"))
    (d / "ids.json").write_text(json.dumps(index.doc_ids), encoding="utf-8")


def _check_manifest(dirpath: Path, kind: str, corpus: Corpus | None) -> dict:
    manifest = json.loads((dirpath / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("kind") != kind:
        raise IndexCorpusMismatch(f"{dirpath} holds a {manifest.get('kind')!r} index, expected {kind!r}")
    if corpus is not None and manifest["corpus_hash"] != corpus_fingerprint(corpus):
        raise IndexCorpusMismatch(f"{dirpath}: index was built from a different corpus")
    return manifest


def load_bm25(dirpath: str | Path, corpus: Corpus | None = None) -> Bm25Index:
    d = Path(dirpath)
    manifest = _check_manifest(d, "bm25", corpus)
    payload = json.loads((d / "postings.json").read_text(encoding="utf-8"))
    postings = {term: [(int(o), int(tf)) for o, tf in plist]
                for term, plist in payload["postings"].items()}
    doc_lengths = [int(x) for x in payload["doc_lengths"]]
    return Bm25Index(
        postings=postings,
        doc_lengths=doc_lengths,
        avg_doc_length=sum(doc_lengths) / len(doc_lengths),
        doc_ids=list(payload["doc_ids"]),
        k1=float(manifest["params"]["k1"]),
        b=float(manifest["params"]["b"]),
    )


def load_dense(dirpath: str | Path, corpus: Corpus | None = None) -> DenseIndex:
    d = Path(dirpath)
    manifest = _check_manifest(d, "dense", corpus)
    doc_ids = json.loads((d / "ids.json").read_text(encoding="utf-8"))
    raw = (d / "vectors.bin").read_bytes()
    matrix = np.frombuffer(raw, dtype="<f4").reshape(int(manifest["count"]), int(manifest["dim"]))
    return DenseIndex(matrix=matrix.astype(np.float32), doc_ids=list(doc_ids))
