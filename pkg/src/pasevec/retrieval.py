"""Semantic spoken-document retrieval over word-embedding tables.

Documents are bags of distinct word types with their embeddings. A document's
relevance to a query vector is max over its words of the negative Euclidean
distance, so a document containing a word whose embedding equals the query
scores 0, the maximum. Rankings are scored with mean average precision
against two ground-truth modes: documents containing the query word (D1) and
documents that do not contain it but belong to a group whose title words
include it (D2).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


class RetrievalError(Exception):
    pass


@dataclass
class DocumentIndex:
    # per document: (labels list, matrix of their embeddings)
    docs: dict[str, tuple[list[str], np.ndarray]]
    provenance: str = ""

    @property
    def doc_ids(self):
        return sorted(self.docs)


@dataclass
class RelevanceSets:
    d1: dict[str, set[str]]  # query -> docs containing it
    d2: dict[str, set[str]]  # query -> docs not containing it in a matching group


def build_index(corpus, table, provenance=""):
    """Distinct word types per document, with their table embeddings.

    Words absent from the table are skipped with a warning.
    """
    if corpus.size == 0:
        raise RetrievalError("cannot index an empty corpus")
    doc_of = corpus.document_of_utterance()
    doc_words = {}
    for seg in corpus.segments:
        doc_words.setdefault(doc_of[seg.utterance_id], set()).add(seg.word_label)

    skipped = set()
    docs = {}
    for doc_id, words in doc_words.items():
        present = sorted(w for w in words if w in table)
        skipped.update(w for w in words if w not in table)
        if present:
            docs[doc_id] = (present, np.stack([table[w] for w in present]).astype(np.float64))
    if skipped:
        warnings.warn(f"words missing from table, excluded from index: {sorted(skipped)[:10]}")
    return DocumentIndex(docs=docs, provenance=provenance or table.provenance)


def relevance_score(index, doc_id, query_vector):
    """max over words w in the document of -||R(w) - query||; always <= 0."""
    if doc_id not in index.docs:
        raise RetrievalError(f"unknown document {doc_id}")
    _, vectors = index.docs[doc_id]
    q = np.asarray(query_vector, dtype=np.float64)
    return float(-np.min(np.linalg.norm(vectors - q, axis=1)))


def rank_documents(index, query_vector):
    """All documents by descending score; ties broken by doc id."""
    if not index.docs:
        raise RetrievalError("empty index")
    scored = [(doc_id, relevance_score(index, doc_id, query_vector)) for doc_id in index.doc_ids]
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored


def build_relevance_sets(doc_words, doc_group, group_title_words, queries):
    """D1/D2 per query.

    doc_words: document -> set of word labels in its content.
    doc_group: document -> group id (book / topic).
    group_title_words: group id -> set of title word labels.
    D1 = docs containing the query; D2 = docs not containing it whose group
    title contains it. Disjoint by construction.
    """
    d1, d2 = {}, {}
    for q in queries:
        containing = {d for d, words in doc_words.items() if q in words}
        titled = {
            d
            for d, g in doc_group.items()
            if q in group_title_words.get(g, ()) and d not in containing
        }
        d1[q] = containing
        d2[q] = titled
    return RelevanceSets(d1=d1, d2=d2)


def average_precision(ranked_doc_ids, relevant):
    """Mean of precision at each relevant document's rank."""
    if not relevant:
        raise RetrievalError("average_precision needs at least one relevant document")
    hits = 0
    total = 0.0
    for rank, doc_id in enumerate(ranked_doc_ids, start=1):
        if doc_id in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def mean_average_precision(rankings, relevant_sets):
    """Mean AP over queries; queries with no relevant documents are skipped.

    rankings: query -> ordered doc-id list. relevant_sets: query -> set.
    """
    aps = {}
    for q, ranked in rankings.items():
        relevant = relevant_sets.get(q, set())
        if not relevant:
            warnings.warn(f"query {q!r} has no relevant documents; skipped")
            continue
        aps[q] = average_precision(ranked, relevant)
    if not aps:
        raise RetrievalError("no query has any relevant document")
    return sum(aps.values()) / len(aps), aps


def corpus_relevance_inputs(corpus, truth):
    """Derive (doc_words, doc_group, group_title_words) from a synthetic corpus.

    The topic plays the role of the book; its designated word set plays the
    title.
    """
    doc_of = corpus.document_of_utterance()
    doc_words = {}
    for seg in corpus.segments:
        doc_words.setdefault(doc_of[seg.utterance_id], set()).add(seg.word_label)
    doc_group = {d: truth.document_topic[d] for d in corpus.documents}
    group_title_words = {t: set(ws) for t, ws in truth.topic_words.items()}
    return doc_words, doc_group, group_title_words


def evaluate_retrieval(corpus, table, queries, doc_words, doc_group, group_title_words):
    """Rank all documents per query and score MAP under D1+D2 and D2 alone.

    Returns a report dict with per-query AP breakdowns and, for each D2
    document, its rank among the documents not containing the query.
    """
    index = build_index(corpus, table)
    sets = build_relevance_sets(doc_words, doc_group, group_title_words, queries)

    rankings = {}
    skipped = []
    for q in queries:
        if q not in table:
            skipped.append(q)
            continue
        rankings[q] = [doc_id for doc_id, _ in rank_documents(index, table[q])]
    if not rankings:
        raise RetrievalError("no query is covered by the embedding table")

    both = {q: sets.d1[q] | sets.d2[q] for q in rankings}
    d2_only = {q: sets.d2[q] for q in rankings}

    map_both, ap_both = mean_average_precision(rankings, both)
    try:
        map_d2, ap_d2 = mean_average_precision(rankings, d2_only)
    except RetrievalError:
        map_d2, ap_d2 = float("nan"), {}

    d2_ranks = {}
    for q, ranked in rankings.items():
        non_containing = [d for d in ranked if d not in sets.d1[q]]
        d2_ranks[q] = {
            d: non_containing.index(d) + 1 for d in sorted(sets.d2[q]) if d in non_containing
        }

    return {
        "provenance": index.provenance,
        "map_d1_d2": map_both,
        "map_d2": map_d2,
        "ap_d1_d2": ap_both,
        "ap_d2": ap_d2,
        "d2_ranks_among_non_containing": d2_ranks,
        "top10": {q: ranked[:10] for q, ranked in rankings.items()},
        "skipped_queries": skipped,
    }
