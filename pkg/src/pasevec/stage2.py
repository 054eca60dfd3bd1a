"""Stage 2: semantic embedding over frozen phonetic vectors.

A skip-gram objective with negative sampling, realized by two feedforward
encoders: the semantic encoder maps a center word's phonetic vector to its
semantic embedding v_w, the context encoder maps a context word's phonetic
vector to its context embedding v_c. Similarity is the logistic sigmoid of
the dot product.

The trainer is generic over what the input vectors are: stage 2 feeds
per-segment phonetic vectors, the text-reference module feeds one-hot or
phonetic-text vectors per word type.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .storage import EmbeddingTable


class Stage2Error(Exception):
    pass


@dataclass(frozen=True)
class Stage2Config:
    context_window: int = 5
    negative_samples: int = 5
    hidden: int = 256
    hidden_layers: int = 2
    embedding_dim: int = 128
    neg_exponent: float = 0.75
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 256
    seed: int = 0

    def validate(self):
        if self.context_window < 1:
            raise Stage2Error("context_window must be >= 1")
        if self.negative_samples < 1:
            raise Stage2Error("negative_samples must be >= 1")
        for name in ("hidden", "hidden_layers", "embedding_dim", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise Stage2Error(f"{name} must be >= 1")


def _mlp(in_dim, hidden, layers, out_dim):
    dims = [in_dim] + [hidden] * layers
    blocks = []
    for i in range(layers):
        blocks += [nn.Linear(dims[i], dims[i + 1]), nn.ReLU()]
    blocks.append(nn.Linear(dims[-1], out_dim))
    return nn.Sequential(*blocks)


class Stage2Model(nn.Module):
    """Semantic encoder E_sem and context encoder E_ctx over input vectors."""

    def __init__(self, input_dim, cfg):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.input_dim = input_dim
        self.semantic_encoder = _mlp(input_dim, cfg.hidden, cfg.hidden_layers, cfg.embedding_dim)
        self.context_encoder = _mlp(input_dim, cfg.hidden, cfg.hidden_layers, cfg.embedding_dim)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def _check(self, vec):
        t = torch.as_tensor(np.asarray(vec), dtype=self.dtype)
        if t.shape[-1] != self.input_dim:
            raise Stage2Error(f"input dimension {t.shape[-1]}, model expects {self.input_dim}")
        return t


def semantic_embed(model, v_p):
    """v_w = E_sem(v_p); deterministic for fixed parameters."""
    with torch.no_grad():
        return model.semantic_encoder(model._check(v_p)).numpy()


def context_embed(model, v_p):
    """v_c = E_ctx(v_p)."""
    with torch.no_grad():
        return model.context_encoder(model._check(v_p)).numpy()


def enumerate_context_pairs(corpus, window):
    """All ordered (center, context) segment pairs within one utterance,
    |position difference| <= window, center != context."""
    for utt_id, seg_ids in corpus.utterances.items():
        segs = [corpus.segment(sid) for sid in seg_ids]
        n = len(segs)
        for i in range(n):
            for j in range(max(0, i - window), min(n, i + window + 1)):
                if i != j:
                    yield segs[i], segs[j]


def negative_distribution(corpus, exponent=0.75):
    """Word-type sampling weights proportional to frequency ** exponent."""
    counts = corpus.word_frequencies()
    labels = sorted(counts)
    weights = np.array([counts[l] for l in labels], dtype=np.float64) ** exponent
    return labels, weights / weights.sum()


def sample_negatives(corpus, center, k, rng, exponent=0.75):
    """Draw k negative segments for a center segment.

    Word types are drawn from the corpus-wide frequency distribution raised
    to `exponent`, excluding the types inside the center's context window;
    a realization is then drawn uniformly within the type. Falls back to the
    unrestricted distribution (with a warning) when exclusion would leave
    nothing to sample.
    """
    if k < 1:
        raise Stage2Error("k must be >= 1")
    labels, probs = negative_distribution(corpus, exponent)
    window = {center.word_label}
    utt = corpus.utterances[center.utterance_id]
    for sid in utt:
        window.add(corpus.segment(sid).word_label)
    allowed = np.array([l not in window for l in labels])
    if allowed.any():
        probs = probs * allowed
        probs = probs / probs.sum()
    else:
        warnings.warn("corpus too small to exclude the context window; sampling uniformly")
        probs = np.full(len(labels), 1.0 / len(labels))

    by_label = {}
    for seg in corpus.segments:
        by_label.setdefault(seg.word_label, []).append(seg)
    picks = rng.choice(len(labels), size=k, p=probs)
    out = []
    for li in picks:
        realizations = by_label[labels[int(li)]]
        out.append(realizations[int(rng.integers(0, len(realizations)))])
    return out


def semantic_loss(model, positives, negatives):
    """Skip-gram loss over explicit vector pairs.

    positives: (v_p_center, v_p_context) pairs, contributing -log sigmoid(v_w . v_c);
    negatives: (v_p_center, v_p_negative) pairs, contributing -log sigmoid(-v_w . v_c).
    Returns a tensor (>= 0).
    """
    if not positives and not negatives:
        raise Stage2Error("semantic_loss: no pairs given")
    total = torch.zeros((), dtype=model.dtype)
    for pairs, sign in ((positives, 1.0), (negatives, -1.0)):
        if not pairs:
            continue
        a = torch.stack([model._check(x) for x, _ in pairs])
        b = torch.stack([model._check(y) for _, y in pairs])
        dots = (model.semantic_encoder(a) * model.context_encoder(b)).sum(dim=1)
        total = total - F.logsigmoid(sign * dots).sum()
    return total


@dataclass
class TokenStream:
    """Flattened token view of a corpus for the skip-gram trainer.

    inputs[input_index[token]] is the token's input vector; word_of maps a
    token to its word-type index.
    """

    utterance_tokens: list[list[int]]  # token indices per utterance
    token_word: np.ndarray  # token -> word-type index
    token_input: np.ndarray  # token -> row in inputs
    inputs: np.ndarray  # (n_inputs, in_dim) float32
    word_labels: list[str]
    word_counts: np.ndarray

    @classmethod
    def from_corpus(cls, corpus, vector_of_segment):
        """Tokens are segments; input vector per segment (e.g. cached v_p)."""
        labels = sorted({s.word_label for s in corpus.segments})
        widx = {w: i for i, w in enumerate(labels)}
        seg_order = []
        utts = []
        for utt_id, seg_ids in corpus.utterances.items():
            utts.append(list(range(len(seg_order), len(seg_order) + len(seg_ids))))
            seg_order.extend(corpus.segment(sid) for sid in seg_ids)
        inputs = np.stack([np.asarray(vector_of_segment(s), dtype=np.float32) for s in seg_order])
        counts = np.zeros(len(labels))
        token_word = np.array([widx[s.word_label] for s in seg_order])
        for w in token_word:
            counts[w] += 1
        return cls(
            utterance_tokens=utts,
            token_word=token_word,
            token_input=np.arange(len(seg_order)),
            inputs=inputs,
            word_labels=labels,
            word_counts=counts,
        )

    @classmethod
    def from_transcript(cls, corpus, vector_of_word):
        """Tokens are word occurrences; one shared input vector per word type."""
        labels = sorted({s.word_label for s in corpus.segments})
        widx = {w: i for i, w in enumerate(labels)}
        utts = []
        token_word = []
        for utt_id, seg_ids in corpus.utterances.items():
            utts.append(list(range(len(token_word), len(token_word) + len(seg_ids))))
            token_word.extend(widx[corpus.segment(sid).word_label] for sid in seg_ids)
        token_word = np.array(token_word, dtype=np.int64)
        inputs = np.stack([np.asarray(vector_of_word(w), dtype=np.float32) for w in labels])
        counts = np.zeros(len(labels))
        for w in token_word:
            counts[w] += 1
        return cls(
            utterance_tokens=utts,
            token_word=token_word,
            token_input=token_word.copy(),
            inputs=inputs,
            word_labels=labels,
            word_counts=counts,
        )


def _positive_pairs(stream, window):
    pairs = []
    for toks in stream.utterance_tokens:
        n = len(toks)
        for i in range(n):
            for j in range(max(0, i - window), min(n, i + window + 1)):
                if i != j:
                    pairs.append((toks[i], toks[j]))
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def train_skipgram_encoders(stream, cfg):
    """Train (E_sem, E_ctx) on a token stream; returns (model, loss history).

    Negatives are resampled each epoch, k per positive pair, word types drawn
    from frequency ** neg_exponent excluding the center's window types, then
    a uniform token of that type. Deterministic given cfg.seed.
    """
    cfg.validate()
    pairs = _positive_pairs(stream, cfg.context_window)
    if len(pairs) == 0:
        raise Stage2Error("no positive context pairs: corpus has no multi-word utterance")

    # Window word-type sets per token, for negative exclusion.
    window_types = [None] * len(stream.token_word)
    for toks in stream.utterance_tokens:
        for i, t in enumerate(toks):
            lo, hi = max(0, i - cfg.context_window), min(len(toks), i + cfg.context_window + 1)
            window_types[t] = frozenset(int(stream.token_word[toks[j]]) for j in range(lo, hi))

    base_weights = stream.word_counts.astype(np.float64) ** cfg.neg_exponent
    tokens_of_word = [[] for _ in stream.word_labels]
    for t, w in enumerate(stream.token_word):
        tokens_of_word[int(w)].append(t)

    torch.manual_seed(cfg.seed)
    model = Stage2Model(stream.inputs.shape[1], cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    inputs = torch.as_tensor(stream.inputs)

    n_words = len(stream.word_labels)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        epoch_loss = 0.0
        n_terms = 0
        for start in range(0, len(pairs), cfg.batch_size):
            batch = pairs[order[start : start + cfg.batch_size]]
            centers, contexts = batch[:, 0], batch[:, 1]

            neg_tokens = np.empty((len(batch), cfg.negative_samples), dtype=np.int64)
            for bi, c in enumerate(centers):
                excl = window_types[int(c)]
                if len(excl) < n_words:
                    w = base_weights.copy()
                    w[list(excl)] = 0.0
                else:
                    w = base_weights.copy()
                probs = w / w.sum()
                picks = rng.choice(n_words, size=cfg.negative_samples, p=probs)
                for ni, wi in enumerate(picks):
                    toks = tokens_of_word[int(wi)]
                    neg_tokens[bi, ni] = toks[int(rng.integers(0, len(toks)))]

            opt.zero_grad()
            v_w = model.semantic_encoder(inputs[stream.token_input[centers]])
            v_c = model.context_encoder(inputs[stream.token_input[contexts]])
            pos_dots = (v_w * v_c).sum(dim=1)
            neg_in = inputs[stream.token_input[neg_tokens.reshape(-1)]]
            v_c_neg = model.context_encoder(neg_in).view(len(batch), cfg.negative_samples, -1)
            neg_dots = (v_w.unsqueeze(1) * v_c_neg).sum(dim=2)
            loss = -F.logsigmoid(pos_dots).sum() - F.logsigmoid(-neg_dots).sum()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            n_terms += len(batch) * (1 + cfg.negative_samples)
        history.append(epoch_loss / n_terms)

    model.eval()
    return model, history


def train_stage2(corpus, vp_of_segment, cfg):
    """Train the semantic stage over frozen phonetic vectors.

    vp_of_segment maps a segment to its cached phonetic vector; stage-1
    parameters are not touched.
    """
    stream = TokenStream.from_corpus(corpus, vp_of_segment)
    return train_skipgram_encoders(stream, cfg)


def word_type_table(corpus, embed_fn, dim=None, provenance=""):
    """Per word type, the arithmetic mean of embed_fn(segment) over realizations."""
    sums, counts = {}, {}
    for seg in corpus.segments:
        vec = np.asarray(embed_fn(seg), dtype=np.float64)
        if seg.word_label in sums:
            sums[seg.word_label] += vec
        else:
            sums[seg.word_label] = vec.copy()
        counts[seg.word_label] = counts.get(seg.word_label, 0) + 1
    entries = {w: (sums[w] / counts[w]).astype(np.float32) for w in sums}
    if dim is None:
        dim = next(iter(entries.values())).shape[0] if entries else 0
    return EmbeddingTable(entries=entries, dim=dim, provenance=provenance)
