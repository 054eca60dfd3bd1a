"""Segmented spoken-word corpora: data model, binary ingestion, synthetic generation.

A corpus is a flat list of acoustic word segments (one T x d float32 frame
matrix per spoken word) grouped into utterances and documents, plus a lexicon
mapping each word label to its phoneme-id sequence.

On-disk layout (one directory per corpus):
    manifest.jsonl   one record per segment: id, word_label, speaker,
                     utterance_id, document_id, position, n_frames, blob_offset
    features.f32     concatenated float32 little-endian row-major T x d blocks
    lexicon.tsv      word_label TAB space-separated phoneme ids
    groundtruth.json synthetic corpora only
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class CorpusError(Exception):
    """Base class for corpus-layer failures."""


class IngestionError(CorpusError):
    """Feature blob missing, truncated, or unreadable."""


class SchemaError(CorpusError):
    """Manifest record inconsistent with the corpus feature dimension."""


class ValidationError(CorpusError):
    """Corpus violates a structural invariant."""


class ConfigError(CorpusError):
    """Invalid synthetic-generation configuration."""


class SplitError(CorpusError):
    """Corpus cannot be split as requested."""


@dataclass(frozen=True)
class AcousticWordSegment:
    """One spoken word: a T x d frame matrix plus identifying metadata."""

    id: str
    frames: np.ndarray  # (T, d) float32
    word_label: str
    speaker: str
    utterance_id: str
    position: int

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ValidationError(
                f"segment {self.id}: frames must be a (T>=1, d) matrix, got shape {frames.shape}"
            )
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]


@dataclass
class Corpus:
    segments: list[AcousticWordSegment]
    utterances: dict[str, list[str]]  # utterance_id -> ordered segment ids
    documents: dict[str, list[str]]  # document_id -> ordered utterance ids
    lexicon: dict[str, tuple[int, ...]]  # word_label -> phoneme ids
    feature_dim: int

    def __post_init__(self):
        self.validate()

    def validate(self):
        by_id = {}
        for seg in self.segments:
            if seg.id in by_id:
                raise ValidationError(f"duplicate segment id {seg.id}")
            if seg.dim != self.feature_dim:
                raise SchemaError(
                    f"segment {seg.id} has dimension {seg.dim}, corpus dimension is {self.feature_dim}"
                )
            by_id[seg.id] = seg
        self._by_id = by_id

        seen = set()
        for utt_id, seg_ids in self.utterances.items():
            speakers = set()
            for pos, seg_id in enumerate(seg_ids):
                if seg_id not in by_id:
                    raise ValidationError(f"utterance {utt_id} references unknown segment {seg_id}")
                if seg_id in seen:
                    raise ValidationError(f"segment {seg_id} appears in more than one utterance")
                seen.add(seg_id)
                seg = by_id[seg_id]
                if seg.utterance_id != utt_id:
                    raise ValidationError(
                        f"segment {seg_id} claims utterance {seg.utterance_id}, listed under {utt_id}"
                    )
                if seg.position != pos:
                    raise ValidationError(
                        f"utterance {utt_id}: positions must be 0..n-1 without gaps "
                        f"(segment {seg_id} at index {pos} has position {seg.position})"
                    )
                speakers.add(seg.speaker)
            if len(speakers) > 1:
                raise ValidationError(
                    f"utterance {utt_id} mixes speakers {sorted(speakers)}"
                )
        if seen != set(by_id):
            orphans = sorted(set(by_id) - seen)
            raise ValidationError(f"segments not assigned to any utterance: {orphans[:5]}")

        utt_seen = set()
        for doc_id, utt_ids in self.documents.items():
            for utt_id in utt_ids:
                if utt_id not in self.utterances:
                    raise ValidationError(f"document {doc_id} references unknown utterance {utt_id}")
                if utt_id in utt_seen:
                    raise ValidationError(f"utterance {utt_id} appears in more than one document")
                utt_seen.add(utt_id)
        if utt_seen != set(self.utterances):
            orphans = sorted(set(self.utterances) - utt_seen)
            raise ValidationError(f"utterances not assigned to any document: {orphans[:5]}")

        missing = {s.word_label for s in self.segments} - set(self.lexicon)
        if missing:
            raise ValidationError(f"word labels missing from lexicon: {sorted(missing)[:5]}")

    def segment(self, seg_id):
        return self._by_id[seg_id]

    @property
    def size(self):
        return len(self.segments)

    @property
    def speakers(self):
        return sorted({s.speaker for s in self.segments})

    @property
    def word_labels(self):
        return sorted({s.word_label for s in self.segments})

    def word_frequencies(self):
        """Token counts per word label, over all segments."""
        counts = {}
        for seg in self.segments:
            counts[seg.word_label] = counts.get(seg.word_label, 0) + 1
        return counts

    def top_frequency_words(self, n):
        """The n most frequent word labels; ties broken lexicographically."""
        counts = self.word_frequencies()
        ranked = sorted(counts, key=lambda w: (-counts[w], w))
        return ranked[:n]

    def document_of_utterance(self):
        out = {}
        for doc_id, utt_ids in self.documents.items():
            for utt_id in utt_ids:
                out[utt_id] = doc_id
        return out


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the seeded synthetic-corpus generator."""

    vocabulary_size: int = 50
    phoneme_inventory_size: int = 16
    phoneme_template_frames: tuple[int, int] = (3, 6)
    speaker_count: int = 8
    speaker_bias_scale: float = 1.0
    speaker_gain_range: tuple[float, float] = (0.6, 1.4)
    frame_noise_sigma: float = 0.05
    topic_count: int = 5
    words_per_topic: int = 8
    utterance_length: tuple[int, int] = (4, 9)
    utterances_per_document: tuple[int, int] = (3, 6)
    document_count: int = 60
    feature_dim: int = 39
    topic_smoothing: float = 0.1
    seed: int = 0

    def validate(self):
        counts = {
            "vocabulary_size": self.vocabulary_size,
            "phoneme_inventory_size": self.phoneme_inventory_size,
            "speaker_count": self.speaker_count,
            "topic_count": self.topic_count,
            "words_per_topic": self.words_per_topic,
            "document_count": self.document_count,
            "feature_dim": self.feature_dim,
        }
        for name, value in counts.items():
            if value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.frame_noise_sigma < 0:
            raise ConfigError("frame_noise_sigma must be >= 0")
        if self.vocabulary_size < self.topic_count:
            raise ConfigError("vocabulary_size must be >= topic_count")
        if self.topic_count * self.words_per_topic > self.vocabulary_size:
            raise ConfigError("topic_count * words_per_topic exceeds vocabulary_size")
        for name, rng in [
            ("phoneme_template_frames", self.phoneme_template_frames),
            ("utterance_length", self.utterance_length),
            ("utterances_per_document", self.utterances_per_document),
        ]:
            lo, hi = rng
            if lo < 1 or hi < lo:
                raise ConfigError(f"{name} must be a range 1 <= lo <= hi, got {rng}")
        if not (0 <= self.topic_smoothing < 1):
            raise ConfigError("topic_smoothing must be in [0, 1)")


@dataclass
class GroundTruth:
    """What the generator knows that a trained model should recover."""

    word_phonemes: dict[str, tuple[int, ...]]
    word_topic: dict[str, int | None]  # None = background word
    topic_words: dict[int, list[str]]
    speaker_gain: dict[str, np.ndarray]
    speaker_bias: dict[str, np.ndarray]
    phoneme_templates: dict[int, np.ndarray]
    document_topic: dict[str, int]

    def render_clean(self, word_label, speaker):
        """Noise-free frames of a word as spoken by a speaker."""
        frames = np.concatenate(
            [self.phoneme_templates[p] for p in self.word_phonemes[word_label]], axis=0
        )
        return (frames * self.speaker_gain[speaker] + self.speaker_bias[speaker]).astype(np.float32)

    def to_json(self):
        return {
            "word_phonemes": {w: list(p) for w, p in self.word_phonemes.items()},
            "word_topic": self.word_topic,
            "topic_words": {str(t): ws for t, ws in self.topic_words.items()},
            "speaker_gain": {s: g.tolist() for s, g in self.speaker_gain.items()},
            "speaker_bias": {s: b.tolist() for s, b in self.speaker_bias.items()},
            "phoneme_templates": {str(p): t.tolist() for p, t in self.phoneme_templates.items()},
            "document_topic": self.document_topic,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            word_phonemes={w: tuple(p) for w, p in obj["word_phonemes"].items()},
            word_topic={w: t for w, t in obj["word_topic"].items()},
            topic_words={int(t): ws for t, ws in obj["topic_words"].items()},
            speaker_gain={s: np.asarray(g, dtype=np.float32) for s, g in obj["speaker_gain"].items()},
            speaker_bias={s: np.asarray(b, dtype=np.float32) for s, b in obj["speaker_bias"].items()},
            phoneme_templates={
                int(p): np.asarray(t, dtype=np.float32) for p, t in obj["phoneme_templates"].items()
            },
            document_topic=dict(obj["document_topic"]),
        )


def write_corpus(corpus, out_dir, groundtruth=None):
    """Write manifest + feature blob + lexicon; returns the manifest path.

    load_corpus inverts this exactly (float32 storage is bit-exact).
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        doc_of = corpus.document_of_utterance()
        manifest_path = out_dir / "manifest.jsonl"
        offset = 0
        with open(out_dir / "features.f32", "wb") as blob, open(manifest_path, "w") as mf:
            for seg in corpus.segments:
                data = np.ascontiguousarray(seg.frames, dtype="<f4").tobytes()
                record = {
                    "id": seg.id,
                    "word_label": seg.word_label,
                    "speaker": seg.speaker,
                    "utterance_id": seg.utterance_id,
                    "document_id": doc_of[seg.utterance_id],
                    "position": seg.position,
                    "n_frames": seg.n_frames,
                    "blob_offset": offset,
                }
                mf.write(json.dumps(record) + "\n")
                blob.write(data)
                offset += len(data)
        with open(out_dir / "lexicon.tsv", "w") as lf:
            for word in sorted(corpus.lexicon):
                lf.write(word + "\t" + " ".join(str(p) for p in corpus.lexicon[word]) + "\n")
        if groundtruth is not None:
            with open(out_dir / "groundtruth.json", "w") as gf:
                json.dump(groundtruth.to_json(), gf)
    except OSError as exc:
        raise IngestionError(f"cannot write corpus to {out_dir}: {exc}") from exc
    return manifest_path


def load_corpus(manifest_path):
    """Load a corpus directory given its manifest path.

    The feature dimension is inferred from each record's byte span in the
    blob; a record whose span disagrees with the corpus dimension raises
    SchemaError naming the segment.
    """
    manifest_path = Path(manifest_path)
    corpus_dir = manifest_path.parent
    blob_path = corpus_dir / "features.f32"
    if not manifest_path.exists():
        raise IngestionError(f"manifest not found: {manifest_path}")
    if not blob_path.exists():
        raise IngestionError(f"feature blob not found: {blob_path}")

    records = []
    with open(manifest_path) as mf:
        for line_no, line in enumerate(mf, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise IngestionError(f"manifest line {line_no} is not valid JSON") from exc

    blob = blob_path.read_bytes()
    blob_size = len(blob)

    # Byte span of record i ends at the next record's offset (or EOF).
    dim = None
    segments = []
    for i, rec in enumerate(records):
        seg_id = rec["id"]
        start = rec["blob_offset"]
        end = records[i + 1]["blob_offset"] if i + 1 < len(records) else blob_size
        n_frames = rec["n_frames"]
        span = end - start
        if span <= 0 or end > blob_size:
            raise IngestionError(f"segment {seg_id}: feature blob truncated or offsets corrupt")
        if span % (4 * n_frames) != 0:
            raise SchemaError(f"segment {seg_id}: blob span {span} not divisible by frame count")
        seg_dim = span // (4 * n_frames)
        if dim is None:
            dim = seg_dim
        elif seg_dim != dim:
            raise SchemaError(
                f"segment {seg_id} declares {seg_dim}-dim frames in a {dim}-dim corpus"
            )
        frames = np.frombuffer(blob, dtype="<f4", count=n_frames * seg_dim, offset=start)
        frames = frames.reshape(n_frames, seg_dim).copy()
        segments.append(
            AcousticWordSegment(
                id=seg_id,
                frames=frames,
                word_label=rec["word_label"],
                speaker=rec["speaker"],
                utterance_id=rec["utterance_id"],
                position=rec["position"],
            )
        )

    utterances = {}
    documents = {}
    for rec in records:
        utterances.setdefault(rec["utterance_id"], []).append(rec["id"])
        doc_utts = documents.setdefault(rec["document_id"], [])
        if rec["utterance_id"] not in doc_utts:
            doc_utts.append(rec["utterance_id"])

    lexicon = {}
    lex_path = corpus_dir / "lexicon.tsv"
    if lex_path.exists():
        for line in lex_path.read_text().splitlines():
            if not line.strip():
                continue
            word, _, phones = line.partition("\t")
            lexicon[word] = tuple(int(p) for p in phones.split())
    else:
        # No lexicon on disk: synthesize a trivial one so invariants hold.
        lexicon = {w: () for w in {s.word_label for s in segments}}

    return Corpus(
        segments=segments,
        utterances=utterances,
        documents=documents,
        lexicon=lexicon,
        feature_dim=dim if dim is not None else 0,
    )


def load_groundtruth(corpus_dir):
    path = Path(corpus_dir) / "groundtruth.json"
    if not path.exists():
        raise IngestionError(f"groundtruth not found: {path}")
    with open(path) as f:
        return GroundTruth.from_json(json.load(f))


def _sample_unique_phoneme_sequences(rng, count, inventory, min_len=2, max_len=6):
    seen = set()
    sequences = []
    attempts = 0
    while len(sequences) < count:
        attempts += 1
        if attempts > 1000 * count:
            raise ConfigError(
                "cannot sample enough unique phoneme sequences; enlarge the phoneme inventory"
            )
        length = int(rng.integers(min_len, max_len + 1))
        seq = tuple(int(p) for p in rng.integers(0, inventory, size=length))
        if seq in seen:
            continue
        seen.add(seq)
        sequences.append(seq)
    return sequences


def generate_synthetic_corpus(cfg):
    """Generate a corpus with known phonetic, speaker, and topic structure.

    Each word type gets a unique phoneme sequence; each phoneme a fixed frame
    template. A segment's frames are the concatenated templates, passed through
    its speaker's affine distortion (diagonal gain and additive bias), plus
    i.i.d. Gaussian noise. Word choice is topic-conditioned: every document
    draws a topic, and tokens come from that topic's smoothed unigram, so
    same-topic words co-occur. Deterministic given cfg.seed.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)

    words = [f"w{i:03d}" for i in range(cfg.vocabulary_size)]
    word_phonemes = dict(
        zip(words, _sample_unique_phoneme_sequences(rng, len(words), cfg.phoneme_inventory_size))
    )

    lo, hi = cfg.phoneme_template_frames
    phoneme_templates = {
        p: rng.normal(0.0, 1.0, size=(int(rng.integers(lo, hi + 1)), cfg.feature_dim)).astype(
            np.float32
        )
        for p in range(cfg.phoneme_inventory_size)
    }

    speakers = [f"s{i:02d}" for i in range(cfg.speaker_count)]
    g_lo, g_hi = cfg.speaker_gain_range
    speaker_gain = {
        s: rng.uniform(g_lo, g_hi, size=cfg.feature_dim).astype(np.float32) for s in speakers
    }
    speaker_bias = {
        s: rng.normal(0.0, cfg.speaker_bias_scale, size=cfg.feature_dim).astype(np.float32)
        for s in speakers
    }

    # Topic t owns words [t*wpt, (t+1)*wpt); the rest are background.
    topic_words = {
        t: words[t * cfg.words_per_topic : (t + 1) * cfg.words_per_topic]
        for t in range(cfg.topic_count)
    }
    word_topic = {w: None for w in words}
    for t, ws in topic_words.items():
        for w in ws:
            word_topic[w] = t

    vocab_idx = {w: i for i, w in enumerate(words)}
    topic_unigrams = {}
    for t in range(cfg.topic_count):
        probs = np.full(len(words), cfg.topic_smoothing / len(words))
        own = topic_words[t]
        for w in own:
            probs[vocab_idx[w]] += (1.0 - cfg.topic_smoothing) / len(own)
        topic_unigrams[t] = probs / probs.sum()

    segments = []
    utterances = {}
    documents = {}
    document_topic = {}
    for doc_i in range(cfg.document_count):
        doc_id = f"d{doc_i:04d}"
        topic = int(rng.integers(0, cfg.topic_count))
        document_topic[doc_id] = topic
        n_utts = int(rng.integers(cfg.utterances_per_document[0], cfg.utterances_per_document[1] + 1))
        documents[doc_id] = []
        for utt_i in range(n_utts):
            utt_id = f"{doc_id}_u{utt_i:03d}"
            documents[doc_id].append(utt_id)
            speaker = speakers[int(rng.integers(0, cfg.speaker_count))]
            n_words = int(rng.integers(cfg.utterance_length[0], cfg.utterance_length[1] + 1))
            token_idx = rng.choice(len(words), size=n_words, p=topic_unigrams[topic])
            utterances[utt_id] = []
            for pos, wi in enumerate(token_idx):
                word = words[int(wi)]
                clean = np.concatenate(
                    [phoneme_templates[p] for p in word_phonemes[word]], axis=0
                )
                frames = clean * speaker_gain[speaker] + speaker_bias[speaker]
                if cfg.frame_noise_sigma > 0:
                    frames = frames + rng.normal(0.0, cfg.frame_noise_sigma, size=frames.shape)
                seg_id = f"{utt_id}_p{pos:03d}"
                utterances[utt_id].append(seg_id)
                segments.append(
                    AcousticWordSegment(
                        id=seg_id,
                        frames=frames.astype(np.float32),
                        word_label=word,
                        speaker=speaker,
                        utterance_id=utt_id,
                        position=pos,
                    )
                )

    corpus = Corpus(
        segments=segments,
        utterances=utterances,
        documents=documents,
        lexicon=dict(word_phonemes),
        feature_dim=cfg.feature_dim,
    )
    truth = GroundTruth(
        word_phonemes=word_phonemes,
        word_topic=word_topic,
        topic_words=topic_words,
        speaker_gain=speaker_gain,
        speaker_bias=speaker_bias,
        phoneme_templates=phoneme_templates,
        document_topic=document_topic,
    )
    return corpus, truth


def _subcorpus(corpus, doc_ids):
    doc_ids = list(doc_ids)
    utt_ids = [u for d in doc_ids for u in corpus.documents[d]]
    utt_set = set(utt_ids)
    segments = [s for s in corpus.segments if s.utterance_id in utt_set]
    return Corpus(
        segments=segments,
        utterances={u: list(corpus.utterances[u]) for u in utt_ids},
        documents={d: list(corpus.documents[d]) for d in doc_ids},
        lexicon=dict(corpus.lexicon),
        feature_dim=corpus.feature_dim,
    )


def split_corpus(corpus, ratios, seed=0):
    """Split at document granularity; deterministic given seed.

    Returns one sub-corpus per ratio; their documents partition the original.
    """
    ratios = tuple(ratios)
    if not ratios or any(r <= 0 for r in ratios):
        raise SplitError("ratios must be positive")
    if not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise SplitError(f"ratios must sum to 1, got {sum(ratios)}")
    doc_ids = sorted(corpus.documents)
    if len(doc_ids) < len(ratios):
        raise SplitError(f"{len(doc_ids)} documents cannot be split into {len(ratios)} parts")

    rng = np.random.default_rng(seed)
    order = [doc_ids[i] for i in rng.permutation(len(doc_ids))]

    n = len(order)
    counts = [int(r * n) for r in ratios]
    # Distribute the remainder by largest fractional part (ties by index).
    fracs = sorted(
        range(len(ratios)), key=lambda i: (-(ratios[i] * n - counts[i]), i)
    )
    for i in range(n - sum(counts)):
        counts[fracs[i % len(ratios)]] += 1
    if any(c == 0 for c in counts):
        raise SplitError("a split part would receive zero documents")

    parts = []
    start = 0
    for c in counts:
        parts.append(_subcorpus(corpus, sorted(order[start : start + c])))
        start += c
    return tuple(parts)
