import math

import numpy as np
import pytest

from conftest import corpus_from_utterances
from pasevec.textref import (
    TextRefConfig,
    TextRefError,
    train_txt_ph,
    train_txt_se_1h,
    train_txt_se_ph,
)
from pasevec.storage import EmbeddingTable

SMALL_SAE = TextRefConfig(
    phoneme_embedding_dim=8, sae_hidden=16, sae_layers=1, sae_epochs=150,
    skipgram_dim=8, skipgram_hidden=16, skipgram_hidden_layers=1,
    skipgram_epochs=5, skipgram_batch_size=64, seed=0,
)


def edit_distance(a, b):
    m, n = len(a), len(b)
    dp = list(range(n + 1))
    for i in range(1, m + 1):
        prev, dp[0] = dp[0], i
        for j in range(1, n + 1):
            cur = min(dp[j] + 1, dp[j - 1] + 1, prev + (a[i - 1] != b[j - 1]))
            prev, dp[j] = dp[j], cur
    return dp[n]


class TestTxtPh:
    def test_identical_sequences_identical_embeddings(self):
        lexicon = {"wa": (1, 2, 3), "wb": (1, 2, 3), "wc": (4, 5)}
        cfg = TextRefConfig(
            phoneme_embedding_dim=4, sae_hidden=8, sae_layers=1, sae_epochs=5, seed=0
        )
        table, _ = train_txt_ph(lexicon, cfg)
        np.testing.assert_array_equal(table["wa"], table["wb"])

    def test_empty_lexicon(self):
        with pytest.raises(TextRefError):
            train_txt_ph({}, SMALL_SAE)

    def test_reconstruction_accuracy_and_edit_distance_structure(self):
        rng = np.random.default_rng(0)
        # Unique sequences over a 10-phoneme inventory.
        seen = set()
        lexicon = {}
        while len(lexicon) < 30:
            seq = tuple(int(p) for p in rng.integers(0, 10, size=int(rng.integers(2, 7))))
            if seq not in seen:
                seen.add(seq)
                lexicon[f"w{len(lexicon):03d}"] = seq
        table, accuracy = train_txt_ph(lexicon, SMALL_SAE)
        assert accuracy > 0.9

        words = sorted(lexicon)
        close, far = [], []
        for i, wa in enumerate(words):
            for wb in words[i + 1 :]:
                d = edit_distance(lexicon[wa], lexicon[wb])
                dist = float(np.linalg.norm(table[wa] - table[wb]))
                if d == 1:
                    close.append(dist)
                elif d >= 3:
                    far.append(dist)
        assert close and far
        assert np.mean(close) < np.mean(far)

    def test_seed_determinism(self):
        lexicon = {"wa": (0, 1), "wb": (2, 3, 4)}
        cfg = TextRefConfig(
            phoneme_embedding_dim=4, sae_hidden=8, sae_layers=1, sae_epochs=10, seed=5
        )
        t1, _ = train_txt_ph(lexicon, cfg)
        t2, _ = train_txt_ph(lexicon, cfg)
        for w in lexicon:
            np.testing.assert_array_equal(t1[w], t2[w])


def paired_context_corpus():
    """wa/wb share contexts exactly; wc/wd share different contexts."""
    utts = []
    for i in range(40):
        w1 = "wa" if i % 2 == 0 else "wb"
        w2 = "wc" if i % 2 == 0 else "wd"
        utts.append((f"ux{i}", f"d{i // 4}", "sp0", ["we", w1, "wf"]))
        utts.append((f"uy{i}", f"d{i // 4}", "sp0", ["wg", w2, "wh"]))
    return corpus_from_utterances(utts, dim=4)


class TestTxtSe1h:
    def test_identical_context_words_most_similar(self):
        corpus = paired_context_corpus()
        cfg = TextRefConfig(
            phoneme_embedding_dim=4, sae_hidden=8, sae_layers=1, sae_epochs=5,
            skipgram_dim=8, skipgram_hidden=16, skipgram_hidden_layers=1,
            skipgram_window=1, skipgram_negatives=3, skipgram_epochs=40,
            skipgram_batch_size=64, skipgram_lr=5e-3, seed=0,
        )
        table, _, _ = train_txt_se_1h(corpus, cfg)

        def cos(a, b):
            va, vb = table[a], table[b]
            return float(va @ vb / (np.linalg.norm(va) * np.linalg.norm(vb)))

        target = cos("wa", "wb")
        cross = [cos("wa", w) for w in ("wc", "wd", "wg", "wh")]
        assert target > max(cross)

    def test_no_pairs_error(self):
        corpus = corpus_from_utterances(
            [("u0", "d0", "sp0", ["wa"]), ("u1", "d0", "sp0", ["wb"])], dim=4
        )
        from pasevec.stage2 import Stage2Error

        with pytest.raises(Stage2Error):
            train_txt_se_1h(corpus, SMALL_SAE)

    def test_seed_determinism(self):
        corpus = paired_context_corpus()
        t1, _, h1 = train_txt_se_1h(corpus, SMALL_SAE)
        t2, _, h2 = train_txt_se_1h(corpus, SMALL_SAE)
        assert h1 == h2
        for w in t1.labels:
            np.testing.assert_array_equal(t1[w], t2[w])


class TestTxtSePh:
    def test_one_hot_inputs_reduce_to_1h_objective(self):
        # Feeding a one-hot "phonetic" table reproduces the one-hot trainer's
        # loss history exactly (same pairs, same parameters).
        corpus = paired_context_corpus()
        labels = sorted({s.word_label for s in corpus.segments})
        eye = np.eye(len(labels), dtype=np.float32)
        onehot = EmbeddingTable(
            entries={w: eye[i] for i, w in enumerate(labels)}, dim=len(labels)
        )
        _, _, h_ph = train_txt_se_ph(corpus, onehot, SMALL_SAE)
        _, _, h_1h = train_txt_se_1h(corpus, SMALL_SAE)
        assert h_ph == h_1h

    def test_missing_coverage_error(self):
        corpus = paired_context_corpus()
        partial = EmbeddingTable(entries={"wa": np.zeros(3, dtype=np.float32)}, dim=3)
        with pytest.raises(TextRefError, match="cover"):
            train_txt_se_ph(corpus, partial, SMALL_SAE)

    def test_seed_determinism(self):
        corpus = paired_context_corpus()
        labels = sorted({s.word_label for s in corpus.segments})
        rng = np.random.default_rng(3)
        ph = EmbeddingTable(
            entries={w: rng.normal(size=6).astype(np.float32) for w in labels}, dim=6
        )
        t1, _, h1 = train_txt_se_ph(corpus, ph, SMALL_SAE)
        t2, _, h2 = train_txt_se_ph(corpus, ph, SMALL_SAE)
        assert h1 == h2
        for w in t1.labels:
            np.testing.assert_array_equal(t1[w], t2[w])
