import math

import numpy as np
import pytest
import torch

from conftest import corpus_from_utterances, gradient_relative_error, make_segment
from pasevec.stage2 import (
    Stage2Config,
    Stage2Error,
    Stage2Model,
    TokenStream,
    context_embed,
    enumerate_context_pairs,
    negative_distribution,
    sample_negatives,
    semantic_embed,
    semantic_loss,
    train_stage2,
    word_type_table,
)

IN_DIM = 6

TOY = Stage2Config(
    context_window=2, negative_samples=2, hidden=8, hidden_layers=1,
    embedding_dim=4, epochs=2, batch_size=16, seed=0,
)


@pytest.fixture()
def model():
    torch.manual_seed(0)
    return Stage2Model(IN_DIM, TOY)


class TestEmbeds:
    def test_deterministic(self, model):
        v = np.random.default_rng(0).normal(size=IN_DIM)
        np.testing.assert_array_equal(semantic_embed(model, v), semantic_embed(model, v))
        np.testing.assert_array_equal(context_embed(model, v), context_embed(model, v))

    def test_zero_input_finite(self, model):
        assert np.isfinite(semantic_embed(model, np.zeros(IN_DIM))).all()
        assert np.isfinite(context_embed(model, np.zeros(IN_DIM))).all()

    def test_shape_error(self, model):
        with pytest.raises(Stage2Error):
            semantic_embed(model, np.zeros(IN_DIM + 2))


class TestContextPairs:
    def test_single_word_utterance_empty(self):
        corpus = corpus_from_utterances([("u0", "d0", "sp0", ["wa"])], dim=IN_DIM)
        assert list(enumerate_context_pairs(corpus, 5)) == []

    def test_three_words_wide_window(self):
        corpus = corpus_from_utterances([("u0", "d0", "sp0", ["wa", "wb", "wc"])], dim=IN_DIM)
        assert len(list(enumerate_context_pairs(corpus, 5))) == 6

    def test_matches_brute_force(self):
        corpus = corpus_from_utterances(
            [("u0", "d0", "sp0", ["wa", "wb", "wc", "wd", "wa", "wb", "wc"])], dim=IN_DIM
        )
        c = 2
        got = {(a.id, b.id) for a, b in enumerate_context_pairs(corpus, c)}
        segs = corpus.segments
        expected = {
            (a.id, b.id)
            for a in segs
            for b in segs
            if a.id != b.id and abs(a.position - b.position) <= c
        }
        assert got == expected

    def test_never_crosses_utterances(self):
        corpus = corpus_from_utterances(
            [
                ("u0", "d0", "sp0", ["wa", "wb"]),
                ("u1", "d0", "sp1", ["wc", "wd"]),
            ],
            dim=IN_DIM,
        )
        for a, b in enumerate_context_pairs(corpus, 10):
            assert a.utterance_id == b.utterance_id

    def test_full_window_pair_count(self):
        # With the window covering the utterance, ordered pairs = n(n-1).
        for n in (2, 4, 6):
            corpus = corpus_from_utterances(
                [("u0", "d0", "sp0", [f"w{i}" for i in range(n)])], dim=IN_DIM
            )
            assert len(list(enumerate_context_pairs(corpus, n))) == n * (n - 1)


class TestNegativeSampling:
    def test_count(self):
        corpus = corpus_from_utterances(
            [("u0", "d0", "sp0", ["wa", "wb"]), ("u1", "d0", "sp0", ["wc", "wd"])], dim=IN_DIM
        )
        rng = np.random.default_rng(0)
        negs = sample_negatives(corpus, corpus.segments[0], 5, rng)
        assert len(negs) == 5

    def test_two_word_exclusion(self):
        corpus = corpus_from_utterances(
            [("u0", "d0", "sp0", ["wa"]), ("u1", "d0", "sp0", ["wb"])], dim=IN_DIM
        )
        rng = np.random.default_rng(0)
        center = corpus.segments[0]  # word wa, alone in its utterance
        negs = sample_negatives(corpus, center, 10, rng)
        assert all(s.word_label == "wb" for s in negs)

    def test_uniform_fallback_warns(self):
        corpus = corpus_from_utterances([("u0", "d0", "sp0", ["wa", "wb"])], dim=IN_DIM)
        rng = np.random.default_rng(0)
        with pytest.warns(UserWarning, match="uniform"):
            sample_negatives(corpus, corpus.segments[0], 3, rng)

    def test_empirical_frequencies_match_power_law(self):
        # Word counts 1, 2, 4, 8 in separate utterances; center word isolated
        # in its own utterance, so only itself is excluded.
        utts = [("uc", "d0", "sp0", ["wq"])]
        counts = {"wa": 1, "wb": 2, "wc": 4, "wd": 8}
        i = 0
        for w, c in counts.items():
            for _ in range(c):
                utts.append((f"u{i}", "d0", "sp0", [w]))
                i += 1
        corpus = corpus_from_utterances(utts, dim=IN_DIM)
        center = corpus.segment("uc_0")

        rng = np.random.default_rng(1)
        draws = 100_000
        got = {w: 0 for w in counts}
        for seg in sample_negatives(corpus, center, draws, rng):
            got[seg.word_label] += 1

        weights = {w: c ** 0.75 for w, c in counts.items()}
        z = sum(weights.values())
        tv = 0.5 * sum(abs(got[w] / draws - weights[w] / z) for w in counts)
        assert tv < 0.02


class TestSemanticLoss:
    def test_positive_pair_at_zero_dot_is_ln2(self, model):
        # Zero both encoders' final biases/weights so the dot product is 0.
        model = model.double()
        for enc in (model.semantic_encoder, model.context_encoder):
            last = enc[-1]
            torch.nn.init.zeros_(last.weight)
            torch.nn.init.zeros_(last.bias)
        v = np.random.default_rng(3).normal(size=IN_DIM)
        loss = float(semantic_loss(model, [(v, v)], []).detach())
        assert loss == pytest.approx(math.log(2), abs=1e-9)
        loss_neg = float(semantic_loss(model, [], [(v, v)]).detach())
        assert loss_neg == pytest.approx(math.log(2), abs=1e-9)

    def test_monotone_in_dot_product(self, model):
        # Positive term decreases, negative term increases with the dot product.
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=IN_DIM), rng.normal(size=IN_DIM)
        base_pos = float(semantic_loss(model, [(a, b)], []).detach())
        base_neg = float(semantic_loss(model, [], [(a, b)]).detach())
        dot = float(semantic_embed(model, a) @ context_embed(model, b))
        probe = -math.log(1 / (1 + math.exp(-dot)))
        assert base_pos == pytest.approx(probe, rel=1e-5)
        assert base_neg == pytest.approx(-math.log(1 - 1 / (1 + math.exp(-dot))) if dot != 0 else math.log(2), rel=1e-4)

    def test_empty_error(self, model):
        with pytest.raises(Stage2Error):
            semantic_loss(model, [], [])

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(5)
        cfg = Stage2Config(
            context_window=2, negative_samples=2, hidden=3, hidden_layers=1,
            embedding_dim=2, epochs=1, batch_size=4,
        )
        model = Stage2Model(3, cfg).double()
        assert sum(p.numel() for p in model.parameters()) <= 500
        rng = np.random.default_rng(6)
        pos = [(rng.normal(size=3), rng.normal(size=3)) for _ in range(2)]
        neg = [(rng.normal(size=3), rng.normal(size=3)) for _ in range(3)]
        params = list(model.parameters())
        err = gradient_relative_error(lambda: semantic_loss(model, pos, neg), params)
        assert err < 1e-4


def cooccurrence_corpus():
    """A and B always co-occur; C and D always co-occur."""
    utts = []
    for i in range(30):
        utts.append((f"ua{i}", f"da{i // 3}", "sp0", ["wa", "wb", "wa", "wb"]))
        utts.append((f"uc{i}", f"da{i // 3}", "sp0", ["wc", "wd", "wc", "wd"]))
    return corpus_from_utterances(utts, dim=IN_DIM)


def vp_by_word(corpus, seed=0):
    rng = np.random.default_rng(seed)
    vocab = {w: rng.normal(size=IN_DIM).astype(np.float32) for w in corpus.word_labels}
    return {s.id: vocab[s.word_label] for s in corpus.segments}


class TestTraining:
    def test_seed_determinism(self):
        corpus = cooccurrence_corpus()
        vp = vp_by_word(corpus)
        cfg = Stage2Config(
            context_window=2, negative_samples=2, hidden=8, hidden_layers=1,
            embedding_dim=4, epochs=2, batch_size=32, seed=42,
        )
        _, h1 = train_stage2(corpus, lambda s: vp[s.id], cfg)
        _, h2 = train_stage2(corpus, lambda s: vp[s.id], cfg)
        assert h1 == h2

    def test_loss_decreases(self):
        corpus = cooccurrence_corpus()
        vp = vp_by_word(corpus)
        cfg = Stage2Config(
            context_window=2, negative_samples=2, hidden=16, hidden_layers=1,
            embedding_dim=8, epochs=10, batch_size=64, seed=0,
        )
        _, history = train_stage2(corpus, lambda s: vp[s.id], cfg)
        assert history[-1] < history[0]

    def test_cooccurring_words_embed_closer(self):
        corpus = cooccurrence_corpus()
        vp = vp_by_word(corpus)
        cfg = Stage2Config(
            context_window=2, negative_samples=3, hidden=16, hidden_layers=1,
            embedding_dim=8, epochs=30, batch_size=64, seed=0, lr=5e-3,
        )
        model, _ = train_stage2(corpus, lambda s: vp[s.id], cfg)
        table = word_type_table(
            corpus, lambda s: semantic_embed(model, vp[s.id]), provenance="test"
        )

        def cos(a, b):
            return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

        assert cos(table["wa"], table["wb"]) > cos(table["wa"], table["wc"])

    def test_no_positive_pairs_error(self):
        corpus = corpus_from_utterances(
            [("u0", "d0", "sp0", ["wa"]), ("u1", "d0", "sp0", ["wb"])], dim=IN_DIM
        )
        vp = vp_by_word(corpus)
        with pytest.raises(Stage2Error, match="positive"):
            train_stage2(corpus, lambda s: vp[s.id], TOY)

    def test_stage1_inputs_untouched(self):
        corpus = cooccurrence_corpus()
        vp = vp_by_word(corpus)
        frozen = {k: v.copy() for k, v in vp.items()}
        train_stage2(corpus, lambda s: vp[s.id], TOY)
        for k in vp:
            np.testing.assert_array_equal(vp[k], frozen[k])


class TestWordTypeTable:
    def test_single_realization(self):
        corpus = corpus_from_utterances([("u0", "d0", "sp0", ["wa", "wb"])], dim=IN_DIM)
        table = word_type_table(corpus, lambda s: s.frames[0])
        np.testing.assert_allclose(table["wa"], corpus.segments[0].frames[0], rtol=1e-6)

    def test_opposite_realizations_cancel(self):
        v = np.ones(IN_DIM, dtype=np.float32)
        corpus = corpus_from_utterances(
            [("u0", "d0", "sp0", ["wa"]), ("u1", "d0", "sp0", ["wa"])], dim=IN_DIM
        )
        vals = {"u0_0": v, "u1_0": -v}
        table = word_type_table(corpus, lambda s: vals[s.id])
        np.testing.assert_allclose(table["wa"], np.zeros(IN_DIM), atol=1e-7)

    def test_size_equals_distinct_labels(self):
        corpus = cooccurrence_corpus()
        table = word_type_table(corpus, lambda s: s.frames[0])
        assert len(table) == len(corpus.word_labels)
