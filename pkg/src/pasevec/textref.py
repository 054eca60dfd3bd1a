"""Reference text embeddings built from the lexicon and the word transcript.

Three tables:
  - phonetic text (txt_ph): sequence autoencoder over each word's phoneme-id
    sequence; the embedding is the encoder's final latent state, a pure
    function of the phoneme sequence.
  - semantic text, one-hot input (txt_se_1h): standard skip-gram with
    negative sampling over word labels, one-hot inputs.
  - semantic-and-phonetic text (txt_se_ph): the same skip-gram objective and
    encoders, but with txt_ph vectors replacing the one-hots.

The two semantic tables reuse the stage-2 trainer; only the input vectors
differ.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .stage2 import Stage2Config, Stage2Error, TokenStream, semantic_embed, train_skipgram_encoders
from .storage import EmbeddingTable


class TextRefError(Exception):
    pass


@dataclass(frozen=True)
class TextRefConfig:
    phoneme_embedding_dim: int = 32
    sae_hidden: int = 128
    sae_layers: int = 1
    sae_lr: float = 1e-2
    sae_epochs: int = 300
    skipgram_dim: int = 128
    skipgram_window: int = 5
    skipgram_negatives: int = 5
    skipgram_hidden: int = 256
    skipgram_hidden_layers: int = 2
    skipgram_lr: float = 1e-3
    skipgram_epochs: int = 10
    skipgram_batch_size: int = 256
    seed: int = 0

    def validate(self):
        for name in ("phoneme_embedding_dim", "sae_hidden", "sae_layers", "sae_epochs",
                     "skipgram_dim", "skipgram_window", "skipgram_negatives", "skipgram_epochs"):
            if getattr(self, name) < 1:
                raise TextRefError(f"{name} must be >= 1")

    def skipgram_config(self):
        return Stage2Config(
            context_window=self.skipgram_window,
            negative_samples=self.skipgram_negatives,
            hidden=self.skipgram_hidden,
            hidden_layers=self.skipgram_hidden_layers,
            embedding_dim=self.skipgram_dim,
            lr=self.skipgram_lr,
            epochs=self.skipgram_epochs,
            batch_size=self.skipgram_batch_size,
            seed=self.seed,
        )


class PhonemeSeqAutoencoder(nn.Module):
    """GRU encoder-decoder reconstructing phoneme-id sequences.

    Token inventory: phoneme ids 0..P-1, then BOS = P, EOS = P + 1.
    The latent is the encoder's final top-layer hidden state; the decoder is
    initialized from it and teacher-forced during training.
    """

    def __init__(self, n_phonemes, cfg):
        super().__init__()
        self.n_phonemes = n_phonemes
        self.bos = n_phonemes
        self.eos = n_phonemes + 1
        vocab = n_phonemes + 2
        self.embed = nn.Embedding(vocab, cfg.phoneme_embedding_dim)
        self.encoder = nn.GRU(
            cfg.phoneme_embedding_dim, cfg.sae_hidden, num_layers=cfg.sae_layers, batch_first=True
        )
        self.decoder = nn.GRU(
            cfg.phoneme_embedding_dim, cfg.sae_hidden, num_layers=cfg.sae_layers, batch_first=True
        )
        self.out = nn.Linear(cfg.sae_hidden, vocab)
        self.layers = cfg.sae_layers
        self.hidden = cfg.sae_hidden

    def encode(self, padded, lengths):
        packed = nn.utils.rnn.pack_padded_sequence(
            self.embed(padded), lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        _, h_n = self.encoder(packed)
        return h_n[-1]

    def decode_logits(self, latent, targets):
        """Teacher-forced logits; targets include the EOS column."""
        batch, steps = targets.shape
        inp = torch.cat(
            [torch.full((batch, 1), self.bos, dtype=torch.long), targets[:, :-1]], dim=1
        )
        h0 = latent.unsqueeze(0).expand(self.layers, batch, self.hidden).contiguous()
        out, _ = self.decoder(self.embed(inp), h0)
        return self.out(out)

    def greedy_decode(self, latent, max_len):
        batch = latent.shape[0]
        h = latent.unsqueeze(0).expand(self.layers, batch, self.hidden).contiguous()
        tok = torch.full((batch, 1), self.bos, dtype=torch.long)
        outputs = []
        for _ in range(max_len):
            out, h = self.decoder(self.embed(tok), h)
            tok = self.out(out).argmax(dim=2)
            outputs.append(tok[:, 0])
        return torch.stack(outputs, dim=1)


def _pad_sequences(sequences, eos, pad=0):
    lengths = torch.tensor([len(s) + 1 for s in sequences], dtype=torch.long)  # + EOS
    max_len = int(lengths.max())
    padded = torch.full((len(sequences), max_len), pad, dtype=torch.long)
    target_mask = torch.zeros(len(sequences), max_len, dtype=torch.bool)
    for i, s in enumerate(sequences):
        padded[i, : len(s)] = torch.tensor(s, dtype=torch.long)
        padded[i, len(s)] = eos
        target_mask[i, : len(s) + 1] = True
    return padded, lengths, target_mask


def train_txt_ph(lexicon, cfg):
    """Train the phoneme-sequence autoencoder; one table entry per word.

    Words sharing a phoneme sequence get identical embeddings by
    construction. Returns (EmbeddingTable, final token accuracy).
    """
    cfg.validate()
    if not lexicon:
        raise TextRefError("empty lexicon")
    words = sorted(lexicon)
    sequences = [lexicon[w] for w in words]
    if any(len(s) == 0 for s in sequences):
        raise TextRefError("lexicon contains an empty phoneme sequence")
    n_phonemes = max(p for s in sequences for p in s) + 1

    torch.manual_seed(cfg.seed)
    model = PhonemeSeqAutoencoder(n_phonemes, cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.sae_lr)
    padded, lengths, mask = _pad_sequences(sequences, model.eos)
    # Encoder consumes the sequence without EOS.
    enc_lengths = lengths - 1

    for _ in range(cfg.sae_epochs):
        opt.zero_grad()
        latent = model.encode(padded, enc_lengths)
        logits = model.decode_logits(latent, padded)
        loss = F.cross_entropy(
            logits[mask], padded[mask], reduction="mean"
        )
        loss.backward()
        opt.step()

    model.eval()
    with torch.no_grad():
        latent = model.encode(padded, enc_lengths)
        decoded = model.greedy_decode(latent, padded.shape[1])
        accuracy = float((decoded[mask] == padded[mask]).float().mean())
        entries = {w: latent[i].numpy().astype(np.float32) for i, w in enumerate(words)}
    table = EmbeddingTable(entries=entries, dim=cfg.sae_hidden, provenance="txt_ph")
    return table, accuracy


def _skipgram_table(corpus, stream, cfg, provenance):
    model, history = train_skipgram_encoders(stream, cfg.skipgram_config())
    entries = {
        w: semantic_embed(model, stream.inputs[i]).astype(np.float32)
        for i, w in enumerate(stream.word_labels)
    }
    table = EmbeddingTable(entries=entries, dim=cfg.skipgram_dim, provenance=provenance)
    return table, model, history


def train_txt_se_1h(corpus, cfg):
    """Standard skip-gram over word labels with one-hot inputs."""
    cfg.validate()
    labels = sorted({s.word_label for s in corpus.segments})
    eye = np.eye(len(labels), dtype=np.float32)
    widx = {w: i for i, w in enumerate(labels)}
    stream = TokenStream.from_transcript(corpus, lambda w: eye[widx[w]])
    return _skipgram_table(corpus, stream, cfg, "txt_se_1h")


def train_txt_se_ph(corpus, txt_ph, cfg):
    """Skip-gram with txt_ph vectors as inputs (semantics + phonetic structure)."""
    cfg.validate()
    labels = sorted({s.word_label for s in corpus.segments})
    missing = [w for w in labels if w not in txt_ph]
    if missing:
        raise TextRefError(f"txt_ph table does not cover transcript words: {missing[:10]}")
    stream = TokenStream.from_transcript(corpus, lambda w: txt_ph[w])
    return _skipgram_table(corpus, stream, cfg, "txt_se_ph")
