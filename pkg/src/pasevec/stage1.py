"""Stage 1: phonetic embedding with speaker characteristics disentangled.

Trains a phonetic encoder and a speaker encoder over acoustic word segments,
a decoder reconstructing the frames from both vectors, and a speaker critic
over phonetic-vector pairs. Four coupled objectives:

    L_r  reconstruction: sum of squared frame errors
    L_s  speaker contrast: pull same-speaker v_s together, push
         different-speaker v_s apart beyond a margin
    L_d  critic: sum of same-speaker pair scores minus different-speaker
         pair scores; the critic maximizes it, the phonetic encoder
         minimizes it

The critic is trained several steps per joint step with a gradient penalty
on interpolated pair inputs (improved-Wasserstein style).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from .storage import load_archive, save_archive


class Stage1Error(Exception):
    pass


@dataclass(frozen=True)
class Stage1Config:
    phonetic_hidden: int = 128
    speaker_hidden: int = 128
    decoder_hidden: int = 256
    encoder_layers: int = 2
    decoder_layers: int = 2
    disc_hidden: int = 128
    disc_layers: int = 2
    lambda_margin: float = 0.01
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)  # (w_r, w_s, w_d)
    n_disc: int = 5
    gp_weight: float = 10.0
    lr_joint: float = 1e-3
    lr_critic: float = 1e-4
    epochs: int = 50
    batch_size: int = 32
    early_stop_patience: int = 0  # 0 disables the plateau check
    early_stop_tol: float = 1e-4
    disentangle: bool = True  # False: merged encoder, no L_s / L_d
    seed: int = 0

    def validate(self):
        if self.lambda_margin <= 0:
            raise Stage1Error("lambda_margin must be > 0")
        for name in ("phonetic_hidden", "speaker_hidden", "decoder_hidden", "disc_hidden",
                     "encoder_layers", "decoder_layers", "disc_layers", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise Stage1Error(f"{name} must be >= 1")
        if any(w < 0 for w in self.loss_weights):
            raise Stage1Error("loss weights must be >= 0")
        if self.n_disc < 1:
            raise Stage1Error("n_disc must be >= 1")


class SequenceEncoder(nn.Module):
    """Multi-layer GRU; the embedding is the top layer's final hidden state.

    Standard two-gate GRU cell, per step t:
        z_t = sigmoid(W_z x_t + U_z h_{t-1} + b_z)        (update gate)
        r_t = sigmoid(W_r x_t + U_r h_{t-1} + b_r)        (reset gate)
        n_t = tanh(W_n x_t + r_t * (U_n h_{t-1} + b_n))   (candidate)
        h_t = (1 - z_t) * n_t + z_t * h_{t-1}
    """

    def __init__(self, input_dim, hidden, layers):
        super().__init__()
        self.gru = nn.GRU(input_dim, hidden, num_layers=layers, batch_first=True)

    def forward(self, frames, lengths):
        packed = nn.utils.rnn.pack_padded_sequence(
            frames, lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        _, h_n = self.gru(packed)
        return h_n[-1]  # (B, hidden)


class SequenceDecoder(nn.Module):
    """GRU decoder emitting T frames from a conditioning vector.

    The conditioning vector (concatenated phonetic and speaker vectors) is
    both projected into the initial hidden state of every layer and fed as
    the input at every step.
    """

    def __init__(self, cond_dim, hidden, layers, out_dim):
        super().__init__()
        self.layers = layers
        self.hidden = hidden
        self.init_proj = nn.Linear(cond_dim, layers * hidden)
        self.gru = nn.GRU(cond_dim, hidden, num_layers=layers, batch_first=True)
        self.out_proj = nn.Linear(hidden, out_dim)

    def forward(self, cond, n_frames):
        batch = cond.shape[0]
        h0 = torch.tanh(self.init_proj(cond))
        h0 = h0.view(batch, self.layers, self.hidden).transpose(0, 1).contiguous()
        steps = cond.unsqueeze(1).expand(batch, n_frames, cond.shape[1])
        out, _ = self.gru(steps, h0)
        return self.out_proj(out)  # (B, T, d)


class PairCritic(nn.Module):
    """Feedforward critic mapping a concatenated phonetic-vector pair to a real."""

    def __init__(self, vec_dim, hidden, layers):
        super().__init__()
        dims = [2 * vec_dim] + [hidden] * layers
        blocks = []
        for i in range(layers):
            blocks += [nn.Linear(dims[i], dims[i + 1]), nn.ReLU()]
        blocks.append(nn.Linear(dims[-1], 1))
        self.net = nn.Sequential(*blocks)

    def forward(self, pair):
        return self.net(pair).squeeze(-1)


class Stage1Model(nn.Module):
    def __init__(self, feature_dim, cfg):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.feature_dim = feature_dim
        self.phonetic_encoder = SequenceEncoder(feature_dim, cfg.phonetic_hidden, cfg.encoder_layers)
        if cfg.disentangle:
            self.speaker_encoder = SequenceEncoder(feature_dim, cfg.speaker_hidden, cfg.encoder_layers)
            self.critic = PairCritic(cfg.phonetic_hidden, cfg.disc_hidden, cfg.disc_layers)
            cond_dim = cfg.phonetic_hidden + cfg.speaker_hidden
        else:
            self.speaker_encoder = None
            self.critic = None
            cond_dim = cfg.phonetic_hidden
        self.decoder = SequenceDecoder(cond_dim, cfg.decoder_hidden, cfg.decoder_layers, feature_dim)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def _frames_tensor(self, seg):
        frames = torch.as_tensor(np.asarray(seg.frames), dtype=self.dtype)
        if frames.shape[1] != self.feature_dim:
            raise Stage1Error(
                f"segment {seg.id} has dimension {frames.shape[1]}, model expects {self.feature_dim}"
            )
        return frames


def pad_batch(model, segments):
    """Stack variable-length segments into (frames, lengths, mask) tensors."""
    frames_list = [model._frames_tensor(s) for s in segments]
    lengths = torch.tensor([f.shape[0] for f in frames_list], dtype=torch.long)
    max_t = int(lengths.max())
    batch = torch.zeros(len(segments), max_t, model.feature_dim, dtype=model.dtype)
    for i, f in enumerate(frames_list):
        batch[i, : f.shape[0]] = f
    mask = torch.arange(max_t).unsqueeze(0) < lengths.unsqueeze(1)
    return batch, lengths, mask


def encode_phonetic_batch(model, segments):
    frames, lengths, _ = pad_batch(model, segments)
    return model.phonetic_encoder(frames, lengths)


def encode_speaker_batch(model, segments):
    if model.speaker_encoder is None:
        raise Stage1Error("model was trained with a merged encoder; no speaker encoder exists")
    frames, lengths, _ = pad_batch(model, segments)
    return model.speaker_encoder(frames, lengths)


def encode_phonetic(model, seg):
    """Phonetic vector v_p for one segment; pure in (parameters, input)."""
    with torch.no_grad():
        return encode_phonetic_batch(model, [seg])[0].numpy()


def encode_speaker(model, seg):
    """Speaker vector v_s for one segment."""
    with torch.no_grad():
        return encode_speaker_batch(model, [seg])[0].numpy()


def decode(model, v_p, v_s, n_frames):
    """Reconstruct a T x d frame matrix from (v_p, v_s)."""
    if n_frames < 1:
        raise Stage1Error("n_frames must be >= 1")
    parts = [torch.as_tensor(np.asarray(v_p), dtype=model.dtype)]
    if model.cfg.disentangle:
        if v_s is None:
            raise Stage1Error("this model requires a speaker vector")
        parts.append(torch.as_tensor(np.asarray(v_s), dtype=model.dtype))
    cond = torch.cat(parts).unsqueeze(0)
    expected = model.decoder.gru.input_size
    if cond.shape[1] != expected:
        raise Stage1Error(f"conditioning dimension {cond.shape[1]}, model expects {expected}")
    with torch.no_grad():
        return model.decoder(cond, n_frames)[0].numpy()


def reconstruction_loss(model, segments):
    """Sum over segments and frames of squared reconstruction error (tensor)."""
    if not segments:
        raise Stage1Error("reconstruction_loss: empty batch")
    frames, lengths, mask = pad_batch(model, segments)
    v_p = model.phonetic_encoder(frames, lengths)
    if model.cfg.disentangle:
        v_s = model.speaker_encoder(frames, lengths)
        cond = torch.cat([v_p, v_s], dim=1)
    else:
        cond = v_p
    recon = model.decoder(cond, frames.shape[1])
    err = ((recon - frames) ** 2).sum(dim=2)
    return (err * mask.to(err.dtype)).sum()


def speaker_loss_from_vectors(v_s, same_idx, diff_idx, lam):
    """Contrastive loss over speaker vectors given pair index tensors."""
    total = v_s.new_zeros(())
    if len(same_idx) > 0:
        i, j = same_idx[:, 0], same_idx[:, 1]
        total = total + ((v_s[i] - v_s[j]) ** 2).sum(dim=1).sum()
    if len(diff_idx) > 0:
        i, j = diff_idx[:, 0], diff_idx[:, 1]
        dist2 = ((v_s[i] - v_s[j]) ** 2).sum(dim=1)
        total = total + torch.clamp(lam - dist2, min=0.0).sum()
    return total


def speaker_loss(model, pairs, lam):
    """Contrastive speaker loss over (segment_i, segment_j, same_speaker) triples."""
    if not pairs:
        raise Stage1Error("speaker_loss: empty pair list")
    if lam <= 0:
        raise Stage1Error("speaker_loss: lambda must be > 0")
    segs = []
    index = {}
    for a, b, _ in pairs:
        for s in (a, b):
            if s.id not in index:
                index[s.id] = len(segs)
                segs.append(s)
    v_s = encode_speaker_batch(model, segs)
    same = [(index[a.id], index[b.id]) for a, b, flag in pairs if flag]
    diff = [(index[a.id], index[b.id]) for a, b, flag in pairs if not flag]
    return speaker_loss_from_vectors(
        v_s,
        torch.tensor(same, dtype=torch.long).reshape(-1, 2),
        torch.tensor(diff, dtype=torch.long).reshape(-1, 2),
        lam,
    )


def discriminator_score(model, v_p_i, v_p_j):
    """Critic score for one phonetic-vector pair (a real number)."""
    if model.critic is None:
        raise Stage1Error("merged-encoder model has no critic")
    a = torch.as_tensor(np.asarray(v_p_i), dtype=model.dtype)
    b = torch.as_tensor(np.asarray(v_p_j), dtype=model.dtype)
    if a.shape != b.shape or a.shape[0] != model.cfg.phonetic_hidden:
        raise Stage1Error("critic input dimensions do not match the model")
    with torch.no_grad():
        return float(model.critic(torch.cat([a, b]).unsqueeze(0))[0])


def discriminator_objective_from_vectors(critic, v_p, same_idx, diff_idx):
    total = v_p.new_zeros(())
    if len(same_idx) > 0:
        total = total + critic(torch.cat([v_p[same_idx[:, 0]], v_p[same_idx[:, 1]]], dim=1)).sum()
    if len(diff_idx) > 0:
        total = total - critic(torch.cat([v_p[diff_idx[:, 0]], v_p[diff_idx[:, 1]]], dim=1)).sum()
    return total


def discriminator_objective(model, pairs):
    """L_d: sum of same-speaker pair scores minus different-speaker pair scores."""
    if not pairs:
        raise Stage1Error("discriminator_objective: empty pair list")
    segs = []
    index = {}
    for a, b, _ in pairs:
        for s in (a, b):
            if s.id not in index:
                index[s.id] = len(segs)
                segs.append(s)
    v_p = encode_phonetic_batch(model, segs)
    same = torch.tensor(
        [(index[a.id], index[b.id]) for a, b, f in pairs if f], dtype=torch.long
    ).reshape(-1, 2)
    diff = torch.tensor(
        [(index[a.id], index[b.id]) for a, b, f in pairs if not f], dtype=torch.long
    ).reshape(-1, 2)
    return discriminator_objective_from_vectors(model.critic, v_p, same, diff)


def gradient_penalty(critic, same_pairs, diff_pairs, rng):
    """Penalty on the critic's gradient norm at interpolated pair inputs."""
    n = min(len(same_pairs), len(diff_pairs))
    if n == 0:
        return same_pairs.new_zeros(()) if len(same_pairs) else diff_pairs.new_zeros(())
    eps = torch.as_tensor(
        rng.uniform(size=(n, 1)), dtype=same_pairs.dtype
    )
    mixed = eps * same_pairs[:n] + (1 - eps) * diff_pairs[:n]
    mixed = mixed.detach().requires_grad_(True)
    scores = critic(mixed)
    grads = torch.autograd.grad(scores.sum(), mixed, create_graph=True)[0]
    norms = grads.norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


def _sample_pairs(speakers, cap, rng):
    """All within-batch index pairs by class, each class subsampled to cap."""
    same, diff = [], []
    for i in range(len(speakers)):
        for j in range(i + 1, len(speakers)):
            (same if speakers[i] == speakers[j] else diff).append((i, j))
    def cap_list(pairs):
        if len(pairs) > cap:
            keep = rng.choice(len(pairs), size=cap, replace=False)
            pairs = [pairs[k] for k in sorted(keep)]
        return torch.tensor(pairs, dtype=torch.long).reshape(-1, 2)
    return cap_list(same), cap_list(diff)


def train_stage1(corpus, cfg):
    """Adversarially train the stage-1 model; returns (model, history).

    Per batch: n_disc critic updates maximizing L_d (with gradient penalty),
    then one joint update minimizing w_r*L_r + w_s*L_s + w_d*L_d, where L_s
    reaches only the speaker encoder, L_d only the phonetic encoder, and L_r
    all of encoders + decoder. Deterministic given cfg.seed.
    """
    cfg.validate()
    if corpus.size == 0:
        raise Stage1Error("cannot train on an empty corpus")
    multi_speaker = len(corpus.speakers) >= 2
    if cfg.disentangle and not multi_speaker:
        warnings.warn("single-speaker corpus: speaker and critic losses will be skipped")

    torch.manual_seed(cfg.seed)
    model = Stage1Model(corpus.feature_dim, cfg)
    rng = np.random.default_rng(cfg.seed)

    w_r, w_s, w_d = cfg.loss_weights
    adversarial = cfg.disentangle and multi_speaker and (w_s > 0 or w_d > 0)

    joint_params = list(model.phonetic_encoder.parameters()) + list(model.decoder.parameters())
    if model.speaker_encoder is not None:
        joint_params += list(model.speaker_encoder.parameters())
    joint_opt = torch.optim.Adam(joint_params, lr=cfg.lr_joint)
    critic_opt = (
        torch.optim.Adam(model.critic.parameters(), lr=cfg.lr_critic) if adversarial else None
    )

    history = {"recon": [], "speaker": [], "critic": []}
    order = np.arange(corpus.size)
    for epoch in range(cfg.epochs):
        rng.shuffle(order)
        ep_recon, ep_speaker, ep_critic, n_batches = 0.0, 0.0, 0.0, 0
        for start in range(0, corpus.size, cfg.batch_size):
            batch = [corpus.segments[i] for i in order[start : start + cfg.batch_size]]
            frames, lengths, mask = pad_batch(model, batch)
            speakers = [s.speaker for s in batch]
            same_idx, diff_idx = _sample_pairs(speakers, cfg.batch_size, rng)
            have_pairs = len(same_idx) > 0 or len(diff_idx) > 0

            if adversarial and have_pairs and w_d > 0:
                with torch.no_grad():
                    v_p_fixed = model.phonetic_encoder(frames, lengths)
                for _ in range(cfg.n_disc):
                    critic_opt.zero_grad()
                    l_d = discriminator_objective_from_vectors(
                        model.critic, v_p_fixed, same_idx, diff_idx
                    )
                    same_in = torch.cat(
                        [v_p_fixed[same_idx[:, 0]], v_p_fixed[same_idx[:, 1]]], dim=1
                    ) if len(same_idx) else v_p_fixed.new_zeros((0, 2 * v_p_fixed.shape[1]))
                    diff_in = torch.cat(
                        [v_p_fixed[diff_idx[:, 0]], v_p_fixed[diff_idx[:, 1]]], dim=1
                    ) if len(diff_idx) else v_p_fixed.new_zeros((0, 2 * v_p_fixed.shape[1]))
                    gp = gradient_penalty(model.critic, same_in, diff_in, rng)
                    (-l_d + cfg.gp_weight * gp).backward()
                    critic_opt.step()

            joint_opt.zero_grad()
            v_p = model.phonetic_encoder(frames, lengths)
            if cfg.disentangle:
                v_s = model.speaker_encoder(frames, lengths)
                cond = torch.cat([v_p, v_s], dim=1)
            else:
                v_s = None
                cond = v_p
            recon = model.decoder(cond, frames.shape[1])
            l_r = (((recon - frames) ** 2).sum(dim=2) * mask.to(frames.dtype)).sum()

            l_s = frames.new_zeros(())
            l_d = frames.new_zeros(())
            if adversarial and have_pairs:
                if w_s > 0:
                    l_s = speaker_loss_from_vectors(v_s, same_idx, diff_idx, cfg.lambda_margin)
                if w_d > 0:
                    l_d = discriminator_objective_from_vectors(
                        model.critic, v_p, same_idx, diff_idx
                    )
            (w_r * l_r + w_s * l_s + w_d * l_d).backward()
            joint_opt.step()

            ep_recon += float(l_r.detach())
            ep_speaker += float(l_s.detach())
            ep_critic += float(l_d.detach())
            n_batches += 1

        # Per-segment reconstruction loss is invariant to batch composition.
        history["recon"].append(ep_recon / corpus.size)
        history["speaker"].append(ep_speaker / n_batches)
        history["critic"].append(ep_critic / n_batches)

        if cfg.early_stop_patience and epoch >= cfg.early_stop_patience:
            past = history["recon"][-cfg.early_stop_patience - 1]
            if past - history["recon"][-1] < cfg.early_stop_tol * max(abs(past), 1e-12):
                break

    model.eval()
    return model, history


def save_stage1(model, path):
    arrays = {name: p.detach().numpy() for name, p in model.state_dict().items()}
    meta = {
        "feature_dim": model.feature_dim,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in vars(model.cfg).items()},
    }
    save_archive(path, arrays, meta)


def load_stage1(path):
    arrays, meta = load_archive(path)
    raw = dict(meta["config"])
    raw["loss_weights"] = tuple(raw["loss_weights"])
    cfg = Stage1Config(**raw)
    model = Stage1Model(meta["feature_dim"], cfg)
    model.load_state_dict({k: torch.as_tensor(v) for k, v in arrays.items()})
    model.eval()
    return model
