import numpy as np
import pytest
import torch

from pasevec.corpus import AcousticWordSegment, Corpus


def make_segment(seg_id, frames, word="wa", speaker="sp0", utt="u0", pos=0):
    return AcousticWordSegment(
        id=seg_id, frames=np.asarray(frames, dtype=np.float32),
        word_label=word, speaker=speaker, utterance_id=utt, position=pos,
    )


def corpus_from_utterances(utterances, dim, lexicon=None):
    """utterances: list of (utt_id, doc_id, speaker, [word labels]).

    Frames are random but fixed per call via a seeded generator.
    """
    rng = np.random.default_rng(0)
    segments = []
    utts = {}
    docs = {}
    words = set()
    for utt_id, doc_id, speaker, labels in utterances:
        docs.setdefault(doc_id, []).append(utt_id)
        utts[utt_id] = []
        for pos, w in enumerate(labels):
            words.add(w)
            seg_id = f"{utt_id}_{pos}"
            utts[utt_id].append(seg_id)
            t = int(rng.integers(2, 6))
            segments.append(
                make_segment(seg_id, rng.normal(size=(t, dim)), w, speaker, utt_id, pos)
            )
    lex = lexicon or {w: (0,) for w in words}
    return Corpus(segments=segments, utterances=utts, documents=docs, lexicon=lex, feature_dim=dim)


def finite_difference_gradients(loss_fn, params, step=1e-5):
    """Central finite differences of loss_fn() wrt each tensor in params."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                hi = float(loss_fn())
                flat[i] = orig - step
                lo = float(loss_fn())
                flat[i] = orig
                gflat[i] = (hi - lo) / (2 * step)
            grads.append(g)
    return grads


def gradient_relative_error(loss_fn, params, step=1e-5):
    """Relative error between autograd and central-difference gradients."""
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = torch.cat([
        (p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1) for p in params
    ])
    numeric = torch.cat([g.reshape(-1) for g in finite_difference_gradients(loss_fn, params, step)])
    denom = max(float(analytic.norm()), float(numeric.norm()), 1e-30)
    return float((analytic - numeric).norm()) / denom
