"""Experiment orchestration: corpus -> stage1 -> stage2 -> textref -> align -> retrieval.

A run executes the stage DAG under one output directory with one global
seed. Every artifact is cached under a name derived from the configuration
that produced it, so reruns skip completed stages and deleting an artifact
regenerates it identically.

Audio embedding variants:
    aud_ph      word-type averaged phonetic vectors (stage 1 only)
    aud_phm_se  semantic embeddings over a merged encoder without
                disentanglement (ablation)
    aud_ph_se   semantic embeddings over the disentangled phonetic vectors

Text embedding variants: txt_ph, txt_se_1h, txt_se_ph.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import align as align_mod
from . import retrieval as retrieval_mod
from . import stage1 as stage1_mod
from . import stage2 as stage2_mod
from . import textref as textref_mod
from .corpus import (
    ConfigError,
    SynthConfig,
    generate_synthetic_corpus,
    load_corpus,
    load_groundtruth,
    write_corpus,
)
from .storage import EmbeddingTable, load_archive, load_table, save_archive, save_table


class PipelineError(Exception):
    pass


class DependencyError(PipelineError):
    """An upstream artifact required by a stage is missing."""


AUDIO_VARIANTS = ("aud_ph", "aud_phm_se", "aud_ph_se")
TEXT_VARIANTS = ("txt_ph", "txt_se_1h", "txt_se_ph")


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "run"
    corpus_path: str | None = None  # mutually exclusive with synth
    synth: SynthConfig | None = None
    stage1: stage1_mod.Stage1Config = field(default_factory=stage1_mod.Stage1Config)
    stage2: stage2_mod.Stage2Config = field(default_factory=stage2_mod.Stage2Config)
    textref: textref_mod.TextRefConfig = field(default_factory=textref_mod.TextRefConfig)
    align: align_mod.AlignConfig = field(default_factory=align_mod.AlignConfig)
    tiers: tuple[int, ...] = (1000, 3000, 5000)
    audio_variants: tuple[str, ...] = AUDIO_VARIANTS
    text_variants: tuple[str, ...] = TEXT_VARIANTS
    retrieval_queries: str | tuple[str, ...] = "topic_keywords"
    topk: tuple[int, ...] = (1, 10)

    def validate(self):
        if (self.corpus_path is None) == (self.synth is None):
            raise PipelineError("config must give exactly one corpus source (path or synth)")
        unknown = set(self.audio_variants) - set(AUDIO_VARIANTS)
        unknown |= set(self.text_variants) - set(TEXT_VARIANTS)
        if unknown:
            raise PipelineError(f"unknown embedding variants: {sorted(unknown)}")


def _from_dict(cls, obj):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in obj.items():
        if key not in fields:
            raise PipelineError(f"unknown {cls.__name__} field {key!r}")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def load_experiment_config(path):
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError as exc:
        raise PipelineError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise PipelineError(f"config file is not valid JSON: {exc}") from exc
    return experiment_config_from_dict(raw)


def experiment_config_from_dict(raw):
    raw = dict(raw)
    cfg = ExperimentConfig()
    seed = raw.pop("seed", cfg.seed)
    kwargs = {"seed": seed}
    if "synth" in raw:
        synth = dict(raw.pop("synth"))
        synth.setdefault("seed", seed)
        for key in ("phoneme_template_frames", "utterance_length",
                    "utterances_per_document", "speaker_gain_range"):
            if key in synth:
                synth[key] = tuple(synth[key])
        kwargs["synth"] = SynthConfig(**synth)
    if "corpus_path" in raw:
        kwargs["corpus_path"] = raw.pop("corpus_path")
    for name, cls in (
        ("stage1", stage1_mod.Stage1Config),
        ("stage2", stage2_mod.Stage2Config),
        ("textref", textref_mod.TextRefConfig),
        ("align", align_mod.AlignConfig),
    ):
        sub = dict(raw.pop(name, {}))
        sub.setdefault("seed", seed)
        kwargs[name] = _from_dict(cls, sub)
    for name in ("out_dir", "tiers", "audio_variants", "text_variants",
                 "retrieval_queries", "topk"):
        if name in raw:
            value = raw.pop(name)
            if isinstance(value, list):
                value = tuple(value)
            kwargs[name] = value
    if raw:
        raise PipelineError(f"unknown config keys: {sorted(raw)}")
    cfg = ExperimentConfig(**kwargs)
    cfg.validate()
    return cfg


def _config_hash(*parts):
    def default(o):
        if dataclasses.is_dataclass(o):
            return dataclasses.asdict(o)
        if isinstance(o, (np.integer, np.floating)):
            return o.item()
        raise TypeError(type(o))

    blob = json.dumps(parts, sort_keys=True, default=default).encode()
    return hashlib.sha256(blob).hexdigest()[:10]


class Run:
    """Artifact cache for one experiment; stages are lazy and idempotent."""

    def __init__(self, cfg, out_dir=None):
        cfg.validate()
        self.cfg = cfg
        self.dir = Path(out_dir or cfg.out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._corpus = None
        self._truth = None
        self._tables = {}
        self._vp = {}

    # ---- corpus ----

    def corpus_dir(self):
        if self.cfg.corpus_path is not None:
            return Path(self.cfg.corpus_path).parent
        tag = _config_hash("corpus", self.cfg.synth)
        return self.dir / f"corpus.{tag}"

    def ensure_corpus(self):
        if self._corpus is not None:
            return self._corpus, self._truth
        if self.cfg.corpus_path is not None:
            self._corpus = load_corpus(self.cfg.corpus_path)
            gt_path = Path(self.cfg.corpus_path).parent / "groundtruth.json"
            self._truth = load_groundtruth(gt_path.parent) if gt_path.exists() else None
            return self._corpus, self._truth
        cdir = self.corpus_dir()
        manifest = cdir / "manifest.jsonl"
        if manifest.exists():
            self._corpus = load_corpus(manifest)
            self._truth = load_groundtruth(cdir)
        else:
            corpus, truth = generate_synthetic_corpus(self.cfg.synth)
            write_corpus(corpus, cdir, groundtruth=truth)
            self._corpus, self._truth = corpus, truth
        return self._corpus, self._truth

    # ---- stage 1 ----

    def _stage1_cfg(self, variant):
        cfg = self.cfg.stage1
        if variant == "merged":
            cfg = replace(cfg, disentangle=False, loss_weights=(cfg.loss_weights[0], 0.0, 0.0))
        return cfg

    def stage1_path(self, variant="full"):
        tag = _config_hash("stage1", variant, self._stage1_cfg(variant), self.cfg.synth or self.cfg.corpus_path)
        return self.dir / f"stage1_{variant}.{tag}.npz"

    def ensure_stage1(self, variant="full"):
        path = self.stage1_path(variant)
        if not path.exists():
            corpus, _ = self.ensure_corpus()
            model, history = stage1_mod.train_stage1(corpus, self._stage1_cfg(variant))
            stage1_mod.save_stage1(model, path)
            with open(path.with_suffix(".history.json"), "w") as f:
                json.dump(history, f)
        return stage1_mod.load_stage1(path)

    # ---- phonetic-vector cache ----

    def vp_path(self, variant="full"):
        return self.stage1_path(variant).with_suffix(".vp.npz")

    def ensure_vp(self, variant="full"):
        if variant in self._vp:
            return self._vp[variant]
        path = self.vp_path(variant)
        if path.exists():
            arrays, _ = load_archive(path)
            cache = dict(arrays)
        else:
            corpus, _ = self.ensure_corpus()
            model = self.ensure_stage1(variant)
            cache = {}
            batch = 256
            import torch
            with torch.no_grad():
                for start in range(0, corpus.size, batch):
                    segs = corpus.segments[start : start + batch]
                    vecs = stage1_mod.encode_phonetic_batch(model, segs).numpy()
                    for seg, vec in zip(segs, vecs):
                        cache[seg.id] = vec.astype(np.float32)
            save_archive(path, cache, {"variant": variant})
        self._vp[variant] = cache
        return cache

    # ---- embedding tables ----

    def table_path(self, name):
        relevant = {
            "aud_ph": ("stage1", self._stage1_cfg("full")),
            "aud_ph_se": ("stage2", self._stage1_cfg("full"), self.cfg.stage2),
            "aud_phm_se": ("stage2", self._stage1_cfg("merged"), self.cfg.stage2),
            "txt_ph": ("textref", self.cfg.textref),
            "txt_se_1h": ("textref", self.cfg.textref),
            "txt_se_ph": ("textref", self.cfg.textref),
        }[name]
        tag = _config_hash(name, relevant, self.cfg.synth or self.cfg.corpus_path)
        return self.dir / f"table_{name}.{tag}.tbl"

    def ensure_table(self, name):
        if name in self._tables:
            return self._tables[name]
        path = self.table_path(name)
        if path.exists():
            table = load_table(path)
        else:
            table = self._build_table(name)
            save_table(table, path)
        self._tables[name] = table
        return table

    def _build_table(self, name):
        corpus, _ = self.ensure_corpus()
        if name == "aud_ph":
            vp = self.ensure_vp("full")
            table = stage2_mod.word_type_table(
                corpus, lambda s: vp[s.id], provenance="aud_ph"
            )
        elif name in ("aud_ph_se", "aud_phm_se"):
            variant = "full" if name == "aud_ph_se" else "merged"
            vp = self.ensure_vp(variant)
            model, _ = stage2_mod.train_stage2(corpus, lambda s: vp[s.id], self.cfg.stage2)
            table = stage2_mod.word_type_table(
                corpus, lambda s: stage2_mod.semantic_embed(model, vp[s.id]), provenance=name
            )
        elif name == "txt_ph":
            table, accuracy = textref_mod.train_txt_ph(corpus.lexicon, self.cfg.textref)
            # Restrict to words that actually occur in the transcript.
            present = set(corpus.word_labels)
            table = table.subset([w for w in table.labels if w in present])
        elif name == "txt_se_1h":
            table, _, _ = textref_mod.train_txt_se_1h(corpus, self.cfg.textref)
        elif name == "txt_se_ph":
            txt_ph = self.ensure_table("txt_ph")
            table, _, _ = textref_mod.train_txt_se_ph(corpus, txt_ph, self.cfg.textref)
        else:
            raise PipelineError(f"unknown table {name!r}")
        return table

    # ---- alignment / parallelizing evaluation ----

    def tier_words(self, tier):
        corpus, _ = self.ensure_corpus()
        n = min(tier, len(corpus.word_labels))
        return corpus.top_frequency_words(n)

    def effective_k(self, table_a, table_b, count):
        return min(self.cfg.align.k, table_a.dim, table_b.dim, count - 1)

    def align_pair(self, audio_name, text_name, tier):
        words = self.tier_words(tier)
        table_a = self.ensure_table(audio_name).subset(words)
        table_b = self.ensure_table(text_name).subset(words)
        k = self.effective_k(table_a, table_b, len(words))
        cfg = replace(self.cfg.align, k=k)
        model = align_mod.train_alignment(table_a, table_b, words, cfg)
        accs = {
            k_nn: align_mod.topk_nearest_accuracy(
                model, table_a, table_b, words, k_nn, metric=self.cfg.align.metric
            )
            for k_nn in self.cfg.topk
        }
        return model, accs

    def eval_parallel_path(self):
        tag = _config_hash(
            "parallel", self.cfg.align, self.cfg.tiers, self.cfg.topk,
            self.cfg.audio_variants, self.cfg.text_variants,
            [str(self.table_path(n)) for n in self.cfg.audio_variants + self.cfg.text_variants],
        )
        return self.dir / f"parallel.{tag}.json"

    def ensure_parallel_report(self):
        path = self.eval_parallel_path()
        if path.exists():
            return json.loads(path.read_text())
        report = {"tiers": {}}
        for tier in self.cfg.tiers:
            n = len(self.tier_words(tier))
            cells = {}
            for audio in self.cfg.audio_variants:
                for text in self.cfg.text_variants:
                    model, accs = self.align_pair(audio, text, tier)
                    cells[f"{audio}|{text}"] = {
                        "final_loss": model.final_loss,
                        "accuracy": {str(k): accs[k] for k in accs},
                    }
            report["tiers"][str(tier)] = {"word_count": n, "cells": cells}
        _write_json(path, report)
        return report

    # ---- retrieval ----

    def retrieval_queries(self):
        corpus, truth = self.ensure_corpus()
        selector = self.cfg.retrieval_queries
        if selector == "topic_keywords":
            if truth is None:
                raise PipelineError("topic_keywords queries need synthetic ground truth")
            return sorted(w for ws in truth.topic_words.values() for w in ws)
        return list(selector)

    def retrieval_path(self):
        tag = _config_hash(
            "retrieval", self.cfg.retrieval_queries,
            [str(self.table_path(n)) for n in ("aud_ph", "aud_ph_se")],
        )
        return self.dir / f"retrieval.{tag}.json"

    def ensure_retrieval_report(self):
        path = self.retrieval_path()
        if path.exists():
            return json.loads(path.read_text())
        corpus, truth = self.ensure_corpus()
        if truth is None:
            raise PipelineError("retrieval evaluation needs ground truth (synthetic corpus)")
        doc_words, doc_group, titles = retrieval_mod.corpus_relevance_inputs(corpus, truth)
        queries = self.retrieval_queries()
        report = {}
        for name in ("aud_ph_se", "aud_ph"):
            table = self.ensure_table(name)
            report[name] = retrieval_mod.evaluate_retrieval(
                corpus, table, queries, doc_words, doc_group, titles
            )
        _write_json(path, report)
        return report

    # ---- final report ----

    def report_path(self):
        return self.dir / "report.json"

    def run_all(self):
        self.ensure_corpus()
        parallel = self.ensure_parallel_report()
        retrieval = self.ensure_retrieval_report()
        report = {
            "seed": self.cfg.seed,
            "config": json.loads(json.dumps(
                dataclasses.asdict(self.cfg),
                default=lambda o: dataclasses.asdict(o) if dataclasses.is_dataclass(o) else str(o),
            )),
            "parallel": parallel,
            "retrieval": retrieval,
        }
        _write_json(self.report_path(), report)
        (self.dir / "report.txt").write_text(render_report(report))
        return report


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def render_report(report, incomplete=None):
    """Plain-text accuracy matrix plus retrieval MAP summary."""
    lines = []
    parallel = report.get("parallel", {})
    for tier, tier_data in sorted(parallel.get("tiers", {}).items(), key=lambda t: int(t[0])):
        lines.append(f"tier {tier} ({tier_data['word_count']} words)")
        cells = tier_data["cells"]
        ks = sorted({k for c in cells.values() for k in c["accuracy"]}, key=int)
        for k in ks:
            lines.append(f"  top-{k} nearest accuracy")
            header = "    {:<12}".format("") + "".join(f"{t:>12}" for t in TEXT_VARIANTS)
            lines.append(header)
            for audio in AUDIO_VARIANTS:
                row = f"    {audio:<12}"
                for text in TEXT_VARIANTS:
                    cell = cells.get(f"{audio}|{text}")
                    row += f"{cell['accuracy'][k]:>12.3f}" if cell else f"{'-':>12}"
                lines.append(row)
        lines.append("")
    retrieval = report.get("retrieval", {})
    if retrieval:
        lines.append("retrieval MAP")
        lines.append("    {:<12}{:>12}{:>12}".format("", "D1+D2", "D2"))
        for name, rep in sorted(retrieval.items()):
            lines.append(
                "    {:<12}{:>12.4f}{:>12.4f}".format(name, rep["map_d1_d2"], rep["map_d2"])
            )
        lines.append("")
    if incomplete:
        lines.append("INCOMPLETE, missing: " + ", ".join(incomplete))
        lines.append("")
    return "\n".join(lines)
