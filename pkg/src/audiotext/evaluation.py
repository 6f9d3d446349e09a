"""Retrieval, zero-shot classification, modality gap, caption sampling and probes."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .audio import clip_to_grid, make_mask_plan
from .models import (ModelConfig, ParamStore, audio_encode_batch, embed_audio, embed_text,
                     make_audio_batch, text_decode_batch, text_encode_batch)
from .optim import AdamWState, adamw_apply, compute_grads
from .text import BOS, EOS, TokenSequence, Vocab, apply_prompt_template, pad_batch, tokenize


@dataclass
class EmbeddingBatch:
    audio: np.ndarray  # (N, d) unit rows
    text: np.ndarray   # (N, d) unit rows
    seeds: list = field(default_factory=list)

    def __post_init__(self):
        if self.audio.shape != self.text.shape:
            raise ValueError("audio and text embeddings must have equal shapes")


@dataclass
class ClapModel:
    params: ParamStore
    config: ModelConfig
    vocab: Vocab

    @classmethod
    def from_checkpoint(cls, ck) -> "ClapModel":
        if ck.stage != "clap":
            raise ValueError("a stage-2 (clap) checkpoint is required")
        if ck.vocab is None:
            raise ValueError("checkpoint carries no vocabulary")
        return cls(ck.params, ModelConfig(**ck.config["model"]), ck.vocab)


# ----------------------------------------------------------------------------
# embeddings


def _audio_plan(grid, budget: int | None, fixed_len: int | None, seed: int):
    if fixed_len is not None:
        return make_mask_plan(grid.n, "clap", target_len=fixed_len, seed=seed)
    if budget is None or grid.n <= budget:
        return make_mask_plan(grid.n, "clap", target_len=None, seed=seed)
    return make_mask_plan(grid.n, "clap", target_len=budget, seed=seed)


def embed_clips(model: ClapModel, clips, budget: int | None = None, fixed_len: int | None = None,
                seed: int = 0, chunk: int = 16, grids=None) -> np.ndarray:
    """Unit audio embeddings. Full sequences by default (``fixed_len`` mimics training)."""
    grids = grids if grids is not None else [clip_to_grid(c) for c in clips]
    out = []
    with ad.no_grad():
        for lo in range(0, len(grids), chunk):
            gs = grids[lo:lo + chunk]
            plans = [_audio_plan(g, budget, fixed_len, seed + lo + i) for i, g in enumerate(gs)]
            out.append(embed_audio(model.params, model.config, make_audio_batch(gs, plans)).data)
    return np.concatenate(out).astype(np.float64)


def embed_texts(model: ClapModel, texts, chunk: int = 64) -> np.ndarray:
    out = []
    with ad.no_grad():
        for lo in range(0, len(texts), chunk):
            ids = pad_batch([tokenize(t, model.vocab, model.config.max_text_len) for t in texts[lo:lo + chunk]])
            out.append(embed_text(model.params, model.config, ids).data)
    return np.concatenate(out).astype(np.float64)


def embed_corpus(corpus, model: ClapModel, budget: int | None = None, fixed_len: int | None = None,
                 seed: int = 0) -> EmbeddingBatch:
    for it in corpus.items:
        for w in it.caption.lower().split():
            if w not in model.vocab.stoi:
                raise ValueError(f"caption word {w!r} is not in the checkpoint vocabulary")
    audio = embed_clips(model, [it.audio() for it in corpus.items], budget, fixed_len, seed)
    text = embed_texts(model, [it.caption for it in corpus.items])
    return EmbeddingBatch(audio, text, [seed])


# ----------------------------------------------------------------------------
# retrieval


@dataclass
class RetrievalReport:
    direction: str
    recall: dict          # k -> percentage
    n_queries: int
    ranks: list = field(default_factory=list)  # 0-based rank of the true match per query

    def to_dict(self) -> dict:
        return {"direction": self.direction, "n_queries": self.n_queries,
                "recall": {f"R@{k}": v for k, v in self.recall.items()}}


def match_ranks(sim: np.ndarray) -> np.ndarray:
    """0-based rank of candidate i for query i; descending score, ties to lower index."""
    order = np.argsort(-sim, axis=1, kind="stable")
    return np.argmax(order == np.arange(sim.shape[0])[:, None], axis=1)


def retrieval_eval(audio: np.ndarray, text: np.ndarray, ks=(1, 5, 10)) -> dict:
    audio = np.asarray(audio, dtype=np.float64)
    text = np.asarray(text, dtype=np.float64)
    n = audio.shape[0]
    if n < max(ks):
        raise ValueError(f"need at least {max(ks)} pairs for R@{max(ks)}")
    sim = audio @ text.T
    reports = {}
    for direction, s in (("audio_to_text", sim), ("text_to_audio", sim.T)):
        ranks = match_ranks(s)
        recall = {k: 100.0 * int(np.count_nonzero(ranks < k)) / n for k in ks}
        reports[direction] = RetrievalReport(direction, recall, n, ranks.tolist())
    return reports


# ----------------------------------------------------------------------------
# zero-shot


def zero_shot_classify(audio_embeds: np.ndarray, labels, template: str, model: ClapModel,
                       truth=None):
    """Predict the label whose prompt embedding has maximal cosine similarity."""
    if not labels:
        raise ValueError("need at least one label")
    prompts = [apply_prompt_template(lab, template) for lab in labels]
    text = embed_texts(model, prompts)
    a = np.asarray(audio_embeds, dtype=np.float64)
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    preds = np.argmax(a @ text.T, axis=1)
    acc = None
    if truth is not None:
        acc = 100.0 * float(np.mean(preds == np.asarray(truth)))
    return preds, acc


# ----------------------------------------------------------------------------
# modality gap


@dataclass
class GapReport:
    vector: np.ndarray
    magnitude: float

    def to_dict(self) -> dict:
        return {"magnitude": self.magnitude, "vector": self.vector.tolist()}


def modality_gap(audio: np.ndarray, text: np.ndarray) -> GapReport:
    """Difference of centroids, mean(audio) - mean(text), and its l2 norm."""
    audio = np.asarray(audio, dtype=np.float64)
    text = np.asarray(text, dtype=np.float64)
    if audio.shape[0] < 1 or audio.shape != text.shape:
        raise ValueError("need equally shaped, nonempty embedding sets")
    vec = audio.mean(axis=0) - text.mean(axis=0)
    return GapReport(vec, float(np.linalg.norm(vec)))


# ----------------------------------------------------------------------------
# captioning


def generate_caption(clip, model: ClapModel, temperature: float = 0.1, max_len: int = 30,
                     seed: int = 0, budget: int | None = None) -> TokenSequence:
    """Sample from BOS until EOS or ``max_len`` tokens; temperature 0 is greedy."""
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    grid = clip if hasattr(clip, "patches") else clip_to_grid(np.asarray(clip))
    plan = _audio_plan(grid, budget, None, seed)
    batch = make_audio_batch([grid], [plan])
    rng = np.random.default_rng(seed)
    max_len = min(max_len, model.config.max_text_len)
    ids = [BOS]
    with ad.no_grad():
        memory = audio_encode_batch(model.params, model.config, batch)
        while len(ids) < max_len:
            arr = np.asarray([ids], dtype=np.int64)
            h = text_encode_batch(model.params, model.config, arr)
            logits = text_decode_batch(model.params, model.config, arr, h, memory,
                                       batch.kept_valid).data[0, -1].astype(np.float64)
            if temperature == 0:
                nxt = int(np.argmax(logits))
            else:
                z = logits / temperature
                p = np.exp(z - z.max())
                p /= p.sum()
                nxt = int(rng.choice(p.size, p=p))
            ids.append(nxt)
            if nxt == EOS:
                break
    return TokenSequence(ids)


# ----------------------------------------------------------------------------
# probes


@dataclass
class ProbeConfig:
    layers: int = 4
    hidden: int = 64
    epochs: int = 200
    lr: float = 3e-3
    weight_decay: float = 0.01
    holdout: float = 0.25
    seed: int = 0


AQA_PRESET = ProbeConfig(layers=4)
HEAR_PRESET = ProbeConfig(layers=2)  # one hidden layer


@dataclass
class ProbeResult:
    accuracy: float
    train_accuracy: float
    n_train: int
    n_test: int


def _init_mlp(sizes, rng) -> ParamStore:
    p = ParamStore()
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        p[f"mlp.{i}.w"] = ad.parameter(rng.normal(0.0, np.sqrt(1.0 / a), size=(a, b)))
        p[f"mlp.{i}.b"] = ad.parameter(np.zeros(b))
    return p


def _mlp(p: ParamStore, x: ad.Tensor, n_layers: int) -> ad.Tensor:
    for i in range(n_layers):
        x = ad.add(ad.matmul(x, p[f"mlp.{i}.w"]), p[f"mlp.{i}.b"])
        if i < n_layers - 1:
            x = ad.silu(x)
    return x


def train_probe(features: np.ndarray, labels, cfg: ProbeConfig = AQA_PRESET,
                backbone: ParamStore | None = None) -> ProbeResult:
    """Fit an MLP on frozen features; report held-out accuracy (percent).

    When ``backbone`` is given, its tensors are checked to be untouched and
    gradient-free after training.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("probe needs at least two classes")
    before = backbone.snapshot() if backbone is not None else None
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(len(y))
    n_test = max(1, int(round(cfg.holdout * len(y))))
    test, train = perm[:n_test], perm[n_test:]
    n_classes = int(y.max()) + 1
    sizes = [x.shape[1]] + [cfg.hidden] * (cfg.layers - 1) + [n_classes]
    p = _init_mlp(sizes, rng)
    state = AdamWState(weight_decay=cfg.weight_decay)
    xt = ad.Tensor(x[train])
    for _ in range(cfg.epochs):
        _, grads = compute_grads(lambda: ad.cross_entropy_from_logits(_mlp(p, xt, cfg.layers), y[train]), p)
        adamw_apply(p, grads, state, cfg.lr)
    with ad.no_grad():
        pred_test = np.argmax(_mlp(p, ad.Tensor(x[test]), cfg.layers).data, axis=1)
        pred_train = np.argmax(_mlp(p, xt, cfg.layers).data, axis=1)
    if backbone is not None:
        for k, t in backbone.items():
            if t.grad is not None and np.any(t.grad != 0):
                raise AssertionError(f"backbone parameter {k} received a gradient")
            if not np.array_equal(t.data, before[k]):
                raise AssertionError(f"backbone parameter {k} changed during probe training")
    return ProbeResult(100.0 * float(np.mean(pred_test == y[test])),
                       100.0 * float(np.mean(pred_train == y[train])), len(train), len(test))


# ----------------------------------------------------------------------------
# report files


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


def write_rank_csv(path, reports: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["direction", "query", "rank"])
        for direction, rep in reports.items():
            for q, r in enumerate(rep.ranks):
                w.writerow([direction, q, r])
