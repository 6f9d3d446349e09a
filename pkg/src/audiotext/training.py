"""Batch assembly and the two training stages.

Stage ``mae``: crop -> mel -> patches -> 80% mask -> encoder -> decoder -> MSE.
Stage ``clap``: encoder (length policy) + text encoder/decoder -> InfoNCE +
lambda * captioning NLL, optimised with SAM on top of AdamW.

All randomness derives from ``(seed, step, item index)`` so runs are
reproducible and resumable from a checkpoint.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .audio import SAMPLE_RATE, PatchGrid, clip_to_grid, make_mask_plan
from .checkpoint import load_checkpoint, save_checkpoint, CheckpointError
from .evaluation import modality_gap
from .losses import (clamp_temperature, combined_loss, mae_loss_mask, mae_mse, temperature)
from .models import (AudioBatch, ModelConfig, ParamStore, clap_forward, init_params, reference_config,
                     make_audio_batch, audio_encode_batch, mae_decode_batch)
from .optim import (AdamWState, PassCounter, SAMConfig, ScheduleConfig, default_decay_names,
                    sam_step, schedule_lr)
from .text import Vocab, build_vocab, pad_batch, tokenize

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "split", "loss_total", "loss_con", "loss_cap", "loss_mae", "lr", "tau",
                 "gap_norm", "wall_ms")
AUDIO_FIELDS = ("d_model", "heads", "d_ff", "audio_depth")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str = "clap"
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    batch_size: int = 8
    weight_decay: float = 0.01
    sam_rho: float = 0.075
    sam_in_stage1: bool = False
    lambda_cap: float = 1.0
    mask_ratio: float = 0.8
    mae_loss_mode: str = "masked_only"
    target_len: int = 128
    crop_seconds: float = 2.0
    seed: int = 0
    init_seed: int | None = None
    eval_every: int = 50
    checkpoint_every: int = 0
    init_checkpoint: str | None = None
    random_init: bool = False

    def __post_init__(self):
        if self.stage not in ("mae", "clap"):
            raise ValueError("stage must be 'mae' or 'clap'")
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.schedule, dict):
            self.schedule = ScheduleConfig(**self.schedule)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def reference_preset(stage: str) -> TrainConfig:
    """Full-scale values (documentation, not an acceptance target)."""
    if stage == "mae":
        return TrainConfig(stage="mae", model=reference_config(), batch_size=512,
                           schedule=ScheduleConfig(10_000, 200_000, 2e-4, 1e-6),
                           sam_rho=0.0, mask_ratio=0.8, crop_seconds=15.0)
    return TrainConfig(stage="clap", model=reference_config(), batch_size=4096,
                       schedule=ScheduleConfig(10_000, 300_000, 1e-5, 1e-6),
                       sam_rho=0.075, lambda_cap=1.0, target_len=512)


# ----------------------------------------------------------------------------
# metrics


@dataclass
class MetricsRow:
    step: int
    split: str
    loss_total: float
    loss_con: float | None = None
    loss_cap: float | None = None
    loss_mae: float | None = None
    lr: float | None = None
    tau: float | None = None
    gap_norm: float | None = None
    wall_ms: float | None = None

    def as_strings(self) -> dict:
        out = {}
        for k in METRIC_FIELDS:
            v = getattr(self, k)
            out[k] = "" if v is None else (repr(float(v) + 0.0) if isinstance(v, float) else str(v))
        return out


class MetricsLog:
    """In-memory rows mirrored to a CSV file.

    ``keep_until`` (used when resuming) preserves the file's existing rows up
    to and including that step; otherwise the file is started afresh.
    """

    def __init__(self, path=None, keep_until: int | None = None):
        self.rows: list[MetricsRow] = []
        self.path = Path(path) if path else None
        if self.path is not None:
            kept = []
            if keep_until is not None and self.path.exists():
                kept = [r for r in read_metrics(self.path) if int(r["step"]) <= keep_until]
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                writer = csv.DictWriter(fh, METRIC_FIELDS)
                writer.writeheader()
                writer.writerows(kept)

    def append(self, row: MetricsRow) -> None:
        last = [r.step for r in self.rows if r.split == row.split]
        if last and row.step < last[-1]:
            raise ValueError("metrics rows must be appended in step order")
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.DictWriter(fh, METRIC_FIELDS).writerow(row.as_strings())

    def split(self, name: str) -> list:
        return [r for r in self.rows if r.split == name]


def read_metrics(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ----------------------------------------------------------------------------
# batches


def derive_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


@dataclass
class Batch:
    audio: AudioBatch
    ids: np.ndarray | None
    items: list
    plans: list


class GridCache:
    """Memoised full-clip patch grids (stage 2 and evaluation)."""

    def __init__(self):
        self._grids: dict = {}

    def get(self, item) -> PatchGrid:
        key = (id(item), item.index)
        if key not in self._grids:
            self._grids[key] = clip_to_grid(item.audio())
        return self._grids[key]


def crop_samples(samples: np.ndarray, crop_seconds: float, rng: np.random.Generator) -> np.ndarray:
    n = int(round(crop_seconds * SAMPLE_RATE))
    if samples.size <= n:
        return samples
    start = int(rng.integers(0, samples.size - n + 1))
    return samples[start:start + n]


def select_items(n_items: int, batch_size: int, step: int, seed: int) -> list:
    if batch_size >= n_items:
        return list(range(n_items))
    per_epoch = n_items // batch_size
    epoch, pos = divmod(step, per_epoch)
    perm = np.random.default_rng(derive_seed(seed, 1, epoch)).permutation(n_items)
    return sorted(perm[pos * batch_size:(pos + 1) * batch_size].tolist())


def build_batch(items, cfg: TrainConfig, step: int, vocab: Vocab | None = None,
                cache: GridCache | None = None, stage: str | None = None) -> Batch:
    """Plans, grids and token ids for ``items``; deterministic in (cfg.seed, step)."""
    if not items:
        raise ValueError("empty batch")
    stage = stage or cfg.stage
    grids, plans = [], []
    for it in items:
        s = derive_seed(cfg.seed, step, it.index)
        if stage == "mae":
            rng = np.random.default_rng(s)
            grid = clip_to_grid(crop_samples(it.audio(), cfg.crop_seconds, rng))
            plan = make_mask_plan(grid.n, "mae", mask_ratio=cfg.mask_ratio, seed=s)
        else:
            grid = cache.get(it) if cache is not None else clip_to_grid(it.audio())
            plan = make_mask_plan(grid.n, "clap", target_len=cfg.target_len, seed=s)
        grids.append(grid)
        plans.append(plan)
    ids = None
    if vocab is not None:
        ids = pad_batch([tokenize(it.caption, vocab, cfg.model.max_text_len) for it in items])
    return Batch(make_audio_batch(grids, plans), ids, list(items), plans)


# ----------------------------------------------------------------------------
# shared loop machinery


@dataclass
class TrainResult:
    params: ParamStore
    config: TrainConfig
    metrics: MetricsLog
    vocab: Vocab | None
    counter: PassCounter
    optimizer: AdamWState
    checkpoint_dir: Path | None = None
    step: int = 0


def _new_optimizer(cfg: TrainConfig, params: ParamStore) -> AdamWState:
    return AdamWState(weight_decay=cfg.weight_decay, decay=default_decay_names(params))


def _checkpoint_config(cfg: TrainConfig) -> dict:
    return {"stage": cfg.stage, "model": cfg.model.to_dict()}


def _save(result: TrainResult, run_dir: Path | None, name: str, step: int, encoder_only=False) -> Path | None:
    if run_dir is None:
        return None
    return save_checkpoint(result.params, run_dir / "checkpoints" / name, result.config.stage,
                           _checkpoint_config(result.config), encoder_only=encoder_only,
                           vocab=result.vocab, optimizer=None if encoder_only else result.optimizer,
                           extra={"step": step, "train_config": result.config.to_dict()})


def _resume(resume, cfg: TrainConfig, params: ParamStore, opt: AdamWState) -> int:
    ck = load_checkpoint(resume, expect_config=_checkpoint_config(cfg))
    if set(ck.params) != set(params):
        raise CheckpointError("resume checkpoint has a different parameter set")
    for k, t in ck.params.items():
        params[k].data = t.data
    ck.restore_optimizer(opt)
    return int(ck.manifest["extra"]["step"])


def _guard(fn, result: TrainResult, run_dir, step):
    try:
        return fn()
    except ad.NumericError as exc:
        if run_dir is not None:
            _save(result, run_dir, f"abort_step_{step}", step)
        raise TrainingError(f"numeric failure at step {step}: {exc}") from exc


def _prepare_run_dir(run_dir, cfg: TrainConfig):
    if run_dir is None:
        return None, None
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    return run_dir, run_dir / "metrics.csv"


# ----------------------------------------------------------------------------
# stage 1


def mae_loss_fn(params: ParamStore, cfg: TrainConfig, batch: Batch):
    def fn():
        enc = audio_encode_batch(params, cfg.model, batch.audio)
        recon = mae_decode_batch(params, cfg.model, batch.audio, enc)
        mask = mae_loss_mask(batch.audio.masked, batch.audio.grid_valid,
                             "all" if cfg.mask_ratio == 0 else cfg.mae_loss_mode)
        return mae_mse(recon, batch.audio.patches, mask)
    return fn


def stage1_train(cfg: TrainConfig, corpus, val_corpus=None, run_dir=None, resume=None,
                 stop_step: int | None = None) -> TrainResult:
    if cfg.stage != "mae":
        raise ValueError("stage1_train needs cfg.stage == 'mae'")
    run_dir, metrics_path = _prepare_run_dir(run_dir, cfg)
    params = init_params(cfg.model, "mae", seed=cfg.seed if cfg.init_seed is None else cfg.init_seed)
    opt = _new_optimizer(cfg, params)
    start = _resume(resume, cfg, params, opt) if resume else 0
    metrics = MetricsLog(metrics_path, keep_until=start if resume else None)
    result = TrainResult(params, cfg, metrics, None, PassCounter(), opt)
    sam = SAMConfig(cfg.sam_rho if cfg.sam_in_stage1 else 0.0)
    items = corpus.items
    val_items = val_corpus.items if val_corpus is not None else []
    end = cfg.schedule.total_steps if stop_step is None else stop_step
    if start == 0 and val_items:
        result.metrics.append(_mae_val_row(params, cfg, val_items, 0, cfg.schedule))
    for step in range(start, end):
        t0 = time.perf_counter()
        lr = schedule_lr(step, cfg.schedule)
        batch = build_batch([items[i] for i in select_items(len(items), cfg.batch_size, step, cfg.seed)],
                            cfg, step)
        loss = _guard(lambda: sam_step(mae_loss_fn(params, cfg, batch), params, opt, lr, sam,
                                       result.counter), result, run_dir, step)
        wall = (time.perf_counter() - t0) * 1000.0
        v = float(loss.data)
        result.metrics.append(MetricsRow(step + 1, "train", v, loss_mae=v, lr=lr, wall_ms=wall))
        done = step + 1
        if val_items and cfg.eval_every and done % cfg.eval_every == 0:
            result.metrics.append(_mae_val_row(params, cfg, val_items, done, cfg.schedule))
        if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            _save(result, run_dir, f"step_{done}", done)
    result.step = end
    result.checkpoint_dir = _save(result, run_dir, "final", end)
    _save(result, run_dir, "encoder", end, encoder_only=True)
    return result


def _mae_val_row(params, cfg, val_items, step, sched) -> MetricsRow:
    batch = build_batch(val_items, cfg, step=-1)
    with ad.no_grad():
        v = float(mae_loss_fn(params, cfg, batch)().data)
    return MetricsRow(step, "val", v, loss_mae=v, lr=schedule_lr(step, sched))


# ----------------------------------------------------------------------------
# stage 2


def clap_loss_fn(params: ParamStore, cfg: TrainConfig, batch: Batch, stash: list | None = None):
    def fn():
        out = clap_forward(params, cfg.model, batch.audio, batch.ids)
        logits = out.logits[:, :-1]
        br = combined_loss(out.audio_emb, out.text_emb, params["logit_scale"], logits,
                           batch.ids[:, 1:], cfg.lambda_cap)
        if stash is not None:
            stash.append((br, out))
        return br.total
    return fn


def init_clap_params(cfg: TrainConfig) -> ParamStore:
    seed = cfg.seed if cfg.init_seed is None else cfg.init_seed
    params = init_params(cfg.model, "clap", seed=seed)
    if cfg.init_checkpoint:
        ck = load_checkpoint(cfg.init_checkpoint)
        mae_model = ck.config.get("model", {})
        for f in AUDIO_FIELDS:
            if mae_model.get(f) != getattr(cfg.model, f):
                raise CheckpointError(f"stage-1 checkpoint differs in {f}")
        for k, t in ck.params.items():
            if k.startswith("audio."):
                params[k].data = t.data.astype(ad.dtype())
    elif not cfg.random_init:
        raise ValueError("stage 2 needs init_checkpoint or random_init=True")
    return params


def stage2_train(cfg: TrainConfig, corpus, val_corpus=None, run_dir=None, resume=None,
                 stop_step: int | None = None, vocab: Vocab | None = None) -> TrainResult:
    if cfg.stage != "clap":
        raise ValueError("stage2_train needs cfg.stage == 'clap'")
    if vocab is None:
        captions = corpus.captions() + (val_corpus.captions() if val_corpus is not None else [])
        vocab = build_vocab(captions)
    if cfg.model.vocab_size != len(vocab):
        cfg.model.vocab_size = len(vocab)
    run_dir, metrics_path = _prepare_run_dir(run_dir, cfg)
    params = init_clap_params(cfg)
    opt = _new_optimizer(cfg, params)
    start = _resume(resume, cfg, params, opt) if resume else 0
    metrics = MetricsLog(metrics_path, keep_until=start if resume else None)
    result = TrainResult(params, cfg, metrics, vocab, PassCounter(), opt)
    sam = SAMConfig(cfg.sam_rho)
    cache = GridCache()
    items = corpus.items
    val_items = val_corpus.items if val_corpus is not None else []
    end = cfg.schedule.total_steps if stop_step is None else stop_step
    if start == 0 and val_items:
        result.metrics.append(clap_val_row(params, cfg, val_items, vocab, 0, cache))
    for step in range(start, end):
        t0 = time.perf_counter()
        lr = schedule_lr(step, cfg.schedule)
        chosen = [items[i] for i in select_items(len(items), cfg.batch_size, step, cfg.seed)]
        batch = build_batch(chosen, cfg, step, vocab, cache)
        stash: list = []
        _guard(lambda: sam_step(clap_loss_fn(params, cfg, batch, stash), params, opt, lr, sam,
                                result.counter), result, run_dir, step)
        clamp_temperature(params["logit_scale"])
        br, _ = stash[0]
        wall = (time.perf_counter() - t0) * 1000.0
        result.metrics.append(MetricsRow(step + 1, "train", float(br.total.data), br.contrastive,
                                         br.captioning, None, lr, temperature(params["logit_scale"]),
                                         None, wall))
        done = step + 1
        if val_items and cfg.eval_every and done % cfg.eval_every == 0:
            result.metrics.append(clap_val_row(params, cfg, val_items, vocab, done, cache))
        if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            _save(result, run_dir, f"step_{done}", done)
    result.step = end
    result.checkpoint_dir = _save(result, run_dir, "final", end)
    return result


def clap_val_row(params, cfg: TrainConfig, val_items, vocab, step, cache=None) -> MetricsRow:
    batch = build_batch(val_items, cfg, -1, vocab, cache)
    stash: list = []
    with ad.no_grad():
        clap_loss_fn(params, cfg, batch, stash)()
    br, out = stash[0]
    gap = modality_gap(out.audio_emb.data, out.text_emb.data)
    if not 0.0 <= gap.magnitude <= 2.0 + 1e-6:
        raise TrainingError(f"modality gap magnitude {gap.magnitude} outside [0, 2]")
    return MetricsRow(step, "val", float(br.total.data), br.contrastive, br.captioning, None,
                      schedule_lr(step, cfg.schedule), temperature(params["logit_scale"]),
                      gap.magnitude)


def train_loss_of(params, cfg: TrainConfig, items, vocab, cache=None) -> float:
    """Combined loss of ``params`` on ``items`` (one batch, deterministic plans)."""
    batch = build_batch(items, cfg, -1, vocab, cache)
    with ad.no_grad():
        return float(clap_loss_fn(params, cfg, batch)().data)
