"""Transformer networks: audio encoder, MAE decoder, causal text encoder,
cross-attention text decoder, attention poolers and projection heads.

Models are functional: every forward takes a :class:`ParamStore` mapping
dotted names to leaf tensors. Pre-norm blocks, SiLU feed-forward.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .audio import PatchGrid, MaskPlan, sinusoid_table, F_PATCHES, PATCH
from .autodiff import NEG_INF, Tensor

PATCH_DIM = PATCH * PATCH


@dataclass
class ModelConfig:
    d_model: int = 128
    heads: int = 4
    d_ff: int = 256
    audio_depth: int = 4
    mae_depth: int = 2
    text_depth: int = 4
    decoder_depth: int | None = None
    pool_heads: int = 4
    d_embed: int = 128
    vocab_size: int = 0
    max_text_len: int = 77
    init_std: float = 0.02
    init_inv_tau: float = 14.3

    def __post_init__(self):
        if self.d_model % self.heads or self.d_model % self.pool_heads:
            raise ValueError("d_model must be divisible by the head counts")
        if self.d_model % 2:
            raise ValueError("d_model must be even for sinusoidal positions")
        if self.decoder_depth is None:
            self.decoder_depth = math.ceil(self.text_depth / 2)

    def to_dict(self) -> dict:
        return asdict(self)


def desk_config(vocab_size: int = 0, **overrides) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, **overrides)


def reference_config(vocab_size: int = 50265) -> ModelConfig:
    """ViT-B sizes (12 layers, 8 heads, 768/3072); documentation only."""
    return ModelConfig(d_model=768, heads=8, d_ff=3072, audio_depth=12, mae_depth=12,
                       text_depth=12, decoder_depth=6, pool_heads=8, d_embed=768,
                       vocab_size=vocab_size)


def micro_config(vocab_size: int) -> ModelConfig:
    return ModelConfig(d_model=8, heads=2, d_ff=12, audio_depth=1, mae_depth=1, text_depth=1,
                       decoder_depth=1, pool_heads=2, d_embed=6, vocab_size=vocab_size,
                       max_text_len=12)


# ----------------------------------------------------------------------------
# parameters


class ParamStore(dict):
    """Ordered name -> Tensor map of trainable parameters."""

    def subset(self, *prefixes) -> "ParamStore":
        return ParamStore((k, v) for k, v in self.items() if k.startswith(prefixes))

    def count(self) -> int:
        return int(sum(t.data.size for t in self.values()))

    def snapshot(self) -> dict:
        return {k: t.data.copy() for k, t in self.items()}

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None


def _block_shapes(prefix: str, d: int, d_ff: int, cross: bool = False) -> dict:
    shapes = {}
    attn_names = ["attn", "xattn"] if cross else ["attn"]
    for a in attn_names:
        ln = "ln1" if a == "attn" else "lnx"
        shapes[f"{prefix}.{ln}.g"] = (d,)
        shapes[f"{prefix}.{ln}.b"] = (d,)
        for proj in "qkvo":
            shapes[f"{prefix}.{a}.{proj}.w"] = (d, d)
            if proj != "k":  # a key bias only shifts each score row; softmax ignores it
                shapes[f"{prefix}.{a}.{proj}.b"] = (d,)
    shapes[f"{prefix}.ln2.g"] = (d,)
    shapes[f"{prefix}.ln2.b"] = (d,)
    shapes[f"{prefix}.ff.fc1.w"] = (d, d_ff)
    shapes[f"{prefix}.ff.fc1.b"] = (d_ff,)
    shapes[f"{prefix}.ff.fc2.w"] = (d_ff, d)
    shapes[f"{prefix}.ff.fc2.b"] = (d,)
    return shapes


def param_shapes(cfg: ModelConfig, parts=("audio", "mae", "text", "clap")) -> dict:
    d, f = cfg.d_model, cfg.d_ff
    s = {}
    if "audio" in parts:
        s["audio.patch_proj.w"] = (PATCH_DIM, d)
        s["audio.patch_proj.b"] = (d,)
        s["audio.freq_pos"] = (F_PATCHES, d)
        for i in range(cfg.audio_depth):
            s.update(_block_shapes(f"audio.blocks.{i}", d, f))
        s["audio.ln_f.g"] = (d,)
        s["audio.ln_f.b"] = (d,)
    if "mae" in parts:
        s["mae.embed.w"] = (d, d)
        s["mae.embed.b"] = (d,)
        s["mae.mask_token"] = (d,)
        s["mae.freq_pos"] = (F_PATCHES, d)
        for i in range(cfg.mae_depth):
            s.update(_block_shapes(f"mae.blocks.{i}", d, f))
        s["mae.ln_f.g"] = (d,)
        s["mae.ln_f.b"] = (d,)
        s["mae.head.w"] = (d, PATCH_DIM)
        s["mae.head.b"] = (PATCH_DIM,)
    if "text" in parts:
        if cfg.vocab_size < 1:
            raise ValueError("text networks need vocab_size")
        s["text.tok_emb"] = (cfg.vocab_size, d)
        s["text.pos_emb"] = (cfg.max_text_len, d)
        for i in range(cfg.text_depth):
            s.update(_block_shapes(f"text.blocks.{i}", d, f))
        s["text.ln_f.g"] = (d,)
        s["text.ln_f.b"] = (d,)
        for i in range(cfg.decoder_depth):
            s.update(_block_shapes(f"textdec.blocks.{i}", d, f, cross=True))
        s["textdec.ln_f.g"] = (d,)
        s["textdec.ln_f.b"] = (d,)
        s["textdec.head.w"] = (d, cfg.vocab_size)
        s["textdec.head.b"] = (cfg.vocab_size,)
    if "clap" in parts:
        for side in ("audio", "text"):
            s[f"pool.{side}.query"] = (d,)
            for proj in "qkvo":
                s[f"pool.{side}.attn.{proj}.w"] = (d, d)
                if proj != "k":
                    s[f"pool.{side}.attn.{proj}.b"] = (d,)
            s[f"proj.{side}.w"] = (d, cfg.d_embed)
        s["logit_scale"] = (1,)
    return s


STAGE_PARTS = {"mae": ("audio", "mae"), "clap": ("audio", "text", "clap")}


def count_parameters(cfg: ModelConfig, stage: str = "clap") -> int:
    return int(sum(np.prod(sh) for sh in param_shapes(cfg, STAGE_PARTS[stage]).values()))


def init_params(cfg: ModelConfig, stage: str, seed: int = 0) -> ParamStore:
    """N(0, std^2) weights, zero biases, unit norm gains, ln(init_inv_tau) temperature."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, shape in param_shapes(cfg, STAGE_PARTS[stage]).items():
        if name == "logit_scale":
            data = np.full(shape, math.log(cfg.init_inv_tau))
        elif name.endswith(".g"):
            data = np.ones(shape)
        elif name.endswith(".b"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, cfg.init_std, size=shape)
        store[name] = ad.parameter(data)
    return store


# ----------------------------------------------------------------------------
# building blocks


def linear(x: Tensor, p: ParamStore, name: str) -> Tensor:
    y = ad.matmul(x, p[name + ".w"])
    b = p.get(name + ".b")
    return y if b is None else ad.add(y, b)


def layer_norm(x: Tensor, p: ParamStore, name: str) -> Tensor:
    return ad.layer_norm(x, p[name + ".g"], p[name + ".b"], eps=1e-5)


def attention(xq: Tensor, xkv: Tensor, p: ParamStore, name: str, heads: int, mask=None) -> Tensor:
    """Multi-head attention. ``mask`` is additive, broadcastable to (B, h, Lq, Lk)."""
    bq, lq, d = xq.shape
    bk, lk, _ = xkv.shape
    dh = d // heads
    q = linear(xq, p, name + ".q").reshape(bq, lq, heads, dh).transpose(0, 2, 1, 3)
    k = linear(xkv, p, name + ".k").reshape(bk, lk, heads, dh).transpose(0, 2, 3, 1)
    v = linear(xkv, p, name + ".v").reshape(bk, lk, heads, dh).transpose(0, 2, 1, 3)
    scores = ad.scale(ad.matmul(q, k), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = ad.add(scores, np.asarray(mask, dtype=scores.data.dtype))
    weights = ad.softmax(scores, axis=-1)
    out = ad.matmul(weights, v)
    b = out.shape[0]
    out = out.transpose(0, 2, 1, 3).reshape(b, lq, d)
    return linear(out, p, name + ".o")


def feed_forward(x: Tensor, p: ParamStore, name: str) -> Tensor:
    return linear(ad.silu(linear(x, p, name + ".fc1")), p, name + ".fc2")


def block(x: Tensor, p: ParamStore, name: str, heads: int, mask=None,
          memory: Tensor | None = None, memory_mask=None) -> Tensor:
    h = layer_norm(x, p, name + ".ln1")
    x = ad.add(x, attention(h, h, p, name + ".attn", heads, mask))
    if memory is not None:
        h = layer_norm(x, p, name + ".lnx")
        x = ad.add(x, attention(h, memory, p, name + ".xattn", heads, memory_mask))
    h = layer_norm(x, p, name + ".ln2")
    return ad.add(x, feed_forward(h, p, name + ".ff"))


def key_mask(valid: np.ndarray) -> np.ndarray:
    """(B, L) bool validity -> additive (B, 1, 1, L) mask."""
    return np.where(np.asarray(valid, dtype=bool), 0.0, NEG_INF)[:, None, None, :]


def causal_mask(length: int) -> np.ndarray:
    return np.triu(np.full((length, length), NEG_INF), k=1)


# ----------------------------------------------------------------------------
# audio side


@dataclass
class AudioBatch:
    """Padded batch of patch grids plus the per-item plans laid out as index arrays.

    ``kept_idx`` lists encoder slots (kept patches then pad slots); pad slots are
    marked False in ``kept_valid``. ``restore_idx`` maps each grid position to
    its row in ``[encoder outputs ; mask token]`` for the MAE decoder.
    """
    patches: np.ndarray      # (B, N, 256)
    t_idx: np.ndarray        # (B, N)
    f_idx: np.ndarray        # (B, N)
    grid_valid: np.ndarray   # (B, N)
    kept_idx: np.ndarray     # (B, K)
    kept_valid: np.ndarray   # (B, K)
    restore_idx: np.ndarray  # (B, N)
    masked: np.ndarray       # (B, N) True where the patch was masked/dropped
    seeds: list = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return self.patches.shape[0]


def make_audio_batch(grids, plans) -> AudioBatch:
    if len(grids) != len(plans) or not grids:
        raise ValueError("need one plan per grid and a nonempty batch")
    B = len(grids)
    N = max(g.n for g in grids)
    K = max(len(pl.kept) + len(pl.padded) for pl in plans)
    patches = np.zeros((B, N, PATCH_DIM))
    t_idx = np.zeros((B, N), dtype=np.int64)
    f_idx = np.zeros((B, N), dtype=np.int64)
    grid_valid = np.zeros((B, N), dtype=bool)
    kept_idx = np.zeros((B, K), dtype=np.int64)
    kept_valid = np.zeros((B, K), dtype=bool)
    restore_idx = np.full((B, N), K, dtype=np.int64)
    masked = np.zeros((B, N), dtype=bool)
    for b, (g, pl) in enumerate(zip(grids, plans)):
        n = g.n
        if not pl.kept:
            raise ValueError("mask plan keeps no patches")
        patches[b, :n] = g.patches
        t_idx[b, :n] = g.time_index()
        f_idx[b, :n] = g.freq_index()
        grid_valid[b, :n] = True
        kept = np.asarray(pl.kept, dtype=np.int64)
        if kept.max() >= n:
            raise ValueError("mask plan does not match the grid")
        kept_idx[b, : kept.size] = kept
        kept_valid[b, : kept.size] = True
        restore_idx[b, kept] = np.arange(kept.size)
        masked[b, pl.masked] = True
    return AudioBatch(patches, t_idx, f_idx, grid_valid, kept_idx, kept_valid, restore_idx,
                      masked, [pl.seed for pl in plans])


def _positions(p: ParamStore, prefix: str, t_idx: np.ndarray, f_idx: np.ndarray, d: int) -> Tensor:
    table = sinusoid_table(int(t_idx.max()) + 1, d)[t_idx]
    return ad.add(ad.embedding_lookup(p[prefix + ".freq_pos"], f_idx), table)


def audio_encode_batch(p: ParamStore, cfg: ModelConfig, batch: AudioBatch) -> Tensor:
    """(B, K, d) encoder outputs for the kept slots; pad slots are zero inputs and masked keys."""
    x = linear(Tensor(batch.patches), p, "audio.patch_proj")
    x = ad.add(x, _positions(p, "audio", batch.t_idx, batch.f_idx, cfg.d_model))
    rows = np.arange(batch.batch_size)[:, None]
    x = ad.gather(x, (rows, batch.kept_idx))
    x = ad.mul(x, batch.kept_valid[..., None].astype(x.data.dtype))
    mask = key_mask(batch.kept_valid)
    for i in range(cfg.audio_depth):
        x = block(x, p, f"audio.blocks.{i}", cfg.heads, mask)
    return layer_norm(x, p, "audio.ln_f")


def mae_decode_batch(p: ParamStore, cfg: ModelConfig, batch: AudioBatch, enc: Tensor) -> Tensor:
    """(B, N, 256) reconstructions for every grid position."""
    B, K, d = enc.shape
    y = linear(enc, p, "mae.embed")
    token = ad.add(p["mae.mask_token"].reshape(1, 1, d), np.zeros((B, 1, d)))
    src = ad.concat([y, token], axis=1)
    rows = np.arange(B)[:, None]
    x = ad.gather(src, (rows, batch.restore_idx))
    x = ad.add(x, _positions(p, "mae", batch.t_idx, batch.f_idx, cfg.d_model))
    mask = key_mask(batch.grid_valid)
    for i in range(cfg.mae_depth):
        x = block(x, p, f"mae.blocks.{i}", cfg.heads, mask)
    x = layer_norm(x, p, "mae.ln_f")
    return linear(x, p, "mae.head")


def audio_encode(grid: PatchGrid, plan: MaskPlan, p: ParamStore, cfg: ModelConfig) -> Tensor:
    """Encoder rows for one clip, one per kept patch (pad slots dropped)."""
    if not plan.kept:
        raise ValueError("empty kept set")
    out = audio_encode_batch(p, cfg, make_audio_batch([grid], [plan]))
    return out[0, : len(plan.kept)]


def mae_decode(grid: PatchGrid, plan: MaskPlan, p: ParamStore, cfg: ModelConfig) -> Tensor:
    batch = make_audio_batch([grid], [plan])
    enc = audio_encode_batch(p, cfg, batch)
    return mae_decode_batch(p, cfg, batch, enc)[0]


# ----------------------------------------------------------------------------
# text side


def text_encode_batch(p: ParamStore, cfg: ModelConfig, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    B, L = ids.shape
    if L > cfg.max_text_len:
        raise ValueError(f"sequence length {L} exceeds {cfg.max_text_len}")
    x = ad.add(ad.embedding_lookup(p["text.tok_emb"], ids), ad.gather(p["text.pos_emb"], slice(0, L)))
    mask = causal_mask(L)[None, None] + key_mask(ids != 0)
    for i in range(cfg.text_depth):
        x = block(x, p, f"text.blocks.{i}", cfg.heads, mask)
    return layer_norm(x, p, "text.ln_f")


def text_decode_batch(p: ParamStore, cfg: ModelConfig, ids: np.ndarray, text_h: Tensor,
                      memory: Tensor | None, memory_valid: np.ndarray | None) -> Tensor:
    """Next-token logits (B, L, V). ``memory=None`` runs the text-only ablation."""
    ids = np.asarray(ids, dtype=np.int64)
    L = ids.shape[1]
    mask = causal_mask(L)[None, None] + key_mask(ids != 0)
    mem_mask = None if memory is None else key_mask(memory_valid)
    x = text_h
    for i in range(cfg.decoder_depth):
        x = block(x, p, f"textdec.blocks.{i}", cfg.heads, mask, memory, mem_mask)
    x = layer_norm(x, p, "textdec.ln_f")
    return linear(x, p, "textdec.head")


def text_encode(ids, p: ParamStore, cfg: ModelConfig) -> Tensor:
    ids = np.asarray(ids.ids if hasattr(ids, "ids") else ids, dtype=np.int64)[None]
    return text_encode_batch(p, cfg, ids)[0]


def text_decode(ids, audio_mem: Tensor, p: ParamStore, cfg: ModelConfig) -> Tensor:
    ids = np.asarray(ids.ids if hasattr(ids, "ids") else ids, dtype=np.int64)[None]
    if audio_mem.shape[0] < 1:
        raise ValueError("audio memory is empty")
    mem = audio_mem.reshape(1, *audio_mem.shape)
    h = text_encode_batch(p, cfg, ids)
    return text_decode_batch(p, cfg, ids, h, mem, np.ones((1, audio_mem.shape[0]), bool))[0]


# ----------------------------------------------------------------------------
# pooling and projection


def attention_pool_batch(p: ParamStore, cfg: ModelConfig, side: str, seq: Tensor,
                         valid: np.ndarray) -> Tensor:
    """Single learned query attending over ``seq`` (B, L, d) -> (B, d)."""
    valid = np.asarray(valid, dtype=bool)
    if not np.all(valid.any(axis=1)):
        raise ValueError("attention pooling over an all-pad sequence")
    B, _, d = seq.shape
    q = p[f"pool.{side}.query"].reshape(1, 1, d)
    out = attention(q, seq, p, f"pool.{side}.attn", cfg.pool_heads, key_mask(valid))
    return out.reshape(B, d)


def attention_pool(seq: Tensor, pad_mask, p: ParamStore, cfg: ModelConfig, side: str = "audio") -> Tensor:
    valid = ~np.asarray(pad_mask, dtype=bool)[None]
    return attention_pool_batch(p, cfg, side, seq.reshape(1, *seq.shape), valid)[0]


def project_embed(pooled: Tensor, p: ParamStore, side: str) -> Tensor:
    """Side-specific linear map (no bias) into the shared space, then l2-normalise."""
    return ad.l2_normalize(ad.matmul(pooled if pooled.ndim == 2 else pooled.reshape(1, -1),
                                     p[f"proj.{side}.w"]), axis=-1)


# ----------------------------------------------------------------------------
# whole-model forwards used by training and evaluation


@dataclass
class ClapOutputs:
    audio_emb: Tensor
    text_emb: Tensor
    logits: Tensor | None
    audio_seq: Tensor


def clap_forward(p: ParamStore, cfg: ModelConfig, batch: AudioBatch, ids: np.ndarray,
                 with_decoder: bool = True) -> ClapOutputs:
    audio_seq = audio_encode_batch(p, cfg, batch)
    audio_emb = project_embed(attention_pool_batch(p, cfg, "audio", audio_seq, batch.kept_valid), p, "audio")
    text_h = text_encode_batch(p, cfg, ids)
    text_emb = project_embed(attention_pool_batch(p, cfg, "text", text_h, ids != 0), p, "text")
    logits = None
    if with_decoder:
        logits = text_decode_batch(p, cfg, ids, text_h, audio_seq, batch.kept_valid)
    return ClapOutputs(audio_emb, text_emb, logits, audio_seq)


def embed_audio(p: ParamStore, cfg: ModelConfig, batch: AudioBatch) -> Tensor:
    seq = audio_encode_batch(p, cfg, batch)
    return project_embed(attention_pool_batch(p, cfg, "audio", seq, batch.kept_valid), p, "audio")


def embed_text(p: ParamStore, cfg: ModelConfig, ids: np.ndarray) -> Tensor:
    h = text_encode_batch(p, cfg, ids)
    return project_embed(attention_pool_batch(p, cfg, "text", h, ids != 0), p, "text")
