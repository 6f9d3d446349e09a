"""Contrastive, captioning and reconstruction objectives."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .text import PAD

MAX_INV_TAU = 100.0
UNIT_TOL = 1e-5


def check_unit_rows(x: Tensor, what: str) -> None:
    norms = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=-1))
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValueError(f"{what} rows must be l2-normalised")


def info_nce(audio: Tensor, text: Tensor, logit_scale) -> Tensor:
    """Symmetric InfoNCE over the N x N similarity matrix scaled by 1/tau = exp(s).

    ``logit_scale`` is the learnable s = ln(1/tau): a Tensor, or a float.
    Returns mean row cross-entropy plus mean column cross-entropy.
    """
    if audio.shape != text.shape or audio.ndim != 2:
        raise ValueError("audio and text embeddings must both be (N, d)")
    check_unit_rows(audio, "audio")
    check_unit_rows(text, "text")
    n = audio.shape[0]
    if not isinstance(logit_scale, Tensor):
        logit_scale = Tensor(np.array([float(logit_scale)]))
    sim = ad.mul(ad.matmul(audio, text.transpose()), ad.exp(logit_scale))
    diag = np.arange(n)
    a2t = ad.cross_entropy_from_logits(sim, diag)
    t2a = ad.cross_entropy_from_logits(sim.transpose(), diag)
    return ad.add(a2t, t2a)


def info_nce_tau(audio: Tensor, text: Tensor, tau: float) -> Tensor:
    if tau <= 0:
        raise ValueError("tau must be positive")
    return info_nce(audio, text, math.log(1.0 / tau))


def captioning_nll(logits: Tensor, targets) -> Tensor:
    """Mean NLL over non-PAD targets of each sequence, then mean over sequences.

    Accepts (T, V) logits with (T,) targets or (B, T, V) with (B, T).
    """
    targets = np.asarray(targets.ids if hasattr(targets, "ids") else targets, dtype=np.int64)
    if targets.ndim == 1:
        targets = targets[None]
        logits = logits.reshape(1, *logits.shape)
    valid = targets != PAD
    counts = valid.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("a caption has no non-pad target tokens")
    weights = valid / (counts[:, None] * targets.shape[0])
    return ad.cross_entropy_from_logits(logits, targets, weights)


def teacher_forced_targets(ids: np.ndarray):
    """Decoder logits at positions 0..L-2 predict tokens 1..L-1."""
    ids = np.asarray(ids, dtype=np.int64)
    return ids[:, 1:]


@dataclass
class LossBreakdown:
    total: Tensor
    contrastive: float
    captioning: float
    mae: float
    lambda_cap: float

    def row(self) -> dict:
        return {"loss_total": float(self.total.data), "loss_con": self.contrastive,
                "loss_cap": self.captioning, "loss_mae": self.mae}


def combined_loss(audio: Tensor, text: Tensor, logit_scale, logits: Tensor, targets,
                  lambda_cap: float = 1.0) -> LossBreakdown:
    """InfoNCE + lambda_cap * captioning NLL. ``logits`` align with ``targets``."""
    if lambda_cap < 0:
        raise ValueError("lambda_cap must be >= 0")
    con = info_nce(audio, text, logit_scale)
    cap = captioning_nll(logits, targets)
    total = ad.add(con, ad.scale(cap, lambda_cap)) if lambda_cap else con
    return LossBreakdown(total, float(con.data), float(cap.data), 0.0, lambda_cap)


def mae_mse(recon: Tensor, target: np.ndarray, loss_mask: np.ndarray) -> Tensor:
    """Mean squared error over the patches selected by ``loss_mask`` (all 256 values each)."""
    loss_mask = np.asarray(loss_mask, dtype=bool)
    count = int(loss_mask.sum())
    if count == 0:
        raise ValueError("no patches selected for the reconstruction loss")
    diff = ad.add(recon, -np.asarray(target, dtype=recon.data.dtype))
    w = (loss_mask[..., None] / (count * recon.shape[-1])).astype(recon.data.dtype)
    return ad.tsum(ad.mul(ad.mul(diff, diff), w))


def mae_loss_mask(masked: np.ndarray, grid_valid: np.ndarray, mode: str = "masked_only") -> np.ndarray:
    if mode == "masked_only":
        return np.asarray(masked, bool) & np.asarray(grid_valid, bool)
    if mode == "all":
        return np.asarray(grid_valid, bool).copy()
    raise ValueError(f"unknown MAE loss mode {mode!r}")


def clamp_temperature(logit_scale: Tensor) -> Tensor:
    """s <- min(s, ln 100), keeping 1/tau <= 100."""
    logit_scale.data = np.minimum(logit_scale.data, math.log(MAX_INV_TAU)).astype(logit_scale.data.dtype)
    return logit_scale


def temperature(logit_scale) -> float:
    s = float(logit_scale.data.reshape(-1)[0]) if isinstance(logit_scale, Tensor) else float(logit_scale)
    return math.exp(-s)
