"""Finite-difference checks for every autodiff primitive and the full stage-2 loss."""

from __future__ import annotations

import math
import time

import numpy as np

from . import autodiff as ad
from .audio import PatchGrid, make_mask_plan, F_PATCHES
from .losses import combined_loss
from .models import clap_forward, init_params, make_audio_batch, micro_config

PRIMITIVE_TOL = 1e-4
END_TO_END_TOL = 1e-3


def _unit(x):
    return ad.l2_normalize(x, axis=-1)


def primitive_cases():
    """name -> (shape of the checked point, scalar function of it)."""
    w34 = np.random.default_rng(99).normal(size=(3, 4))
    w4 = np.random.default_rng(98).normal(size=(4,))
    b4 = np.random.default_rng(97).normal(size=(4,))
    targets = np.array([0, 3, 1])
    weights = np.random.default_rng(96).normal(size=(2, 3, 4))
    return {
        "matmul_left": ((2, 3), lambda x: ad.tsum(ad.mul(ad.matmul(x, w34), weights[0, :2]))),
        "matmul_right": ((3, 4), lambda x: ad.tsum(ad.mul(ad.matmul(ad.Tensor(w34[:2, :3]), x), np.arange(8.0).reshape(2, 4)))),
        "add": ((3, 4), lambda x: ad.tsum(ad.mul(ad.add(x, w4), weights[0]))),
        "add_bias_grad": ((4,), lambda b: ad.tsum(ad.mul(ad.add(ad.Tensor(w34), b), w34))),
        "mul": ((3, 4), lambda x: ad.tsum(ad.mul(ad.mul(x, x), w34))),
        "scale": ((3, 4), lambda x: ad.tsum(ad.mul(ad.scale(x, -2.5), w34))),
        "neg": ((3, 4), lambda x: ad.tsum(ad.mul(ad.neg(x), w34))),
        "transpose": ((2, 3, 4), lambda x: ad.tsum(ad.mul(ad.transpose(x, (2, 0, 1)), np.transpose(weights, (2, 0, 1))))),
        "reshape": ((3, 4), lambda x: ad.tsum(ad.mul(ad.reshape(x, (2, 6)), w34.reshape(2, 6)))),
        "concat": ((3, 4), lambda x: ad.tsum(ad.mul(ad.concat([x, ad.scale(x, 2.0)], axis=0), np.vstack([w34, w34 ** 2])))),
        "slice_gather": ((3, 4), lambda x: ad.tsum(ad.mul(x[np.array([0, 2, 2]), 1:], weights[0, :, :3]))),
        "embedding_lookup": ((5, 4), lambda t: ad.tsum(ad.mul(ad.embedding_lookup(t, np.array([[0, 4], [4, 2]])), weights[0, :2, None, :] * np.ones((2, 2, 4))))),
        "sigmoid": ((3, 4), lambda x: ad.tsum(ad.mul(ad.sigmoid(x), w34))),
        "silu": ((3, 4), lambda x: ad.tsum(ad.mul(ad.silu(x), w34))),
        "exp": ((3, 4), lambda x: ad.tsum(ad.mul(ad.exp(x), w34))),
        "log": ((3, 4), lambda x: ad.tsum(ad.mul(ad.log(ad.add(ad.mul(x, x), 1.0)), w34))),
        "sum": ((3, 4), lambda x: ad.tsum(ad.mul(ad.tsum(x, axis=1), np.array([1.0, -2.0, 0.5])))),
        "mean": ((3, 4), lambda x: ad.tsum(ad.mul(ad.mean(x, axis=0), w4))),
        "softmax": ((3, 4), lambda x: ad.tsum(ad.mul(ad.softmax(x, axis=-1), w34))),
        "log_softmax": ((3, 4), lambda x: ad.tsum(ad.mul(ad.log_softmax(x, axis=0), w34))),
        "layer_norm": ((3, 4), lambda x: ad.tsum(ad.mul(ad.layer_norm(x, ad.Tensor(w4), ad.Tensor(b4)), w34))),
        "layer_norm_affine": ((4,), lambda g: ad.tsum(ad.mul(ad.layer_norm(ad.Tensor(w34), g, g), w34))),
        "l2_normalize": ((3, 4), lambda x: ad.tsum(ad.mul(_unit(x), w34))),
        "cross_entropy_from_logits": ((3, 4), lambda x: ad.cross_entropy_from_logits(x, targets)),
    }


def check_primitives(n_points: int = 10, seed: int = 0) -> dict:
    """Worst relative error per primitive over ``n_points`` random float64 points."""
    rng = np.random.default_rng(seed)
    worst = {}
    for name, (shape, fn) in primitive_cases().items():
        errs = [ad.grad_check(fn, rng.normal(size=shape)) for _ in range(n_points)]
        worst[name] = max(errs)
    return worst


def micro_problem(seed: int):
    """A 2-pair micro batch and a micro model, in float64."""
    rng = np.random.default_rng(seed)
    vocab_size = 9
    cfg = micro_config(vocab_size)
    params = init_params(cfg, "clap", seed=seed)
    # fan-in scaled weights so no path is vanishingly small at the checked point
    for k, t in params.items():
        if k != "logit_scale" and not k.endswith((".g", ".b")):
            fan_in = t.shape[0] if t.ndim == 2 and not k.endswith(("emb", "freq_pos")) else 1
            t.data = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=t.shape)
        elif k.endswith(".g") or k.endswith(".b"):
            t.data = t.data + rng.normal(0.0, 0.1, size=t.shape)
    params["logit_scale"].data = np.array([math.log(2.0)])
    grids, plans = [], []
    for b, t_patches in enumerate((1, 2)):
        n = t_patches * F_PATCHES
        patches = rng.normal(size=(n, 256))
        grids.append(PatchGrid(patches, t_patches, F_PATCHES, np.zeros(n), np.ones(n)))
        plans.append(make_mask_plan(n, "clap", target_len=12, seed=b))
    batch = make_audio_batch(grids, plans)
    ids = np.array([[1, 4, 5, 6, 2, 0], [1, 7, 8, 2, 0, 0]])

    def loss():
        out = clap_forward(params, cfg, batch, ids)
        return combined_loss(out.audio_emb, out.text_emb, params["logit_scale"],
                             out.logits[:, :-1], ids[:, 1:], 1.0).total

    return params, loss


def check_end_to_end(seed: int, coords_per_tensor: int = 6) -> float:
    with ad.precision("float64"):
        params, loss = micro_problem(seed)
        rng = np.random.default_rng(1000 + seed)
        tensors = list(params.values())
        coords = {}
        for i, t in enumerate(tensors):
            k = min(coords_per_tensor, t.data.size)
            coords[i] = rng.choice(t.data.size, size=k, replace=False)
        return ad.grad_check_many(loss, tensors, coords=coords)


def run_suite(seeds=range(10), n_points: int = 10) -> dict:
    t0 = time.perf_counter()
    prim = {}
    for s in seeds:
        for name, err in check_primitives(n_points, seed=s).items():
            prim[name] = max(prim.get(name, 0.0), err)
    e2e = {int(s): check_end_to_end(int(s)) for s in seeds}
    return {"primitives": prim, "end_to_end": e2e, "seconds": time.perf_counter() - t0}
