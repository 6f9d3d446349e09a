"""Acceptance checks, one test per criterion.

Each test prints a single ``[criterion N] PASS|FAIL`` line (visible even
without ``-s``) and then asserts. The training-based criteria (5, 6, 7) take
a few minutes each on one CPU core.
"""

import math
import time

import numpy as np
import pytest

from audiotext import autodiff as ad
from audiotext.audio import SAMPLE_RATE, make_mask_plan, mel_spectrogram, patchify
from audiotext.checkpoint import load_checkpoint, save_checkpoint
from audiotext.data import generate_corpus
from audiotext.evaluation import ClapModel, embed_corpus, generate_caption, modality_gap, retrieval_eval
from audiotext.gradcheck import END_TO_END_TOL, PRIMITIVE_TOL, run_suite
from audiotext.losses import captioning_nll, info_nce_tau
from audiotext.models import ModelConfig, attention_pool, init_params, text_decode, text_encode
from audiotext.optim import (AdamWState, PassCounter, SAMConfig, ScheduleConfig, adamw_apply, global_grad_norm,
                             sam_perturb, sam_step)
from audiotext.text import build_vocab, detokenize
from audiotext.training import TrainConfig, build_batch, clap_loss_fn, read_metrics, stage1_train, stage2_train

pytestmark = pytest.mark.acceptance


@pytest.fixture
def verdict(capsys):
    def report(n: int, title: str, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'} {title}: {detail}")
        assert ok, detail
    return report


# ----------------------------------------------------------------------------
# 1. gradient fidelity


def test_criterion_1_gradient_fidelity(verdict):
    res = run_suite(range(10), n_points=10)
    prim = max(res["primitives"].values())
    e2e = max(res["end_to_end"].values())
    ok = prim < PRIMITIVE_TOL and e2e < END_TO_END_TOL and res["seconds"] < 120.0
    verdict(1, "gradient fidelity", ok,
            f"{len(res['primitives'])} primitives max rel err {prim:.2e} (< {PRIMITIVE_TOL:g}), "
            f"end-to-end max {e2e:.2e} (< {END_TO_END_TOL:g}) over 10 seeds in {res['seconds']:.1f} s (< 120 s)")


# ----------------------------------------------------------------------------
# 2. SAM algebra


def _quadratic(w):
    p = {"w": ad.parameter(np.array(w, dtype=np.float64))}
    return p, (lambda: ad.scale(ad.tsum(ad.mul(p["w"], p["w"])), 0.5))


def test_criterion_2_sam_algebra(verdict, float64_mode):
    rng = np.random.default_rng(2)
    norm_err = 0.0
    for _ in range(100):
        g = {"a": rng.normal(size=(4, 3)) * 10 ** rng.uniform(-6, 3), "b": rng.normal(size=5)}
        rho = float(rng.uniform(1e-3, 1.0))
        norm_err = max(norm_err, abs(global_grad_norm(sam_perturb(g, rho)) - rho))

    # the gradient of 1/2 |w|^2 is w, so the weights seen by the second pass are its gradient
    p, loss = _quadratic([3.0, 4.0])
    seen = []

    def recording():
        seen.append(p["w"].data.copy())
        return loss()

    counter = PassCounter()
    sam_step(recording, p, AdamWState(weight_decay=0.0), 0.0, SAMConfig(0.075), counter)
    second_err = float(np.max(np.abs(seen[1] - [3.045, 4.060])))
    passes = counter.last_step

    w0 = rng.normal(size=6)
    p1, l1 = _quadratic(w0)
    p2, _ = _quadratic(w0)
    s1, s2 = AdamWState(), AdamWState()
    for _ in range(5):
        sam_step(l1, p1, s1, 0.05, SAMConfig(0.0))
        adamw_apply(p2, {"w": p2["w"].data.copy()}, s2, 0.05)
    bitwise = np.array_equal(p1["w"].data, p2["w"].data)

    ok = norm_err < 1e-12 and second_err < 1e-9 and bitwise and passes == 2
    verdict(2, "SAM algebra", ok,
            f"| |eps|-rho | max {norm_err:.1e}; second-pass gradient err {second_err:.1e}; "
            f"rho=0 bitwise == adamw: {bitwise}; passes per step: {passes}")


# ----------------------------------------------------------------------------
# 3. closed-form losses


def test_criterion_3_closed_forms(verdict, float64_mode):
    degenerate = float(info_nce_tau(ad.Tensor(np.tile([0.6, 0.8], (4, 1))), ad.Tensor(np.tile([0.6, 0.8], (4, 1))),
                                    1.0).data)
    ortho = float(info_nce_tau(ad.Tensor(np.eye(2)), ad.Tensor(np.eye(2)), 1.0).data)
    nll = float(captioning_nll(ad.Tensor(np.zeros((6, 16))), np.array([4, 9, 15, 5, 6, 2])).data)
    errs = (abs(degenerate - 2.772589), abs(ortho - 0.626524), abs(nll - 2.772589))
    verdict(3, "closed-form losses", max(errs) < 1e-6,
            f"degenerate N=4 {degenerate:.7f}, orthonormal N=2 {ortho:.7f}, uniform |V|=16 NLL {nll:.7f}; "
            f"max err {max(errs):.1e}")


# ----------------------------------------------------------------------------
# 4. patch arithmetic


def test_criterion_4_patch_arithmetic(verdict):
    mel = mel_spectrogram(np.zeros(int(10.24 * SAMPLE_RATE)))
    frames, grid = mel.frames, patchify(mel)
    kept = len(make_mask_plan(grid.n, "mae", mask_ratio=0.8, seed=0).kept)
    ok = frames.shape[0] == 1024 and grid.n == 512 and kept == 102
    verdict(4, "patch arithmetic", ok, f"10.24 s -> {frames.shape[0]} frames -> {grid.n} patches; "
                                       f"ratio 0.8 keeps {kept}")


# ----------------------------------------------------------------------------
# 5. memorisation


def test_criterion_5_memorisation(verdict):
    corpus = generate_corpus(7, 8)
    cfg = TrainConfig(stage="clap", model=ModelConfig(), random_init=True, sam_rho=0.075, batch_size=8,
                      schedule=ScheduleConfig(50, 500, 1e-3, 1e-5), seed=0)
    t0 = time.perf_counter()
    res = stage2_train(cfg, corpus)
    model = ClapModel(res.params, cfg.model, res.vocab)
    eb = embed_corpus(corpus, model)
    recall = {d: r.recall[1] for d, r in retrieval_eval(eb.audio, eb.text, ks=(1,)).items()}
    stash = []
    with ad.no_grad():
        clap_loss_fn(res.params, cfg, build_batch(corpus.items, cfg, -1, res.vocab), stash)()
    nll = stash[0][0].captioning
    captions = [detokenize(generate_caption(it.audio(), model, 0.0, max_len=77).ids, model.vocab)
                for it in corpus.items]
    exact = sum(c == it.caption for c, it in zip(captions, corpus.items))
    seconds = time.perf_counter() - t0
    ok = all(v == 100.0 for v in recall.values()) and nll < 0.1 and exact == 8 and seconds < 600
    verdict(5, "memorisation", ok,
            f"desk model 4x128, 8 pairs, 500 steps: R@1 a->t {recall['audio_to_text']:.0f}%, "
            f"t->a {recall['text_to_audio']:.0f}%; caption NLL {nll:.4f} (< 0.1); "
            f"greedy exact captions {exact}/8; {seconds:.0f} s (< 600 s)")


# ----------------------------------------------------------------------------
# 6 and 10. SAM regularisation direction, modality gap


SAM_SEEDS = (0, 1, 2)


def _small_model():
    return ModelConfig(d_model=64, heads=4, d_ff=128, audio_depth=2, mae_depth=1, text_depth=2, pool_heads=4,
                       d_embed=64)


@pytest.fixture(scope="module")
def sam_runs(tmp_path_factory):
    """Per seed: corpus seed 100+s, init and batch seed s; 64 train / 16 val; rho 0 and 0.05."""
    root = tmp_path_factory.mktemp("sam_runs")
    runs = {}
    for s in SAM_SEEDS:
        corpus = generate_corpus(100 + s, 80, (1.0, 2.0))
        train, val = corpus.subset(range(64)), corpus.subset(range(64, 80))
        for rho in (0.0, 0.05):
            cfg = TrainConfig(stage="clap", model=_small_model(), schedule=ScheduleConfig(20, 600, 1e-3, 1e-5),
                              batch_size=16, target_len=64, sam_rho=rho, seed=s, eval_every=20, random_init=True)
            run_dir = root / f"seed{s}_rho{rho:g}"
            stage2_train(cfg, train, val, run_dir=run_dir)
            runs[(s, rho)] = read_metrics(run_dir / "metrics.csv")
    return runs


def _val_curve(rows):
    return [(int(r["step"]), float(r["loss_total"])) for r in rows if r["split"] == "val"]


def test_criterion_6_sam_regularisation_direction(verdict, sam_runs):
    argmin_gap, final_gap, per_seed = [], [], []
    for s in SAM_SEEDS:
        plain, sam = _val_curve(sam_runs[(s, 0.0)]), _val_curve(sam_runs[(s, 0.05)])
        a0, a1 = min(plain, key=lambda r: r[1])[0], min(sam, key=lambda r: r[1])[0]
        argmin_gap.append(a1 - a0)
        final_gap.append(plain[-1][1] - sam[-1][1])
        per_seed.append(f"seed {s}: val-min step {a0} vs {a1}, final {plain[-1][1]:.2f} vs {sam[-1][1]:.2f}")
    ok = float(np.median(argmin_gap)) > 0 and float(np.median(final_gap)) >= 0
    verdict(6, "SAM regularisation direction", ok,
            f"rho=0 vs rho=0.05, median val-min step lead {np.median(argmin_gap):.0f}, "
            f"median final val-loss excess {np.median(final_gap):.3f} ({'; '.join(per_seed)})")


def test_criterion_10_modality_gap(verdict, sam_runs):
    cases = [(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]]), 0.0),
             (np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([[0.0, 1.0], [0.0, -1.0]]), 0.0),
             (np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), math.sqrt(2.0))]
    exact = all(modality_gap(a, t).magnitude == v for a, t, v in cases)
    logged = [float(r["gap_norm"]) for rows in sam_runs.values() for r in rows if r["split"] == "val"]
    expected_rows = len(sam_runs) * (600 // 20 + 1)
    in_range = len(logged) == expected_rows and all(0.0 <= g <= 2.0 for g in logged)
    verdict(10, "modality gap", exact and in_range,
            f"hand cases (0, 0, sqrt 2) exact: {exact}; {len(logged)}/{expected_rows} logged gap values "
            f"in [{min(logged):.3f}, {max(logged):.3f}] within [0, 2]")


# ----------------------------------------------------------------------------
# 7. stage-1 benefit


LOSS_THRESHOLD = 4.0
SMOOTH = 10


def _steps_to_threshold(rows):
    losses = [float(r["loss_total"]) for r in rows if r["split"] == "train"]
    for i in range(SMOOTH, len(losses) + 1):
        if np.mean(losses[i - SMOOTH:i]) <= LOSS_THRESHOLD:
            return i
    return math.inf


def test_criterion_7_stage1_benefit(verdict, tmp_path):
    pre, rand = [], []
    for s in (0, 1, 2):
        corpus = generate_corpus(200 + s, 64, (1.0, 2.0))
        s1 = TrainConfig(stage="mae", model=_small_model(), schedule=ScheduleConfig(20, 300, 1e-3, 1e-5),
                         batch_size=16, seed=s, crop_seconds=2.0)
        stage1_train(s1, corpus, run_dir=tmp_path / f"mae{s}")
        for init, out in ((dict(init_checkpoint=str(tmp_path / f"mae{s}/checkpoints/encoder")), pre),
                          (dict(random_init=True), rand)):
            cfg = TrainConfig(stage="clap", model=_small_model(), schedule=ScheduleConfig(20, 300, 1e-3, 1e-5),
                              batch_size=16, target_len=64, seed=s, sam_rho=0.0, eval_every=0, **init)
            run_dir = tmp_path / f"clap{s}_{'pre' if out is pre else 'rand'}"
            stage2_train(cfg, corpus, run_dir=run_dir)
            out.append(_steps_to_threshold(read_metrics(run_dir / "metrics.csv")))
    ok = float(np.median(pre)) < float(np.median(rand))
    verdict(7, "stage-1 benefit", ok,
            f"steps until the {SMOOTH}-step mean train loss <= {LOSS_THRESHOLD}: pretrained {pre} "
            f"(median {np.median(pre):.0f}) vs random {rand} (median {np.median(rand):.0f})")


# ----------------------------------------------------------------------------
# 8. retrieval oracle


def _oracle_recall(sim, k):
    hits = 0
    for i in range(sim.shape[0]):
        better = sum(1 for j in range(sim.shape[1]) if sim[i, j] > sim[i, i])
        hits += better < k
    return 100.0 * hits / sim.shape[0]


def test_criterion_8_retrieval_oracle(verdict):
    rng = np.random.default_rng(8)
    mismatches = 0
    for _ in range(50):
        a = rng.normal(size=(100, 16))
        t = a + rng.normal(size=(100, 16)) * rng.uniform(0.5, 3.0)
        a /= np.linalg.norm(a, axis=1, keepdims=True)
        t /= np.linalg.norm(t, axis=1, keepdims=True)
        reports = retrieval_eval(a, t, ks=(1, 5, 10))
        sim = a @ t.T
        for direction, s in (("audio_to_text", sim), ("text_to_audio", sim.T)):
            for k in (1, 5, 10):
                mismatches += reports[direction].recall[k] != _oracle_recall(s, k)
    verdict(8, "retrieval oracle", mismatches == 0,
            f"{mismatches} mismatches over 50 batches x 100 pairs x R@{{1,5,10}} x 2 directions")


# ----------------------------------------------------------------------------
# 9. structural invariants


def test_criterion_9_structural_invariants(verdict, tmp_path):
    rng = np.random.default_rng(9)
    vocab = build_vocab(generate_corpus(0, 20).captions())
    cfg = ModelConfig(vocab_size=len(vocab), max_text_len=16)
    params = init_params(cfg, "clap", seed=9)

    def random_ids(n):
        return np.concatenate([[1], rng.integers(4, len(vocab), size=n - 1)])

    causal_err, changed = 0.0, 0
    mem = ad.Tensor(rng.normal(size=(6, cfg.d_model)))
    with ad.no_grad():
        for _ in range(20):
            ids = random_ids(12)
            i = int(rng.integers(0, 10))
            j = int(rng.integers(i + 1, 12))
            ids2 = ids.copy()
            ids2[j] = 4 + (ids[j] - 4 + 1) % (len(vocab) - 4)
            for fn in (lambda x: text_encode(x, params, cfg), lambda x: text_decode(x, mem, params, cfg)):
                a, b = fn(ids).data, fn(ids2).data
                causal_err = max(causal_err, float(np.max(np.abs(a[: i + 1] - b[: i + 1]))))
                changed += not np.allclose(a[j], b[j])

        pool_err = 0.0
        for side in ("audio", "text"):
            for _ in range(20):
                x = rng.normal(size=(9, cfg.d_model))
                pad = rng.random(9) < 0.3
                pad[0] = False
                perm = rng.permutation(9)
                a = attention_pool(ad.Tensor(x), pad, params, cfg, side).data
                b = attention_pool(ad.Tensor(x[perm]), pad[perm], params, cfg, side).data
                x2 = np.concatenate([x, rng.normal(size=(4, cfg.d_model)) * 100])
                c = attention_pool(ad.Tensor(x2), np.concatenate([pad, [True] * 4]), params, cfg, side).data
                pool_err = max(pool_err, float(np.max(np.abs(a - b))), float(np.max(np.abs(a - c))))

    save_checkpoint(params, tmp_path / "ck", "clap", {"model": cfg.to_dict()}, vocab=vocab)
    back = load_checkpoint(tmp_path / "ck", expect_config={"model": cfg.to_dict()})
    bitwise = list(back.params) == list(params) and all(
        np.array_equal(back.params[k].data, params[k].data) for k in params) and back.vocab == vocab

    corpus = generate_corpus(3, 12, (1.0, 1.5))
    train, val = corpus.subset(range(10)), corpus.subset(range(10, 12))
    small = ModelConfig(d_model=32, heads=2, d_ff=48, audio_depth=1, mae_depth=1, text_depth=2, pool_heads=2,
                        d_embed=32)
    tables = []
    for name in ("a", "b"):
        run_cfg = TrainConfig(stage="clap", model=small, schedule=ScheduleConfig(2, 10, 1e-3, 1e-5), batch_size=4,
                              target_len=32, eval_every=5, random_init=True, seed=4)
        stage2_train(run_cfg, train, val, run_dir=tmp_path / name)
        tables.append([{k: v for k, v in r.items() if k != "wall_ms"}
                       for r in read_metrics(tmp_path / name / "metrics.csv")])
    deterministic = tables[0] == tables[1] and len(tables[0]) == 13 and \
        (tmp_path / "a/checkpoints/final/params.bin").read_bytes() == \
        (tmp_path / "b/checkpoints/final/params.bin").read_bytes()

    ok = causal_err < 1e-6 and changed == 40 and pool_err < 1e-6 and bitwise and deterministic
    verdict(9, "structural invariants", ok,
            f"causality max prefix diff {causal_err:.1e} over 20 trials x (encoder, decoder), "
            f"perturbed position changed {changed}/40; pooler perm/pad max diff {pool_err:.1e}; "
            f"checkpoint bitwise: {bitwise}; repeated-run metrics and checkpoint identical: {deterministic}")
