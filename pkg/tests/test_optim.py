import numpy as np
import pytest

from audiotext import autodiff as ad
from audiotext.optim import (AdamWState, PassCounter, SAMConfig, ScheduleConfig, adamw_apply,
                             global_grad_norm, sam_perturb, sam_step, schedule_lr)


def quadratic_params(w):
    return {"w": ad.parameter(np.array(w, dtype=np.float64))}


def half_sq_norm(params):
    return lambda: ad.scale(ad.tsum(ad.mul(params["w"], params["w"])), 0.5)


class TestSchedule:
    cfg = ScheduleConfig(warmup_steps=10, total_steps=110, peak_lr=1e-3, final_lr=1e-5)

    def test_endpoints(self):
        assert schedule_lr(0, self.cfg) == 0.0
        assert schedule_lr(10, self.cfg) == pytest.approx(1e-3, abs=1e-15)
        assert schedule_lr(110, self.cfg) == 1e-5
        assert schedule_lr(500, self.cfg) == 1e-5

    def test_cosine_midpoint(self):
        mid = schedule_lr(60, self.cfg)
        assert mid == pytest.approx(1e-5 + (1e-3 - 1e-5) / 2, abs=1e-15)

    def test_continuity_at_warmup_end(self):
        gap = abs(schedule_lr(9, self.cfg) - schedule_lr(10, self.cfg))
        assert gap <= self.cfg.peak_lr / self.cfg.warmup_steps + 1e-12

    def test_invalid(self):
        with pytest.raises(ValueError):
            ScheduleConfig(warmup_steps=10, total_steps=10)
        with pytest.raises(ValueError):
            ScheduleConfig(peak_lr=1e-5, final_lr=1e-3)


class TestAdamW:
    def test_zero_grads_no_decay(self, float64_mode):
        p = quadratic_params([1.0, -2.0])
        adamw_apply(p, {"w": np.zeros(2)}, AdamWState(weight_decay=0.0), 0.1)
        np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])

    def test_one_step(self, float64_mode):
        p = quadratic_params([1.0])
        st = AdamWState(weight_decay=0.0)
        adamw_apply(p, {"w": np.ones(1)}, st, 0.1)
        assert p["w"].data[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)
        assert st.t == 1

    def test_decay_only(self, float64_mode):
        p = quadratic_params([2.0, -4.0])
        adamw_apply(p, {"w": np.zeros(2)}, AdamWState(weight_decay=0.01), 0.1)
        np.testing.assert_allclose(p["w"].data, np.array([2.0, -4.0]) * (1 - 0.001), rtol=0, atol=1e-15)

    def test_lr_zero_changes_nothing(self, float64_mode):
        p = quadratic_params([0.3, 0.7])
        adamw_apply(p, {"w": np.array([5.0, -1.0])}, AdamWState(weight_decay=0.01), 0.0)
        np.testing.assert_array_equal(p["w"].data, [0.3, 0.7])

    def test_non_finite_grad_aborts(self, float64_mode):
        p = quadratic_params([1.0, 2.0])
        st = AdamWState()
        with pytest.raises(ad.NumericError):
            adamw_apply(p, {"w": np.array([1.0, np.nan])}, st, 0.1)
        np.testing.assert_array_equal(p["w"].data, [1.0, 2.0])
        assert st.t == 0 and not st.m

    def test_decay_excludes_listed_names(self, float64_mode):
        p = {"w": ad.parameter(np.ones((2, 2))), "b": ad.parameter(np.ones(2))}
        st = AdamWState(weight_decay=0.5, decay={"w"})
        adamw_apply(p, {"w": np.zeros((2, 2)), "b": np.zeros(2)}, st, 0.1)
        np.testing.assert_allclose(p["w"].data, 0.95)
        np.testing.assert_array_equal(p["b"].data, 1.0)


class TestSAM:
    def test_zero_gradient_fallback(self):
        eps = sam_perturb({"a": np.zeros(3), "b": np.zeros((2, 2))}, 0.1)
        assert all(np.all(e == 0) for e in eps.values())

    def test_perturbation_value(self):
        eps = sam_perturb({"w": np.array([3.0, 4.0])}, 0.075)
        np.testing.assert_allclose(eps["w"], [0.045, 0.060], atol=1e-15)

    def test_norm_is_rho(self, rng):
        for _ in range(20):
            g = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=7) * 1e-3}
            rho = float(rng.uniform(0.001, 1.0))
            assert abs(global_grad_norm(sam_perturb(g, rho)) - rho) < 1e-12

    def test_second_pass_gradient(self, float64_mode):
        p = quadratic_params([3.0, 4.0])
        seen = []

        def loss():
            seen.append(p["w"].data.copy())
            return half_sq_norm(p)()

        sam_step(loss, p, AdamWState(weight_decay=0.0), 0.0, SAMConfig(0.075))
        np.testing.assert_allclose(seen[1], [3.045, 4.060], atol=1e-9)
        # lr = 0: weights restored exactly
        np.testing.assert_array_equal(p["w"].data, [3.0, 4.0])

    def test_rho_zero_matches_adamw_bitwise(self, float64_mode, rng):
        w0 = rng.normal(size=5)
        p1, p2 = quadratic_params(w0), quadratic_params(w0)
        s1, s2 = AdamWState(), AdamWState()
        for _ in range(3):
            sam_step(half_sq_norm(p1), p1, s1, 0.05, SAMConfig(0.0))
            adamw_apply(p2, {"w": p2["w"].data.copy()}, s2, 0.05)
        np.testing.assert_array_equal(p1["w"].data, p2["w"].data)

    def test_pass_counter(self, float64_mode):
        p = quadratic_params([1.0, 2.0])
        c = PassCounter()
        sam_step(half_sq_norm(p), p, AdamWState(), 0.01, SAMConfig(0.05), c)
        assert c.last_step == 2
        sam_step(half_sq_norm(p), p, AdamWState(), 0.01, SAMConfig(0.0), c)
        assert c.last_step == 1 and c.total == 3

    def test_abort_leaves_params(self, float64_mode):
        p = quadratic_params([3.0, 4.0])
        calls = []

        def loss():
            calls.append(1)
            base = half_sq_norm(p)()
            return base if len(calls) == 1 else ad.mul(base, np.nan)

        with pytest.raises(ad.NumericError):
            sam_step(loss, p, AdamWState(), 0.1, SAMConfig(0.1))
        np.testing.assert_array_equal(p["w"].data, [3.0, 4.0])

    def test_invalid_rho(self):
        with pytest.raises(ValueError):
            SAMConfig(-0.1)


A_SHARP, W_SHARP = -1.0, 0.1
B_FLAT, W_FLAT = 3.0, 1.0


def two_minima(x):
    """Equal-depth (to 1e-3) minima: sharp at a=-1 (width 0.1), flat at b=3 (width 1)."""
    return (-np.exp(-0.5 * ((x - A_SHARP) / W_SHARP) ** 2)
            - np.exp(-0.5 * ((x - B_FLAT) / W_FLAT) ** 2))


def two_minima_tensor(p):
    x = p["w"]
    da, db = ad.add(x, -A_SHARP), ad.add(x, -B_FLAT)
    sharp = ad.exp(ad.scale(ad.mul(da, da), -0.5 / W_SHARP ** 2))
    flat = ad.exp(ad.scale(ad.mul(db, db), -0.5 / W_FLAT ** 2))
    return ad.tsum(ad.neg(ad.add(sharp, flat)))


def run(start, rho, steps, lr=0.02):
    p = {"w": ad.parameter([start])}
    st = AdamWState(weight_decay=0.0)
    for _ in range(steps):
        sam_step(lambda: two_minima_tensor(p), p, st, lr, SAMConfig(rho))
    return float(p["w"].data[0])


GRID = np.linspace(-4.0, 7.0, 110001)
INITS = [A_SHARP - 0.15, A_SHARP - 0.05, A_SHARP + 0.05, A_SHARP + 0.15]


def barrier():
    """Grid position of the barrier top between the two wells."""
    inner = (GRID > A_SHARP) & (GRID < B_FLAT)
    return GRID[inner][np.argmax(two_minima(GRID[inner]))]


class TestSharpFlatLandscape:
    def test_grid_oracle(self):
        vals = two_minima(GRID)
        c = barrier()
        left, right = GRID < c, GRID >= c
        assert abs(GRID[left][np.argmin(vals[left])] - A_SHARP) < 1e-3
        assert abs(GRID[right][np.argmin(vals[right])] - B_FLAT) < 1e-3
        assert abs(vals[left].min() - vals[right].min()) < 1e-3
        assert A_SHARP < c < A_SHARP + 1.0

    def test_sam_objective_prefers_flat(self):
        # max over the rho-ball of the loss, by brute force on the grid
        rho = 1.0
        h = GRID[1] - GRID[0]
        r = int(round(rho / h))
        vals = two_minima(GRID)
        padded = np.pad(vals, r, constant_values=0.0)
        worst = np.max(np.lib.stride_tricks.sliding_window_view(padded, 2 * r + 1), axis=1)
        assert abs(GRID[np.argmin(worst)] - B_FLAT) < 1e-2

    @pytest.mark.parametrize("start", INITS)
    def test_adamw_settles_in_sharp_minimum(self, float64_mode, start):
        assert abs(run(start, 0.0, 600) - A_SHARP) < 0.02

    @pytest.mark.parametrize("start", INITS)
    def test_sam_leaves_sharp_basin_and_reaches_flat(self, float64_mode, start):
        rho = 1.0
        # first-order SAM in 1-D rests where the ascent step lands exactly on a,
        # i.e. at a + rho, which is already past the barrier in b's basin
        escaped = run(start, rho, 600)
        assert escaped > barrier()
        assert abs(escaped - (A_SHARP + rho)) < 0.05
        # plain descent from there finishes in the flat minimum
        assert abs(run(escaped, 0.0, 600) - B_FLAT) < 0.05
