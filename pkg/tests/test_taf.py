import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from tafseg.data import GenParams, TrainingPair, gen_clip
from tafseg.model import FactorizedModel, build_micro_aspp, build_micro_fcn
from tafseg.taf import (
    ChangeRateSchedule,
    TAFConfig,
    TAFDisabledError,
    delta_y,
    hinge_reg,
    raw_objective_reference,
    sample_branch,
    sample_indices,
    sample_offset,
    swap_branch,
    swap_branch_batch,
    taf_objective,
)
from tafseg.tensor import Tensor, add, conv2d, cross_entropy_masked, grad_check, softmax_channel

INF = math.inf


def images(n=1, size=16, seed=0, dtype=np.float32):
    return Tensor(np.random.default_rng(seed).uniform(size=(n, 3, size, size)).astype(dtype))


@pytest.fixture(scope="module")
def fcn():
    return build_micro_fcn(4, 4, seed=1)


class TestSchedule:
    def test_parse_format(self):
        s = ChangeRateSchedule.parse("0.0001, inf, inf")
        assert s.rates == (1e-4, INF, INF)
        assert ChangeRateSchedule.parse(s.format()) == s
        assert s.finite_branches == (1,) and not s.disabled

    def test_must_be_nondecreasing(self):
        with pytest.raises(ValueError):
            ChangeRateSchedule((0.1, 0.01))
        with pytest.raises(ValueError):
            ChangeRateSchedule((INF, 0.1))
        with pytest.raises(ValueError):
            ChangeRateSchedule((-1.0,))

    def test_all_infinite_is_disabled(self):
        s = ChangeRateSchedule((INF, INF, INF))
        assert s.disabled
        with pytest.raises(TAFDisabledError):
            sample_indices(TAFConfig(schedule=s), 3, np.random.default_rng(0))

    def test_config_guards(self):
        with pytest.raises(ValueError):
            TAFConfig(lam=-1)
        with pytest.raises(ValueError):
            TAFConfig(n_h=0)
        with pytest.raises(ValueError):
            TAFConfig(delta0=0)


class TestSwap:
    def test_self_swap_identity(self, fcn):
        a = fcn.extract_branches(images())
        for i in (1, 2, 3):
            assert swap_branch(a, a, i).features == a.features

    def test_involution(self, fcn):
        a = fcn.extract_branches(images(seed=1))
        b = fcn.extract_branches(images(seed=2))
        for i in (1, 2, 3):
            assert swap_branch(swap_branch(a, b, i), a, i).features == a.features

    def test_index_and_shape_errors(self, fcn):
        a = fcn.extract_branches(images())
        with pytest.raises(IndexError):
            swap_branch(a, a, 4)
        with pytest.raises(IndexError):
            swap_branch(a, a, 0)
        b = fcn.extract_branches(images(size=24))
        with pytest.raises(Exception):
            swap_branch(a, b, 1)

    @pytest.mark.parametrize("builder", [build_micro_fcn, build_micro_aspp])
    def test_matches_full_recompute(self, builder):
        model = builder(4, 4, 2)
        xt, xd = images(seed=3), images(seed=4)
        bs_t, bs_d = model.extract_branches(xt), model.extract_branches(xd)
        for i in range(1, model.m + 1):
            fast = model.aggregate(swap_branch(bs_t, bs_d, i)).data
            oracle = model.forward(xt, substitute={i: Tensor(bs_d.features[i - 1].data.copy())}).data
            np.testing.assert_allclose(fast, oracle, atol=1e-6)

    def test_batch_swap_matches_single(self, fcn):
        a = fcn.extract_branches(images(3, seed=5))
        b = fcn.extract_branches(images(3, seed=6))
        idx = np.array([1, 3, 2])
        out = swap_branch_batch(a, b, idx)
        for n, i in enumerate(idx):
            single = swap_branch(a, b, int(i))
            for fo, fs in zip(out.features, single.features):
                np.testing.assert_array_equal(fo.data[n], fs.data[n])


class TestDeltaY:
    def test_identity_frames_zero(self, fcn):
        bs = fcn.extract_branches(images())
        for i in (1, 2, 3):
            assert float(delta_y(fcn, bs, bs, i).data) == 0.0

    def test_matches_oracle(self, fcn):
        xt, xd = images(seed=7), images(seed=8)
        bs_t, bs_d = fcn.extract_branches(xt), fcn.extract_branches(xd)
        base = softmax_channel(fcn.forward(xt)).data
        for i in (1, 2, 3):
            swapped = softmax_channel(fcn.forward(xt, substitute={i: bs_d.features[i - 1]})).data
            assert float(delta_y(fcn, bs_t, bs_d, i).data) == pytest.approx(np.abs(swapped - base).mean(), abs=1e-6)

    def test_bounded(self):
        model = build_micro_fcn(4, 4, 3)
        for k in model.params:
            model.params[k] = Tensor(model.params[k].data * 6, requires_grad=True)
        bs_t = model.extract_branches(images(seed=9))
        bs_d = model.extract_branches(images(seed=10))
        for i in (1, 2, 3):
            dy = float(delta_y(model, bs_t, bs_d, i).data)
            assert 0 <= dy <= 2 * 3 / 4


class TestHinge:
    def test_substitution(self):
        assert hinge_reg(0.5, 3, 0.1) == pytest.approx(0.2)

    def test_clamp(self):
        assert hinge_reg(0.5, 3, 0.2) == 0.0

    def test_exempt(self):
        assert hinge_reg(1.7, 5, INF) == 0.0
        assert hinge_reg(1.7, 0, INF) == 0.0

    def test_sign_of_delta_irrelevant(self):
        assert hinge_reg(0.5, -3, 0.1) == hinge_reg(0.5, 3, 0.1)

    @settings(max_examples=200)
    @given(st.floats(0, 2), st.floats(-30, 30), st.floats(0, 1), st.floats(0, 1))
    def test_monotone(self, dy, delta, c, bump):
        r = hinge_reg(dy, delta, c)
        assert r >= 0
        assert hinge_reg(dy, delta, c + bump) <= r
        assert hinge_reg(dy, abs(delta) + bump, c) <= r
        assert hinge_reg(dy + bump, delta, c) >= r


class TestSampling:
    def test_offset_range(self):
        rng = np.random.default_rng(0)
        draws = [sample_offset(15, rng) for _ in range(2000)]
        assert 0 not in draws and min(draws) == -15 and max(draws) == 15

    def test_offset_may_include_zero(self):
        rng = np.random.default_rng(0)
        assert 0 in {sample_offset(2, rng, exclude_zero=False) for _ in range(500)}

    def test_fcn_schedule_only_branch_one(self):
        rng = np.random.default_rng(1)
        cfg = TAFConfig(schedule=ChangeRateSchedule((1e-4, INF, INF)))
        for _ in range(200):
            n, i1, i2 = sample_indices(cfg, 3, rng)
            assert i1 == i2 == 1 and n != 0

    def test_branch_chi_square(self):
        rng = np.random.default_rng(2)
        s = ChangeRateSchedule((1e-6, 1e-6, 1e-4, 1e-3, 1e-2))
        draws = np.array([sample_branch(s, rng) for _ in range(20000)])
        counts = np.bincount(draws, minlength=6)[1:]
        assert stats.chisquare(counts).pvalue > 0.01

    def test_mixed_schedule_skips_infinite(self):
        rng = np.random.default_rng(3)
        s = ChangeRateSchedule((0.0, 0.01, INF))
        assert {sample_branch(s, rng) for _ in range(300)} == {1, 2}

    def test_schedule_length_must_match(self):
        with pytest.raises(ValueError):
            sample_indices(TAFConfig(), 5, np.random.default_rng(0))


def make_pair(x_t, x_p, n, seed=0):
    y = np.random.default_rng(seed).integers(0, 4, size=x_t.shape[-2:]).astype(np.uint8)
    return TrainingPair(x_t, y, x_p, n, 0)


class TestObjective:
    def test_lambda_zero_is_ce(self, fcn):
        x = images(seed=11).data[0]
        pair = make_pair(x, images(seed=12).data[0], 3)
        loss, parts = taf_objective(fcn, pair, TAFConfig(lam=0), np.random.default_rng(0))
        ce = cross_entropy_masked(fcn.forward(Tensor(x[None])), pair.y_t[None])
        assert float(loss.data) == float(ce.data)
        assert parts["reg_fwd"] == parts["reg_bwd"] == 0.0

    def test_identical_frames_zero_reg(self, fcn):
        x = images(seed=13).data[0]
        cfg = TAFConfig(lam=2.0, schedule=ChangeRateSchedule((0.0, 0.0, 0.0)), exclude_zero_offset=False)
        loss, parts = taf_objective(fcn, make_pair(x, x, 0), cfg, np.random.default_rng(0))
        assert parts["reg_fwd"] == parts["reg_bwd"] == 0.0
        assert float(loss.data) == pytest.approx(parts["ce"])

    def test_parts_match_manual(self, fcn):
        xt, xp = images(seed=14).data[0], images(seed=15).data[0]
        cfg = TAFConfig(lam=1.5, schedule=ChangeRateSchedule((1e-3, 1e-3, 1e-3)))
        loss, parts = taf_objective(fcn, make_pair(xt, xp, -4), cfg, None, branches=(2, 3))
        bt, bp = fcn.extract_branches(Tensor(xt[None])), fcn.extract_branches(Tensor(xp[None]))
        want_f = hinge_reg(float(delta_y(fcn, bt, bp, 2).data), 4, 1e-3)
        want_b = hinge_reg(float(delta_y(fcn, bp, bt, 3).data), 4, 1e-3)
        assert parts["reg_fwd"] == pytest.approx(want_f, rel=1e-5)
        assert parts["reg_bwd"] == pytest.approx(want_b, rel=1e-5)
        assert float(loss.data) == pytest.approx(parts["ce"] + 1.5 * (want_f + want_b), rel=1e-5)

    def test_gradient_all_params(self):
        model = build_micro_fcn(4, 4, 4).astype(np.float64)
        rng = np.random.default_rng(4)
        xt, xp = rng.uniform(size=(2, 3, 8, 8)), rng.uniform(size=(2, 3, 8, 8))
        pair = SimpleNamespace(x_t=xt, x_pair=xp, y_t=rng.integers(0, 4, size=(2, 8, 8)), n=np.array([3, -2]))
        cfg = TAFConfig(lam=1.0, schedule=ChangeRateSchedule((1e-4, 1e-4, 1e-4)))
        for name in model.params:
            orig = model.params[name]

            def f(t):
                model.params[name] = t
                return taf_objective(model, pair, cfg, None, branches=(np.array([1, 2]), np.array([3, 1])))[0]

            assert grad_check(f, orig) < 1e-3, name
            model.params[name] = orig

    def test_uniform_softmax_collapse_opposed(self):
        model = build_micro_fcn(4, 4, 5)
        for k in model.params:
            model.params[k] = Tensor(np.zeros_like(model.params[k].data), requires_grad=True)
        xt, xp = images(seed=16).data[0], images(seed=17).data[0]
        cfg = TAFConfig(schedule=ChangeRateSchedule((0.0, 0.0, 0.0)))
        loss, parts = taf_objective(model, make_pair(xt, xp, 2), cfg, np.random.default_rng(0))
        assert parts["reg_fwd"] == parts["reg_bwd"] == 0.0
        assert parts["ce"] == pytest.approx(math.log(4), rel=1e-6)


class _TwoParam(FactorizedModel):
    """Two branches ``a_i * x`` on a 1x1 single-channel image; logits ``(s, -s)``."""

    arch = "TwoParam"
    m = 2
    strides = (1, 1)

    def _build(self, rng):
        for i, a in ((1, 1.0), (2, -0.5)):
            self.params[f"branch{i}.a"] = Tensor(np.full((1, 1, 1, 1), a), requires_grad=True)
            self.groups[f"branch{i}.a"] = f"branch{i}"

    def params_dtype(self):
        return np.float64

    def extract_branches(self, x):
        from tafseg.model import BranchSet

        feats = tuple(conv2d(x, self.params[f"branch{i}.a"]) for i in (1, 2))
        return BranchSet(feats, self.strides, tuple(x.shape[2:]))

    def aggregate(self, bs):
        s = add(bs.features[0], bs.features[1])
        return conv2d(s, Tensor(np.array([1.0, -1.0]).reshape(2, 1, 1, 1)))


class TestReference:
    def test_hand_enumeration(self):
        xs = [0.2, 0.5, 0.9]
        clip = SimpleNamespace(frames=xs, key_index=1, key_label=np.zeros((1, 1), np.uint8),
                               image=lambda t: np.full((1, 1, 1), xs[t]))
        model = _TwoParam(2, 1, 0)
        cfg = TAFConfig(lam=1.0, n_h=1, schedule=ChangeRateSchedule((0.01, 0.05)))

        def p0(s):
            return 1 / (1 + math.exp(-2 * s))

        a = (1.0, -0.5)
        rates = (0.01, 0.05)
        terms = []
        for t in range(3):
            for n in (-1, 1):
                if not 0 <= t + n < 3:
                    continue
                s = sum(a) * xs[t]
                for i in (0, 1):
                    dy = abs(p0(s + a[i] * (xs[t + n] - xs[t])) - p0(s))
                    terms.append(max(0.0, dy - rates[i]))
        ce = -math.log(p0(sum(a) * xs[1]))
        assert len(terms) == 8
        assert raw_objective_reference(model, clip, cfg) == pytest.approx(ce + sum(terms) / 8, rel=1e-12)

    def test_lambda_zero_and_single_frame(self, fcn):
        clip = gen_clip(GenParams(size=48, half_len=2), np.random.default_rng(0))
        ce = raw_objective_reference(fcn, clip, TAFConfig(lam=0, n_h=2))
        pred = fcn.forward(Tensor(clip.image(2)[None]))
        assert ce == pytest.approx(float(cross_entropy_masked(pred, clip.key_label[None]).data))
        single = gen_clip(GenParams(size=48, half_len=0), np.random.default_rng(0))
        r = raw_objective_reference(fcn, single, TAFConfig(lam=5, n_h=1, schedule=ChangeRateSchedule((0.0, 0.0, 0.0))))
        assert r == pytest.approx(raw_objective_reference(fcn, single, TAFConfig(lam=0, n_h=1)))
