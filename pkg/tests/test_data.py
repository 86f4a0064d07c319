import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from tafseg import tnsr
from tafseg.data import (
    IGNORE,
    AugmentOptions,
    DimMismatchError,
    GenParams,
    MissingFileError,
    augment_pair,
    gen_clip,
    gen_dataset,
    make_pair,
    read_dataset,
    render_labels,
    sample_pair,
    write_dataset,
)
from tafseg.taf import TAFConfig


@pytest.fixture(scope="module")
def clips100():
    return gen_dataset(100, GenParams(), seed=0)


def self_iou(gt, cls, delta):
    vals = []
    for t in range(len(gt) - delta):
        a, b = gt[t] == cls, gt[t + delta] == cls
        union = (a | b).sum()
        if union:
            vals.append((a & b).sum() / union)
    return np.mean(vals)


class TestGenerator:
    def test_deterministic(self):
        a = gen_clip(GenParams(), np.random.default_rng(5))
        b = gen_clip(GenParams(), np.random.default_rng(5))
        for fa, fb in zip(a.frames, b.frames):
            assert fa.tobytes() == fb.tobytes()
        assert a.key_label.tobytes() == b.key_label.tobytes()

    def test_structure(self):
        c = gen_clip(GenParams(half_len=7), np.random.default_rng(0))
        assert len(c.frames) == 15 and c.key_index == 7
        assert c.frames[0].shape == (3, 64, 64) and c.frames[0].dtype == np.uint8
        assert c.key_label.shape == (64, 64)
        np.testing.assert_array_equal(c.key_label, c.gt_all[7])
        img = c.image(0)
        assert img.dtype == np.float32 and 0 <= img.min() and img.max() <= 1

    def test_static_clip(self):
        c = gen_clip(GenParams().static(), np.random.default_rng(1))
        for f, g in zip(c.frames, c.gt_all):
            assert f.tobytes() == c.frames[0].tobytes()
            assert g.tobytes() == c.gt_all[0].tobytes()

    def test_class3_moves_fast(self):
        p = GenParams()
        checked = 0
        for seed in range(10):
            c = gen_clip(p, np.random.default_rng(seed))
            obj = c.spec.objects[2]
            for t in range(len(c.frames) - 1):
                step = np.subtract(c.spec.position(obj, t + 1), c.spec.position(obj, t)) / 16
                # a wall bounce inside the step shortens it; those steps are exempt
                if np.hypot(*step) < p.speeds[3][0]:
                    continue
                (y0, x0), (y1, x1) = (np.argwhere(c.gt_all[t + k] == 3).mean(axis=0) for k in (0, 1))
                assert np.hypot(y1 - y0, x1 - x0) >= 2
                checked += 1
        assert checked > 200

    def test_labels_valid_and_classes_present(self, clips100):
        present = np.zeros(4)
        for c in clips100.clips:
            assert set(np.unique(c.key_label)) <= {0, 1, 2, 3, IGNORE}
            present += [np.any(c.key_label == k) for k in range(4)]
        assert np.all(present >= 80)

    def test_multi_rate_ordering(self, clips100):
        deltas = range(1, 16)
        curves = np.array([[np.mean([self_iou(c.gt_all, cls, d) for c in clips100.clips[:40]]) for d in deltas]
                           for cls in range(4)])
        # self-IOU is 1 at zero offset, so the first step is the decay slope
        slopes = curves[:, 0] - 1
        assert slopes[3] < slopes[2] < slopes[1] < slopes[0] < 0
        assert np.all(curves[3] < curves[2]) and np.all(curves[2] < curves[1]) and np.all(curves[1] < curves[0])

    def test_frame_too_small(self):
        with pytest.raises(ValueError):
            GenParams(size=32)

    def test_seeds_per_clip(self):
        ds = gen_dataset(3, seed=10)
        alone = gen_clip(GenParams(), np.random.default_rng(12), clip_id=2)
        assert ds.clips[2].frames[4].tobytes() == alone.frames[4].tobytes()


class TestPersistence:
    def test_roundtrip(self, tmp_path):
        ds = gen_dataset(3, GenParams(half_len=2), seed=0)
        write_dataset(ds, tmp_path)
        back = read_dataset(tmp_path)
        assert len(back) == 3
        for a, b in zip(ds.clips, back.clips):
            assert a.clip_id == b.clip_id and a.key_index == b.key_index
            assert all(x.tobytes() == y.tobytes() for x, y in zip(a.frames, b.frames))
            assert all(x.tobytes() == y.tobytes() for x, y in zip(a.gt_all, b.gt_all))
            assert a.key_label.tobytes() == b.key_label.tobytes()
        lines = [ln for ln in (tmp_path / "manifest.txt").read_text().splitlines() if not ln.startswith("#")]
        assert len(lines) == len(list(tmp_path.glob("clip_*"))) == 3
        assert lines[0] == "0 5 2"

    def test_truncated(self, tmp_path):
        write_dataset(gen_dataset(1, GenParams(half_len=1), seed=0), tmp_path)
        f = tmp_path / "clip_00000" / "frame_001.tnsr"
        f.write_bytes(f.read_bytes()[:-10])
        with pytest.raises(tnsr.TnsrSizeError, match="frame_001.tnsr"):
            read_dataset(tmp_path)

    def test_missing(self, tmp_path):
        write_dataset(gen_dataset(1, GenParams(half_len=1), seed=0), tmp_path)
        (tmp_path / "clip_00000" / "label_key.tnsr").unlink()
        with pytest.raises(MissingFileError):
            read_dataset(tmp_path)

    def test_bad_magic(self, tmp_path):
        write_dataset(gen_dataset(1, GenParams(half_len=1), seed=0), tmp_path)
        f = tmp_path / "clip_00000" / "frame_000.tnsr"
        f.write_bytes(b"XXXX" + f.read_bytes()[4:])
        with pytest.raises(tnsr.TnsrMagicError):
            read_dataset(tmp_path)

    def test_dim_mismatch(self, tmp_path):
        write_dataset(gen_dataset(1, GenParams(half_len=1), seed=0), tmp_path)
        tnsr.save(tmp_path / "clip_00000" / "label_key.tnsr", np.zeros((8, 8), np.uint8))
        with pytest.raises(DimMismatchError):
            read_dataset(tmp_path)


@pytest.fixture(scope="module")
def small_ds():
    return gen_dataset(10, GenParams(half_len=5), seed=3)


class TestSampling:
    def test_clip_choice_uniform(self, small_ds):
        rng = np.random.default_rng(0)
        cfg = TAFConfig(n_h=5)
        counts = np.zeros(10)
        for _ in range(20000):
            counts[sample_pair(small_ds, cfg, rng).clip_index] += 1
        assert stats.chisquare(counts).pvalue > 0.01

    def test_contract(self, small_ds):
        rng = np.random.default_rng(1)
        cfg = TAFConfig(n_h=5)
        for _ in range(200):
            p = sample_pair(small_ds, cfg, rng)
            clip = small_ds.clips[p.clip_index]
            assert 1 <= abs(p.n) <= 5
            np.testing.assert_array_equal(p.x_pair, clip.image(clip.key_index + p.n))
            np.testing.assert_array_equal(p.x_t, clip.image(clip.key_index))
            np.testing.assert_array_equal(p.y_t, clip.key_label)

    def test_override_neighbors(self, small_ds):
        rng = np.random.default_rng(2)
        assert {sample_pair(small_ds, TAFConfig(n_h=5), rng, n_h_override=1).n for _ in range(100)} == {-1, 1}

    def test_n_h_clamped_to_clip(self, small_ds):
        rng = np.random.default_rng(3)
        assert max(abs(sample_pair(small_ds, TAFConfig(n_h=30), rng).n) for _ in range(300)) == 5


class TestAugment:
    def test_identity_opts(self, small_ds):
        pair = make_pair(small_ds, 0, 2)
        out = augment_pair(pair, np.random.default_rng(0), AugmentOptions(flip=False, crop=64))
        for a, b in ((pair.x_t, out.x_t), (pair.y_t, out.y_t), (pair.x_pair, out.x_pair)):
            np.testing.assert_array_equal(a, b)

    def test_flip_twice_identity(self, small_ds):
        pair = make_pair(small_ds, 1, -3)
        rng = np.random.default_rng(0)
        while True:
            once, tf = augment_pair(pair, rng, AugmentOptions(flip=True), return_transform=True)
            if tf.cols[0] != 0:
                break
        twice = augment_pair(once, np.random.default_rng(1), AugmentOptions(flip=False))
        np.testing.assert_array_equal(once.x_t[..., ::-1], pair.x_t)
        np.testing.assert_array_equal(tf.apply(once.y_t), pair.y_t)
        np.testing.assert_array_equal(twice.x_pair, once.x_pair)

    def test_crop_too_large(self, small_ds):
        with pytest.raises(ValueError):
            augment_pair(make_pair(small_ds, 0, 1), np.random.default_rng(0), AugmentOptions(crop=80))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6), st.floats(0.5, 2.0), st.sampled_from([16, 24, 32]))
    def test_rerender_oracle(self, small_ds, seed, smax, crop):
        rng = np.random.default_rng(seed)
        clip = small_ds.clips[seed % len(small_ds)]
        n = int(rng.integers(-5, 6))
        pair = make_pair(small_ds, seed % len(small_ds), n)
        lo = max(0.5, crop / 64)
        opts = AugmentOptions(flip=True, scale_range=(lo, max(lo, smax)), crop=crop)
        out, tf = augment_pair(pair, rng, opts, return_transform=True)
        assert out.x_t.shape == (3, crop, crop) and out.y_t.shape == (crop, crop)
        np.testing.assert_array_equal(out.y_t, render_labels(clip.spec, clip.key_index, tf.rows, tf.cols))
        gt_pair = render_labels(clip.spec, clip.key_index + n, tf.rows, tf.cols)
        np.testing.assert_array_equal(tf.apply(clip.gt_all[clip.key_index + n]), gt_pair)
        np.testing.assert_array_equal(out.x_pair, tf.apply(pair.x_pair))
