import numpy as np
import pytest

from tafseg.model import (
    CheckpointError,
    aggregate,
    build_micro_aspp,
    build_micro_fcn,
    build_model,
    extract_branches,
    load_checkpoint,
    op_trace,
    predict,
    save_checkpoint,
)
from tafseg.tensor import ShapeError, Tape, Tensor, backward, cross_entropy_masked, softmax_channel


@pytest.fixture(scope="module")
def fcn():
    return build_micro_fcn(4, 4, seed=0)


@pytest.fixture(scope="module")
def aspp():
    return build_micro_aspp(4, 4, seed=0)


def rand_images(n=2, size=32, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(size=(n, 3, size, size)).astype(np.float32))


class TestConstruction:
    def test_fcn_shape_contract(self, fcn):
        assert fcn.forward(Tensor(np.zeros((1, 3, 32, 32), np.float32))).shape == (1, 4, 32, 32)

    def test_aspp_shape_contract(self, aspp):
        assert aspp.forward(Tensor(np.zeros((1, 3, 32, 32), np.float32))).shape == (1, 4, 32, 32)

    def test_branch_counts_and_strides(self, fcn, aspp):
        assert fcn.m == 3 and aspp.m == 5
        assert tuple(fcn.strides) == (8, 4, 2)
        bs = extract_branches(fcn, rand_images())
        assert [f.shape[2] for f in bs.features] == [4, 8, 16]
        assert tuple(bs.strides) == (8, 4, 2)

    def test_seed_determinism(self):
        a, b = build_micro_fcn(4, 8, 3), build_micro_fcn(4, 8, 3)
        for name in a.params:
            assert a.params[name].data.tobytes() == b.params[name].data.tobytes()
        c = build_micro_fcn(4, 8, 4)
        assert any(a.params[n].data.tobytes() != c.params[n].data.tobytes() for n in a.params)

    def test_he_init_and_zero_bias(self):
        model = build_micro_fcn(4, 32, 0)
        w = model.params["branch1.conv.w"].data
        fan_in = w.shape[1] * w.shape[2] * w.shape[3]
        assert w.std() == pytest.approx(np.sqrt(2 / fan_in), rel=0.05)
        assert abs(w.mean()) < 0.1 * w.std()
        assert not model.params["branch1.conv.b"].data.any()

    @pytest.mark.parametrize("arch", ["MicroFCN", "MicroASPP"])
    def test_lightweight_aggregator(self, arch):
        model = build_model(arch, 4, 8, 0)
        assert model.parameter_count("aggregator") < 0.1 * model.parameter_count()

    def test_width_guard(self):
        with pytest.raises(ValueError):
            build_micro_fcn(4, 3, 0)
        with pytest.raises(ValueError):
            build_model("UNet", 4, 8, 0)

    def test_indivisible_input(self, fcn, aspp):
        with pytest.raises(ShapeError):
            fcn.forward(Tensor(np.zeros((1, 3, 20, 20), np.float32)))
        with pytest.raises(ShapeError):
            aspp.forward(Tensor(np.zeros((1, 3, 18, 18), np.float32)))

    def test_aspp_pool_branch_constant(self, aspp):
        f1 = extract_branches(aspp, rand_images()).features[0].data
        assert np.all(f1 == f1[:, :, :1, :1])

    def test_aspp_dilations_decreasing(self, aspp):
        d = list(aspp.dilations)
        assert all(a > b for a, b in zip(d, d[1:]))


class TestTwoPath:
    @pytest.mark.parametrize("arch", ["MicroFCN", "MicroASPP"])
    def test_aggregate_equals_forward(self, arch):
        model = build_model(arch, 4, 4, 1)
        x = rand_images(seed=1)
        assert aggregate(model, extract_branches(model, x)).data.tobytes() == model.forward(x).data.tobytes()

    def test_extract_deterministic(self, fcn):
        x = rand_images(seed=2)
        a, b = extract_branches(fcn, x), extract_branches(fcn, x)
        for fa, fb in zip(a.features, b.features):
            assert fa.data.tobytes() == fb.data.tobytes()

    def test_self_replacement_changes_nothing(self, fcn):
        x = rand_images(seed=3)
        bs = extract_branches(fcn, x)
        for i in range(1, 4):
            swapped = bs.replace_feature(i, Tensor(bs.features[i - 1].data.copy()))
            assert fcn.aggregate(swapped).data.tobytes() == fcn.aggregate(bs).data.tobytes()

    def test_zero_branches_bias_free_constant(self):
        model = build_micro_fcn(4, 4, 0)
        bs = extract_branches(model, rand_images(1))
        zero = bs
        for i, f in enumerate(bs.features, start=1):
            zero = zero.replace_feature(i, Tensor(np.zeros(f.shape, np.float32)))
        out = model.aggregate(zero).data
        assert np.all(out == out[:, :, :1, :1])

    def test_branch_shape_mismatch(self, fcn):
        bs = extract_branches(fcn, rand_images())
        with pytest.raises(ShapeError):
            fcn.aggregate(bs.replace_feature(1, Tensor(np.zeros((2, 8, 2, 2), np.float32))))


class TestPredict:
    def test_strict_max(self):
        z = np.zeros((1, 4, 2, 2))
        z[:, 2] = 1.0
        assert np.all(softmax_channel(Tensor(z)).data.argmax(axis=1) == 2)

    def test_tie_lowest(self):
        z = np.zeros((1, 4, 1, 1))
        z[0, 1] = z[0, 3] = 5.0
        assert softmax_channel(Tensor(z)).data.argmax(axis=1).item() == 1

    def test_predict_matches_logit_argmax(self, fcn):
        x = rand_images(seed=4)
        np.testing.assert_array_equal(predict(fcn, x), fcn.forward(x).data.argmax(axis=1))
        assert predict(fcn, x).dtype == np.uint8


class TestGradientsAndCost:
    @pytest.mark.parametrize("arch", ["MicroFCN", "MicroASPP"])
    def test_every_param_gets_gradient(self, arch):
        model = build_model(arch, 4, 4, 5)
        rng = np.random.default_rng(5)
        x = Tensor(rng.uniform(size=(2, 3, 16, 16)).astype(np.float32))
        y = rng.integers(0, 4, size=(2, 16, 16))
        with Tape() as tape:
            loss = cross_entropy_masked(model.forward(x), y)
        g = backward(tape, loss)
        for name, p in model.params.items():
            assert np.any(g[p] != 0), name

    def test_op_trace_independent_of_weights(self):
        a, b = build_micro_fcn(4, 8, 0), build_micro_fcn(4, 8, 9)
        x = rand_images(1)
        assert op_trace(a, x) == op_trace(b, x)
        assert a.parameter_count() == b.parameter_count()


class TestCheckpoint:
    @pytest.mark.parametrize("arch", ["MicroFCN", "MicroASPP"])
    def test_roundtrip(self, tmp_path, arch):
        model = build_model(arch, 4, 4, 7)
        save_checkpoint(model, tmp_path)
        back = load_checkpoint(tmp_path)
        assert back.arch == arch
        for name in model.params:
            assert back.params[name].data.tobytes() == model.params[name].data.tobytes()
        lines = (tmp_path / "manifest.txt").read_text().splitlines()
        name, shape, off = lines[1].split()
        assert name in model.params and int(off) == 0 and "x" in shape

    def test_architecture_mismatch(self, tmp_path):
        save_checkpoint(build_micro_fcn(4, 4, 0), tmp_path)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path, build_micro_aspp(4, 4, 0))

    def test_shape_mismatch(self, tmp_path):
        save_checkpoint(build_micro_fcn(4, 4, 0), tmp_path)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path, build_micro_fcn(4, 8, 0))

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path)
