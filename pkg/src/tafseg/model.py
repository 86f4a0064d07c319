"""Factorized segmentation networks ``y(x) = agg(branch_1(x), ..., branch_m(x))``.

Two micro architectures are provided:

* :class:`MicroFCN` - a three-branch FCN8s analog. Branch 1 is the deepest
  (stride 8), branch 2 stride 4, branch 3 stride 2. The aggregator holds the
  per-branch 1x1 score heads and the upsample+add cascade.
* :class:`MicroASPP` - a five-branch DeepLab v3+ analog on a stride-4 trunk:
  image pooling first, then dilated 3x3 convs (6, 3, 2), then a 1x1 conv.
  The aggregator is a 1x1 classifier over the branch sum plus a stride-2
  decoder skip from the trunk. The skip is carried with the branch set but
  never swapped.

Desk-scale strides 2/4/8 stand in for FCN8s's 8/16/32.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import tnsr
from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    add,
    conv2d,
    global_avg_pool,
    relu,
    softmax_channel,
    upsample_nearest,
)

__all__ = [
    "BranchSet",
    "FactorizedModel",
    "MicroFCN",
    "MicroASPP",
    "build_micro_fcn",
    "build_micro_aspp",
    "build_model",
    "extract_branches",
    "aggregate",
    "predict",
    "op_trace",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]


@dataclass(frozen=True)
class BranchSet:
    """Branch feature maps for one batch of images.

    ``skip`` holds aggregator inputs that are not branches (the MicroASPP
    decoder skip); it always stays with the anchor image.
    """

    features: tuple[Tensor, ...]
    strides: tuple[int, ...]
    input_hw: tuple[int, int]
    skip: Tensor | None = None

    @property
    def m(self) -> int:
        return len(self.features)

    def replace_feature(self, i: int, t: Tensor) -> BranchSet:
        feats = list(self.features)
        feats[i - 1] = t
        return replace(self, features=tuple(feats))


def _same_pad(k: int, dilation: int) -> int:
    return dilation * (k - 1) // 2


@dataclass
class FactorizedModel:
    """Parameters plus the branch/aggregator split of a segmentation net.

    ``groups`` maps every parameter name to ``"trunk"``, ``"branch<i>"`` or
    ``"aggregator"``.
    """

    num_classes: int
    width: int
    seed: int
    params: dict[str, Tensor] = field(default_factory=dict)
    groups: dict[str, str] = field(default_factory=dict)

    arch = "base"
    m = 0
    strides = ()
    divisor = 1

    def __post_init__(self):
        if not self.params:
            self._build(np.random.default_rng(self.seed))

    def _build(self, rng) -> None:
        raise NotImplementedError

    # -- construction -----------------------------------------------------
    def _conv(self, rng, name, group, cin, cout, k, bias=True):
        fan_in = cin * k * k
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k)).astype(np.float32)
        self.params[name + ".w"] = Tensor(w, requires_grad=True, name=name + ".w")
        self.groups[name + ".w"] = group
        if bias:
            self.params[name + ".b"] = Tensor(np.zeros(cout, np.float32), requires_grad=True, name=name + ".b")
            self.groups[name + ".b"] = group

    def _apply(self, name, x, stride=1, dilation=1):
        w = self.params[name + ".w"]
        k = w.shape[-1]
        return conv2d(x, w, self.params.get(name + ".b"), stride=stride,
                      padding=_same_pad(k, dilation), dilation=dilation)

    # -- bookkeeping -------------------------------------------------------
    def parameter_count(self, group: str | None = None) -> int:
        return sum(p.size for n, p in self.params.items() if group is None or self.groups[n] == group)

    def params_dtype(self):
        return next(iter(self.params.values())).dtype

    def branch_params(self, i: int) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if self.groups[n] == f"branch{i}"}

    def astype(self, dtype) -> FactorizedModel:
        clone = replace(self, params={}, groups=dict(self.groups))
        clone.params = {n: p.astype(dtype) for n, p in self.params.items()}
        return clone

    def copy(self) -> FactorizedModel:
        clone = replace(self, params={}, groups=dict(self.groups))
        clone.params = {n: Tensor(p.data.copy(), requires_grad=p.requires_grad, name=n)
                        for n, p in self.params.items()}
        return clone

    def check_input(self, x: Tensor) -> None:
        if x.data.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(self.arch, "input (N,3,H,W)", "N,3,H,W", x.shape)
        h, w = x.shape[2:]
        if h % self.divisor or w % self.divisor:
            raise ShapeError(self.arch, f"H/W (divisible by {self.divisor})", self.divisor, (h, w))

    # -- the factorization ---------------------------------------------------
    def extract_branches(self, x: Tensor) -> BranchSet:
        raise NotImplementedError

    def aggregate(self, bs: BranchSet) -> Tensor:
        raise NotImplementedError

    def forward(self, x: Tensor, substitute: dict[int, Tensor] | None = None) -> Tensor:
        """Full forward pass.

        ``substitute`` maps a 1-based branch index to a tensor that replaces
        that branch's freshly computed features; the trunk and every other
        branch are still recomputed from ``x``.
        """
        bs = self.extract_branches(_image(x))
        for i, t in (substitute or {}).items():
            bs = bs.replace_feature(i, t)
        return self.aggregate(bs)

    __call__ = forward

    def _check_branches(self, bs: BranchSet) -> None:
        if bs.m != self.m:
            raise ShapeError(self.arch, "branch count", self.m, bs.m)
        h, w = bs.input_hw
        n = bs.features[0].shape[0]
        for i, f in enumerate(bs.features, start=1):
            exp = self._branch_shape(i, n, h, w)
            if f.shape != exp:
                raise ShapeError(self.arch, f"branch {i} feature shape", exp, f.shape)


def _image(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class MicroFCN(FactorizedModel):
    arch = "MicroFCN"
    m = 3
    strides = (8, 4, 2)
    divisor = 8

    def _build(self, rng) -> None:
        w, k = self.width, self.num_classes
        self._conv(rng, "trunk.s2", "trunk", 3, w, 3)
        self._conv(rng, "trunk.s4", "trunk", w, 2 * w, 3)
        self._conv(rng, "trunk.s8", "trunk", 2 * w, 2 * w, 3)
        self._conv(rng, "branch1.conv", "branch1", 2 * w, 2 * w, 3)
        self._conv(rng, "branch2.conv", "branch2", 2 * w, 2 * w, 3)
        self._conv(rng, "branch3.conv", "branch3", w, w, 3)
        self._conv(rng, "agg.score1", "aggregator", 2 * w, k, 1)
        self._conv(rng, "agg.score2", "aggregator", 2 * w, k, 1)
        self._conv(rng, "agg.score3", "aggregator", w, k, 1)

    def _branch_shape(self, i, n, h, w):
        c = (2 * self.width, 2 * self.width, self.width)[i - 1]
        s = self.strides[i - 1]
        return (n, c, h // s, w // s)

    def extract_branches(self, x: Tensor) -> BranchSet:
        x = _image(x)
        self.check_input(x)
        t2 = relu(self._apply("trunk.s2", x, stride=2))
        t4 = relu(self._apply("trunk.s4", t2, stride=2))
        t8 = relu(self._apply("trunk.s8", t4, stride=2))
        f1 = relu(self._apply("branch1.conv", t8))
        f2 = relu(self._apply("branch2.conv", t4))
        f3 = relu(self._apply("branch3.conv", t2))
        return BranchSet((f1, f2, f3), self.strides, tuple(x.shape[2:]))

    def aggregate(self, bs: BranchSet) -> Tensor:
        self._check_branches(bs)
        f1, f2, f3 = bs.features
        s = upsample_nearest(self._apply("agg.score1", f1), 2)
        s = add(s, self._apply("agg.score2", f2))
        s = upsample_nearest(s, 2)
        s = add(s, self._apply("agg.score3", f3))
        return upsample_nearest(s, 2)


class MicroASPP(FactorizedModel):
    arch = "MicroASPP"
    m = 5
    strides = (4, 4, 4, 4, 4)
    dilations = (6, 3, 2)
    divisor = 4

    def _build(self, rng) -> None:
        w, k = self.width, self.num_classes
        c = 2 * w
        self._conv(rng, "trunk.s2", "trunk", 3, w, 3)
        self._conv(rng, "trunk.s4", "trunk", w, c, 3)
        self._conv(rng, "branch1.pool", "branch1", c, c, 1)
        for i, _ in enumerate(self.dilations, start=2):
            self._conv(rng, f"branch{i}.atrous", f"branch{i}", c, c, 3)
        self._conv(rng, "branch5.conv", "branch5", c, c, 1)
        self._conv(rng, "agg.classifier", "aggregator", c, k, 1)
        self._conv(rng, "agg.skip", "aggregator", w, k, 1)

    def _branch_shape(self, i, n, h, w):
        return (n, 2 * self.width, h // 4, w // 4)

    def extract_branches(self, x: Tensor) -> BranchSet:
        x = _image(x)
        self.check_input(x)
        t2 = relu(self._apply("trunk.s2", x, stride=2))
        t4 = relu(self._apply("trunk.s4", t2, stride=2))
        h4, w4 = t4.shape[2:]
        pooled = relu(self._apply("branch1.pool", global_avg_pool(t4)))
        feats = [upsample_nearest(pooled, (h4, w4))]
        for i, d in enumerate(self.dilations, start=2):
            feats.append(relu(self._apply(f"branch{i}.atrous", t4, dilation=d)))
        feats.append(relu(self._apply("branch5.conv", t4)))
        return BranchSet(tuple(feats), self.strides, tuple(x.shape[2:]), skip=t2)

    def aggregate(self, bs: BranchSet) -> Tensor:
        self._check_branches(bs)
        if bs.skip is None:
            raise ShapeError(self.arch, "decoder skip", "tensor", None)
        total = bs.features[0]
        for f in bs.features[1:]:
            total = add(total, f)
        s = upsample_nearest(self._apply("agg.classifier", total), 2)
        s = add(s, self._apply("agg.skip", bs.skip))
        return upsample_nearest(s, 2)


ARCHS = {"MicroFCN": MicroFCN, "MicroASPP": MicroASPP}


def build_micro_fcn(num_classes: int, width: int, seed: int) -> MicroFCN:
    if width < 4:
        raise ValueError("width must be >= 4")
    return MicroFCN(num_classes=num_classes, width=width, seed=seed)


def build_micro_aspp(num_classes: int, width: int, seed: int) -> MicroASPP:
    if width < 4:
        raise ValueError("width must be >= 4")
    return MicroASPP(num_classes=num_classes, width=width, seed=seed)


def build_model(arch: str, num_classes: int, width: int, seed: int) -> FactorizedModel:
    if arch not in ARCHS:
        raise ValueError(f"unknown arch {arch!r}; choose from {sorted(ARCHS)}")
    return (build_micro_fcn if arch == "MicroFCN" else build_micro_aspp)(num_classes, width, seed)


def extract_branches(model: FactorizedModel, x) -> BranchSet:
    return model.extract_branches(_image(x))


def aggregate(model: FactorizedModel, bs: BranchSet) -> Tensor:
    return model.aggregate(bs)


def predict(model: FactorizedModel, x) -> np.ndarray:
    """Per-pixel argmax of the channel softmax; ties go to the lowest class."""
    probs = softmax_channel(model.forward(_image(x)))
    return probs.data.argmax(axis=1).astype(np.uint8)


def op_trace(model: FactorizedModel, x) -> list[str]:
    """Names of every op executed by one inference forward."""
    with Tape() as tape:
        predict(model, x)
    return list(tape.ops)


# -- checkpoints -------------------------------------------------------------


class CheckpointError(Exception):
    pass


def save_checkpoint(model: FactorizedModel, path: str | os.PathLike) -> None:
    """Write ``manifest.txt`` (``name shape offset``) and ``params.tnsr`` into ``path``."""
    os.makedirs(path, exist_ok=True)
    lines = [f"# arch={model.arch} num_classes={model.num_classes} width={model.width} seed={model.seed}"]
    chunks, off = [], 0
    for name, p in model.params.items():
        shape = "x".join(str(d) for d in p.shape)
        lines.append(f"{name} {shape} {off}")
        chunks.append(p.data.astype(np.float32).ravel())
        off += p.size
    blob = np.concatenate(chunks) if chunks else np.zeros(0, np.float32)
    with open(os.path.join(path, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    tnsr.save(os.path.join(path, "params.tnsr"), blob)


def read_manifest_header(path) -> dict[str, str]:
    mpath = os.path.join(path, "manifest.txt")
    if not os.path.exists(mpath):
        raise CheckpointError(f"missing checkpoint manifest {mpath}")
    with open(mpath, encoding="utf-8") as fh:
        first = fh.readline().strip()
    if not first.startswith("#"):
        raise CheckpointError(f"{mpath}: missing architecture header")
    return dict(kv.split("=", 1) for kv in first[1:].split())


def load_checkpoint(path, model: FactorizedModel | None = None) -> FactorizedModel:
    """Load parameters; builds the model from the manifest header if none is given."""
    header = read_manifest_header(path)
    if model is None:
        model = build_model(header["arch"], int(header["num_classes"]), int(header["width"]),
                            int(header.get("seed", 0)))
    elif header.get("arch") != model.arch:
        raise CheckpointError(f"architecture mismatch: checkpoint {header.get('arch')}, model {model.arch}")
    blob = tnsr.load(os.path.join(path, "params.tnsr"), expect_dtype=np.float32)
    seen = set()
    with open(os.path.join(path, "manifest.txt"), encoding="utf-8") as fh:
        for line in fh:
            if not line.strip() or line.startswith("#"):
                continue
            name, shape, off = line.split()
            dims = tuple(int(d) for d in shape.split("x")) if shape else ()
            if name not in model.params:
                raise CheckpointError(f"unexpected parameter {name}")
            if dims != model.params[name].shape:
                raise CheckpointError(f"{name}: shape {dims} does not match architecture {model.params[name].shape}")
            n, off = int(np.prod(dims)), int(off)
            if off + n > blob.size:
                raise CheckpointError(f"{name}: blob too short")
            model.params[name] = Tensor(blob[off:off + n].reshape(dims).copy(), requires_grad=True, name=name)
            seen.add(name)
    missing = set(model.params) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {sorted(missing)}")
    return model
