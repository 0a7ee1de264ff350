"""Layers, the branched residual classifier and the fully connected critic."""

import contextlib
import copy
import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, ShapeError


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data, name=None):
        super().__init__(np.asarray(data, dtype=ad.get_default_dtype()), requires_grad=True, name=name)


class Module:
    training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield from _named_in_seq(item, f"{full}.{i}", "named_parameters")

    def named_buffers(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, np.ndarray):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield from _named_in_seq(item, f"{full}.{i}", "named_buffers")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in _flatten(value):
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def param_count(self):
        return int(sum(p.size for p in self.parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _flatten(seq):
    for item in seq:
        if isinstance(item, (list, tuple)):
            yield from _flatten(item)
        else:
            yield item


def _named_in_seq(item, prefix, method):
    if isinstance(item, Module):
        yield from getattr(item, method)(prefix + ".")
    elif isinstance(item, (list, tuple)):
        for i, sub in enumerate(item):
            yield from _named_in_seq(sub, f"{prefix}.{i}", method)


@contextlib.contextmanager
def frozen(module):
    """Temporarily stop ``module``'s parameters from requiring gradients."""
    params = module.parameters()
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield module
    finally:
        for p, flag in zip(params, flags):
            p.requires_grad = flag


def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0):
        self.weight = Parameter(_he(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel))
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return ad.conv2d(x, self.weight, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        dt = ad.get_default_dtype()
        self.weight = Parameter(np.ones(channels, dtype=dt))
        self.bias = Parameter(np.zeros(channels, dtype=dt))
        self.running_mean = np.zeros(channels, dtype=dt)
        self.running_var = np.ones(channels, dtype=dt)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return ad.batch_norm(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )


class Linear(Module):
    def __init__(self, in_features, out_features, rng, bias=True):
        self.weight = Parameter(_he(rng, (out_features, in_features), in_features))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    @property
    def in_features(self):
        return self.weight.shape[1]

    def forward(self, x):
        if x.shape[-1] != self.in_features:
            raise ShapeError("linear", [x.shape, self.weight.shape])
        y = ad.matmul(x, ad.transpose(self.weight))
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return ad.layer_norm(x, self.weight, self.bias, eps=self.eps)


class BasicBlock(Module):
    """Two 3x3 conv-BN layers with a residual shortcut (1x1 projection on shape change)."""

    def __init__(self, in_ch, out_ch, stride, rng):
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng, stride=stride, padding=1)
        self.bn1 = BatchNorm2d(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, stride=1, padding=1)
        self.bn2 = BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv2d(in_ch, out_ch, 1, rng, stride=stride)
            self.proj_bn = BatchNorm2d(out_ch)
        else:
            self.proj = None

    def forward(self, x):
        h = ad.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        short = self.proj_bn(self.proj(x)) if self.proj is not None else x
        return ad.relu(h + short)


class Stem(Module):
    def __init__(self, in_ch, width, stride, rng):
        self.conv = Conv2d(in_ch, width, 3, rng, stride=stride, padding=1)
        self.bn = BatchNorm2d(width)

    def forward(self, x):
        return ad.relu(self.bn(self.conv(x)))


def global_avg_pool(x):
    return ad.mean(x, axis=(2, 3))


# --------------------------------------------------------------------------
# architecture descriptor
# --------------------------------------------------------------------------


_FAMILIES = {
    "tiny-resnet": dict(stem_width=8, widths=(8, 16, 32), blocks=(2, 2, 2)),
    "resnet18": dict(stem_width=64, widths=(64, 128, 256, 512), blocks=(2, 2, 2, 2)),
    "resnet34": dict(stem_width=64, widths=(64, 128, 256, 512), blocks=(3, 4, 6, 3)),
}
for _depth in (20, 32, 44, 56, 110):
    _n = (_depth - 2) // 6
    _FAMILIES[f"resnet{_depth}"] = dict(stem_width=16, widths=(16, 32, 64), blocks=(_n, _n, _n))


def supported_archs():
    return sorted(_FAMILIES)


@dataclass(frozen=True)
class ArchSpec:
    """Everything needed to rebuild a branched classifier from scratch."""

    name: str
    in_channels: int
    image_size: Tuple[int, int]
    classes: int
    branches: int
    stem_width: int
    stem_stride: int
    widths: Tuple[int, ...]
    blocks: Tuple[int, ...]

    @property
    def groups(self):
        return len(self.widths)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["image_size"] = tuple(d["image_size"])
        d["widths"] = tuple(d["widths"])
        d["blocks"] = tuple(d["blocks"])
        return cls(**d)

    def with_branches(self, k):
        d = asdict(self)
        d["branches"] = k
        d["image_size"] = tuple(d["image_size"])
        d["widths"] = tuple(d["widths"])
        d["blocks"] = tuple(d["blocks"])
        return ArchSpec(**d)


def resolve_arch(name, in_channels=3, image_size=(32, 32), classes=10, k_branches=None):
    """Resolve a family name into a concrete :class:`ArchSpec`.

    ``k_branches`` defaults to G-1 (a branch after every group but the last).
    The tiny family downsamples in the stem for inputs of 24 px or more.
    """
    if name not in _FAMILIES:
        raise ConfigError(f"unsupported arch {name!r}; choose one of {supported_archs()}")
    fam = _FAMILIES[name]
    groups = len(fam["widths"])
    if k_branches is None:
        k_branches = groups - 1
    if not 0 <= k_branches <= groups - 1:
        raise ConfigError(f"{name} has {groups} groups, so branches must be in [0, {groups - 1}], got {k_branches}")
    if classes < 2:
        raise ConfigError(f"classes must be >= 2, got {classes}")
    image_size = tuple(int(s) for s in image_size)
    stem_stride = 2 if name == "tiny-resnet" and min(image_size) >= 24 else 1
    return ArchSpec(
        name=name, in_channels=int(in_channels), image_size=image_size, classes=int(classes),
        branches=int(k_branches), stem_width=fam["stem_width"], stem_stride=stem_stride,
        widths=tuple(fam["widths"]), blocks=tuple(fam["blocks"]),
    )


# --------------------------------------------------------------------------
# branched classifier
# --------------------------------------------------------------------------


@dataclass
class BranchOutputs:
    """Per-batch logits and final feature maps of the K+1 classifiers, shallow to deep."""

    logits: List[Tensor]
    features: List[Tensor]

    def __post_init__(self):
        if len(self.logits) != len(self.features):
            raise ContractError("logits and features must have equal length")

    def __len__(self):
        return len(self.logits)

    def detach(self):
        return BranchOutputs([ad.detach(t) for t in self.logits], [ad.detach(t) for t in self.features])


class BranchHead(Module):
    def __init__(self, blocks, fc):
        self.blocks = blocks
        self.fc = fc


class BranchedModel(Module):
    """Primary residual stream of G groups plus K auxiliary heads.

    Head k (1-based) taps the stream after group k and runs one residual
    block per remaining group before its own pooling and linear layer.
    Classifier K+1 is the primary stream.
    """

    def __init__(self, arch: ArchSpec, rng):
        self.arch = arch
        w = arch.widths
        self.stem = Stem(arch.in_channels, arch.stem_width, arch.stem_stride, rng)
        self.groups = []
        in_ch = arch.stem_width
        for g, (width, n) in enumerate(zip(w, arch.blocks)):
            stride = 1 if g == 0 else 2
            group = []
            for b in range(n):
                group.append(BasicBlock(in_ch, width, stride if b == 0 else 1, rng))
                in_ch = width
            self.groups.append(group)
        self.fc = Linear(w[-1], arch.classes, rng)
        self.branches = []
        for k in range(1, arch.branches + 1):
            blocks = [BasicBlock(w[g - 1], w[g], 2, rng) for g in range(k, arch.groups)]
            self.branches.append(BranchHead(blocks, Linear(w[-1], arch.classes, rng)))

    @property
    def num_classifiers(self):
        return self.arch.branches + 1

    @property
    def input_shape(self):
        return (self.arch.in_channels,) + tuple(self.arch.image_size)

    def forward_all(self, x):
        x = ad.as_tensor(x)
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError("forward_all", [x.shape], f"expected (B, {', '.join(map(str, self.input_shape))})")
        h = self.stem(x)
        taps = []
        for group in self.groups:
            for blk in group:
                h = blk(h)
            taps.append(h)
        logits, feats = [], []
        for k, head in enumerate(self.branches):
            f = taps[k]
            for blk in head.blocks:
                f = blk(f)
            feats.append(f)
            logits.append(head.fc(global_avg_pool(f)))
        feats.append(h)
        logits.append(self.fc(global_avg_pool(h)))
        return BranchOutputs(logits, feats)

    forward = forward_all


class SingleClassifier(Module):
    """One classifier path cut out of a :class:`BranchedModel`."""

    def __init__(self, stem, groups, blocks, fc, input_shape):
        self.stem = stem
        self.groups = groups
        self.blocks = blocks
        self.fc = fc
        self.input_shape = tuple(input_shape)

    def features(self, x):
        h = self.stem(ad.as_tensor(x))
        for group in self.groups:
            for blk in group:
                h = blk(h)
        for blk in self.blocks:
            h = blk(h)
        return h

    def forward(self, x):
        return self.fc(global_avg_pool(self.features(x)))


def build_branched_classifier(arch, classes=None, k_branches=None, seed=0, in_channels=None, image_size=None):
    """Build a :class:`BranchedModel` with He fan-in initialization.

    ``arch`` is an :class:`ArchSpec` or a family name; a family name is
    resolved with the remaining arguments.
    """
    if isinstance(arch, str):
        arch = resolve_arch(
            arch, in_channels=in_channels or 3, image_size=image_size or (32, 32),
            classes=classes or 10, k_branches=k_branches,
        )
    elif k_branches is not None and k_branches != arch.branches:
        arch = resolve_arch(arch.name, arch.in_channels, arch.image_size, arch.classes, k_branches)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return BranchedModel(arch, rng)


def forward_all(model, batch):
    return model.forward_all(batch)


def extract_single(model, k):
    """Deep-copy the parameters on classifier ``k``'s path (1-based) into a standalone network."""
    n = model.num_classifiers
    if not 1 <= k <= n:
        raise ContractError(f"classifier index must be in [1, {n}], got {k}")
    if k == n:
        parts = (model.stem, model.groups, [], model.fc)
    else:
        head = model.branches[k - 1]
        parts = (model.stem, model.groups[:k], head.blocks, head.fc)
    stem, groups, blocks, fc = copy.deepcopy(parts)
    single = SingleClassifier(stem, groups, blocks, fc, model.input_shape)
    single.train(model.training)
    return single


# --------------------------------------------------------------------------
# critic
# --------------------------------------------------------------------------


class DiscBlock(Module):
    def __init__(self, in_features, out_features, rng, slope):
        self.linear = Linear(in_features, out_features, rng)
        self.norm = LayerNorm(out_features)
        self.slope = slope

    def forward(self, x):
        return ad.leaky_relu(self.norm(self.linear(x)), self.slope)


class Discriminator(Module):
    """Fully connected Wasserstein critic conditioned on the input image.

    Input is ``[p, flatten(image)]``; with ``cond_pool > 1`` the image is
    average-pooled by that factor before flattening. Output is one unbounded
    score per sample.
    """

    def __init__(self, classes, image_shape, rng, hidden=(256, 256, 256), slope=0.2, cond_pool=1):
        self.classes = int(classes)
        self.image_shape = tuple(image_shape)
        self.cond_pool = int(cond_pool)
        c, h, w = self.image_shape
        if self.cond_pool > 1:
            h, w = h // self.cond_pool, w // self.cond_pool
        width = self.classes + c * h * w
        self.blocks = []
        for units in hidden:
            self.blocks.append(DiscBlock(width, units, rng, slope))
            width = units
        self.out = Linear(width, 1, rng)
        self.forward_calls = 0

    def condition(self, image):
        img = ad.detach(ad.as_tensor(image))
        if tuple(img.shape[1:]) != self.image_shape:
            raise ShapeError("discriminator", [img.shape], f"expected image shape {self.image_shape}")
        if self.cond_pool > 1:
            img = ad.avg_pool2d(img, self.cond_pool)
        return ad.reshape(img, (img.shape[0], -1))

    def _input(self, p, image):
        p = ad.as_tensor(p)
        if p.ndim != 2 or p.shape[1] != self.classes:
            raise ShapeError("discriminator", [p.shape], f"expected (B, {self.classes}) probabilities")
        cond = self.condition(image)
        if cond.shape[0] != p.shape[0]:
            raise ShapeError("discriminator", [p.shape, image.shape], "batch mismatch")
        return ad.concat([p, cond], axis=1)

    def forward(self, p, image):
        self.forward_calls += 1
        h = self._input(p, image)
        for blk in self.blocks:
            h = blk(h)
        return ad.reshape(self.out(h), (-1,))


def build_discriminator(classes, image_shape, seed=0, hidden=(256, 256, 256), slope=0.2, cond_pool=1):
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return Discriminator(classes, image_shape, rng, hidden=hidden, slope=slope, cond_pool=cond_pool)


def discriminator_forward(d, p, image):
    return d.forward(p, image)


def discriminator_input_grad(d, p_hat, image):
    """Gradient of each sample's critic score with respect to its probability input.

    Built from ordinary tape primitives (transposed linear maps, the exact
    layer-norm Jacobian, leaky-ReLU masks held constant), so the result can
    itself be differentiated with respect to the critic's parameters.
    """
    for blk in d.blocks:
        if not isinstance(blk, DiscBlock):
            raise ConfigError(f"input gradient supports DiscBlock layers only, found {type(blk).__name__}")
    h = d._input(p_hat, image)
    batch = h.shape[0]
    cache = []
    for blk in d.blocks:
        z = blk.linear(h)
        zc = z - ad.mean(z, axis=-1, keepdims=True)
        inv = 1.0 / ad.sqrt(ad.mean(ad.square(zc), axis=-1, keepdims=True) + blk.norm.eps)
        zhat = zc * inv
        n = zhat * blk.norm.weight + blk.norm.bias
        mask = np.where(n.data > 0, 1.0, blk.slope).astype(n.dtype)
        cache.append((blk, zhat, inv, mask))
        h = ad.leaky_relu(n, blk.slope)

    ones = Tensor(np.ones((batch, 1), dtype=h.dtype))
    if not cache:
        return ones * d.out.weight[:, : d.classes]
    g = ones * d.out.weight
    for i in range(len(cache) - 1, -1, -1):
        blk, zhat, inv, mask = cache[i]
        g = g * Tensor(mask) * blk.norm.weight
        g = inv * (g - ad.mean(g, axis=-1, keepdims=True) - zhat * ad.mean(g * zhat, axis=-1, keepdims=True))
        w = blk.linear.weight
        g = ad.matmul(g, w[:, : d.classes] if i == 0 else w)
    return g


# --------------------------------------------------------------------------
# counting
# --------------------------------------------------------------------------


def count_params_flops(model, input_shape=None):
    """Scalar parameter count and FLOPs (2 per multiply-add) for one input.

    Only conv and linear layers contribute FLOPs.
    """
    params = model.param_count()
    if isinstance(model, Linear):
        shape = (1, model.in_features)
    else:
        shape = (1,) + tuple(input_shape or model.input_shape)
    was_training = model.training
    model.eval()
    try:
        with ad.no_grad(), ad.count_macs() as macs:
            x = Tensor(np.zeros(shape, dtype=ad.get_default_dtype()))
            model.forward(x)
    finally:
        model.train(was_training)
    return params, 2 * macs[0]
