"""Network definitions: lesion detector, SRResNet generator, discriminator,
and the frozen perceptual feature network.

A :class:`NetworkSpec` is a flat layer list interpreted by :func:`forward`.
Skip connections are expressed with ``save``/``add`` marker layers, so the
whole graph serializes to JSON next to an LFTB parameter file.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lfsr import tensor as T
from lfsr.metrics import BoundingBox
from lfsr.phantom_io import load_tensors, save_tensors
from lfsr.rng import derive_rng
from lfsr.tensor import Tensor

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


class ModelError(ValueError):
    pass


@dataclass
class NetworkSpec:
    kind: str
    config: dict
    layers: list
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    mode: str = "train"
    in_channels: int = 1
    input_size: int | None = None
    frozen: bool = False

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def __call__(self, x):
        return forward(self, x)

    def trainable(self):
        return {} if self.frozen else dict(self.params)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def n_params(self):
        return sum(p.size for p in self.params.values())

    def manifest(self):
        return {"kind": self.kind, "config": self.config, "layers": self.layers,
                "in_channels": self.in_channels, "input_size": self.input_size, "frozen": self.frozen}

    def state_arrays(self):
        out = {f"param/{k}": p.data for k, p in self.params.items()}
        out.update({f"buffer/{k}": b for k, b in self.buffers.items()})
        return out

    def load_state_arrays(self, arrays):
        for k, p in self.params.items():
            a = arrays[f"param/{k}"]
            if a.shape != p.shape:
                raise ModelError(f"parameter {k}: stored shape {a.shape} != {p.shape}")
            p.data = np.array(a, dtype=np.float64)
        for k in self.buffers:
            self.buffers[k] = np.array(arrays[f"buffer/{k}"], dtype=np.float64)

    def copy(self):
        other = NetworkSpec(self.kind, json.loads(json.dumps(self.config)), json.loads(json.dumps(self.layers)),
                            {k: Tensor(p.data.copy(), requires_grad=p.requires_grad, name=k) for k, p in self.params.items()},
                            {k: b.copy() for k, b in self.buffers.items()},
                            self.mode, self.in_channels, self.input_size, self.frozen)
        return other


class _Builder:
    """Appends layers while tracking channel count and (optionally) spatial size."""

    def __init__(self, kind, seed, in_channels, size=None):
        self.kind = kind
        self.seed = seed
        self.ch = in_channels
        self.size = size
        self.layers = []
        self.params = {}
        self.buffers = {}
        self.saved = {}

    def _param(self, name, arr):
        if name in self.params:
            raise ModelError(f"duplicate parameter name {name!r}")
        self.params[name] = Tensor(arr, requires_grad=True, name=name)

    def _he(self, name, shape, fan_in):
        return derive_rng(self.seed, self.kind, name).normal(size=shape) * math.sqrt(2.0 / fan_in)

    def conv(self, name, cout, k=3, stride=1, zero=False):
        w = np.zeros((cout, self.ch, k, k)) if zero else self._he(name, (cout, self.ch, k, k), self.ch * k * k)
        self._param(f"{name}.w", w)
        self._param(f"{name}.b", np.zeros(cout))
        self.layers.append({"kind": "conv", "name": name, "cin": self.ch, "cout": cout, "k": k, "stride": stride})
        self.ch = cout
        if self.size is not None:
            self.size = (self.size + 2 * (k // 2) - k) // stride + 1

    def bn(self, name):
        self._param(f"{name}.gamma", np.ones(self.ch))
        self._param(f"{name}.beta", np.zeros(self.ch))
        self.buffers[f"{name}.mean"] = np.zeros(self.ch)
        self.buffers[f"{name}.var"] = np.ones(self.ch)
        self.layers.append({"kind": "bn", "name": name, "c": self.ch})

    def prelu(self, name):
        self._param(f"{name}.alpha", np.full(self.ch, 0.25))
        self.layers.append({"kind": "prelu", "name": name, "c": self.ch})

    def act(self, kind, **kw):
        self.layers.append({"kind": kind, **kw})

    def maxpool(self, k=2):
        self.layers.append({"kind": "maxpool", "k": k, "stride": k})
        if self.size is not None:
            self.size //= k

    def shuffle(self, r):
        if self.ch % (r * r):
            raise ModelError(f"pixel shuffle needs channels divisible by {r * r}, have {self.ch}")
        self.layers.append({"kind": "shuffle", "r": r})
        self.ch //= r * r
        if self.size is not None:
            self.size *= r

    def save(self, tag):
        self.saved[tag] = self.ch
        self.layers.append({"kind": "save", "tag": tag})

    def add(self, tag):
        if self.saved.get(tag) != self.ch:
            raise ModelError(f"skip {tag!r}: saved {self.saved.get(tag)} channels, current {self.ch}")
        self.layers.append({"kind": "add", "tag": tag})

    def flatten(self):
        if self.size is None:
            raise ModelError("flatten needs a fixed input size")
        self.layers.append({"kind": "flatten"})
        self.ch = self.ch * self.size * self.size
        self.size = None

    def dense(self, name, cout, zero=False):
        w = np.zeros((cout, self.ch)) if zero else self._he(name, (cout, self.ch), self.ch)
        self._param(f"{name}.w", w)
        self._param(f"{name}.b", np.zeros(cout))
        self.layers.append({"kind": "dense", "name": name, "cin": self.ch, "cout": cout})
        self.ch = cout

    def roi_head(self, name):
        w = self._he(name, (5, self.ch, 1, 1), self.ch) * 0.1
        b = np.array([0.0, 0.0, 0.0, -1.5, -1.5])
        self._param(f"{name}.w", w)
        self._param(f"{name}.b", b)
        self.layers.append({"kind": "roi_head", "name": name, "cin": self.ch})
        self.ch = 4

    def build(self, config, in_channels, input_size=None, frozen=False):
        spec = NetworkSpec(self.kind, config, self.layers, self.params, self.buffers,
                           in_channels=in_channels, input_size=input_size, frozen=frozen)
        if frozen:
            for p in spec.params.values():
                p.requires_grad = False
        return spec


def _roi_head(x, w, b):
    """Attention-weighted average pooling that votes for a box.

    Channel 0 is a spatial attention logit; channels 1-2 are per-cell
    centre offsets (in cells); channels 3-4 are size logits.
    """
    n, _, h, wd = x.shape
    out = T.conv2d(x, w, b)
    attn = T.softmax(out[:, 0:1], axis=(2, 3))
    gy = ((np.arange(h) + 0.5) / h).reshape(1, 1, h, 1)
    gx = ((np.arange(wd) + 0.5) / wd).reshape(1, 1, 1, wd)
    cy = T.sum(T.mul(attn, T.add(T.scale(out[:, 1:2], 1.0 / h), gy)), axis=(1, 2, 3))
    cx = T.sum(T.mul(attn, T.add(T.scale(out[:, 2:3], 1.0 / wd), gx)), axis=(1, 2, 3))
    sh = T.sigmoid(T.sum(T.mul(attn, out[:, 3:4]), axis=(1, 2, 3)))
    sw = T.sigmoid(T.sum(T.mul(attn, out[:, 4:5]), axis=(1, 2, 3)))
    cols = [T.reshape(v, (n, 1)) for v in (cx, cy, sh, sw)]
    return T.concat(cols, axis=1)


def forward(spec: NetworkSpec, x):
    x = T.as_tensor(x)
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ModelError(f"{spec.kind}: expected (N, {spec.in_channels}, H, W) input, got {x.shape}")
    if spec.input_size is not None and x.shape[2:] != (spec.input_size, spec.input_size):
        raise ModelError(f"{spec.kind}: built for {spec.input_size}x{spec.input_size} inputs, got {x.shape[2:]}")
    p = spec.params
    training = spec.mode == "train"
    saved = {}
    for layer in spec.layers:
        kind = layer["kind"]
        name = layer.get("name")
        if kind == "conv":
            x = T.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=layer["stride"], pad="same")
        elif kind == "bn":
            x = T.batchnorm2d(x, p[f"{name}.gamma"], p[f"{name}.beta"], training,
                              spec.buffers[f"{name}.mean"], spec.buffers[f"{name}.var"], BN_MOMENTUM, BN_EPS)
        elif kind == "prelu":
            x = T.prelu(x, p[f"{name}.alpha"])
        elif kind == "relu":
            x = T.relu(x)
        elif kind == "lrelu":
            x = T.leaky_relu(x, layer.get("slope", 0.2))
        elif kind == "sigmoid":
            x = T.sigmoid(x)
        elif kind == "maxpool":
            x = T.maxpool2d(x, layer["k"], layer["stride"])
        elif kind == "shuffle":
            x = T.pixel_shuffle(x, layer["r"])
        elif kind == "save":
            saved[layer["tag"]] = x
        elif kind == "add":
            x = T.add(x, saved[layer["tag"]])
        elif kind == "add_upsampled":
            x = T.add(x, T.upsample_bilinear(saved[layer["tag"]], layer["r"]))
        elif kind == "flatten":
            x = T.flatten(x)
        elif kind == "dense":
            x = T.dense(x, p[f"{name}.w"], p[f"{name}.b"])
        elif kind == "gap":
            x = T.global_avg_pool(x)
        elif kind == "roi_head":
            x = _roi_head(x, p[f"{name}.w"], p[f"{name}.b"])
        else:
            raise ModelError(f"unknown layer kind {kind!r}")
    return x


# ------------------------------------------------------------------ builders

def build_ld(base_channels=32, n_stages=3, seed=0):
    """Lesion detector.

    stem conv-BN-ReLU, then per stage two residual blocks
    (conv-BN-ReLU-conv-BN + skip, ReLU) and a 2x2 max pool, then an
    attention-pooled box head with sigmoid-bounded sizes.
    """
    if base_channels < 1 or n_stages < 1:
        raise ModelError("base_channels and n_stages must be positive")
    b = _Builder("ld", seed, 1)
    c = base_channels
    b.conv("stem", c)
    b.bn("stem.bn")
    b.act("relu")
    for s in range(n_stages):
        for r in range(2):
            tag = f"s{s}.r{r}"
            b.save(tag)
            b.conv(f"{tag}.conv1", c)
            b.bn(f"{tag}.bn1")
            b.act("relu")
            b.conv(f"{tag}.conv2", c)
            b.bn(f"{tag}.bn2")
            b.add(tag)
            b.act("relu")
        b.maxpool(2)
    b.roi_head("head")
    return b.build({"base_channels": base_channels, "n_stages": n_stages, "seed": seed}, 1)


def build_srresnet(n_res=16, scale=2, channels=64, seed=0, zero_last=False, global_skip=False):
    """SRResNet generator.

    ``global_skip`` adds the bilinear upsampling of the input to the output so
    the network only has to learn a residual correction.
    """
    if scale not in (2, 4):
        raise ModelError(f"scale must be 2 or 4, got {scale}")
    b = _Builder("srresnet", seed, 1)
    c = channels
    if global_skip:
        b.layers.append({"kind": "save", "tag": "input"})
    b.conv("stem", c, k=9)
    b.prelu("stem.act")
    b.save("long")
    for i in range(n_res):
        tag = f"res{i}"
        b.save(tag)
        b.conv(f"{tag}.conv1", c)
        b.bn(f"{tag}.bn1")
        b.prelu(f"{tag}.act")
        b.conv(f"{tag}.conv2", c)
        b.bn(f"{tag}.bn2")
        b.add(tag)
    b.conv("trunk", c)
    b.bn("trunk.bn")
    b.add("long")
    for u in range(int(math.log2(scale))):
        b.conv(f"up{u}", 4 * c)
        b.shuffle(2)
        b.prelu(f"up{u}.act")
    b.conv("out", 1, k=9, zero=zero_last)
    if global_skip:
        b.layers.append({"kind": "add_upsampled", "tag": "input", "r": scale})
    return b.build({"n_res": n_res, "scale": scale, "channels": channels, "seed": seed,
                    "global_skip": global_skip}, 1)


def build_discriminator(channels=32, input_size=64, seed=0):
    if input_size % 16:
        raise ModelError(f"discriminator input size must be divisible by 16, got {input_size}")
    b = _Builder("discriminator", seed, 1, size=input_size)
    b.conv("conv_in", channels)
    b.act("lrelu", slope=0.2)
    for i in range(4):
        # BN keeps the first-layer filters moving at a useful rate under small Adam steps
        b.conv(f"conv{i}", channels * 2 ** i, stride=2)
        b.bn(f"bn{i}")
        b.act("lrelu", slope=0.2)
    b.flatten()
    b.dense("fc", 1)
    b.act("sigmoid")
    return b.build({"channels": channels, "input_size": input_size, "seed": seed}, 1, input_size)


def build_perceptual(seed=0, channels=(8, 16, 32, 64)):
    """Frozen random-feature stand-in for a pretrained VGG feature extractor."""
    b = _Builder("perceptual", seed, 1)
    for i, c in enumerate(channels):
        b.conv(f"conv{i}", c, stride=2)
        b.act("relu")
    return b.build({"seed": seed, "channels": list(channels)}, 1, frozen=True).eval()


# ------------------------------------------------------------------ ROI

@dataclass(frozen=True)
class RoiPrediction:
    cx: float
    cy: float
    h: float
    w: float

    def __post_init__(self):
        for v in (self.cx, self.cy, self.h, self.w):
            if not 0.0 <= v <= 1.0:
                raise ModelError(f"ROI values must lie in [0, 1], got {self}")

    @classmethod
    def from_vector(cls, v):
        v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
        return cls(*map(float, v))

    @classmethod
    def from_box(cls, box: BoundingBox, shape, margin=1.0):
        hh, ww = shape
        return cls.from_vector([(box.col0 + box.width / 2) / ww, (box.row0 + box.height / 2) / hh,
                                box.height * margin / hh, box.width * margin / ww])

    def vector(self):
        return np.array([self.cx, self.cy, self.h, self.w])

    def to_box(self, shape) -> BoundingBox:
        """Smallest pixel box containing the predicted extent, clamped to the image."""
        hh, ww = shape
        r0 = max(int(math.floor((self.cy - self.h / 2) * hh)), 0)
        r1 = min(int(math.ceil((self.cy + self.h / 2) * hh)), hh)
        c0 = max(int(math.floor((self.cx - self.w / 2) * ww)), 0)
        c1 = min(int(math.ceil((self.cx + self.w / 2) * ww)), ww)
        r1, c1 = max(r1, min(r0 + 1, hh)), max(c1, min(c0 + 1, ww))
        r0, c0 = min(r0, r1 - 1), min(c0, c1 - 1)
        return BoundingBox(r0, c0, r1 - r0, c1 - c0)


def predict_rois(ld: NetworkSpec, images):
    """Batch of (N, H, W) or (N, 1, H, W) LR images -> list of RoiPrediction."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None]
    mode = ld.mode
    ld.eval()
    try:
        out = forward(ld, Tensor(x)).data
    finally:
        ld.mode = mode
    return [RoiPrediction.from_vector(v) for v in out]


def predict_roi(ld: NetworkSpec, image_lr) -> RoiPrediction:
    return predict_rois(ld, np.asarray(image_lr)[None])[0]


def roi_origin(roi: RoiPrediction, lr_shape, out_size):
    """Top-left LR pixel of an ``out_size`` crop centred on the ROI, clamped."""
    hh, ww = lr_shape
    if out_size > hh or out_size > ww:
        raise ModelError(f"crop size {out_size} exceeds image {hh}x{ww}")
    r0 = int(math.floor(roi.cy * hh - out_size / 2 + 0.5))
    c0 = int(math.floor(roi.cx * ww - out_size / 2 + 0.5))
    return min(max(r0, 0), hh - out_size), min(max(c0, 0), ww - out_size)


def crop_roi(image, roi: RoiPrediction, out_size, scale=1):
    """Fixed-size crop. With ``scale > 1`` the image is the HR counterpart of an
    LR frame and the crop is ``out_size * scale`` wide at the matching origin."""
    img = np.asarray(image)
    hh, ww = img.shape[-2] // scale, img.shape[-1] // scale
    r0, c0 = roi_origin(roi, (hh, ww), out_size)
    s = out_size * scale
    return img[..., r0 * scale : r0 * scale + s, c0 * scale : c0 * scale + s]


# ------------------------------------------------------------------ files

def save_network(spec: NetworkSpec, path):
    path = Path(path)
    save_tensors(path, spec.state_arrays())
    path.with_suffix(".json").write_text(json.dumps(spec.manifest(), indent=1))


def network_from_manifest(man):
    params, buffers = {}, {}
    for layer in man["layers"]:
        name, kind = layer.get("name"), layer["kind"]
        if kind in ("conv", "roi_head"):
            cout = layer.get("cout", 5)
            k = layer.get("k", 1)
            params[f"{name}.w"] = np.zeros((cout, layer["cin"], k, k))
            params[f"{name}.b"] = np.zeros(cout)
        elif kind == "bn":
            params[f"{name}.gamma"] = np.ones(layer["c"])
            params[f"{name}.beta"] = np.zeros(layer["c"])
            buffers[f"{name}.mean"] = np.zeros(layer["c"])
            buffers[f"{name}.var"] = np.ones(layer["c"])
        elif kind == "prelu":
            params[f"{name}.alpha"] = np.zeros(layer["c"])
        elif kind == "dense":
            params[f"{name}.w"] = np.zeros((layer["cout"], layer["cin"]))
            params[f"{name}.b"] = np.zeros(layer["cout"])
    frozen = man.get("frozen", False)
    spec = NetworkSpec(man["kind"], man["config"], man["layers"],
                       {k: Tensor(v, requires_grad=not frozen, name=k) for k, v in params.items()},
                       buffers, in_channels=man["in_channels"], input_size=man.get("input_size"), frozen=frozen)
    return spec


def load_network(path):
    """Rebuild a network from its LFTB parameters and JSON layer manifest."""
    path = Path(path)
    spec = network_from_manifest(json.loads(path.with_suffix(".json").read_text()))
    spec.load_state_arrays(load_tensors(path))
    if spec.frozen:
        spec.eval()
    return spec
