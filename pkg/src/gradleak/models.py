"""Classifier architectures used by the attack experiments.

All builders are deterministic: the same (architecture, seed) pair yields
bitwise-identical parameters. Parameters are initialized uniformly in
[-0.5, 0.5], matching the reference attack setup this code follows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


@dataclass
class LayerSpec:
    kind: str  # conv | linear | activation | maxpool | flatten | reshape
    hyperparams: dict = field(default_factory=dict)

    def to_json(self):
        return {"kind": self.kind, **self.hyperparams}

    @staticmethod
    def from_json(obj):
        obj = dict(obj)
        return LayerSpec(kind=obj.pop("kind"), hyperparams=obj)


@dataclass
class Model:
    id: str
    layers: list
    params: dict  # name -> Tensor
    init_seed: int
    input_shape: tuple
    num_classes: int
    frozen: bool = False

    def param_count(self):
        return sum(t.size for t in self.params.values())

    def trainable_params(self):
        if self.frozen:
            return {}
        return self.params

    def manifest(self, embed_params=False):
        m = {
            "id": self.id,
            "seed": self.init_seed,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "frozen": self.frozen,
            "layers": [l.to_json() for l in self.layers],
        }
        if embed_params:
            m["params"] = {
                k: ad.tensor_to_ften_b64(v) for k, v in self.params.items()
            }
        return m

    def forward(self, x):
        """Run the layer stack on a single sample (no batch axis)."""
        if x.shape != self.input_shape:
            raise DimensionError(
                f"model {self.id}: input {x.shape}, expected {self.input_shape}"
            )
        h = ad.reshape(x, (1,) + self.input_shape)
        for i, layer in enumerate(self.layers):
            h = self._apply(layer, h, i)
        return h

    def _apply(self, layer, h, i):
        hp = layer.hyperparams
        try:
            if layer.kind == "conv":
                return ad.conv2d(
                    h,
                    self.params[f"{hp['name']}.w"],
                    stride=tuple(hp["stride"]),
                    pad=tuple(hp["pad"]),
                    bias=self.params[f"{hp['name']}.b"],
                )
            if layer.kind == "linear":
                return ad.linear(
                    h, self.params[f"{hp['name']}.w"], self.params[f"{hp['name']}.b"]
                )
            if layer.kind == "activation":
                fn = {"sigmoid": ad.sigmoid, "relu": ad.relu}[hp["fn"]]
                return fn(h)
            if layer.kind == "maxpool":
                return ad.maxpool2d(h, hp["kernel"], hp.get("stride"))
            if layer.kind == "flatten":
                return ad.flatten(h)
            if layer.kind == "reshape":
                return ad.reshape(h, (h.shape[0],) + tuple(hp["shape"]))
            raise ValueError(f"unknown layer kind {layer.kind!r}")
        except DimensionError as e:
            raise DimensionError(f"layer {i} ({layer.kind}): {e}") from e


def forward_loss(model, x, label):
    """(logits, scalar cross-entropy loss) for one sample."""
    logits = model.forward(x)
    loss = ad.softmax_cross_entropy(logits, label)
    return logits, loss


class _Builder:
    def __init__(self, model_id, seed, input_shape, num_classes):
        self.rng = np.random.default_rng(seed)
        self.layers = []
        self.params = {}
        self.shape = tuple(input_shape)  # running sample shape, no batch axis
        self.model_id = model_id
        self.seed = seed
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.counts = {}

    def _init(self, shape):
        return Tensor(self.rng.uniform(-0.5, 0.5, size=shape), requires_grad=True)

    def _name(self, kind):
        self.counts[kind] = self.counts.get(kind, 0) + 1
        return f"{kind}{self.counts[kind]}"

    def reshape(self, shape):
        shape = tuple(shape)
        if int(np.prod(shape)) != int(np.prod(self.shape)):
            raise DimensionError(f"reshape {self.shape} -> {shape}")
        self.layers.append(LayerSpec("reshape", {"shape": list(shape)}))
        self.shape = shape
        return self

    def conv(self, out_ch, kernel, stride, pad):
        c, h, w = self.shape
        kh, kw = ad._pair(kernel)
        sh, sw = ad._pair(stride)
        ph, pw = ad._pair(pad)
        name = self._name("conv")
        self.params[f"{name}.w"] = self._init((out_ch, c, kh, kw))
        self.params[f"{name}.b"] = self._init((out_ch,))
        self.layers.append(
            LayerSpec(
                "conv",
                {
                    "name": name,
                    "out_channels": out_ch,
                    "kernel": [kh, kw],
                    "stride": [sh, sw],
                    "pad": [ph, pw],
                },
            )
        )
        hout = (h + 2 * ph - kh) // sh + 1
        wout = (w + 2 * pw - kw) // sw + 1
        if hout < 1 or wout < 1:
            raise DimensionError(f"conv {name}: kernel exceeds padded input")
        self.shape = (out_ch, hout, wout)
        return self

    def activation(self, fn="sigmoid"):
        self.layers.append(LayerSpec("activation", {"fn": fn}))
        return self

    def flatten(self):
        self.layers.append(LayerSpec("flatten", {}))
        self.shape = (int(np.prod(self.shape)),)
        return self

    def linear(self, units):
        (n,) = self.shape
        name = self._name("fc")
        self.params[f"{name}.w"] = self._init((units, n))
        self.params[f"{name}.b"] = self._init((units,))
        self.layers.append(LayerSpec("linear", {"name": name, "units": units}))
        self.shape = (units,)
        return self

    def build(self, frozen=False):
        model = Model(
            id=self.model_id,
            layers=self.layers,
            params=self.params,
            init_seed=self.seed,
            input_shape=self.input_shape,
            num_classes=self.num_classes,
            frozen=frozen,
        )
        audit_shapes(model)
        return model


def audit_shapes(model):
    """Static shape propagation over the layer stack; raises on mismatch."""
    with ad.Tape(retain_for_higher_order=False):
        x = Tensor(np.zeros(model.input_shape))
        out = model.forward(x)
    if model.num_classes and out.shape != (1, model.num_classes):
        raise DimensionError(
            f"model {model.id}: logits {out.shape}, expected (1, {model.num_classes})"
        )
    return out.shape


def build_dlg_lenet(num_classes=100, seed=0, input_shape=(3, 32, 32)):
    """The small sigmoid LeNet the original leakage attack targets."""
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    b = _Builder("dlg-lenet", seed, input_shape, num_classes)
    b.conv(12, 5, 2, 2).activation()
    b.conv(12, 5, 2, 2).activation()
    b.conv(12, 5, 1, 2).activation()
    b.flatten().linear(num_classes)
    return b.build()


def build_feature_classifier(num_classes=13, seed=0, feature_shape=(1, 10, 64)):
    """LeNet-comparable classifier over a pooled feature block.

    The (1, T, F) block is treated as a T-channel 1-D signal; the 1-D
    convolutions are realized as height-1 2-D convolutions.
    """
    _, t, f = feature_shape
    b = _Builder("feature-lenet", seed, tuple(feature_shape), num_classes)
    b.reshape((t, 1, f))
    b.conv(24, (1, 5), (1, 2), (0, 2)).activation()
    b.conv(24, (1, 5), (1, 2), (0, 2)).activation()
    b.conv(24, (1, 5), (1, 1), (0, 2)).activation()
    b.flatten().linear(num_classes)
    return b.build()


def build_simple_classifier(input_shape, num_classes, seed=0):
    """Flatten plus one linear layer."""
    b = _Builder("simple", seed, tuple(input_shape), num_classes)
    b.flatten().linear(num_classes)
    return b.build()


def _as_conv_shape(input_shape):
    """Lift a flat feature vector to a (1, h, w) grid so conv layers apply."""
    if len(input_shape) == 3:
        return tuple(input_shape)
    (n,) = input_shape
    side = int(round(np.sqrt(n)))
    if side * side == n:
        return (1, side, side)
    return (1, 1, n)


def build_moderate_classifier(input_shape, num_classes, seed=0):
    """Two conv+sigmoid blocks, then two linear layers."""
    b = _Builder("moderate", seed, tuple(input_shape), num_classes)
    conv_shape = _as_conv_shape(tuple(input_shape))
    if conv_shape != tuple(input_shape):
        b.reshape(conv_shape)
    b.conv(16, 3, 1, 1).activation()
    b.conv(32, 3, 2, 1).activation()
    b.flatten().linear(128).activation()
    b.linear(num_classes)
    return b.build()


def build_frozen_extractor(out_features=64, seed=0, input_shape=(3, 32, 32)):
    """Frozen, seeded stand-in for a pretrained feature extractor.

    Its parameters never appear in shared gradient capsules.
    """
    if out_features < 1:
        raise ValueError("out_features must be >= 1")
    b = _Builder("frozen-extractor", seed, tuple(input_shape), 0)
    b.conv(8, 3, 2, 1).activation()
    b.conv(8, 3, 2, 1).activation()
    # Bounded output keeps downstream feature targets on the same (0, 1)
    # scale as normalized pixels.
    b.flatten().linear(out_features).activation()
    return b.build(frozen=True)


def extract_features(extractor, x):
    """Detached feature vector for a single raw sample."""
    with ad.Tape(retain_for_higher_order=False):
        out = extractor.forward(x)
    return Tensor(out.data.reshape(-1).copy())


_BUILDERS = {
    "dlg-lenet": lambda seed, shape, classes: build_dlg_lenet(classes, seed, shape),
    "feature-lenet": lambda seed, shape, classes: build_feature_classifier(
        classes, seed, shape
    ),
    "simple": lambda seed, shape, classes: build_simple_classifier(
        shape, classes, seed
    ),
    "moderate": lambda seed, shape, classes: build_moderate_classifier(
        shape, classes, seed
    ),
    "frozen-extractor": lambda seed, shape, classes: build_frozen_extractor(
        seed=seed, input_shape=shape
    ),
}


def build_by_id(model_id, seed, input_shape, num_classes):
    if model_id not in _BUILDERS:
        raise ValueError(f"unknown architecture {model_id!r}")
    return _BUILDERS[model_id](seed, tuple(input_shape), num_classes)


def model_from_manifest(obj):
    model = build_by_id(
        obj["id"], obj["seed"], tuple(obj["input_shape"]), obj["num_classes"]
    )
    if "params" in obj:
        for name, blob in obj["params"].items():
            t = ad.tensor_from_ften_b64(blob)
            model.params[name] = Tensor(
                t.data.reshape(model.params[name].shape), requires_grad=True
            )
    return model


def save_manifest(model, path, embed_params=False):
    with open(path, "w") as f:
        json.dump(model.manifest(embed_params), f, indent=1, sort_keys=True)


def load_manifest(path):
    with open(path) as f:
        return model_from_manifest(json.load(f))
