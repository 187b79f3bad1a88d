"""AdeNet and LeNet-5 builders, parameter accounting, and forward execution.

How the AdeNet stack was reconstructed from the published figures
(32 initial filters, 3x3 kernels, three conv blocks with batch norm, one
hidden dense layer, 102,082 trainable and 448 non-trainable parameters):

* Batch norm keeps two running statistics per channel, so the channel widths
  must satisfy ``2 * (c1 + c2 + c3) = 448``. With ``c1 = 32`` and the usual
  doubling this gives 32/64/128.
* The conv stack plus batch-norm scale/shift uses
  ``896 + 18,496 + 73,856 + 448 = 93,696`` trainable parameters, leaving
  8,386 for the head. A hidden dense layer of width ``h`` fed by the 128
  pooled channels costs ``128h + h + 2h + 2 = 131h + 2``, so ``h = 64``.
* The head input has to be 128 values regardless of crop size because
  batches are padded to their own maximum dimensions, which forces a
  global average pool between the conv stack and the dense layers.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import nn

KINDS = (
    "conv3x3-same", "conv5x5-valid", "batchnorm", "relu", "maxpool2",
    "avgpool2", "global-avg-pool", "flatten", "dense", "softmax",
)


@dataclass
class LayerSpec:
    kind: str
    hyper: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


@dataclass
class ModelGraph:
    layers: list
    name: str
    in_channels: int
    n_classes: int = 2
    seed: int = 0
    mode: str = "train"
    meta: dict = field(default_factory=dict)

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "infer"
        return self

    def astype(self, dtype):
        """Copy of the model with every parameter and statistic cast to ``dtype``."""
        m = copy.deepcopy(self)
        for layer in m.layers:
            for d in (layer.params, layer.stats):
                for k in d:
                    d[k] = d[k].astype(dtype)
        return m

    def copy(self):
        return copy.deepcopy(self)

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                yield (i, k), v

    def state(self):
        """Flat ordered mapping of every parameter and running statistic."""
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                out[f"{i}.{k}"] = v
            for k, v in layer.stats.items():
                out[f"{i}.{k}"] = v
        return out

    def load_state(self, state):
        for i, layer in enumerate(self.layers):
            for d in (layer.params, layer.stats):
                for k in d:
                    d[k][...] = state[f"{i}.{k}"]

    def conv_indices(self):
        return [i for i, l in enumerate(self.layers) if l.kind.startswith("conv")]


# --------------------------------------------------------------------------
# builders


def _he(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def _conv(rng, kind, ci, co):
    k = 3 if kind == "conv3x3-same" else 5
    return LayerSpec(kind, {"in": ci, "out": co, "k": k, "padding": 1 if k == 3 else 0}, {
        "w": _he(rng, (co, ci, k, k), ci * k * k),
        "b": np.zeros(co, np.float32),
    })


def _bn(c):
    return LayerSpec("batchnorm", {"channels": c}, {
        "gamma": np.ones(c, np.float32), "beta": np.zeros(c, np.float32),
    }, {
        "running_mean": np.zeros(c, np.float32), "running_var": np.ones(c, np.float32),
    })


def _dense(rng, d, k):
    return LayerSpec("dense", {"in": d, "out": k}, {
        "w": _he(rng, (d, k), d), "b": np.zeros(k, np.float32),
    })


def build_adenet(in_channels=3, with_batchnorm=True, seed=0):
    if in_channels < 1:
        raise ValueError("in_channels must be >= 1")
    rng = np.random.default_rng(seed)
    layers = []
    ci = in_channels
    for co in (32, 64, 128):
        layers.append(_conv(rng, "conv3x3-same", ci, co))
        if with_batchnorm:
            layers.append(_bn(co))
        layers += [LayerSpec("relu"), LayerSpec("maxpool2")]
        ci = co
    layers += [
        LayerSpec("global-avg-pool"), LayerSpec("flatten"),
        _dense(rng, 128, 64), LayerSpec("relu"), _dense(rng, 64, 2), LayerSpec("softmax"),
    ]
    return ModelGraph(layers, "adenet", in_channels, seed=seed,
                      meta={"arch": "adenet", "with_batchnorm": with_batchnorm})


def build_lenet5(seed=0):
    """LeNet-5 for 32x32 grayscale input, ReLU activations, two classes."""
    rng = np.random.default_rng(seed)
    layers = [
        _conv(rng, "conv5x5-valid", 1, 6), LayerSpec("relu"), LayerSpec("avgpool2"),
        _conv(rng, "conv5x5-valid", 6, 16), LayerSpec("relu"), LayerSpec("avgpool2"),
        LayerSpec("flatten"),
        _dense(rng, 400, 120), LayerSpec("relu"),
        _dense(rng, 120, 84), LayerSpec("relu"),
        _dense(rng, 84, 2), LayerSpec("softmax"),
    ]
    return ModelGraph(layers, "lenet5", 1, seed=seed, meta={"arch": "lenet5", "input_size": 32})


def build(arch, **kw):
    if arch == "adenet":
        return build_adenet(**kw)
    if arch == "lenet5":
        kw.pop("with_batchnorm", None)
        kw.pop("in_channels", None)
        return build_lenet5(**kw)
    raise ValueError(f"unknown architecture {arch!r}")


def count_params(model):
    """Return ``(trainable, non_trainable)`` parameter counts."""
    trainable = sum(v.size for l in model.layers for v in l.params.values())
    frozen = sum(v.size for l in model.layers for v in l.stats.values())
    return int(trainable), int(frozen)


# --------------------------------------------------------------------------
# execution


def min_input_size(model):
    pools = sum(l.kind in ("maxpool2", "avgpool2") for l in model.layers)
    return 2 ** pools


def run_layer(layer, x, mode):
    k = layer.kind
    if k in ("conv3x3-same", "conv5x5-valid"):
        return nn.conv2d_forward(x, layer.params["w"], layer.params["b"], layer.hyper["padding"])
    if k == "batchnorm":
        p, s = layer.params, layer.stats
        return nn.batchnorm_forward(x, p["gamma"], p["beta"], s["running_mean"], s["running_var"], mode,
                                    momentum=layer.hyper.get("momentum", nn.BN_MOMENTUM))
    if k == "relu":
        return nn.relu_forward(x)
    if k == "maxpool2":
        return nn.maxpool2_forward(x)
    if k == "avgpool2":
        return nn.avgpool2_forward(x)
    if k == "global-avg-pool":
        return nn.global_avg_pool_forward(x)
    if k == "flatten":
        return nn.flatten_forward(x)
    if k == "dense":
        return nn.dense_forward(x, layer.params["w"], layer.params["b"])
    raise ValueError(f"cannot run layer kind {k!r}")


def _validate_input(model, x):
    if x.ndim != 4:
        raise ValueError(f"expected (n, c, h, w) batch, got shape {x.shape}")
    if x.shape[1] != model.in_channels:
        raise ValueError(f"{model.name} expects {model.in_channels} channels, got {x.shape[1]}")
    if model.meta.get("input_size") and x.shape[2:] != (model.meta["input_size"],) * 2:
        raise ValueError(f"{model.name} expects {model.meta['input_size']}x{model.meta['input_size']} input")
    lo = min_input_size(model)
    if x.shape[2] < lo or x.shape[3] < lo:
        raise ValueError(f"{model.name} needs inputs of at least {lo}x{lo}, got {x.shape[2]}x{x.shape[3]}")


def run(model, x, start=0, stop=None, keep_contexts=False, mode=None):
    """Run layers ``start:stop`` (the trailing softmax is never applied here).

    Returns ``(output, contexts)``; ``contexts`` is empty unless
    ``keep_contexts`` is set.
    """
    layers = model.layers
    if stop is None:
        stop = len(layers) - 1 if layers and layers[-1].kind == "softmax" else len(layers)
    mode = mode or model.mode
    ctxs = []
    for layer in layers[start:stop]:
        x, ctx = run_layer(layer, x, mode)
        if keep_contexts:
            ctxs.append(ctx)
    return x, ctxs


def forward(model, batch, mode=None):
    """Full forward pass. Returns ``(probs, logits, contexts)``.

    Contexts are only kept in train mode. ``mode`` overrides ``model.mode``
    without mutating the model.
    """
    _validate_input(model, batch)
    mode = mode or model.mode
    logits, ctxs = run(model, batch, keep_contexts=mode == "train", mode=mode)
    return nn.softmax(logits), logits, ctxs


def backward(model, ctxs, dlogits, stop=0):
    """Back-propagate ``dlogits`` through the recorded contexts.

    Returns ``(dx, grads)`` with ``grads`` keyed by ``(layer_index, name)``.
    ``stop`` gives the first layer index to propagate through, so the
    gradient with respect to the input of layer ``stop`` is returned.
    """
    grads = {}
    dy = dlogits
    for i in range(len(ctxs) - 1, stop - 1, -1):
        dy, g = nn.layer_vjp(ctxs[i], dy)
        for k, v in g.items():
            grads[(i, k)] = v
    return dy, grads


def predict_proba(model, batch):
    probs, _, _ = forward(model, batch, mode="infer")
    return probs
