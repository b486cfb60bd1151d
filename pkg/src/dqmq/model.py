"""Small CNN backbones built from quantize -> conv -> dequantize layers.

Every quantizable layer quantizes its input activations and its weights at
the decided bit-width, convolves the grid values and dequantizes the result.
With zero zero-points that is the same as convolving the fake-quantized
operands, which is how it is computed here.  Biases stay full precision and
are added after dequantization; residual additions also happen on
dequantized, full-precision activations.

A forward pass asks a ``decide(index, spec, x)`` callback for each layer's
decision, so bit-widths can depend on the features reaching that layer:

* ``None``               full precision, no quantization at all
* ``int`` bits           hard decision; 0 prunes the layer to its bias
* :class:`SoftDecision`  probability-weighted mixture of fake-quantized
                         operands over a pool of bit-widths
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .quant import AFFINE, FULL_BITS, PRUNE_BITS, SYMMETRIC, calibrate, fake_quant
from .rng import Rng
from .tensor import Tensor

ALL_BITS = (0, 1, 2, 4, 8, 16, 32)
ACT_UNSIGNED = "unsigned"
ACT_SYMMETRIC = "symmetric"


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv" or "fc"
    in_features: int
    out_features: int
    kernel: int = 1
    stride: int = 1
    pad: int = 0
    block: int = 0
    quantizable: bool = True

    @property
    def weight_shape(self) -> tuple:
        if self.kind == "conv":
            return (self.out_features, self.in_features, self.kernel, self.kernel)
        return (self.out_features, self.in_features)

    @property
    def param_count(self) -> int:
        return int(np.prod(self.weight_shape))

    @property
    def fan_in(self) -> int:
        return self.in_features * (self.kernel * self.kernel if self.kind == "conv" else 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


@dataclass
class SoftDecision:
    bits: tuple
    probs: Tensor  # shape (len(bits),), differentiable


DEFAULT_CONFIG = {
    "topology": "tiny_resnet",
    "widths": [8, 16, 32, 32],
    "in_channels": 3,
    "num_classes": 10,
    "image_size": 32,
    "input_shift": 0.5,  # subtracted from [0, 1] pixels before the first layer
    "input_scale": 4.0,  # then multiplied in, so low-contrast inputs reach unit scale
}


def _tiny_resnet(cfg) -> tuple[list, bool]:
    widths = cfg["widths"]
    if len(widths) != 4:
        raise ConfigError("tiny_resnet needs exactly 4 widths")
    layers = []
    c_in = cfg["in_channels"]
    strides = (2, 2, 2, 1)
    for b, (w, s) in enumerate(zip(widths, strides)):
        layers.append(LayerSpec(f"conv{2 * b + 1}", "conv", c_in, w, 3, s, 1, b))
        layers.append(LayerSpec(f"conv{2 * b + 2}", "conv", w, w, 3, 1, 1, b))
        c_in = w
    layers.append(LayerSpec("fc", "fc", c_in, cfg["num_classes"], block=len(widths)))
    return layers, True


def _plain(cfg) -> tuple[list, bool]:
    widths = cfg["widths"]
    layers = []
    c_in = cfg["in_channels"]
    for i, w in enumerate(widths):
        layers.append(LayerSpec(f"conv{i + 1}", "conv", c_in, w, 3, 2 if i else 1, 1, i))
        c_in = w
    layers.append(LayerSpec("fc", "fc", c_in, cfg["num_classes"], block=len(widths)))
    return layers, False


TOPOLOGIES = {"tiny_resnet": _tiny_resnet, "plain": _plain}


class Model:
    """Layer manifest plus full-precision master parameters."""

    def __init__(self, config: dict, layers: Sequence[LayerSpec], residual: bool,
                 weights: dict, biases: dict, seed: int = 0):
        names = [s.name for s in layers]
        if len(set(names)) != len(names):
            raise ConfigError("layer names must be unique")
        self.config = dict(config)
        self.layers = list(layers)
        self.residual = residual
        self.weights = weights
        self.biases = biases
        self.seed = seed

    @property
    def quantizable(self) -> list:
        return [s for s in self.layers if s.quantizable]

    @property
    def param_counts(self) -> list:
        return [s.param_count for s in self.quantizable]

    def parameters(self) -> list:
        out = []
        for s in self.layers:
            out.append(self.weights[s.name])
            out.append(self.biases[s.name])
        return out

    def named_tensors(self) -> list:
        out = []
        for s in self.layers:
            out.append((f"{s.name}.weight", s.name, self.weights[s.name]))
            out.append((f"{s.name}.bias", s.name, self.biases[s.name]))
        return out

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.parameters()))

    def copy(self) -> "Model":
        w = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.weights.items()}
        b = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.biases.items()}
        return Model(copy.deepcopy(self.config), self.layers, self.residual, w, b, self.seed)

    def state(self) -> dict:
        return {name: t.data.copy() for name, _, t in self.named_tensors()}

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None


def make_config(config: Optional[dict] = None) -> dict:
    cfg = dict(DEFAULT_CONFIG)
    for k, v in (config or {}).items():
        if k not in DEFAULT_CONFIG:
            raise ConfigError(f"unknown model config key {k!r}")
        cfg[k] = v
    if cfg["topology"] not in TOPOLOGIES:
        raise ConfigError(f"unknown topology {cfg['topology']!r}")
    return cfg


def build_backbone(config: Optional[dict] = None, seed: int = 0) -> Model:
    """Kaiming-uniform (fan-in, ReLU gain) weights, zero biases."""
    cfg = make_config(config)
    layers, residual = TOPOLOGIES[cfg["topology"]](cfg)
    rng = Rng(seed, stream=0x1A1)
    weights, biases = {}, {}
    for s in layers:
        bound = np.sqrt(6.0 / s.fan_in)
        w = rng.uniform(s.weight_shape, -bound, bound).astype(np.float32)
        weights[s.name] = Tensor(w, requires_grad=True)
        biases[s.name] = Tensor(np.zeros(s.out_features, np.float32), requires_grad=True)
    return Model(cfg, layers, residual, weights, biases, seed)


def manifest_param_count(layers: Sequence[LayerSpec]) -> int:
    """Weights plus biases, from the manifest alone."""
    return int(sum(s.param_count + s.out_features for s in layers))


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def _quant_operand(t: Tensor, bits: int, is_act: bool, rounding: bool, act_mode: str) -> Tensor:
    if bits >= FULL_BITS or bits == PRUNE_BITS:
        # 32 bits is the float32 master itself; 0 only reaches here in exact mode
        return t
    if is_act and act_mode == ACT_UNSIGNED:
        p = calibrate(t, bits, AFFINE, include_zero=True)
    else:
        p = calibrate(t, bits, SYMMETRIC)
    return fake_quant(t, p, rounding=rounding)


def _operand(t: Tensor, decision, is_act: bool, rounding: bool, act_mode: str) -> Tensor:
    if isinstance(decision, SoftDecision):
        acc = None
        for k, b in enumerate(decision.bits):
            if b == PRUNE_BITS and rounding:
                continue
            term = T.mul(_quant_operand(t, b, is_act, rounding, act_mode), T.take(decision.probs, k))
            acc = term if acc is None else T.add(acc, term)
        return acc if acc is not None else T.zeros(t.shape, dtype=t.dtype)
    return _quant_operand(t, int(decision), is_act, rounding, act_mode)


def _bias_only(spec: LayerSpec, x: Tensor, b: Tensor) -> Tensor:
    n = x.shape[0]
    if spec.kind == "conv":
        ho = (x.shape[2] + 2 * spec.pad - spec.kernel) // spec.stride + 1
        wo = (x.shape[3] + 2 * spec.pad - spec.kernel) // spec.stride + 1
        out = np.broadcast_to(b.data[None, :, None, None], (n, spec.out_features, ho, wo)).copy()
        return T.custom_op(out, (b,), lambda g: (g.sum(axis=(0, 2, 3)),))
    out = np.broadcast_to(b.data[None, :], (n, spec.out_features)).copy()
    return T.custom_op(out, (b,), lambda g: (g.sum(axis=0),))


def apply_layer(spec: LayerSpec, x: Tensor, w: Tensor, b: Tensor, decision=None,
                rounding: bool = True, act_mode: str = ACT_UNSIGNED) -> Tensor:
    if decision is not None and not isinstance(decision, SoftDecision) and int(decision) == PRUNE_BITS:
        if not rounding:
            # exact mode removes every precision reduction, pruning included
            decision = None
        else:
            return _bias_only(spec, x, b)
    if decision is not None:
        x = _operand(x, decision, True, rounding, act_mode)
        w = _operand(w, decision, False, rounding, act_mode)
    if spec.kind == "conv":
        return T.conv2d(x, w, b, spec.stride, spec.pad)
    return T.linear(x, w, b)


def forward(model: Model, x, decide: Optional[Callable] = None, weights: Optional[dict] = None,
            rounding: bool = True, act_mode: str = ACT_UNSIGNED, biases: Optional[dict] = None) -> Tensor:
    """Logits of ``model`` on images ``x[N, C, H, W]``.

    ``weights``/``biases`` optionally override the masters by layer name (used
    for evaluations at perturbed parameters); masters are never written.
    """
    x = T.as_tensor(x)
    shift = model.config.get("input_shift", 0.0)
    if shift:
        x = T.add(x, -float(shift))
    scale = model.config.get("input_scale", 1.0)
    if scale != 1.0:
        x = T.mul(x, float(scale))
    W = model.weights if weights is None else {**model.weights, **weights}
    B = model.biases if biases is None else {**model.biases, **biases}
    qidx = {s.name: i for i, s in enumerate(model.quantizable)}

    def layer(spec, h):
        d = decide(qidx[spec.name], spec, h) if (decide is not None and spec.name in qidx) else None
        return apply_layer(spec, h, W[spec.name], B[spec.name], d, rounding, act_mode)

    convs = [s for s in model.layers if s.kind == "conv"]
    fc = [s for s in model.layers if s.kind == "fc"]
    h = x
    if model.residual:
        for a_spec, b_spec in zip(convs[0::2], convs[1::2]):
            a = T.relu(layer(a_spec, h))
            # identity shortcut around the block when shapes allow, else around conv_b
            skip = h if (a_spec.stride == 1 and a_spec.in_features == a_spec.out_features) else a
            h = T.relu(T.add(layer(b_spec, a), skip))
    else:
        for spec in convs:
            h = T.relu(layer(spec, h))
    h = T.mean(h, axis=(2, 3))
    for spec in fc:
        h = layer(spec, h)
    return h


def check_actions(model: Model, actions, pools=None) -> list:
    actions = [int(a) for a in actions]
    n = len(model.quantizable)
    if len(actions) != n:
        raise ContractError(f"expected {n} actions, got {len(actions)}")
    for i, a in enumerate(actions):
        allowed = ALL_BITS if pools is None else tuple(pools[i])
        if a not in allowed:
            raise ContractError(f"action {a} for layer {model.quantizable[i].name} not in pool {allowed}")
    return actions


def forward_quantized(model: Model, x, actions, pools=None, rounding: bool = True,
                      act_mode: str = ACT_UNSIGNED, weights: Optional[dict] = None) -> Tensor:
    actions = check_actions(model, actions, pools)
    return forward(model, x, lambda i, spec, h: actions[i], weights=weights,
                   rounding=rounding, act_mode=act_mode)


def quantized_weights(model: Model, actions) -> dict:
    """Fake-quantized copies of the masters at ``actions`` (pruned -> zeros)."""
    actions = check_actions(model, actions)
    out = {}
    for spec, a in zip(model.quantizable, actions):
        w = model.weights[spec.name]
        if a == PRUNE_BITS:
            out[spec.name] = np.zeros_like(w.data)
        elif a >= FULL_BITS:
            out[spec.name] = w.data.copy()
        else:
            with T.no_grad():
                out[spec.name] = fake_quant(w, calibrate(w, a, SYMMETRIC)).data.copy()
    return out


def predict(model: Model, x, decide=None, batch_size: int = 256, act_mode: str = ACT_UNSIGNED) -> np.ndarray:
    preds = []
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            logits = forward(model, x[i:i + batch_size], decide, act_mode=act_mode)
            preds.append(logits.data.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, np.int64)
