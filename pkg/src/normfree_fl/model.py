"""Six-layer CNN in bn / gn / ln / wsconv / plain variants over a role-tagged parameter map.

Layout at width 1 and a 3x28x28 input::

    conv(3->64, k5 s1 p2) norm relu maxpool(2,2)
    conv(64->64, k5 s1 p2) norm relu maxpool(2,2)
    conv(64->128, k5 s1 p2) norm relu
    dropout fc(6272->2048) relu
    dropout fc(2048->512) relu
    fc(512->classes)

``wsconv`` drops the norms and standardizes the conv kernels with a learnable
per-channel gain; ``plain`` drops the norms and keeps ordinary convolutions
(used for the ablation).
"""

from __future__ import annotations

import base64
import enum
import itertools
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Optional, Union

import numpy as np

from . import layers as L
from .errors import CheckpointError, DegenerateBatch, InvalidSpec, ShapeMismatch, StaleCache
from .tensor_core import DTYPE, RngStream, check_finite

VARIANTS = ("bn", "gn", "ln", "wsconv", "plain")
CONV_CHANNELS = (64, 64, 128)
FC_UNITS = (2048, 512)
GN_GROUPS = (32, 32, 64)
KERNEL, STRIDE, PADDING = 5, 1, 2


class ParamRole(str, enum.Enum):
    ConvWeight = "ConvWeight"
    ConvBias = "ConvBias"
    WSGain = "WSGain"
    NormGamma = "NormGamma"
    NormBeta = "NormBeta"
    NormRunningStat = "NormRunningStat"
    FCWeight = "FCWeight"
    FCBias = "FCBias"


NORM_ROLES = frozenset({ParamRole.NormGamma, ParamRole.NormBeta, ParamRole.NormRunningStat})


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple = (3, 28, 28)
    num_classes: int = 10
    width_scale: Fraction = Fraction(1)
    dropout_rate: float = 0.5
    variant: str = "bn"

    def __post_init__(self):
        object.__setattr__(self, "width_scale", Fraction(self.width_scale))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.variant not in VARIANTS:
            raise InvalidSpec(f"unknown variant {self.variant!r}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise InvalidSpec(f"input shape must be (C, H, W), got {self.input_shape}")
        if self.num_classes < 2:
            raise InvalidSpec("need at least two classes")
        if self.width_scale <= 0:
            raise InvalidSpec("width_scale must be positive")
        for n in CONV_CHANNELS + FC_UNITS:
            if (n * self.width_scale).denominator != 1:
                raise InvalidSpec(f"width_scale {self.width_scale} gives a non-integral width for {n}")
        _, h, w = self.input_shape
        if h % 4 or w % 4:
            raise InvalidSpec("input height and width must be divisible by 4 (two 2x2 pools)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidSpec("dropout_rate must lie in [0, 1)")

    @property
    def conv_channels(self) -> tuple[int, int, int]:
        return tuple(int(n * self.width_scale) for n in CONV_CHANNELS)

    @property
    def fc_units(self) -> tuple[int, int]:
        return tuple(int(n * self.width_scale) for n in FC_UNITS)

    @property
    def gn_groups(self) -> tuple[int, int, int]:
        return tuple(min(g, c) for g, c in zip(GN_GROUPS, self.conv_channels))

    @property
    def flat_features(self) -> int:
        _, h, w = self.input_shape
        return self.conv_channels[2] * (h // 4) * (w // 4)

    @property
    def arch_id(self) -> str:
        c, h, w = self.input_shape
        return f"cnn6-w{self.width_scale}-{c}x{h}x{w}-k{self.num_classes}"

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "width_scale": str(self.width_scale),
            "dropout_rate": self.dropout_rate,
            "variant": self.variant,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        return cls(tuple(d["input_shape"]), int(d["num_classes"]), Fraction(d["width_scale"]),
                   float(d["dropout_rate"]), d["variant"])


_tokens = itertools.count(1)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=DTYPE, copy=True, order="C")
    a.flags.writeable = False
    return a


def _share_or_freeze(v) -> np.ndarray:
    # read-only float64 arrays are already owned by some ModelState and can be shared
    if isinstance(v, np.ndarray) and v.dtype == DTYPE and not v.flags.writeable:
        return v
    return _frozen(v)


class ModelState:
    """Ordered ``name -> (role, array)`` map plus the spec it was built from.

    Instances are treated as immutable values: arrays are read-only and every
    update goes through :meth:`replace`, which returns a new state.
    """

    __slots__ = ("entries", "spec", "lineage", "token")

    def __init__(self, entries: Mapping[str, tuple], spec: ModelSpec, lineage: Optional[dict] = None):
        self.entries = {k: (ParamRole(r), _share_or_freeze(v)) for k, (r, v) in entries.items()}
        self.spec = spec
        self.lineage = lineage or {}
        self.token = next(_tokens)

    @property
    def arch_id(self) -> str:
        return self.spec.arch_id

    @property
    def variant(self) -> str:
        return self.spec.variant

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name][1]

    def role(self, name: str) -> ParamRole:
        return self.entries[name][0]

    def keys(self):
        return self.entries.keys()

    def keys_with_roles(self, roles) -> list[str]:
        return [k for k, (r, _) in self.entries.items() if r in roles]

    def trainable_keys(self) -> list[str]:
        return [k for k, (r, _) in self.entries.items() if r is not ParamRole.NormRunningStat]

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ModelState":
        entries = dict(self.entries)
        for k, v in updates.items():
            role, old = entries[k]
            if np.shape(v) != old.shape:
                raise ShapeMismatch(f"{k}: new shape {np.shape(v)} != {old.shape}")
            entries[k] = (role, v)
        return ModelState(entries, self.spec, self.lineage)

    def num_trainable(self) -> int:
        return sum(self[k].size for k in self.trainable_keys())

    def equal(self, other: "ModelState") -> bool:
        """Bitwise equality of keys, roles and values."""
        if list(self.entries) != list(other.entries) or self.spec != other.spec:
            return False
        return all(
            self.role(k) == other.role(k) and np.array_equal(self[k], other[k]) for k in self.entries
        )


GradientMap = dict


# -- construction ------------------------------------------------------------


def build_cnn6(spec: ModelSpec, stream: RngStream) -> ModelState:
    """Initialise a model: Xavier-normal conv/FC weights, zero biases, unit gains and norm scales."""
    if not isinstance(spec, ModelSpec):
        raise InvalidSpec("build_cnn6 expects a ModelSpec")
    entries: dict[str, tuple] = {}
    in_ch = spec.input_shape[0]
    for i, out_ch in enumerate(spec.conv_channels, start=1):
        fan_in = in_ch * KERNEL * KERNEL
        fan_out = out_ch * KERNEL * KERNEL
        w = L.xavier_normal((out_ch, in_ch, KERNEL, KERNEL), fan_in, fan_out, stream.split(f"conv{i}.weight"))
        entries[f"conv{i}.weight"] = (ParamRole.ConvWeight, w)
        entries[f"conv{i}.bias"] = (ParamRole.ConvBias, np.zeros(out_ch))
        if spec.variant == "wsconv":
            entries[f"conv{i}.gain"] = (ParamRole.WSGain, np.ones(out_ch))
        if spec.variant in ("bn", "gn", "ln"):
            entries[f"norm{i}.gamma"] = (ParamRole.NormGamma, np.ones(out_ch))
            entries[f"norm{i}.beta"] = (ParamRole.NormBeta, np.zeros(out_ch))
        if spec.variant == "bn":
            entries[f"norm{i}.running_mean"] = (ParamRole.NormRunningStat, np.zeros(out_ch))
            entries[f"norm{i}.running_var"] = (ParamRole.NormRunningStat, np.ones(out_ch))
        in_ch = out_ch
    dims = (spec.flat_features,) + spec.fc_units + (spec.num_classes,)
    for i in range(3):
        fin, fout = dims[i], dims[i + 1]
        w = L.xavier_normal((fout, fin), fin, fout, stream.split(f"fc{i + 1}.weight"))
        entries[f"fc{i + 1}.weight"] = (ParamRole.FCWeight, w)
        entries[f"fc{i + 1}.bias"] = (ParamRole.FCBias, np.zeros(fout))
    return ModelState(entries, spec, lineage=stream.lineage())


def parameter_count(spec: ModelSpec) -> dict[str, int]:
    """Closed-form trainable and buffer counts for a spec."""
    c0 = spec.input_shape[0]
    ch = spec.conv_channels
    conv = 0
    extra = 0
    buffers = 0
    prev = c0
    for c in ch:
        conv += c * prev * KERNEL * KERNEL + c
        if spec.variant == "wsconv":
            extra += c
        elif spec.variant in ("bn", "gn", "ln"):
            extra += 2 * c
        if spec.variant == "bn":
            buffers += 2 * c
        prev = c
    dims = (spec.flat_features,) + spec.fc_units + (spec.num_classes,)
    fc = sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(3))
    return {"trainable": conv + extra + fc, "buffers": buffers}


# -- forward / backward ------------------------------------------------------


@dataclass
class ForwardCache:
    token: int
    mode: str
    norm_stats: str
    layers: list = field(default_factory=list)
    grad_logits: Optional[np.ndarray] = None
    new_buffers: dict = field(default_factory=dict)


def _conv_params(model: ModelState, i: int) -> L.ConvParams:
    gain = model[f"conv{i}.gain"] if model.variant == "wsconv" else None
    return L.ConvParams(model[f"conv{i}.weight"], model[f"conv{i}.bias"], STRIDE, PADDING, gain)


def _norm(model: ModelState, i: int, x: np.ndarray, mode: str, norm_stats: str, cache: ForwardCache):
    spec = model.spec
    if spec.variant == "bn":
        p = L.NormParams("batch", model[f"norm{i}.gamma"], model[f"norm{i}.beta"],
                         running_mean=model[f"norm{i}.running_mean"],
                         running_var=model[f"norm{i}.running_var"])
        bn_mode = "train" if (mode == "train" and norm_stats == "batch") else "eval"
        y, nc = L.batchnorm_forward(x, p, bn_mode)
        if bn_mode == "train":
            cache.new_buffers[f"norm{i}.running_mean"] = nc.running_mean
            cache.new_buffers[f"norm{i}.running_var"] = nc.running_var
        return y, nc
    groups = spec.gn_groups[i - 1] if spec.variant == "gn" else 1
    p = L.NormParams("group", model[f"norm{i}.gamma"], model[f"norm{i}.beta"], groups=groups)
    return L.groupnorm_forward(x, p)


def forward(model: ModelState, x: np.ndarray, mode: str = "eval", stream: Optional[RngStream] = None,
            norm_stats: str = "batch") -> tuple[np.ndarray, ForwardCache]:
    """Logits and a cache for :func:`backward`.

    ``norm_stats="frozen"`` makes batch norm normalise with its running
    statistics during training (no statistics update, affine still trained).
    """
    spec = model.spec
    if x.ndim != 4 or x.shape[1:] != spec.input_shape:
        raise ShapeMismatch(f"input {x.shape} does not match model input {spec.input_shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "train" and spec.dropout_rate > 0 and stream is None:
        raise ValueError("train mode with dropout needs a random stream")
    if spec.variant == "bn" and mode == "train" and norm_stats == "batch" and x.shape[0] < 2:
        # per-channel statistics of a single image are not batch statistics; the bn
        # variant is declared unusable at batch size 1 rather than silently degraded
        raise DegenerateBatch("batch-norm model cannot train on a batch of one sample")
    cache = ForwardCache(model.token, mode, norm_stats)
    h = x
    ws = spec.variant == "wsconv"
    normed = spec.variant in ("bn", "gn", "ln")
    for i in (1, 2, 3):
        p = _conv_params(model, i)
        w_eff = L.ws_standardize(p) if ws else p.weight
        conv_in = h
        h, cols = L.conv_forward_cols(h, w_eff, p.bias, p.stride, p.padding)
        nc = None
        if normed:
            h, nc = _norm(model, i, h, mode, norm_stats, cache)
        pre_relu = h
        h = L.relu_forward(h)
        pc = None
        if i < 3:
            h, pc = L.maxpool2d_forward(h, 2, 2)
        cache.layers.append(("conv", i, conv_in.shape, cols, w_eff, nc, pre_relu, pc))
    b = h.shape[0]
    h = h.reshape(b, -1)
    for i in (1, 2, 3):
        mask = None
        if i < 3:
            h, mask = L.dropout(h, spec.dropout_rate, stream.split(f"dropout{i}") if stream else None, mode)
        fc_in = h
        h = L.linear_forward(h, model[f"fc{i}.weight"], model[f"fc{i}.bias"])
        pre_relu = h
        if i < 3:
            h = L.relu_forward(h)
        cache.layers.append(("fc", i, fc_in, mask, pre_relu))
    return check_finite(h, "logits"), cache


def forward_loss(model: ModelState, batch, mode: str = "train", stream: Optional[RngStream] = None,
                 norm_stats: str = "batch"):
    """Mean cross-entropy on ``batch = (x, labels)``; returns ``(loss, logits, cache)``."""
    x, labels = batch
    logits, cache = forward(model, x, mode, stream, norm_stats)
    loss, grad = L.softmax_cross_entropy(logits, labels)
    cache.grad_logits = grad
    return loss, logits, cache


def backward(model: ModelState, cache: ForwardCache,
             grad_seed: Union[float, np.ndarray] = 1.0) -> GradientMap:
    """Gradients for every trainable entry.

    ``grad_seed`` is either an array (the upstream gradient w.r.t. the logits)
    or a scalar multiplying the loss gradient stored by :func:`forward_loss`.
    """
    if cache.token != model.token:
        raise StaleCache("cache was produced by a different model state")
    if np.ndim(grad_seed) == 0:
        if cache.grad_logits is None:
            raise StaleCache("scalar grad_seed needs a cache from forward_loss")
        g = cache.grad_logits * float(grad_seed)
    else:
        g = np.asarray(grad_seed, dtype=DTYPE)
    spec = model.spec
    grads: GradientMap = {}
    conv_layers = [c for c in cache.layers if c[0] == "conv"]
    fc_layers = [c for c in cache.layers if c[0] == "fc"]
    for _, i, fc_in, mask, pre_relu in reversed(fc_layers):
        if i < 3:
            g = L.relu_backward(pre_relu, g)
        gx, gw, gb = L.linear_backward(fc_in, model[f"fc{i}.weight"], g)
        grads[f"fc{i}.weight"] = gw
        grads[f"fc{i}.bias"] = gb
        g = gx * mask if mask is not None else gx
    c3 = spec.conv_channels[2]
    _, h, w = spec.input_shape
    g = g.reshape(g.shape[0], c3, h // 4, w // 4)
    for _, i, in_shape, cols, w_eff, nc, pre_relu, pc in reversed(conv_layers):
        if pc is not None:
            g = L.maxpool2d_backward(pc, g)
        g = L.relu_backward(pre_relu, g)
        if nc is not None:
            g, gg, gbeta = L.norm_backward(nc.kind, nc, g)
            grads[f"norm{i}.gamma"] = gg
            grads[f"norm{i}.beta"] = gbeta
        gx, gw_eff, gb = L.conv_backward_cols(in_shape, cols, w_eff, STRIDE, PADDING, g,
                                               need_input_grad=i > 1)
        if spec.variant == "wsconv":
            gw, ggain = L.ws_standardize_backward(_conv_params(model, i), gw_eff)
            grads[f"conv{i}.gain"] = ggain
        else:
            gw = gw_eff
        grads[f"conv{i}.weight"] = gw
        grads[f"conv{i}.bias"] = gb
        g = gx
    return {k: grads[k] for k in model.trainable_keys()}


def predict(model: ModelState, x: np.ndarray, chunk: int = 128) -> np.ndarray:
    """Eval-mode class predictions, computed in chunks to bound memory."""
    out = []
    for s in range(0, x.shape[0], chunk):
        logits, _ = forward(model, x[s : s + chunk], "eval")
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(model: ModelState, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return 0.0
    return float(np.mean(predict(model, x) == y))


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_FORMAT = "normfree-fl-checkpoint/1"


def to_checkpoint(model: ModelState, extra: Optional[dict] = None) -> str:
    """Self-describing JSON document; payloads are base64 of little-endian float64."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "arch_id": model.arch_id,
        "variant": model.variant,
        "spec": model.spec.to_dict(),
        "lineage": model.lineage,
        "entries": [
            {
                "name": k,
                "role": r.value,
                "shape": list(v.shape),
                "dtype": "<f8",
                "data": base64.b64encode(v.astype("<f8").tobytes()).decode("ascii"),
            }
            for k, (r, v) in model.entries.items()
        ],
    }
    if extra:
        doc["extra"] = extra
    return json.dumps(doc, indent=1, sort_keys=True)


def from_checkpoint(text: str) -> ModelState:
    try:
        doc = json.loads(text)
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"unsupported checkpoint format {doc.get('format')!r}")
        spec = ModelSpec.from_dict(doc["spec"])
        entries = {}
        for e in doc["entries"]:
            raw = base64.b64decode(e["data"])
            arr = np.frombuffer(raw, dtype="<f8").astype(DTYPE).reshape(e["shape"])
            entries[e["name"]] = (ParamRole(e["role"]), arr)
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    model = ModelState(entries, spec, doc.get("lineage"))
    if model.arch_id != doc["arch_id"] or model.variant != doc["variant"]:
        raise CheckpointError("checkpoint header disagrees with its spec")
    return model
