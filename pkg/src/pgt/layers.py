"""Temporal operators and the toy video network built from them.

Arrays follow a ``[T, C, *spatial]`` layout per sequence; models work on a
leading batch axis, ``[B, T, C, *spatial]``.  The standalone operator
functions take a ``time_axis`` argument so they serve both layouts; the
channel axis is always the one right after time.

A temporal layer runs either as a *local* operator (zero padding at both
sequence ends) or, inside a progressive step, as a *Markov* operator: its
first frame reads a carried, gradient-truncated past feature and its last
frame sees a zero future tap.  Interior frames are ordinary convolution and
both positions use the same weight storage.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Parameter
from .errors import ContractError, DomainError, ShapeError

LAYER_TYPES = ("temporal", "pointwise", "spatial", "relu", "norm")


@dataclass(frozen=True)
class OperatorVariant:
    """How a temporal layer behaves across progressive steps.

    ``kind`` is one of ``local``, ``mco``, ``cmco`` or ``pmco``; ``pool``
    applies to CMCO, ``alpha`` to PMCO.
    """

    kind: str = "local"
    pool: str = "avg"
    alpha: float = 0.5

    def __post_init__(self):
        if self.kind not in ("local", "mco", "cmco", "pmco"):
            raise ValueError(f"unknown operator variant {self.kind!r}")
        if self.pool not in ("avg", "max"):
            raise ValueError(f"unknown pooling {self.pool!r}")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("PMCO alpha must lie in [0, 1)")

    @property
    def markov(self) -> bool:
        return self.kind != "local"

    @classmethod
    def parse(cls, token: str) -> "OperatorVariant":
        token = token.strip().lower()
        if token.startswith("pmco"):
            alpha = float(token.split("@", 1)[1]) if "@" in token else 0.5
            return cls("pmco", alpha=alpha)
        if token.startswith("cmco"):
            pool = token.split("-", 1)[1] if "-" in token else "avg"
            return cls("cmco", pool=pool)
        return cls(token)

    def __str__(self):
        if self.kind == "cmco":
            return f"cmco-{self.pool}"
        if self.kind == "pmco":
            return "pmco" if self.alpha == 0.5 else f"pmco@{self.alpha!r}"
        return self.kind


LOCAL = OperatorVariant()


@dataclass
class TemporalConvParams:
    weight: Parameter  # [k, C_in, C_out]
    bias: Parameter  # [C_out]

    def __post_init__(self):
        k = self.weight.value.shape[0]
        if k < 1 or k % 2 == 0:
            raise ValueError(f"temporal kernel size must be odd, got {k}")

    @property
    def kernel_size(self) -> int:
        return self.weight.value.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.value.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.value.shape[2]

    @classmethod
    def from_arrays(cls, weight, bias=None, name="temporal"):
        weight = np.asarray(weight)
        if bias is None:
            bias = np.zeros(weight.shape[2], dtype=weight.dtype)
        return cls(Parameter(weight, f"{name}.weight"), Parameter(np.asarray(bias), f"{name}.bias"))


@dataclass
class LayerState:
    """Boundary features one temporal layer hands to the next progressive step.

    Both arrays are plain numpy values (no graph attached); they enter the
    next step only through :func:`~pgt.autodiff.stop_gradient`.
    """

    carried_boundary: np.ndarray | None = None
    pmco_momentum: np.ndarray | None = None

    def f_past(self, variant: OperatorVariant):
        if variant.kind == "pmco":
            return self.pmco_momentum
        return self.carried_boundary

    @property
    def size(self) -> int:
        return sum(int(a.size) for a in (self.carried_boundary, self.pmco_momentum) if a is not None)


@dataclass
class MarkovState:
    layers: dict[int, LayerState] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return sum(s.size for s in self.layers.values())


# ---------------------------------------------------------------- operators

def _bias_view(bias: Node, n_trailing: int) -> Node:
    if n_trailing == 0:
        return bias
    return ad.reshape(bias, bias.value.shape + (1,) * n_trailing)


def _conv(x: Node, params: TemporalConvParams, past: Node, future: Node, time_axis: int) -> Node:
    """Shift-and-mix convolution of ``x`` padded by ``past`` and ``future``."""
    ch = time_axis + 1
    if x.value.shape[ch] != params.in_channels:
        raise ShapeError(
            f"temporal conv expects {params.in_channels} input channels, got {x.value.shape[ch]}")
    t = x.value.shape[time_axis]
    padded = ad.concat([past, x, future], axis=time_axis)
    index = [slice(None)] * padded.value.ndim
    out = None
    for j in range(params.kernel_size):
        index[time_axis] = slice(j, j + t)
        term = ad.mix(padded[tuple(index)], params.weight[j], axis=ch)
        out = term if out is None else out + term
    return out + _bias_view(params.bias, x.value.ndim - ch - 1)


def _zeros_frames(x: Node, n: int, time_axis: int) -> np.ndarray:
    shape = list(x.value.shape)
    shape[time_axis] = n
    return np.zeros(shape, dtype=x.value.dtype)


def local_temporal_conv(x: Node, params: TemporalConvParams, time_axis: int = 0) -> Node:
    """Temporal convolution with zero padding at both ends; length preserved."""
    r = params.kernel_size // 2
    past = ad.constant(_zeros_frames(x, r, time_axis))
    future = ad.constant(_zeros_frames(x, r, time_axis))
    return _conv(x, params, past, future, time_axis)


def cmco_aggregate(features, mode: str = "avg", axis: int = 0) -> np.ndarray:
    """Pool a step's features over time: the CMCO carried feature."""
    features = np.asarray(features)
    if features.shape[axis] == 0:
        raise DomainError("cannot aggregate an empty progressive step")
    if mode == "avg":
        return features.mean(axis=axis)
    if mode == "max":
        return features.max(axis=axis)
    raise ValueError(f"unknown aggregation mode {mode!r}")


def pmco_update(momentum, step_aggregate, alpha: float) -> np.ndarray:
    """One momentum update ``alpha * m + (1 - alpha) * a``."""
    momentum, step_aggregate = np.asarray(momentum), np.asarray(step_aggregate)
    if not np.issubdtype(momentum.dtype, np.floating):
        momentum = momentum.astype(np.float64)
    if momentum.shape != step_aggregate.shape:
        raise ShapeError(f"momentum {momentum.shape} vs aggregate {step_aggregate.shape}")
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    a = momentum.dtype.type(alpha)
    return a * momentum + (1 - a) * step_aggregate


def next_layer_state(x, state: LayerState, variant: OperatorVariant, time_axis: int = 0) -> LayerState:
    """Carry computed from a step's layer input ``x`` (array) for the next step."""
    x = np.asarray(x)
    if variant.kind == "mco":
        return LayerState(carried_boundary=np.take(x, -1, axis=time_axis).copy())
    if variant.kind == "cmco":
        return LayerState(carried_boundary=cmco_aggregate(x, variant.pool, axis=time_axis))
    if variant.kind == "pmco":
        agg = cmco_aggregate(x, "avg", axis=time_axis)
        if state.pmco_momentum is None:
            m = agg
        else:
            prev = state.pmco_momentum
            m = pmco_update(prev.value if isinstance(prev, Node) else prev, agg, variant.alpha)
        return LayerState(carried_boundary=agg, pmco_momentum=m)
    raise ContractError("local operators carry no state")


def markov_step_conv(x: Node, state: LayerState, params: TemporalConvParams,
                     variant: OperatorVariant, time_axis: int = 0) -> tuple[Node, LayerState]:
    """Temporal convolution of one progressive step.

    The first frame's past tap is the carried feature wrapped in
    ``stop_gradient`` (zeros when ``state`` is empty, i.e. step 1); the last
    frame's future tap is zero.  Returns the output and the state for the
    next step.
    """
    if not variant.markov:
        raise ContractError("markov_step_conv called with a local operator variant")
    if params.kernel_size != 3:
        raise ContractError("Markov boundary handling is defined for kernel size 3 only")
    carried = state.f_past(variant)
    zero = _zeros_frames(x, 1, time_axis)
    if carried is None:
        carried = ad.constant(zero)
    elif isinstance(carried, Node):
        # graph-valued carry: only used to probe truncation
        carried = ad.reshape(carried, zero.shape)
    else:
        carried = np.expand_dims(np.asarray(carried, dtype=x.value.dtype), time_axis)
        if carried.shape != zero.shape:
            raise ShapeError(f"carried feature shape {carried.shape} does not fit step input {zero.shape}")
        carried = ad.constant(carried)
    past = ad.stop_gradient(carried)
    future = ad.constant(zero.copy())
    out = _conv(x, params, past, future, time_axis)
    return out, next_layer_state(x.value, state, variant, time_axis)


def classifier_head(features: Node, weight: Node, bias: Node, time_axis: int = 0) -> Node:
    """Global average pool over time (and space), then an affine map to logits."""
    ch = time_axis + 1
    axes = (time_axis,) + tuple(range(ch + 1, features.value.ndim))
    pooled = ad.mean(features, axis=axes)
    return ad.mix(pooled, weight, axis=-1) + bias


def spatial_conv(x: Node, weight: Node, bias: Node, time_axis: int = 0) -> Node:
    """Per-frame 2-D convolution, ``weight`` is ``[k, k, C_in, C_out]``, zero 'same' padding."""
    ch = time_axis + 1
    h_axis, w_axis = ch + 1, ch + 2
    if x.value.ndim != ch + 3:
        raise ShapeError("spatial conv needs [.., T, C, H, W] input")
    k = weight.value.shape[0]
    r = k // 2
    shape = list(x.value.shape)
    shape[h_axis] = r
    zh = ad.constant(np.zeros(shape, dtype=x.value.dtype))
    xp = ad.concat([zh, x, zh], axis=h_axis)
    shape = list(xp.value.shape)
    shape[w_axis] = r
    zw = ad.constant(np.zeros(shape, dtype=x.value.dtype))
    xp = ad.concat([zw, xp, zw], axis=w_axis)
    hh, ww = x.value.shape[h_axis], x.value.shape[w_axis]
    index = [slice(None)] * xp.value.ndim
    out = None
    for i in range(k):
        for j in range(k):
            index[h_axis] = slice(i, i + hh)
            index[w_axis] = slice(j, j + ww)
            term = ad.mix(xp[tuple(index)], weight[i, j], axis=ch)
            out = term if out is None else out + term
    return out + _bias_view(bias, 2)


def step_norm(x: Node, gamma: Node, beta: Node, time_axis: int = 0, eps: float = 1e-5) -> Node:
    """Per-channel normalization with statistics over the frames of this call only."""
    ch = time_axis + 1
    axes = (time_axis,) + tuple(range(ch + 1, x.value.ndim))
    mu = ad.mean(x, axis=axes, keepdims=True)
    centered = x - mu
    var = ad.mean(centered * centered, axis=axes, keepdims=True)
    inv = ad.power(var + x.value.dtype.type(eps), -0.5)
    n_trailing = x.value.ndim - ch - 1
    return centered * inv * _bias_view(gamma, n_trailing) + _bias_view(beta, n_trailing)


# ---------------------------------------------------------------- model

@dataclass
class LayerSpec:
    type: str
    channels: int = 0
    kernel: int = 3
    variant: OperatorVariant = LOCAL

    def __post_init__(self):
        if self.type not in LAYER_TYPES:
            raise ValueError(f"unknown layer type {self.type!r}")
        if isinstance(self.variant, str):
            self.variant = OperatorVariant.parse(self.variant)

    @classmethod
    def parse(cls, token: str) -> "LayerSpec":
        """``temporal:16:3:pmco``, ``pointwise:16``, ``spatial:8:3``, ``relu``, ``norm``."""
        parts = token.strip().split(":")
        kind = parts[0]
        if kind in ("relu", "norm"):
            if len(parts) != 1:
                raise ValueError(f"layer {token!r} takes no arguments")
            return cls(kind)
        if kind == "pointwise":
            return cls(kind, int(parts[1]), 1)
        if kind == "spatial":
            return cls(kind, int(parts[1]), int(parts[2]) if len(parts) > 2 else 3)
        if kind == "temporal":
            kernel = int(parts[2]) if len(parts) > 2 else 3
            variant = OperatorVariant.parse(parts[3]) if len(parts) > 3 else LOCAL
            return cls(kind, int(parts[1]), kernel, variant)
        raise ValueError(f"unknown layer type {kind!r}")

    def __str__(self):
        if self.type in ("relu", "norm"):
            return self.type
        if self.type == "pointwise":
            return f"pointwise:{self.channels}"
        if self.type == "spatial":
            return f"spatial:{self.channels}:{self.kernel}"
        return f"temporal:{self.channels}:{self.kernel}:{self.variant}"


@dataclass
class ModelSpec:
    in_channels: int
    num_classes: int
    layers: list[LayerSpec]
    spatial: tuple[int, ...] = ()
    dtype: str = "float32"
    init: str = "he"

    def __post_init__(self):
        self.layers = [LayerSpec.parse(l) if isinstance(l, str) else l for l in self.layers]
        self.spatial = tuple(self.spatial)
        if self.init not in ("he", "center"):
            raise ValueError(f"unknown init {self.init!r}")

    def with_variant(self, variant) -> "ModelSpec":
        """Copy with every temporal layer switched to ``variant``."""
        variant = OperatorVariant.parse(variant) if isinstance(variant, str) else variant
        layers = [LayerSpec(l.type, l.channels, l.kernel, variant if l.type == "temporal" else l.variant)
                  for l in self.layers]
        return ModelSpec(self.in_channels, self.num_classes, layers, self.spatial, self.dtype, self.init)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [str(l) for l in self.layers]
        d["spatial"] = list(self.spatial)
        return d

    def digest(self) -> bytes:
        """SHA-256 of the canonical JSON form; independent of key order."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).digest()

    def temporal_receptive_field(self) -> int:
        return 1 + sum(l.kernel - 1 for l in self.layers if l.type == "temporal")


class Model:
    """Stack of per-frame and temporal layers with a pooled linear classifier."""

    def __init__(self, spec: ModelSpec, seed=0):
        self.spec = spec
        self.dtype = np.dtype(spec.dtype)
        rng = np.random.default_rng(seed)
        self.params: dict[str, Parameter] = {}
        self.temporal: dict[int, TemporalConvParams] = {}
        c = spec.in_channels
        for i, layer in enumerate(spec.layers):
            name = f"layers.{i}"
            if layer.type == "temporal":
                k, out = layer.kernel, layer.channels
                w = rng.normal(0.0, np.sqrt(2.0 / (k * c)), size=(k, c, out))
                if spec.init == "center":
                    w *= 0.1
                    w[k // 2] += np.eye(c, out)
                tp = TemporalConvParams(self._add(f"{name}.weight", w), self._add(f"{name}.bias", np.zeros(out)))
                self.temporal[i] = tp
                c = out
            elif layer.type == "pointwise":
                out = layer.channels
                self._add(f"{name}.weight", rng.normal(0.0, np.sqrt(2.0 / c), size=(c, out)))
                self._add(f"{name}.bias", np.zeros(out))
                c = out
            elif layer.type == "spatial":
                if len(spec.spatial) != 2:
                    raise ShapeError("spatial layers need a 2-D spatial input shape")
                k, out = layer.kernel, layer.channels
                self._add(f"{name}.weight", rng.normal(0.0, np.sqrt(2.0 / (k * k * c)), size=(k, k, c, out)))
                self._add(f"{name}.bias", np.zeros(out))
                c = out
            elif layer.type == "norm":
                self._add(f"{name}.gamma", np.ones(c))
                self._add(f"{name}.beta", np.zeros(c))
        self.feature_channels = c
        self._add("head.weight", rng.normal(0.0, np.sqrt(1.0 / c), size=(c, spec.num_classes)))
        self._add("head.bias", np.zeros(spec.num_classes))

    def _add(self, name, value) -> Parameter:
        p = Parameter(np.asarray(value, dtype=self.dtype), name)
        self.params[name] = p
        return p

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def batch(self, sequence) -> tuple[np.ndarray, bool]:
        """Cast to the model dtype and add a batch axis if missing."""
        x = np.asarray(sequence, dtype=self.dtype)
        per_item = 2 + len(self.spec.spatial)
        if x.ndim == per_item:
            return x[None], False
        if x.ndim == per_item + 1:
            return x, True
        raise ShapeError(f"expected {per_item}-D sequence or batch of them, got shape {x.shape}")

    @property
    def markov_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.spec.layers) if l.type == "temporal" and l.variant.markov]

    def initial_state(self) -> MarkovState:
        return MarkovState({i: LayerState() for i in self.markov_layers})

    def features(self, x: Node, state: MarkovState | None = None, time_axis: int = 1):
        """Run the layer stack on ``x``.

        ``state=None`` evaluates every temporal layer as a local operator (the
        integrated / original-long layout).  With a state, temporal layers
        whose variant is Markov run :func:`markov_step_conv` and the updated
        state is returned alongside the features.
        """
        new_state = MarkovState() if state is not None else None
        for i, layer in enumerate(self.spec.layers):
            if layer.type == "temporal":
                tp = self.temporal[i]
                if state is not None and layer.variant.markov:
                    x, ls = markov_step_conv(x, state.layers.get(i, LayerState()), tp, layer.variant, time_axis)
                    new_state.layers[i] = ls
                else:
                    x = local_temporal_conv(x, tp, time_axis)
            else:
                x = self.frame_layer(i, x, time_axis)
        return x, new_state

    def frame_layer(self, i: int, x: Node, time_axis: int = 1) -> Node:
        """Apply non-temporal layer ``i`` (per-frame, or per-call statistics for norm)."""
        layer, name = self.spec.layers[i], f"layers.{i}"
        if layer.type == "pointwise":
            x = ad.mix(x, self.params[f"{name}.weight"], axis=time_axis + 1)
            return x + _bias_view(self.params[f"{name}.bias"], x.value.ndim - time_axis - 2)
        if layer.type == "spatial":
            return spatial_conv(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], time_axis)
        if layer.type == "relu":
            return ad.relu(x)
        if layer.type == "norm":
            return step_norm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"], time_axis)
        raise ContractError(f"layer {i} ({layer.type}) is not a frame layer")

    def head(self, features: Node, time_axis: int = 1) -> Node:
        return classifier_head(features, self.params["head.weight"], self.params["head.bias"], time_axis)

    def logits(self, sequence, state: MarkovState | None = None):
        """Convenience forward: numpy in, (logits Node, new state) out."""
        x, _ = self.batch(sequence)
        feats, new_state = self.features(ad.constant(x), state)
        return self.head(feats), new_state

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]):
        for k, p in self.params.items():
            if k not in arrays:
                raise KeyError(f"missing parameter {k}")
            v = np.asarray(arrays[k])
            if v.shape != p.value.shape:
                raise ShapeError(f"{k}: shape {v.shape} != {p.value.shape}")
            p.value[...] = v
