"""The anatomy classification network as a declarative layer list."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .container import ContainerError, read_container, write_container
from .nn import BatchNormState, LayerCache, ShapeError, StaleCacheError

KINDS = ("conv", "pool", "dense", "softmax")


class SpecError(ValueError):
    """A ModelSpec whose layers do not compose."""


class CheckpointShapeError(ContainerError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int = 0
    bn: bool = False
    dropout: float = 0.0

    def token(self) -> str:
        parts = [self.kind if not self.units else f"{self.kind}:{self.units}"]
        if self.bn:
            parts.append("bn")
        if self.dropout:
            parts.append(f"drop{self.dropout:g}")
        return "+".join(parts)

    @classmethod
    def parse(cls, token: str) -> "LayerSpec":
        head, *mods = token.strip().split("+")
        kind, _, units = head.partition(":")
        bn, drop = False, 0.0
        for m in mods:
            if m == "bn":
                bn = True
            elif m.startswith("drop"):
                drop = float(m[4:])
            else:
                raise SpecError(f"unknown layer modifier {m!r} in {token!r}")
        return cls(kind, int(units) if units else 0, bn, drop)


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int] = (1, 128, 128)
    num_classes: int = 24
    leaky_slope: float = 0.01
    bn_momentum: float = 0.9
    bn_epsilon: float = 1e-5
    # scales the He init of the final classifier so the initial softmax is near uniform
    output_gain: float = 0.1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [l.token() for l in self.layers]
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["layers"] = tuple(LayerSpec.parse(t) for t in d["layers"])
        d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)


def default_spec(num_classes: int = 24, input_shape=(1, 128, 128), pool_dropout: float = 0.25,
               dense_dropout: float = 0.5, leaky_slope: float = 0.01) -> ModelSpec:
    """Default 17-row architecture: 10 conv+BN, 4 pools, 2 dense+BN+dropout, softmax."""
    conv = lambda c: LayerSpec("conv", c, bn=True)  # noqa: E731
    pool = LayerSpec("pool")
    layers = (
        conv(32), conv(16), pool,
        conv(64), conv(32), pool,
        conv(128), conv(128), conv(64), pool,
        conv(256), conv(256), conv(128), LayerSpec("pool", dropout=pool_dropout),
        LayerSpec("dense", 256, bn=True, dropout=dense_dropout),
        LayerSpec("dense", 256, bn=True, dropout=dense_dropout),
        LayerSpec("softmax", num_classes),
    )
    return ModelSpec(layers, tuple(input_shape), num_classes, leaky_slope)


def shape_chain(spec: ModelSpec) -> list[tuple[int, ...]]:
    """Per-sample output shape after each layer; raises SpecError on the first bad layer."""
    if not spec.layers:
        raise SpecError("spec has no layers")
    shape: tuple[int, ...] = tuple(spec.input_shape)
    if len(shape) != 3 or min(shape) < 1:
        raise SpecError(f"input_shape must be [channels, H, W], got {shape}")
    out = []
    for i, layer in enumerate(spec.layers):
        where = f"layer {i} ({layer.token()})"
        if layer.kind not in KINDS:
            raise SpecError(f"{where}: unknown kind {layer.kind!r}")
        if not 0.0 <= layer.dropout < 1.0:
            raise SpecError(f"{where}: dropout must be in [0, 1)")
        if layer.kind == "conv":
            if len(shape) != 3:
                raise SpecError(f"{where}: conv after a flattened layer")
            if layer.units < 1:
                raise SpecError(f"{where}: conv needs a positive channel count")
            shape = (layer.units, shape[1], shape[2])
        elif layer.kind == "pool":
            if len(shape) != 3 or shape[1] < 3 or shape[2] < 3:
                raise SpecError(f"{where}: pool needs a spatial input of at least 3x3, got {shape}")
            shape = (shape[0], nn.pool_out(shape[1]), nn.pool_out(shape[2]))
        else:
            if layer.units < 1:
                raise SpecError(f"{where}: {layer.kind} needs a positive unit count")
            shape = (layer.units,)
        if layer.kind == "softmax":
            if i != len(spec.layers) - 1:
                raise SpecError(f"{where}: softmax must be the last layer")
            if layer.units != spec.num_classes:
                raise SpecError(f"{where}: softmax width {layer.units} != num_classes {spec.num_classes}")
        out.append(shape)
    last = spec.layers[-1]
    if last.kind not in ("softmax", "dense") or last.units != spec.num_classes:
        raise SpecError(f"layer {len(spec.layers) - 1}: last layer must be softmax or dense "
                        f"with num_classes = {spec.num_classes} units")
    return out


def _names(i: int, layer: LayerSpec) -> list[str]:
    if layer.kind == "pool":
        return []
    names = [f"{i:02d}.{layer.kind}.w", f"{i:02d}.{layer.kind}.b"]
    if layer.bn:
        names += [f"{i:02d}.bn.gamma", f"{i:02d}.bn.beta"]
    return names


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    bn: dict[int, BatchNormState]
    rng_seed: int = 0
    step: int = 0
    shapes: list = field(default_factory=list)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def flatten_width(self) -> int:
        for layer, prev in zip(self.spec.layers, [self.spec.input_shape] + self.shapes):
            if layer.kind in ("dense", "softmax"):
                return int(np.prod(prev))
        return 0


def build_model(spec: ModelSpec, init_seed: int = 0, dtype=np.float32) -> Model:
    """He-initialised weights, zero biases, BN at gamma=1, beta=0, stats (0, 1)."""
    shapes = shape_chain(spec)
    rng = np.random.default_rng(init_seed)
    alpha = spec.leaky_slope
    params: dict[str, np.ndarray] = {}
    bn: dict[int, BatchNormState] = {}
    prev = tuple(spec.input_shape)
    for i, layer in enumerate(spec.layers):
        if layer.kind == "conv":
            fan_in = prev[0] * 9
            wshape = (layer.units, prev[0], 3, 3)
        elif layer.kind in ("dense", "softmax"):
            fan_in = int(np.prod(prev))
            wshape = (fan_in, layer.units)
        else:
            prev = shapes[i]
            continue
        std = math.sqrt(2.0 / ((1 + alpha ** 2) * fan_in))
        if layer.kind == "softmax":
            std *= spec.output_gain
        w_name, b_name, *bn_names = _names(i, layer)
        params[w_name] = (rng.standard_normal(wshape) * std).astype(dtype)
        params[b_name] = np.zeros(layer.units, dtype=dtype)
        if layer.bn:
            st = BatchNormState.fresh(layer.units, dtype, spec.bn_momentum, spec.bn_epsilon)
            params[bn_names[0]], params[bn_names[1]] = st.gamma, st.beta
            bn[i] = st
        prev = shapes[i]
    return Model(spec, params, bn, rng_seed=init_seed, shapes=shapes)


def _dropout_seed(model: Model, layer_idx: int) -> int:
    return int(np.random.SeedSequence([model.rng_seed, model.step, layer_idx]).generate_state(1)[0])


def forward(model: Model, batch: np.ndarray, mode: str = "infer"):
    """Run the network. Returns ``(logits, caches)``; caches is None in infer mode.

    Train mode updates BN running statistics and advances the dropout stream.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    spec = model.spec
    if batch.ndim != 4 or tuple(batch.shape[1:]) != tuple(spec.input_shape):
        raise ShapeError(f"batch shape {batch.shape} does not match [N, {', '.join(map(str, spec.input_shape))}]")
    train = mode == "train"
    alpha = spec.leaky_slope
    p = model.params
    x = batch.astype(model.dtype, copy=False)
    caches: list[dict] = []
    for i, layer in enumerate(spec.layers):
        c: dict[str, LayerCache] = {}
        if layer.kind == "conv":
            x, c["conv"] = nn.conv2d(x, p[f"{i:02d}.conv.w"], p[f"{i:02d}.conv.b"])
        elif layer.kind == "pool":
            x, c["pool"] = nn.maxpool(x)
        else:
            if x.ndim == 4:
                c["flat"] = x.shape
                x = x.reshape(x.shape[0], -1)
            x, c["dense"] = nn.dense(x, p[f"{i:02d}.{layer.kind}.w"], p[f"{i:02d}.{layer.kind}.b"])
        if layer.bn:
            x, c["bn"] = nn.batchnorm(x, model.bn[i], mode)
        if layer.kind in ("conv", "dense"):
            x, c["act"] = nn.leaky_relu(x, alpha)
        if layer.dropout and train:
            x, c["drop"] = nn.dropout(x, layer.dropout, "train", _dropout_seed(model, i))
        if tuple(x.shape[1:]) != tuple(model.shapes[i]):
            raise AssertionError(f"layer {i} produced {x.shape[1:]}, planned {model.shapes[i]}")
        caches.append(c)
        if not train:
            for v in c.values():
                if isinstance(v, LayerCache):
                    v.take(v.op)
    if train:
        model.step += 1
        return x, caches
    return x, None


def backward(model: Model, grad_logits: np.ndarray, caches) -> dict[str, np.ndarray]:
    """Backpropagate through the caches of the preceding train-mode forward."""
    if caches is None or len(caches) != len(model.spec.layers):
        raise StaleCacheError("backward needs the caches of a train-mode forward")
    grads: dict[str, np.ndarray] = {}
    g = grad_logits
    for i in reversed(range(len(model.spec.layers))):
        layer, c = model.spec.layers[i], caches[i]
        if "drop" in c:
            g = nn.dropout_backward(g, c["drop"])
        if "act" in c:
            g = nn.leaky_relu_backward(g, c["act"])
        if "bn" in c:
            g, grads[f"{i:02d}.bn.gamma"], grads[f"{i:02d}.bn.beta"] = nn.batchnorm_backward(g, c["bn"])
        if layer.kind == "conv":
            g, grads[f"{i:02d}.conv.w"], grads[f"{i:02d}.conv.b"] = nn.conv2d_backward(g, c["conv"])
        elif layer.kind == "pool":
            g = nn.maxpool_backward(g, c["pool"])
        else:
            k = layer.kind
            g, grads[f"{i:02d}.{k}.w"], grads[f"{i:02d}.{k}.b"] = nn.dense_backward(g, c["dense"])
            if "flat" in c:
                g = g.reshape(c["flat"])
    return {k: grads[k] for k in model.params}


def param_count(model: Model) -> int:
    return int(sum(v.size for v in model.params.values()))


def predict_proba(model: Model, batch: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = [nn.softmax(forward(model, batch[s:s + batch_size], "infer")[0])
           for s in range(0, len(batch), batch_size)]
    return np.concatenate(out)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(model: Model, path) -> None:
    tensors = dict(model.params)
    for i, st in model.bn.items():
        tensors[f"{i:02d}.bn.running_mean"] = st.running_mean
        tensors[f"{i:02d}.bn.running_var"] = st.running_var
    meta = {
        "kind": "cnn",
        "spec": model.spec.to_dict(),
        "rng_seed": model.rng_seed,
        "step": model.step,
        "bn_updates": {str(i): st.num_updates for i, st in model.bn.items()},
    }
    write_container(path, tensors, meta)


def load_checkpoint(path, expect_spec: ModelSpec | None = None) -> Model:
    """Load a checkpoint; every tensor is validated against the stored spec."""
    tensors, meta = read_container(path)
    if meta.get("kind") != "cnn":
        raise ContainerError(f"{path}: not a CNN checkpoint (kind={meta.get('kind')!r})")
    spec = ModelSpec.from_dict(meta["spec"])
    if expect_spec is not None and spec != expect_spec:
        raise CheckpointShapeError(f"{path}: checkpoint spec differs from the expected spec")
    template = build_model(spec, 0, dtype=np.float32)
    expected = dict(template.params)
    for i in template.bn:
        expected[f"{i:02d}.bn.running_mean"] = template.bn[i].running_mean
        expected[f"{i:02d}.bn.running_var"] = template.bn[i].running_var
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CheckpointShapeError(f"{path}: tensor set mismatch (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, ref in expected.items():
        if tensors[name].shape != ref.shape:
            raise CheckpointShapeError(
                f"{path}: tensor {name!r} has shape {tensors[name].shape}, spec requires {ref.shape}")
    params = {k: tensors[k] for k in template.params}
    bn = {}
    for i, st in template.bn.items():
        bn[i] = BatchNormState(
            gamma=params[f"{i:02d}.bn.gamma"], beta=params[f"{i:02d}.bn.beta"],
            running_mean=tensors[f"{i:02d}.bn.running_mean"], running_var=tensors[f"{i:02d}.bn.running_var"],
            momentum=spec.bn_momentum, epsilon=spec.bn_epsilon,
            num_updates=int(meta["bn_updates"][str(i)]),
        )
    return Model(spec, params, bn, rng_seed=int(meta["rng_seed"]), step=int(meta["step"]),
                 shapes=template.shapes)


def spec_json(spec: ModelSpec) -> str:
    return json.dumps(spec.to_dict(), sort_keys=True)
