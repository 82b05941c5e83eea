"""Network assembly from layer descriptors, checkpoints, and head surgery.

A ModelSpec is an ordered list of layer descriptors ending in a fully
connected output head. Checkpoints bundle the spec with a ParamSet,
iteration counter, phase tag, and the training generator state, and
round-trip through a versioned binary file byte-identically.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import nnkernel as nk
from .errors import ValidationError
from .taxonomy import LabelMap

PHASE_TAGS = ("basic", "subordinate", "transfer")


@dataclass(frozen=True)
class Conv:
    name: str
    maps: int
    kh: int
    kw: int
    stride: int = 1
    pad: int = 0
    groups: int = 1


@dataclass(frozen=True)
class MaxPool:
    name: str
    window: int
    stride: int


@dataclass(frozen=True)
class Relu:
    name: str


@dataclass(frozen=True)
class Dropout:
    name: str
    rate: float


@dataclass(frozen=True)
class Fc:
    name: str
    units: int


_KINDS = {Conv: "conv", MaxPool: "maxpool", Relu: "relu",
          Dropout: "dropout", Fc: "fc"}


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, int, int]
    layers: tuple

    @property
    def n_outputs(self) -> int:
        return self.layers[-1].units

    @property
    def head_name(self) -> str:
        return self.layers[-1].name

    def conv_names(self) -> list[str]:
        return [l.name for l in self.layers if isinstance(l, Conv)]

    def with_outputs(self, n_outputs: int) -> "ModelSpec":
        head = replace(self.layers[-1], units=n_outputs)
        return ModelSpec(self.input_shape, self.layers[:-1] + (head,))

    def param_shapes(self) -> dict[str, tuple]:
        """Weight shapes per parameterized layer, via a dry-run shape pass."""
        shapes: dict[str, tuple] = {}
        for layer, shape_in, _ in self.shape_chain():
            if isinstance(layer, Conv):
                c = shape_in[0]
                shapes[layer.name] = (layer.maps, c // layer.groups, layer.kh, layer.kw)
            elif isinstance(layer, Fc):
                shapes[layer.name] = (layer.units, int(np.prod(shape_in)))
        return shapes

    def shape_chain(self) -> list[tuple]:
        """[(layer, shape_in, shape_out), ...]; raises naming the bad layer."""
        if not self.layers or not isinstance(self.layers[-1], Fc):
            raise ValidationError("last layer must be a fc output head")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValidationError("layer names must be unique")
        chain = []
        shape = tuple(self.input_shape)
        for layer in self.layers:
            shape_in = shape
            if isinstance(layer, Conv):
                if len(shape) != 3:
                    raise ValidationError(
                        f"layer {layer.name!r}: conv needs CHW input, got {shape}")
                c, h, w = shape
                if c % layer.groups or layer.maps % layer.groups:
                    raise ValidationError(
                        f"layer {layer.name!r}: channels {c} / maps {layer.maps} "
                        f"not divisible by groups {layer.groups}")
                oh = (h + 2 * layer.pad - layer.kh) // layer.stride + 1
                ow = (w + 2 * layer.pad - layer.kw) // layer.stride + 1
                if oh < 1 or ow < 1:
                    raise ValidationError(
                        f"layer {layer.name!r}: kernel does not fit input {shape}")
                shape = (layer.maps, oh, ow)
            elif isinstance(layer, MaxPool):
                if len(shape) != 3:
                    raise ValidationError(
                        f"layer {layer.name!r}: pool needs CHW input, got {shape}")
                c, h, w = shape
                if layer.window > h or layer.window > w:
                    raise ValidationError(
                        f"layer {layer.name!r}: window {layer.window} exceeds {shape}")
                oh = (h - layer.window) // layer.stride + 1
                ow = (w - layer.window) // layer.stride + 1
                shape = (c, oh, ow)
            elif isinstance(layer, Fc):
                shape = (layer.units,)
            elif isinstance(layer, (Relu, Dropout)):
                pass
            else:
                raise ValidationError(f"unknown layer descriptor {layer!r}")
            chain.append((layer, shape_in, shape))
        return chain

    def to_dict(self) -> dict:
        out = {"input_shape": list(self.input_shape), "layers": []}
        for layer in self.layers:
            d = {"kind": _KINDS[type(layer)]}
            d.update({k: v for k, v in layer.__dict__.items()})
            out["layers"].append(d)
        return out

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        builders = {"conv": Conv, "maxpool": MaxPool, "relu": Relu,
                    "dropout": Dropout, "fc": Fc}
        layers = []
        for ld in d["layers"]:
            ld = dict(ld)
            kind = ld.pop("kind")
            if kind not in builders:
                raise ValidationError(f"unknown layer kind {kind!r}")
            layers.append(builders[kind](**ld))
        return ModelSpec(tuple(d["input_shape"]), tuple(layers))


def desk_spec(n_outputs: int, input_shape=(3, 32, 32)) -> ModelSpec:
    """Default desk-scale classifier: three conv blocks, two fc layers."""
    return ModelSpec(tuple(input_shape), (
        Conv("conv1", 32, 5, 5, stride=1, pad=2),
        Relu("relu1"),
        MaxPool("pool1", 2, 2),
        Conv("conv2", 64, 5, 5, stride=1, pad=2),
        Relu("relu2"),
        MaxPool("pool2", 2, 2),
        Conv("conv3", 64, 3, 3, stride=1, pad=1),
        Relu("relu3"),
        Fc("fc1", 256),
        Dropout("drop1", 0.5),
        Fc("fc2", n_outputs),
    ))


def alexnet_spec(n_outputs: int = 308) -> ModelSpec:
    """Full AlexNet shape (grouped conv2/4/5, 227x227 input)."""
    return ModelSpec((3, 227, 227), (
        Conv("conv1", 96, 11, 11, stride=4, pad=0),
        Relu("relu1"),
        MaxPool("pool1", 3, 2),
        Conv("conv2", 256, 5, 5, stride=1, pad=2, groups=2),
        Relu("relu2"),
        MaxPool("pool2", 3, 2),
        Conv("conv3", 384, 3, 3, stride=1, pad=1),
        Relu("relu3"),
        Conv("conv4", 384, 3, 3, stride=1, pad=1, groups=2),
        Relu("relu4"),
        Conv("conv5", 256, 3, 3, stride=1, pad=1, groups=2),
        Relu("relu5"),
        MaxPool("pool3", 3, 2),
        Fc("fc6", 4096),
        Relu("relu6"),
        Dropout("drop6", 0.5),
        Fc("fc7", 4096),
        Relu("relu7"),
        Dropout("drop7", 0.5),
        Fc("fc8", n_outputs),
    ))


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: nk.ParamSet
    iteration: int = 0
    phase_tag: str = "basic"
    rng_state: dict | None = None

    def copy(self) -> "Checkpoint":
        state = json.loads(json.dumps(self.rng_state)) if self.rng_state else None
        return Checkpoint(self.spec, self.params.copy(), self.iteration,
                          self.phase_tag, state)


def parameter_count(spec: ModelSpec) -> int:
    total = 0
    for name, shape in spec.param_shapes().items():
        total += int(np.prod(shape)) + shape[0]  # weights plus biases
    return total


def build_model(spec: ModelSpec, seed: int, dtype=np.float64,
                phase_tag: str = "basic", init: str = "fixed") -> Checkpoint:
    """Freshly initialized model: Gaussian weights, zero biases, iteration 0.

    ``fixed`` draws every weight at std 0.01 (the reference framework's
    default, suitable at full scale). ``scaled`` draws at sqrt(2/fan_in);
    small desk-scale networks need it, since at their fan-ins the fixed std
    leaves the forward signal orders of magnitude too weak to train.
    """
    if phase_tag not in PHASE_TAGS:
        raise ValidationError(f"unknown phase tag {phase_tag!r}")
    if init not in ("fixed", "scaled"):
        raise ValidationError(f"unknown init scheme {init!r}")
    shapes = spec.param_shapes()  # raises on a broken shape chain
    rng = np.random.default_rng(seed)
    params = nk.ParamSet()
    for layer in spec.layers:
        if layer.name in shapes:
            shape = shapes[layer.name]
            if init == "fixed":
                weight = nk.default_init(shape, rng, dtype)
            else:
                std = np.sqrt(2.0 / np.prod(shape[1:]))
                weight = rng.normal(0.0, std, size=shape).astype(dtype, copy=False)
            params.add(f"{layer.name}.weight", weight)
            params.add(f"{layer.name}.bias", np.zeros(shape[0], dtype=dtype))
    return Checkpoint(spec=spec, params=params, iteration=0, phase_tag=phase_tag)


# ---------------------------------------------------------------------------
# forward / backward over a spec

def forward(spec: ModelSpec, params: nk.ParamSet, x, mode: str = "eval",
            rng: np.random.Generator | None = None, capture: str | None = None):
    """Run the layer chain; returns (logits, caches, captured activation).

    ``caches`` supports :func:`backward`; ``capture`` names a layer whose
    output is returned flattened per sample (None to skip).
    """
    act = x
    caches = []
    captured = None
    for layer in spec.layers:
        if isinstance(layer, Conv):
            act, cache = nk.conv2d_forward(
                act, params[f"{layer.name}.weight"].weight,
                params[f"{layer.name}.bias"].weight,
                layer.stride, layer.pad, layer.groups)
        elif isinstance(layer, MaxPool):
            act, cache = nk.maxpool_forward(act, layer.window, layer.stride)
        elif isinstance(layer, Relu):
            act, cache = nk.relu_forward(act)
        elif isinstance(layer, Dropout):
            act, cache = nk.dropout_forward(act, layer.rate, mode, rng)
        elif isinstance(layer, Fc):
            act, cache = nk.fc_forward(
                act, params[f"{layer.name}.weight"].weight,
                params[f"{layer.name}.bias"].weight)
        caches.append((layer, cache))
        if capture is not None and layer.name == capture:
            captured = act.reshape(act.shape[0], -1).copy()
    if capture is not None and captured is None:
        raise ValidationError(f"no layer named {capture!r}")
    return act, caches, captured


def backward(params: nk.ParamSet, caches, dlogits):
    """Backpropagate through cached layers, assigning parameter gradients."""
    grad = dlogits
    for layer, cache in reversed(caches):
        if isinstance(layer, Conv):
            grad, dw, db = nk.conv2d_backward(grad, cache)
            params[f"{layer.name}.weight"].grad[...] = dw
            params[f"{layer.name}.bias"].grad[...] = db
        elif isinstance(layer, MaxPool):
            grad = nk.pool_backward(grad, cache)
        elif isinstance(layer, Relu):
            grad = nk.relu_backward(grad, cache)
        elif isinstance(layer, Dropout):
            grad = nk.dropout_backward(grad, cache, layer.rate)
        elif isinstance(layer, Fc):
            grad, dw, db = nk.fc_backward(grad, cache)
            params[f"{layer.name}.weight"].grad[...] = dw
            params[f"{layer.name}.bias"].grad[...] = db
    return grad


def forward_eval(ckpt: Checkpoint, batch) -> np.ndarray:
    """Deterministic logits: dropout in eval mode, no generator consumed."""
    expected = (batch.shape[0],) + tuple(ckpt.spec.input_shape)
    if tuple(batch.shape) != expected:
        raise ValidationError(f"batch shape {batch.shape} != {expected}")
    logits, _, _ = forward(ckpt.spec, ckpt.params, batch, mode="eval")
    return logits


# ---------------------------------------------------------------------------
# head surgery

def _advance_phase(tag: str) -> str:
    i = PHASE_TAGS.index(tag)
    return PHASE_TAGS[min(i + 1, len(PHASE_TAGS) - 1)]


def replace_head(ckpt: Checkpoint, n_new_outputs: int, init: str,
                 labelmap: LabelMap | None = None,
                 seed: int | None = None) -> Checkpoint:
    """Swap the output head, copying every other parameter verbatim.

    ``replicate`` copies each subordinate row (weights and bias) from its
    basic category's trained output unit; ``random`` draws a fresh head.
    Momentum buffers of the new head start at zero; the body keeps its
    momentum so continued training picks up where the old phase stopped.
    """
    if init not in ("replicate", "random"):
        raise ValidationError(f"unknown head init {init!r}")
    head = ckpt.spec.layers[-1]
    old_w = ckpt.params[f"{head.name}.weight"].weight
    old_b = ckpt.params[f"{head.name}.bias"].weight

    if init == "replicate":
        if labelmap is None:
            raise ValidationError("replicate init needs a label map")
        if old_w.shape[0] != labelmap.n_basic:
            raise ValidationError(
                f"head width {old_w.shape[0]} != {labelmap.n_basic} basic categories")
        if n_new_outputs != labelmap.n_sub:
            raise ValidationError(
                f"new head width {n_new_outputs} != {labelmap.n_sub} subordinates")
        rows = np.array([labelmap.basic_index(leaf) for leaf in labelmap.sub_names])
        new_w = old_w[rows].copy()
        new_b = old_b[rows].copy()
    else:
        if seed is None:
            raise ValidationError("random init needs a seed")
        rng = np.random.default_rng(seed)
        new_w = nk.default_init((n_new_outputs, old_w.shape[1]), rng, old_w.dtype)
        new_b = np.zeros(n_new_outputs, dtype=old_b.dtype)

    new_spec = ckpt.spec.with_outputs(n_new_outputs)
    params = nk.ParamSet()
    for name in ckpt.params.names():
        if name.startswith(head.name + "."):
            continue
        src = ckpt.params[name]
        params.add(name, src.weight.copy(), src.lr_mult)
        params[name].momentum[...] = src.momentum
    params.add(f"{head.name}.weight", new_w)
    params.add(f"{head.name}.bias", new_b)
    return Checkpoint(spec=new_spec, params=params, iteration=0,
                      phase_tag=_advance_phase(ckpt.phase_tag))


def set_layer_lr_mults(ckpt: Checkpoint, prefix_count: int, mult: float) -> Checkpoint:
    """First ``prefix_count`` conv layers learn at ``mult``; all else at 1.0."""
    conv_names = ckpt.spec.conv_names()
    if prefix_count > len(conv_names):
        raise ValidationError(
            f"prefix_count {prefix_count} exceeds {len(conv_names)} conv layers")
    lowered = set(conv_names[:prefix_count])
    out = ckpt.copy()
    for name in out.params.names():
        layer_name = name.rsplit(".", 1)[0]
        out.params[name].lr_mult = mult if layer_name in lowered else 1.0
    return out


# ---------------------------------------------------------------------------
# checkpoint files

_CKPT_MAGIC = b"HCCK"
_CKPT_VERSION = 1


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    manifest = {
        "version": _CKPT_VERSION,
        "spec": ckpt.spec.to_dict(),
        "iteration": ckpt.iteration,
        "phase_tag": ckpt.phase_tag,
        "rng_state": ckpt.rng_state,
        "entries": [{"name": n, "lr_mult": ckpt.params[n].lr_mult}
                    for n in ckpt.params.names()],
    }
    blob = bytearray()
    for name in ckpt.params.names():
        e = ckpt.params[name]
        blob += nk.tensor_to_bytes(e.weight)
        blob += nk.tensor_to_bytes(e.momentum)
    payload = _canonical_json(manifest)
    return (_CKPT_MAGIC + struct.pack("<IQ", _CKPT_VERSION, len(payload))
            + payload + bytes(blob))


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    if buf[:4] != _CKPT_MAGIC:
        raise ValidationError("bad checkpoint magic")
    version, length = struct.unpack_from("<IQ", buf, 4)
    if version != _CKPT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {version}")
    manifest = json.loads(buf[16:16 + length].decode("utf-8"))
    spec = ModelSpec.from_dict(manifest["spec"])
    params = nk.ParamSet()
    offset = 16 + length
    for entry in manifest["entries"]:
        weight, used = nk.tensor_from_bytes(buf, offset)
        offset += used
        momentum, used = nk.tensor_from_bytes(buf, offset)
        offset += used
        params.add(entry["name"], weight, entry["lr_mult"])
        params[entry["name"]].momentum[...] = momentum
    return Checkpoint(spec=spec, params=params,
                      iteration=manifest["iteration"],
                      phase_tag=manifest["phase_tag"],
                      rng_state=manifest["rng_state"])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


def body_hash(ckpt: Checkpoint) -> str:
    """SHA-256 over all non-head weight bytes; detects backbone mutation."""
    head = ckpt.spec.head_name
    digest = hashlib.sha256()
    for name in ckpt.params.names():
        if not name.startswith(head + "."):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(ckpt.params[name].weight).tobytes())
    return digest.hexdigest()
