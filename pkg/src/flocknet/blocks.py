"""Five convolutional block families and a toy model builder.

Each block is a callable object holding named :class:`~flocknet.tensor.Parameter`
instances; calling it with an NHWC tensor runs the forward pass and records
the gradient tape. ``build_toy_model`` assembles stem -> blocks -> global
average pool -> fully connected -> softmax into a :class:`ModelGraph` that can
be trained, checkpointed, and fingerprinted.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DTYPE, Parameter, Tensor

log = logging.getLogger(__name__)

KINDS = (
    "xception_sep",
    "mobilenet_inverted_residual",
    "resnetv2_preact",
    "densenet_dense",
    "inception_resnet_hybrid",
)

CHECKPOINT_MAGIC = b"EFCK"
CHECKPOINT_VERSION = 1


@dataclass
class BlockSpec:
    """Configuration for one block.

    ``channels_out`` may be left None: it defaults to ``channels_in`` for
    every kind except ``densenet_dense``, where it is always derived as
    ``channels_in + layer_count * growth_rate``. ``residual`` is a tri-state:
    None picks the kind's own rule, True/False force it where the kind
    supports a choice. ``residual_scale`` admits 0 as a degenerate value so
    the scaled-residual identity can be probed directly; training configs
    should keep it positive.
    """

    kind: str
    channels_in: int
    channels_out: int | None = None
    stride: int = 1
    expansion_factor: float | None = None
    growth_rate: int | None = None
    layer_count: int | None = None
    residual_scale: float | None = None
    residual: bool | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}; expected one of {KINDS}")
        if self.channels_in < 1:
            raise ValueError("channels_in must be a positive int")
        if self.channels_out is not None and self.channels_out < 1:
            raise ValueError("channels_out must be a positive int")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")

        if self.kind == "mobilenet_inverted_residual":
            if self.expansion_factor is None or self.expansion_factor <= 0:
                raise ValueError("mobilenet_inverted_residual requires a positive expansion_factor")
        elif self.expansion_factor is not None:
            raise ValueError(f"expansion_factor is not a {self.kind} field")

        if self.kind == "densenet_dense":
            if not self.growth_rate or self.growth_rate < 1:
                raise ValueError("densenet_dense requires growth_rate >= 1")
            if not self.layer_count or self.layer_count < 1:
                raise ValueError("densenet_dense requires layer_count >= 1")
            if self.stride != 1:
                raise ValueError("densenet_dense blocks are stride-1; downsample with a transition")
            derived = self.channels_in + self.layer_count * self.growth_rate
            if self.channels_out is not None and self.channels_out != derived:
                raise ValueError(
                    f"densenet_dense channels_out must be {derived} "
                    f"(channels_in + layer_count*growth_rate), got {self.channels_out}")
        elif self.growth_rate is not None or self.layer_count is not None:
            raise ValueError(f"growth_rate/layer_count are not {self.kind} fields")

        if self.kind == "inception_resnet_hybrid":
            if self.residual_scale is None:
                self.residual_scale = 0.2
            if not 0.0 <= self.residual_scale <= 1.0:
                raise ValueError(f"residual_scale must lie in [0, 1], got {self.residual_scale}")
            if self.stride != 1:
                raise ValueError("inception_resnet_hybrid modules are stride-1")
        elif self.residual_scale is not None:
            raise ValueError(f"residual_scale is not a {self.kind} field")

        if self.residual is not None and self.kind not in (
                "xception_sep", "mobilenet_inverted_residual"):
            raise ValueError(f"the residual flag is not configurable for {self.kind}")
        if self.residual and self.stride == 2 and self.kind == "mobilenet_inverted_residual":
            raise ValueError("residual requested on a stride-2 inverted residual block")
        if (self.residual and self.kind == "mobilenet_inverted_residual"
                and self.channels_out not in (None, self.channels_in)):
            raise ValueError("inverted residual add requires channels_in == channels_out")

    def out_channels(self) -> int:
        if self.kind == "densenet_dense":
            return self.channels_in + self.layer_count * self.growth_rate
        return self.channels_out if self.channels_out is not None else self.channels_in


# ---------------------------------------------------------------------------
# primitive layers

def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / max(fan_in, 1))


class Conv2D:
    def __init__(self, name: str, kh: int, kw: int, cin: int, cout: int,
                 stride: int, padding: str, rng: np.random.Generator):
        self.stride, self.padding = stride, padding
        self.kernel = Parameter(f"{name}/kernel", _he(rng, (kh, kw, cin, cout), kh * kw * cin))

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return T.conv2d(x, self.kernel.value, stride=self.stride, padding=self.padding)

    def parameters(self):
        return [self.kernel]


class DepthwiseConv2D:
    def __init__(self, name: str, k: int, channels: int, stride: int,
                 padding: str, rng: np.random.Generator):
        self.stride, self.padding = stride, padding
        self.kernel = Parameter(f"{name}/kernel", _he(rng, (k, k, channels), k * k))

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return T.depthwise_conv2d(x, self.kernel.value, stride=self.stride, padding=self.padding)

    def parameters(self):
        return [self.kernel]


class PointwiseConv2D:
    def __init__(self, name: str, cin: int, cout: int, rng: np.random.Generator):
        self.kernel = Parameter(f"{name}/kernel", _he(rng, (cin, cout), cin))

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return T.pointwise_conv2d(x, self.kernel.value)

    def parameters(self):
        return [self.kernel]


class BatchNorm2D:
    """Channel-wise normalization with learned affine and tracked statistics.

    Running mean/variance live in non-trainable parameters so checkpoints
    carry them; they update only on train-mode calls.
    """

    def __init__(self, name: str, channels: int, eps: float = 1e-3, momentum: float = 0.99):
        self.eps, self.momentum = eps, momentum
        self.gamma = Parameter(f"{name}/gamma", np.ones(channels))
        self.beta = Parameter(f"{name}/beta", np.zeros(channels))
        self.running_mean = Parameter(f"{name}/running_mean", np.zeros(channels), trainable=False)
        self.running_var = Parameter(f"{name}/running_var", np.ones(channels), trainable=False)

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        out, rm, rv = T.batch_norm(
            x, self.gamma.value, self.beta.value,
            self.running_mean.data, self.running_var.data,
            train=train, momentum=self.momentum, eps=self.eps)
        if train:
            self.running_mean.data = rm
            self.running_var.data = rv
        return out

    def parameters(self):
        return [self.gamma, self.beta, self.running_mean, self.running_var]


class Dense:
    def __init__(self, name: str, nin: int, nout: int, rng: np.random.Generator):
        self.kernel = Parameter(f"{name}/kernel", _he(rng, (nin, nout), nin))
        self.bias = Parameter(f"{name}/bias", np.zeros(nout))

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return T.bias_add(T.matmul(x, self.kernel.value), self.bias.value)

    def parameters(self):
        return [self.kernel, self.bias]


class Activation:
    def __init__(self, fn: str):
        if fn not in ("relu", "relu6"):
            raise ValueError(f"unknown activation {fn!r}")
        self.fn = fn

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return T.relu(x) if self.fn == "relu" else T.relu6(x)

    def parameters(self):
        return []


class GlobalAvgPool:
    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return T.global_average_pool(x)

    def parameters(self):
        return []


def _projection(prefix: str, cin: int, cout: int, stride: int,
                rng: np.random.Generator) -> Conv2D:
    # 1x1 strided conv that reconciles a skip connection with the branch shape
    log.info("inserted 1x1 projection on skip of %s (%d->%d channels, stride %d)",
             prefix, cin, cout, stride)
    return Conv2D(f"{prefix}/proj", 1, 1, cin, cout, stride, "same", rng)


# ---------------------------------------------------------------------------
# the five block families

class XceptionSepBlock:
    """Depthwise conv then pointwise conv, fully linear, plus a skip.

    No nonlinearity sits between the two stages or after the add; with
    stride 1 and matching channels the skip is the identity, otherwise a
    1x1 projection is inserted.
    """

    def __init__(self, spec: BlockSpec, rng: np.random.Generator, prefix: str):
        assert spec.kind == "xception_sep"
        cin, cout, s = spec.channels_in, spec.out_channels(), spec.stride
        self.dw = DepthwiseConv2D(f"{prefix}/dw", 3, cin, s, "same", rng)
        self.pw = PointwiseConv2D(f"{prefix}/pw", cin, cout, rng)
        self.skip = spec.residual is not False
        self.project = None
        if self.skip and (s != 1 or cin != cout):
            self.project = _projection(prefix, cin, cout, s, rng)

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        branch = self.pw(self.dw(x, train), train)
        if not self.skip:
            return branch
        shortcut = self.project(x, train) if self.project is not None else x
        return T.add(shortcut, branch)

    def parameters(self):
        ps = self.dw.parameters() + self.pw.parameters()
        if self.project is not None:
            ps += self.project.parameters()
        return ps


class InvertedResidualBlock:
    """1x1 expand (relu6) -> depthwise (relu6) -> 1x1 linear project.

    The skip is added only for stride 1 with matching channel counts; no
    projection variant exists for this family.
    """

    def __init__(self, spec: BlockSpec, rng: np.random.Generator, prefix: str):
        assert spec.kind == "mobilenet_inverted_residual"
        cin, cout, s = spec.channels_in, spec.out_channels(), spec.stride
        mid = max(1, round(spec.expansion_factor * cin))
        self.expand = PointwiseConv2D(f"{prefix}/expand", cin, mid, rng)
        self.bn1 = BatchNorm2D(f"{prefix}/bn1", mid)
        self.dw = DepthwiseConv2D(f"{prefix}/dw", 3, mid, s, "same", rng)
        self.bn2 = BatchNorm2D(f"{prefix}/bn2", mid)
        self.project = PointwiseConv2D(f"{prefix}/project", mid, cout, rng)
        auto = s == 1 and cin == cout
        self.skip = auto if spec.residual is None else spec.residual

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        h = T.relu6(self.bn1(self.expand(x, train), train))
        h = T.relu6(self.bn2(self.dw(h, train), train))
        h = self.project(h, train)
        return T.add(x, h) if self.skip else h

    def parameters(self):
        return (self.expand.parameters() + self.bn1.parameters() + self.dw.parameters()
                + self.bn2.parameters() + self.project.parameters())


class PreactResidualUnit:
    """Three pre-activated convolutions (1x1, 3x3, 1x1) around an identity skip.

    Normalization and relu precede every convolution, so a unit with zeroed
    kernels is an exact identity and stacks of such units stay transparent.
    """

    def __init__(self, spec: BlockSpec, rng: np.random.Generator, prefix: str):
        assert spec.kind == "resnetv2_preact"
        cin, cout, s = spec.channels_in, spec.out_channels(), spec.stride
        mid = max(cout // 2, 1)
        self.bn1 = BatchNorm2D(f"{prefix}/bn1", cin)
        self.conv1 = Conv2D(f"{prefix}/conv1", 1, 1, cin, mid, 1, "same", rng)
        self.bn2 = BatchNorm2D(f"{prefix}/bn2", mid)
        self.conv2 = Conv2D(f"{prefix}/conv2", 3, 3, mid, mid, s, "same", rng)
        self.bn3 = BatchNorm2D(f"{prefix}/bn3", mid)
        self.conv3 = Conv2D(f"{prefix}/conv3", 1, 1, mid, cout, 1, "same", rng)
        self.project = None
        if s != 1 or cin != cout:
            self.project = _projection(prefix, cin, cout, s, rng)

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        h = self.conv1(T.relu(self.bn1(x, train)), train)
        h = self.conv2(T.relu(self.bn2(h, train)), train)
        h = self.conv3(T.relu(self.bn3(h, train)), train)
        shortcut = self.project(x, train) if self.project is not None else x
        return T.add(shortcut, h)

    def parameters(self):
        ps = (self.bn1.parameters() + self.conv1.parameters()
              + self.bn2.parameters() + self.conv2.parameters()
              + self.bn3.parameters() + self.conv3.parameters())
        if self.project is not None:
            ps += self.project.parameters()
        return ps


class DenseBlock:
    """Stack of bottlenecked layers whose outputs concatenate onto the input.

    Layer i sees channels_in + i*growth_rate channels and contributes
    growth_rate more; the block output keeps the input as its exact channel
    prefix.
    """

    def __init__(self, spec: BlockSpec, rng: np.random.Generator, prefix: str):
        assert spec.kind == "densenet_dense"
        g = spec.growth_rate
        bottleneck = 4 * g
        self.layers = []
        for i in range(spec.layer_count):
            ci = spec.channels_in + i * g
            self.layers.append((
                BatchNorm2D(f"{prefix}/l{i}/bn_a", ci),
                PointwiseConv2D(f"{prefix}/l{i}/pw", ci, bottleneck, rng),
                BatchNorm2D(f"{prefix}/l{i}/bn_b", bottleneck),
                Conv2D(f"{prefix}/l{i}/conv", 3, 3, bottleneck, g, 1, "same", rng),
            ))

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        features = x
        for bn_a, pw, bn_b, conv in self.layers:
            h = pw(T.relu(bn_a(features, train)), train)
            h = conv(T.relu(bn_b(h, train)), train)
            features = T.concat_channels([features, h])
        return features

    def parameters(self):
        ps = []
        for group in self.layers:
            for layer in group:
                ps += layer.parameters()
        return ps


class TransitionLayer:
    """1x1 convolution then 2x2 average pooling; halves H and W."""

    def __init__(self, channels: int, rng: np.random.Generator, prefix: str):
        self.pw = PointwiseConv2D(f"{prefix}/pw", channels, channels, rng)

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return T.pool2d(self.pw(x, train), "average", (2, 2), stride=2)

    def parameters(self):
        return self.pw.parameters()


class InceptionResNetModule:
    """Two parallel branches, concatenated, projected, scaled, added back.

    Branch one is a 1x1 conv; branch two is 1x1 then 3x3. The projection is
    linear and the add has no activation after it, so the module output is
    exactly input + residual_scale * branch(input).
    """

    def __init__(self, spec: BlockSpec, rng: np.random.Generator, prefix: str):
        assert spec.kind == "inception_resnet_hybrid"
        cin = spec.channels_in
        c1 = max(cin // 2, 1)
        self.scale = float(spec.residual_scale)
        self.b1 = PointwiseConv2D(f"{prefix}/b1/pw", cin, c1, rng)
        self.b2a = PointwiseConv2D(f"{prefix}/b2/pw", cin, c1, rng)
        self.b2b = Conv2D(f"{prefix}/b2/conv", 3, 3, c1, c1, 1, "same", rng)
        self.proj = PointwiseConv2D(f"{prefix}/proj", 2 * c1, cin, rng)

    def branch(self, x: Tensor, train: bool = False) -> Tensor:
        a = T.relu(self.b1(x, train))
        b = T.relu(self.b2b(T.relu(self.b2a(x, train)), train))
        return self.proj(T.concat_channels([a, b]), train)

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return T.add(x, T.scale(self.branch(x, train), self.scale))

    def parameters(self):
        return (self.b1.parameters() + self.b2a.parameters()
                + self.b2b.parameters() + self.proj.parameters())


_BLOCK_CLASSES = {
    "xception_sep": XceptionSepBlock,
    "mobilenet_inverted_residual": InvertedResidualBlock,
    "resnetv2_preact": PreactResidualUnit,
    "densenet_dense": DenseBlock,
    "inception_resnet_hybrid": InceptionResNetModule,
}


def make_block(spec: BlockSpec, rng: np.random.Generator, prefix: str):
    return _BLOCK_CLASSES[spec.kind](spec, rng, prefix)


# ---------------------------------------------------------------------------
# model graph

class ModelGraph:
    """An ordered layer pipeline ending in a dense head.

    ``scores`` returns the pre-softmax activations, ``forward`` the softmax
    probabilities (rows on the probability simplex). The parameter table maps
    unique names to parameters, trainable and tracked statistics alike.
    """

    def __init__(self, config: dict, layers: list):
        self.config = dict(config)
        self.layers = list(layers)
        self.params: "OrderedDict[str, Parameter]" = OrderedDict()
        for layer in self.layers:
            for p in layer.parameters():
                if p.name in self.params:
                    raise ValueError(f"duplicate parameter name {p.name!r}")
                self.params[p.name] = p

    @property
    def architecture(self) -> str:
        return self.config["architecture"]

    @property
    def num_classes(self) -> int:
        return self.config["num_classes"]

    def scores(self, x, train: bool = False) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        for layer in self.layers:
            h = layer(h, train)
        return h

    def forward(self, x, train: bool = False) -> Tensor:
        return T.softmax(self.scores(x, train))

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_array(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.params.values()])

    def load_state_array(self, flat: np.ndarray) -> None:
        offset = 0
        for p in self.params.values():
            n = p.data.size
            p.data = flat[offset:offset + n].reshape(p.data.shape)
            offset += n
        if offset != flat.size:
            raise ValueError(f"state array has {flat.size} entries, model needs {offset}")


def build_toy_model(architecture: str, depth: int = 3, width: int = 8,
                    num_classes: int = 2, seed: int = 0,
                    in_channels: int = 3) -> ModelGraph:
    """Assemble a small trainable classifier from one block family.

    The stem is a stride-2 3x3 convolution to ``width`` channels; ``depth``
    blocks follow, then relu, global average pooling, and a dense head. All
    weights come from a single seeded generator, so equal arguments give
    bitwise-equal models.
    """
    if architecture not in KINDS:
        raise ValueError(f"unknown architecture kind {architecture!r}; expected one of {KINDS}")
    if depth < 1:
        raise ValueError("depth must be >= 1")
    rng = np.random.default_rng(seed)
    layers: list = [
        Conv2D("stem", 3, 3, in_channels, width, 2, "same", rng),
        Activation("relu"),
    ]

    if architecture == "densenet_dense":
        growth = max(width // 4, 1)
        c = width
        for i in range(depth):
            spec = BlockSpec("densenet_dense", c, growth_rate=growth, layer_count=2)
            layers.append(DenseBlock(spec, rng, f"block{i}"))
            c = spec.out_channels()
            if i < depth - 1:
                layers.append(TransitionLayer(c, rng, f"transition{i}"))
        feat = c
    elif architecture == "inception_resnet_hybrid":
        for i in range(depth):
            spec = BlockSpec("inception_resnet_hybrid", width, residual_scale=0.2)
            layers.append(InceptionResNetModule(spec, rng, f"block{i}"))
        feat = width
    else:
        for i in range(depth):
            stride = 2 if i == 0 else 1
            kwargs = {"expansion_factor": 2.0} if architecture == "mobilenet_inverted_residual" else {}
            spec = BlockSpec(architecture, width, width, stride=stride, **kwargs)
            layers.append(make_block(spec, rng, f"block{i}"))
            if architecture == "xception_sep" and i < depth - 1:
                layers.append(Activation("relu"))
        feat = width

    layers += [Activation("relu"), GlobalAvgPool(), Dense("fc", feat, num_classes, rng)]
    config = {
        "architecture": architecture, "depth": depth, "width": width,
        "num_classes": num_classes, "seed": seed, "in_channels": in_channels,
    }
    return ModelGraph(config, layers)


# ---------------------------------------------------------------------------
# checkpoints

_DTYPE_CODES = {0: np.float64}


def _encode_params(params: "OrderedDict[str, Parameter]") -> bytes:
    chunks = [struct.pack("<I", len(params))]
    for name, p in params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(p.data, dtype=DTYPE)
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<BB", int(p.trainable), arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(struct.pack("<B", 0))
        chunks.append(arr.astype("<f8").tobytes())
    return b"".join(chunks)


def save_checkpoint(model: ModelGraph, path) -> None:
    """Write the model's build config and full parameter table to ``path``."""
    config = json.dumps(model.config, sort_keys=True).encode("utf-8")
    blob = b"".join([
        CHECKPOINT_MAGIC,
        struct.pack("<H", CHECKPOINT_VERSION),
        struct.pack("<I", len(config)),
        config,
        _encode_params(model.params),
    ])
    with open(path, "wb") as f:
        f.write(blob)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ValueError("checkpoint truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals


def load_checkpoint(path) -> ModelGraph:
    """Rebuild the model named by a checkpoint and restore every parameter.

    The restore is bit-exact: raw little-endian float64 payloads go straight
    back into the rebuilt model's arrays.
    """
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic)")
    version = r.unpack("<H")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    config = json.loads(r.take(r.unpack("<I")).decode("utf-8"))
    model = build_toy_model(**config)

    count = r.unpack("<I")
    if count != len(model.params):
        raise ValueError(
            f"{path}: checkpoint has {count} parameters, model expects {len(model.params)}")
    for _ in range(count):
        name = r.take(r.unpack("<H")).decode("utf-8")
        trainable, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}I")
        shape = (shape,) if ndim == 1 else tuple(shape) if ndim else ()
        dtype_code = r.unpack("<B")
        if dtype_code not in _DTYPE_CODES:
            raise ValueError(f"{path}: unknown dtype code {dtype_code}")
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape)
        if name not in model.params:
            raise ValueError(f"{path}: unexpected parameter {name!r}")
        p = model.params[name]
        if bool(trainable) != p.trainable:
            raise ValueError(f"{path}: trainable flag mismatch for {name!r}")
        p.data = data.astype(DTYPE)
    if r.pos != len(r.blob):
        raise ValueError(f"{path}: trailing bytes after parameter table")
    return model


def model_checksum(model: ModelGraph) -> str:
    """Hex sha256 over the serialized parameter table; stable fingerprint."""
    return hashlib.sha256(_encode_params(model.params)).hexdigest()
