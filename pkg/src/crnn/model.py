"""Model assembly: layer-stack configuration, presets, and checkpoints.

A configuration is an ordered list of layer descriptors with a canonical
line-oriented text form. The text form is what gets digested (64-bit FNV-1a)
and embedded in checkpoints, so a checkpoint is self-describing: loading it
rebuilds the exact stack and then overwrites the parameters.

Checkpoint layout (little-endian throughout):

    magic "CRNNCKPT" | version u16 | config digest u64 | step u64
    | config text (u32 length + utf-8)
    | parameter count u32, then per parameter:
    |     name (u16 length + utf-8) | rank u8 | extents u32 each
    |     payload as binary32
    | buffer count u32, same record layout (running statistics)
    | optimizer flag u8; when 1: optimizer name (u16+utf-8),
    |     slot count u32, then slot records in the same layout
"""

from __future__ import annotations

import dataclasses
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .ctc import Alphabet, FrameDistributions
from .errors import (
    CheckpointDigestError,
    CheckpointError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    DimensionError,
)
from .layers import (
    BatchNormLayer,
    ConvLayer,
    MaxPoolLayer,
    Projection,
    RecurrentLayer,
    map_to_sequence,
)
from .tensor import Tensor

DEFAULT_ALPHABET = "0123456789abcdefghijklmnopqrstuvwxyz"

MAGIC = b"CRNNCKPT"
FORMAT_VERSION = 1


# -- layer descriptors -----------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (1, 1)
    relu: bool = True


@dataclasses.dataclass(frozen=True)
class PoolSpec:
    window: tuple[int, int]
    stride: tuple[int, int]


@dataclasses.dataclass(frozen=True)
class NormSpec:
    pass


@dataclasses.dataclass(frozen=True)
class MapToSequenceSpec:
    pass


@dataclasses.dataclass(frozen=True)
class RecurrentSpec:
    hidden_size: int
    bidirectional: bool


@dataclasses.dataclass(frozen=True)
class ProjectSpec:
    pass


LayerSpec = Union[ConvSpec, PoolSpec, NormSpec, MapToSequenceSpec,
                  RecurrentSpec, ProjectSpec]


@dataclasses.dataclass
class ModelConfig:
    """Ordered layer stack plus the alphabet and input geometry."""

    alphabet: str = DEFAULT_ALPHABET
    blank_char: str = "-"
    input_height: int = 32
    layers: tuple[LayerSpec, ...] = ()

    @property
    def num_classes(self) -> int:
        return len(self.alphabet) + 1

    def conv_count(self) -> int:
        return sum(isinstance(s, ConvSpec) for s in self.layers)

    def validate(self) -> None:
        if not self.layers:
            raise ConfigError("layer stack is empty")
        if not isinstance(self.layers[-1], ProjectSpec):
            raise ConfigError("layer stack must end with the class projection")
        split = [i for i, s in enumerate(self.layers)
                 if isinstance(s, MapToSequenceSpec)]
        if len(split) != 1:
            raise ConfigError("exactly one map-to-sequence bridge is required")
        bridge = split[0]
        for spec in self.layers[:bridge]:
            if isinstance(spec, (RecurrentSpec, ProjectSpec)):
                raise ConfigError("recurrent/projection layers must follow the bridge")
        for spec in self.layers[bridge + 1 : -1]:
            if not isinstance(spec, RecurrentSpec):
                raise ConfigError("only recurrent layers may sit between the "
                                  "bridge and the projection")
        height = self._trace_height()
        if height != 1:
            raise ConfigError(
                f"input height {self.input_height} reduces to feature height "
                f"{height}, not 1; each column must form exactly one frame"
            )

    def _trace_height(self) -> int:
        h = self.input_height
        for spec in self.layers:
            if isinstance(spec, ConvSpec):
                h = (h + 2 * spec.padding[0] - spec.kernel[0]) // spec.stride[0] + 1
            elif isinstance(spec, PoolSpec):
                h = (h - spec.window[0]) // spec.stride[0] + 1
            elif isinstance(spec, MapToSequenceSpec):
                break
            if h < 1:
                raise ConfigError("height collapses below 1 inside the stack")
        return h

    def frames_for_width(self, width: int) -> int:
        """Number of output frames for an input of the given pixel width."""
        w = width
        for spec in self.layers:
            if isinstance(spec, ConvSpec):
                w = (w + 2 * spec.padding[1] - spec.kernel[1]) // spec.stride[1] + 1
            elif isinstance(spec, PoolSpec):
                w = (w - spec.window[1]) // spec.stride[1] + 1
            elif isinstance(spec, MapToSequenceSpec):
                break
            if w < 1:
                raise DimensionError(f"width {width} is too narrow for this stack")
        return w

    def min_width(self) -> int:
        for w in range(1, 4096):
            try:
                if self.frames_for_width(w) >= 1:
                    return w
            except DimensionError:
                continue
        raise ConfigError("no feasible input width below 4096")


# -- canonical text form ----------------------------------------------------------


def config_to_text(config: ModelConfig) -> str:
    lines = [
        f"height = {config.input_height}",
        f"alphabet = {config.alphabet}",
        f"blank = {config.blank_char}",
    ]
    for spec in config.layers:
        if isinstance(spec, ConvSpec):
            lines.append(
                "layer = conv out={} k={}x{} s={}x{} p={}x{} relu={}".format(
                    spec.out_channels, *spec.kernel, *spec.stride, *spec.padding,
                    int(spec.relu),
                )
            )
        elif isinstance(spec, PoolSpec):
            lines.append("layer = pool w={}x{} s={}x{}".format(*spec.window,
                                                               *spec.stride))
        elif isinstance(spec, NormSpec):
            lines.append("layer = norm")
        elif isinstance(spec, MapToSequenceSpec):
            lines.append("layer = map-to-sequence")
        elif isinstance(spec, RecurrentSpec):
            lines.append(
                f"layer = lstm hidden={spec.hidden_size} "
                f"bidirectional={int(spec.bidirectional)}"
            )
        elif isinstance(spec, ProjectSpec):
            lines.append("layer = project")
    return "\n".join(lines) + "\n"


def _parse_pair(token: str) -> tuple[int, int]:
    a, b = token.split("x")
    return int(a), int(b)


def config_from_text(text: str) -> ModelConfig:
    height = 32
    alphabet = DEFAULT_ALPHABET
    blank = "-"
    specs: list[LayerSpec] = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "height":
            height = int(value)
        elif key == "alphabet":
            alphabet = value
        elif key == "blank":
            blank = value
        elif key == "layer":
            fields = value.split()
            kind, options = fields[0], dict(f.split("=", 1) for f in fields[1:])
            if kind == "conv":
                specs.append(ConvSpec(
                    out_channels=int(options["out"]),
                    kernel=_parse_pair(options.get("k", "3x3")),
                    stride=_parse_pair(options.get("s", "1x1")),
                    padding=_parse_pair(options.get("p", "1x1")),
                    relu=bool(int(options.get("relu", "1"))),
                ))
            elif kind == "pool":
                specs.append(PoolSpec(window=_parse_pair(options["w"]),
                                      stride=_parse_pair(options["s"])))
            elif kind == "norm":
                specs.append(NormSpec())
            elif kind == "map-to-sequence":
                specs.append(MapToSequenceSpec())
            elif kind == "lstm":
                specs.append(RecurrentSpec(
                    hidden_size=int(options["hidden"]),
                    bidirectional=bool(int(options.get("bidirectional", "1"))),
                ))
            elif kind == "project":
                specs.append(ProjectSpec())
            else:
                raise ConfigError(f"unknown layer kind {kind!r}")
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return ModelConfig(alphabet=alphabet, blank_char=blank,
                       input_height=height, layers=tuple(specs))


def fnv1a64(data: bytes) -> int:
    digest = 0xCBF29CE484222325
    for byte in data:
        digest ^= byte
        digest = (digest * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return digest


def config_digest(config: ModelConfig) -> int:
    return fnv1a64(config_to_text(config).encode("utf-8"))


# -- presets --------------------------------------------------------------------


def preset_standard(alphabet: str = DEFAULT_ALPHABET) -> ModelConfig:
    """Seven conv blocks with square then rectangular pooling, two
    bidirectional recurrent layers of 256 units, and the class projection.

    The rectangular pools halve the height only, keeping the feature maps
    wide so each character spans several frames.
    """
    tall = PoolSpec(window=(2, 1), stride=(2, 1))
    square = PoolSpec(window=(2, 2), stride=(2, 2))
    return ModelConfig(alphabet=alphabet, layers=(
        ConvSpec(64),
        square,
        ConvSpec(128),
        square,
        ConvSpec(256),
        ConvSpec(256),
        tall,
        ConvSpec(512),
        NormSpec(),
        ConvSpec(512),
        NormSpec(),
        tall,
        ConvSpec(512, kernel=(2, 2), stride=(1, 1), padding=(0, 0)),
        MapToSequenceSpec(),
        RecurrentSpec(256, bidirectional=True),
        RecurrentSpec(256, bidirectional=True),
        ProjectSpec(),
    ))


def preset_simplified(alphabet: str = DEFAULT_ALPHABET) -> ModelConfig:
    """Reduced-capacity variant: the second 256-map and second 512-map conv
    blocks are dropped (one normalization survives, on the remaining 512-map
    conv) and the recurrent stack is two unidirectional layers.
    """
    tall = PoolSpec(window=(2, 1), stride=(2, 1))
    square = PoolSpec(window=(2, 2), stride=(2, 2))
    return ModelConfig(alphabet=alphabet, layers=(
        ConvSpec(64),
        square,
        ConvSpec(128),
        square,
        ConvSpec(256),
        tall,
        ConvSpec(512),
        NormSpec(),
        tall,
        ConvSpec(512, kernel=(2, 2), stride=(1, 1), padding=(0, 0)),
        MapToSequenceSpec(),
        RecurrentSpec(256, bidirectional=False),
        RecurrentSpec(256, bidirectional=False),
        ProjectSpec(),
    ))


PRESETS = {"standard": preset_standard, "simplified": preset_simplified}


# -- the runnable model ------------------------------------------------------------


class Model:
    """A built layer stack; parameters are float64, checkpoints binary32."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.alphabet = Alphabet(config.alphabet, config.blank_char)
        rng = np.random.default_rng(seed)

        self.feature_stages: list[tuple[str, object]] = []
        self.recurrent_stages: list[tuple[str, RecurrentLayer]] = []
        self.projection: Optional[Projection] = None

        channels = 1
        height = config.input_height
        conv_index = 0
        norm_index = 0
        pool_index = 0
        lstm_index = 0
        feature_width = 0
        past_bridge = False
        for spec in config.layers:
            if isinstance(spec, ConvSpec):
                conv_index += 1
                layer = ConvLayer(channels, spec.out_channels, *spec.kernel,
                                  stride=spec.stride, padding=spec.padding,
                                  relu=spec.relu, rng=rng)
                self.feature_stages.append((f"conv{conv_index}", layer))
                channels = spec.out_channels
                height = (height + 2 * spec.padding[0] - spec.kernel[0]) \
                    // spec.stride[0] + 1
            elif isinstance(spec, PoolSpec):
                pool_index += 1
                self.feature_stages.append(
                    (f"pool{pool_index}", MaxPoolLayer(spec.window, spec.stride))
                )
                height = (height - spec.window[0]) // spec.stride[0] + 1
            elif isinstance(spec, NormSpec):
                norm_index += 1
                self.feature_stages.append(
                    (f"norm{norm_index}", BatchNormLayer(channels))
                )
            elif isinstance(spec, MapToSequenceSpec):
                past_bridge = True
                feature_width = channels * height
            elif isinstance(spec, RecurrentSpec):
                lstm_index += 1
                layer = RecurrentLayer(feature_width, spec.hidden_size,
                                       spec.bidirectional, rng)
                self.recurrent_stages.append((f"lstm{lstm_index}", layer))
                feature_width = layer.output_size
            elif isinstance(spec, ProjectSpec):
                self.projection = Projection(feature_width, config.num_classes, rng)
        assert past_bridge and self.projection is not None

    # -- inference/training entry points --------------------------------------

    def forward_batch(self, images, train: bool = False) -> Tensor:
        """Map (N, 1, H, W) images to (N, T, K) pre-softmax frame scores."""
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.ndim != 4 or x.shape[1] != 1:
            raise DimensionError(f"expected (N, 1, H, W) images, got {x.shape}")
        if x.shape[2] != self.config.input_height:
            raise DimensionError(
                f"input height {x.shape[2]} != configured {self.config.input_height}"
            )
        self.config.frames_for_width(x.shape[3])
        for _, stage in self.feature_stages:
            x = stage.forward(x, train)
        frames = map_to_sequence(x)
        for _, stage in self.recurrent_stages:
            frames = stage.forward(frames)
        stacked = T.stack0(frames)
        steps, batch, width = stacked.shape
        flat = T.reshape(stacked, (steps * batch, width))
        scores = self.projection.forward(flat)
        return T.transpose(
            T.reshape(scores, (steps, batch, self.config.num_classes)), (1, 0, 2)
        )

    def forward(self, image: np.ndarray, train: bool = False) -> FrameDistributions:
        """Single (1, H, W) image to per-frame probability rows."""
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3:
            raise DimensionError(f"expected a (1, H, W) image, got {image.shape}")
        with T.no_grad():
            logits = self.forward_batch(image[None], train=train)
        probs = np.exp(T.log_softmax_rows(logits.data[0]))
        return FrameDistributions(probs, self.alphabet)

    def scores_batch(self, images, train: bool = False) -> np.ndarray:
        """(N, T, K) raw scores as a plain array, no graph recording."""
        with T.no_grad():
            return self.forward_batch(images, train=train).data

    def feature_sequence(self, images, train: bool = False) -> np.ndarray:
        """(T, N, C*H) convolutional frame sequence, before any recurrence.

        Each frame is a pure function of its receptive field, so this is
        where per-frame geometric properties (e.g. translation equivariance)
        hold exactly.
        """
        with T.no_grad():
            x = images if isinstance(images, Tensor) else Tensor(images)
            for _, stage in self.feature_stages:
                x = stage.forward(x, train)
            frames = map_to_sequence(x)
            return np.stack([f.data for f in frames])

    # -- parameter plumbing -----------------------------------------------------

    def parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for name, stage in self.feature_stages:
            out += [(f"{name}.{n}", p) for n, p in stage.parameters()]
        for name, stage in self.recurrent_stages:
            out += [(f"{name}.{n}", p) for n, p in stage.parameters()]
        out += [(f"project.{n}", p) for n, p in self.projection.parameters()]
        return out

    def parameter_tensors(self) -> list[Tensor]:
        return [p for _, p in self.parameters()]

    def parameter_count(self) -> int:
        return sum(p.data.size for _, p in self.parameters())

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        out: list[tuple[str, np.ndarray]] = []
        for name, stage in self.feature_stages:
            if isinstance(stage, BatchNormLayer):
                out += [(f"{name}.{n}", b) for n, b in stage.buffers()]
                out.append((f"{name}.initialized",
                            np.array([float(stage.initialized)])))
        return out

    def zero_grads(self) -> None:
        for _, p in self.parameters():
            p.grad = None


def build(config: ModelConfig, seed: int = 0) -> Model:
    return Model(config, seed=seed)


# -- checkpoint serialization --------------------------------------------------------


def _write_record(out: list[bytes], name: str, array: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    out.append(struct.pack("<H", len(encoded)))
    out.append(encoded)
    out.append(struct.pack("<B", array.ndim))
    out.append(struct.pack(f"<{array.ndim}I", *array.shape))
    out.append(array.astype("<f4").tobytes())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.blob):
            raise CheckpointTruncatedError(
                f"file ends at byte {len(self.blob)}, needed {self.offset + count}"
            )
        chunk = self.blob[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def record(self) -> tuple[str, np.ndarray]:
        (name_len,) = self.unpack("<H")
        name = self.take(name_len).decode("utf-8")
        (rank,) = self.unpack("<B")
        shape = self.unpack(f"<{rank}I") if rank else ()
        count = int(np.prod(shape)) if shape else 1
        payload = np.frombuffer(self.take(4 * count), dtype="<f4")
        return name, payload.reshape(shape).astype(np.float64)


def save(model: Model, path: str | Path, step: int = 0,
         optimizer=None, optimizer_name: str = "") -> None:
    """Write parameters (binary32) plus the embedded config text."""
    text = config_to_text(model.config)
    chunks: list[bytes] = [
        MAGIC,
        struct.pack("<H", FORMAT_VERSION),
        struct.pack("<Q", config_digest(model.config)),
        struct.pack("<Q", step),
    ]
    encoded = text.encode("utf-8")
    chunks.append(struct.pack("<I", len(encoded)))
    chunks.append(encoded)

    params = model.parameters()
    chunks.append(struct.pack("<I", len(params)))
    for name, p in params:
        _write_record(chunks, name, p.data)

    buffers = model.buffers()
    chunks.append(struct.pack("<I", len(buffers)))
    for name, b in buffers:
        _write_record(chunks, name, b)

    if optimizer is None:
        chunks.append(struct.pack("<B", 0))
    else:
        chunks.append(struct.pack("<B", 1))
        encoded = optimizer_name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        slots = optimizer.export_state()
        chunks.append(struct.pack("<I", len(slots)))
        for name in sorted(slots):
            _write_record(chunks, name, slots[name])

    Path(path).write_bytes(b"".join(chunks))


@dataclasses.dataclass
class LoadedCheckpoint:
    model: Model
    step: int
    optimizer_name: str
    optimizer_state: Optional[dict[str, np.ndarray]]


def load(path: str | Path) -> LoadedCheckpoint:
    """Rebuild the model a checkpoint describes and restore its parameters."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    reader = _Reader(path.read_bytes())
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError(f"{path} does not look like a checkpoint")
    (version,) = reader.unpack("<H")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"format version {version} unsupported (expected {FORMAT_VERSION})"
        )
    (digest,) = reader.unpack("<Q")
    (step,) = reader.unpack("<Q")
    (text_len,) = reader.unpack("<I")
    text = reader.take(text_len).decode("utf-8")
    if fnv1a64(text.encode("utf-8")) != digest:
        raise CheckpointDigestError("stored digest does not match config text")

    config = config_from_text(text)
    model = Model(config, seed=0)

    (param_count,) = reader.unpack("<I")
    stored: dict[str, np.ndarray] = {}
    for _ in range(param_count):
        name, array = reader.record()
        stored[name] = array
    expected = model.parameters()
    if set(stored) != {n for n, _ in expected}:
        raise CheckpointError("parameter names do not match the config's stack")
    for name, p in expected:
        if stored[name].shape != p.data.shape:
            raise CheckpointError(
                f"parameter {name} has shape {stored[name].shape}, "
                f"expected {p.data.shape}"
            )
        p.data[...] = stored[name]

    (buffer_count,) = reader.unpack("<I")
    buffer_values: dict[str, np.ndarray] = {}
    for _ in range(buffer_count):
        name, array = reader.record()
        buffer_values[name] = array
    for stage_name, stage in model.feature_stages:
        if isinstance(stage, BatchNormLayer):
            stage.running_mean[...] = buffer_values[f"{stage_name}.running_mean"]
            stage.running_var[...] = buffer_values[f"{stage_name}.running_var"]
            stage.initialized = bool(buffer_values[f"{stage_name}.initialized"][0])

    (opt_flag,) = reader.unpack("<B")
    optimizer_name = ""
    optimizer_state: Optional[dict[str, np.ndarray]] = None
    if opt_flag:
        (name_len,) = reader.unpack("<H")
        optimizer_name = reader.take(name_len).decode("utf-8")
        (slot_count,) = reader.unpack("<I")
        optimizer_state = {}
        for _ in range(slot_count):
            name, array = reader.record()
            optimizer_state[name] = array
    return LoadedCheckpoint(model, step, optimizer_name, optimizer_state)
