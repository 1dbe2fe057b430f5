"""Small VGG-style CNN with named feature-map taps.

The network is a stack of conv blocks (3x3 convs, stride 1, pad 1, ReLU)
separated by 2x2 max pools, then dense layers to the class logits. The
tap policy selects which post-ReLU activations the forward pass exposes
for the feature-map consistency loss: the last ReLU of each block
("blocks", default) or every conv's ReLU ("all_convs").

Snapshots are a little-endian binary container: magic, version, a
length-prefixed key=value descriptor, then named float64 tensors.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, FormatError, VersionError

SNAPSHOT_MAGIC = b"RFCNNSV\x00"
SNAPSHOT_VERSION = 1

TAP_POLICIES = ("blocks", "all_convs")


@dataclass(frozen=True)
class ArchitectureDescriptor:
    """Shape of the network: conv blocks, dense widths, classes, taps."""

    input_hwc: tuple[int, int, int] = (32, 32, 3)
    blocks: tuple[tuple[int, int], ...] = ((16, 2), (32, 2), (64, 2))
    dense_widths: tuple[int, ...] = (128,)
    class_count: int = 10
    tap_policy: str = "blocks"

    def __post_init__(self):
        if self.class_count < 2:
            raise ContractError("class_count must be >= 2")
        if not self.blocks:
            raise ContractError("need at least one conv block")
        if self.tap_policy not in TAP_POLICIES:
            raise ContractError(
                f"tap_policy must be one of {TAP_POLICIES}, got {self.tap_policy!r}")
        h, w, _ = self.input_hwc
        if h % (2 ** len(self.blocks)) or w % (2 ** len(self.blocks)):
            raise ContractError(
                f"input {h}x{w} not divisible by 2^{len(self.blocks)} pooling")

    def tap_count(self) -> int:
        if self.tap_policy == "blocks":
            return len(self.blocks)
        return sum(reps for _, reps in self.blocks)

    def flat_features(self) -> int:
        h, w, _ = self.input_hwc
        shrink = 2 ** len(self.blocks)
        return (h // shrink) * (w // shrink) * self.blocks[-1][0]

    def param_spec(self) -> list[tuple[str, tuple[int, ...]]]:
        """Ordered (name, shape) pairs for every parameter tensor."""
        spec = []
        in_ch = self.input_hwc[2]
        for bi, (filters, reps) in enumerate(self.blocks):
            for ci in range(reps):
                spec.append((f"block{bi}_conv{ci}_w", (filters, in_ch, 3, 3)))
                spec.append((f"block{bi}_conv{ci}_b", (filters,)))
                in_ch = filters
        width = self.flat_features()
        for di, hidden in enumerate(self.dense_widths):
            spec.append((f"dense{di}_w", (width, hidden)))
            spec.append((f"dense{di}_b", (hidden,)))
            width = hidden
        spec.append(("out_w", (width, self.class_count)))
        spec.append(("out_b", (self.class_count,)))
        return spec

    def to_manifest(self) -> str:
        lines = [
            f"input_hwc={self.input_hwc[0]},{self.input_hwc[1]},{self.input_hwc[2]}",
            "blocks=" + ";".join(f"{f},{r}" for f, r in self.blocks),
            "dense_widths=" + ",".join(str(d) for d in self.dense_widths),
            f"class_count={self.class_count}",
            f"tap_policy={self.tap_policy}",
        ]
        return "\n".join(lines)

    @staticmethod
    def from_manifest(text: str) -> "ArchitectureDescriptor":
        fields: dict[str, str] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"descriptor line without '=': {line!r}")
            key, val = line.split("=", 1)
            fields[key.strip()] = val.strip()
        try:
            hwc = tuple(int(v) for v in fields["input_hwc"].split(","))
            blocks = tuple(
                tuple(int(v) for v in part.split(","))
                for part in fields["blocks"].split(";") if part)
            widths = tuple(
                int(v) for v in fields["dense_widths"].split(",") if v)
            return ArchitectureDescriptor(
                input_hwc=hwc, blocks=blocks, dense_widths=widths,
                class_count=int(fields["class_count"]),
                tap_policy=fields["tap_policy"])
        except (KeyError, ValueError) as exc:
            raise FormatError(f"bad descriptor manifest: {exc}") from exc


@dataclass
class ModelSnapshot:
    """Descriptor + named parameter tensors + training metadata."""

    descriptor: ArchitectureDescriptor
    params: dict[str, T.Tensor]
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for name, shape in self.descriptor.param_spec():
            if name not in self.params:
                raise ContractError(f"snapshot missing parameter {name}")
            if self.params[name].shape != shape:
                raise DimensionError(
                    f"parameter {name} has shape {self.params[name].shape}, "
                    f"descriptor expects {shape}")

    def copy(self) -> "ModelSnapshot":
        return ModelSnapshot(
            descriptor=self.descriptor,
            params={k: v.copy() for k, v in self.params.items()},
            meta=dict(self.meta))

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())


def init_model(descriptor: ArchitectureDescriptor, seed: int,
               meta: dict | None = None) -> ModelSnapshot:
    """He-uniform weights, zero biases, deterministic per seed."""
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    params: dict[str, T.Tensor] = {}
    for name, shape in descriptor.param_spec():
        if name.endswith("_b"):
            params[name] = T.Tensor(np.zeros(shape))
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = np.sqrt(6.0 / fan_in)
            params[name] = T.Tensor(gen.uniform(-bound, bound, shape))
    meta = {k: str(v) for k, v in (meta or {}).items()}
    meta.setdefault("init_seed", str(seed))
    return ModelSnapshot(descriptor=descriptor, params=params, meta=meta)


def make_param_nodes(model: ModelSnapshot) -> dict[str, T.GraphNode]:
    """Persistent trainable nodes sharing the snapshot's tensors."""
    return {name: T.GraphNode(tensor, requires_grad=True)
            for name, tensor in model.params.items()}


def forward(model: ModelSnapshot, batch, want_taps: bool = False,
            param_nodes: dict[str, T.GraphNode] | None = None):
    """Run the network; returns (logits, taps).

    `batch` is (N, C, H, W) with values in [0,1]. Taps are the post-ReLU
    activations selected by the descriptor's tap policy, in network order;
    empty when want_taps is false. Pass `param_nodes` to make the call
    differentiable w.r.t. the parameters.
    """
    desc = model.descriptor
    x = T.as_node(batch)
    h, w, c = desc.input_hwc
    if x.value.array.ndim != 4 or x.shape[1:] != (c, h, w):
        raise DimensionError(
            f"forward: batch must be (N,{c},{h},{w}), got {x.shape}")
    if x.value.size and (x.array.min() < 0.0 or x.array.max() > 1.0):
        raise ContractError("forward: batch values must lie in [0,1]")

    if param_nodes is None:
        param_nodes = {name: T.constant(tensor)
                       for name, tensor in model.params.items()}
    p = param_nodes

    taps: list[T.GraphNode] = []
    for bi, (_, reps) in enumerate(desc.blocks):
        for ci in range(reps):
            x = T.conv2d(x, p[f"block{bi}_conv{ci}_w"],
                         p[f"block{bi}_conv{ci}_b"], stride=1, padding=1)
            x = T.relu(x)
            if want_taps and desc.tap_policy == "all_convs":
                taps.append(x)
        if want_taps and desc.tap_policy == "blocks":
            taps.append(x)
        x = T.maxpool2(x)

    x = T.flatten2d(x)
    for di in range(len(desc.dense_widths)):
        x = T.relu(T.dense(x, p[f"dense{di}_w"], p[f"dense{di}_b"]))
    logits = T.dense(x, p["out_w"], p["out_b"])
    return logits, taps


# ---------------------------------------------------------------------------
# snapshot serialization


def save(model: ModelSnapshot) -> bytes:
    buf = io.BytesIO()
    buf.write(SNAPSHOT_MAGIC)
    buf.write(struct.pack("<I", SNAPSHOT_VERSION))
    manifest = model.descriptor.to_manifest()
    meta_lines = "".join(f"\nmeta.{k}={v}" for k, v in sorted(model.meta.items()))
    text = (manifest + meta_lines).encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    names = sorted(model.params)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = model.params[name].array
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f8").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.payload):
            raise FormatError(
                f"snapshot truncated: needed {n} bytes", offset=self.pos)
        out = self.payload[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load(payload: bytes) -> ModelSnapshot:
    rd = _Reader(payload)
    magic = rd.take(len(SNAPSHOT_MAGIC))
    if magic != SNAPSHOT_MAGIC:
        raise FormatError(f"bad snapshot magic {magic!r}", offset=0)
    version = rd.u32()
    if version != SNAPSHOT_VERSION:
        raise VersionError(
            f"unsupported snapshot version {version}, "
            f"expected {SNAPSHOT_VERSION}")
    text = rd.take(rd.u32()).decode("utf-8")
    desc_lines, meta = [], {}
    for line in text.splitlines():
        if line.startswith("meta."):
            key, val = line[len("meta."):].split("=", 1)
            meta[key] = val
        else:
            desc_lines.append(line)
    descriptor = ArchitectureDescriptor.from_manifest("\n".join(desc_lines))

    params: dict[str, T.Tensor] = {}
    for _ in range(rd.u32()):
        name = rd.take(rd.u32()).decode("utf-8")
        rank = rd.u32()
        if rank > 8:
            raise FormatError(f"implausible tensor rank {rank}", offset=rd.pos - 4)
        dims = struct.unpack(f"<{rank}I", rd.take(4 * rank))
        count = int(np.prod(dims)) if dims else 1
        raw = rd.take(8 * count)
        params[name] = T.Tensor(
            np.frombuffer(raw, dtype="<f8").reshape(dims).copy())
    if rd.pos != len(payload):
        raise FormatError(
            f"{len(payload) - rd.pos} trailing bytes after snapshot",
            offset=rd.pos)
    return ModelSnapshot(descriptor=descriptor, params=params, meta=meta)


def save_file(model: ModelSnapshot, path) -> None:
    import os
    import tempfile
    payload = save(model)
    directory = os.path.dirname(os.fspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)       # atomic publish
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_file(path) -> ModelSnapshot:
    with open(path, "rb") as fh:
        return load(fh.read())
