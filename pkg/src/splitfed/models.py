"""Network architectures, the cut point, and client/server partitioning.

A SplitModel carves a layer stack at `cut_index`: layers [0, cut) plus
their parameters form the client portion, layers [cut, end) the server
portion. Both portions together reproduce the full forward function
exactly, because the same layer code runs on the same values in the
same order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CutOutOfRange, ShapeMismatch, Truncated, UnknownArchitecture
from .nn import LayerSpec, ParameterSet, init_layer_params

CHECKPOINT_HEADER = b"SPLITFED-CKPT v1\n"


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    class_count: int

    def layer_shapes(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        """Per-layer (input, output) sample shapes; validates the chain."""
        shapes = []
        shape = self.input_shape
        for layer in self.layers:
            out = layer.output_shape(shape)
            shapes.append((shape, out))
            shape = out
        if shape != (self.class_count,):
            raise ShapeMismatch(f"{self.name}: final shape {shape} != ({self.class_count},)")
        return shapes

    def param_count(self) -> int:
        total = 0
        for layer in self.layers:
            for _, shape in layer.param_shapes():
                total += int(np.prod(shape))
        return total


def build_architecture(
    name: str,
    input_shape: tuple[int, ...] | None = None,
    class_count: int | None = None,
) -> ArchitectureSpec:
    """Construct a registered architecture.

    lenet_small: conv5x5(6) -> pool2 -> conv5x5(16) -> pool2 -> flatten
    -> dense120 -> dense84 -> dense(classes), ReLU after convs and hidden
    dense layers; declared input 32x32x1. mlp2: dense128 -> relu ->
    dense(classes) over flat vectors.
    """
    if name == "lenet_small":
        in_shape = input_shape or (32, 32, 1)
        classes = class_count or 10
        if len(in_shape) != 3:
            raise UnknownArchitecture(f"lenet_small needs (H, W, C) input, got {in_shape}")
        h, w, c = in_shape
        fh, fw = (h - 4) // 2, (w - 4) // 2
        flat = ((fh - 4) // 2) * ((fw - 4) // 2) * 16
        layers = (
            LayerSpec("conv2d", "conv1", in_channels=c, out_channels=6, kernel=5),
            LayerSpec("relu", "relu1"),
            LayerSpec("maxpool2d", "pool1", pool=2),
            LayerSpec("conv2d", "conv2", in_channels=6, out_channels=16, kernel=5),
            LayerSpec("relu", "relu2"),
            LayerSpec("maxpool2d", "pool2", pool=2),
            LayerSpec("flatten", "flat"),
            LayerSpec("dense", "fc1", in_features=flat, out_features=120),
            LayerSpec("relu", "relu3"),
            LayerSpec("dense", "fc2", in_features=120, out_features=84),
            LayerSpec("relu", "relu4"),
            LayerSpec("dense", "fc3", in_features=84, out_features=classes),
        )
        arch = ArchitectureSpec("lenet_small", layers, in_shape, classes)
    elif name == "mlp2":
        in_shape = input_shape or (64,)
        classes = class_count or 10
        if len(in_shape) != 1:
            raise UnknownArchitecture(f"mlp2 needs flat (d,) input, got {in_shape}")
        layers = (
            LayerSpec("dense", "fc1", in_features=in_shape[0], out_features=128),
            LayerSpec("relu", "relu1"),
            LayerSpec("dense", "fc2", in_features=128, out_features=classes),
        )
        arch = ArchitectureSpec("mlp2", layers, in_shape, classes)
    else:
        raise UnknownArchitecture(name)
    arch.layer_shapes()
    return arch


# Cut after the first 2D max-pool for the conv net; after the first dense
# layer for the MLP.
DEFAULT_CUTS = {"lenet_small": 3, "mlp2": 1}


def default_cut(arch_name: str) -> int:
    try:
        return DEFAULT_CUTS[arch_name]
    except KeyError as exc:
        raise UnknownArchitecture(arch_name) from exc


def init_params(arch: ArchitectureSpec, seed: int, scheme: str = "xavier") -> ParameterSet:
    """Seed-deterministic full-network initialization, layer order fixed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    entries: list[tuple[str, np.ndarray]] = []
    for layer in arch.layers:
        entries.extend(init_layer_params(layer, rng, scheme))
    return ParameterSet(entries, version=0)


@dataclass
class SplitModel:
    arch: ArchitectureSpec
    cut_index: int
    client_params: ParameterSet
    server_params: ParameterSet

    @property
    def client_layers(self) -> tuple[LayerSpec, ...]:
        return self.arch.layers[: self.cut_index]

    @property
    def server_layers(self) -> tuple[LayerSpec, ...]:
        return self.arch.layers[self.cut_index :]


@dataclass(frozen=True)
class ModelStats:
    total_params: int
    client_fraction: float
    smashed_size: int


def split_at(arch: ArchitectureSpec, cut_index: int, seed: int, scheme: str = "xavier") -> SplitModel:
    """Initialize the full network from `seed`, then partition at `cut_index`.

    Initialization covers the whole network before slicing, so the same
    seed yields bit-identical parameters no matter where the cut falls.
    """
    if not 1 <= cut_index <= len(arch.layers) - 1:
        raise CutOutOfRange(f"cut_index {cut_index} not in [1, {len(arch.layers) - 1}]")
    full = init_params(arch, seed, scheme)
    client_names = {layer.name for layer in arch.layers[:cut_index]}
    client_entries = [(n, v) for n, v in full.entries if n.split(".")[0] in client_names]
    server_entries = [(n, v) for n, v in full.entries if n.split(".")[0] not in client_names]
    return SplitModel(arch, cut_index, ParameterSet(client_entries, 0), ParameterSet(server_entries, 0))


def assemble_full(model_arch: ArchitectureSpec, client: ParameterSet, server: ParameterSet) -> ParameterSet:
    """Merge portion parameters back into full-network entry order."""
    by_name = dict(client.entries)
    by_name.update(dict(server.entries))
    entries = []
    for layer in model_arch.layers:
        for name, _ in layer.param_shapes():
            entries.append((name, by_name[name]))
    return ParameterSet(entries, max(client.version, server.version))


def model_stats(model: SplitModel) -> ModelStats:
    total = model.arch.param_count()
    client = model.client_params.element_count()
    shapes = model.arch.layer_shapes()
    smashed = int(np.prod(shapes[model.cut_index - 1][1]))
    return ModelStats(total, client / total, smashed)


def save_checkpoint(path: str, params: ParameterSet) -> None:
    """Header line, then per-entry records in the wire record format:
    name length (BE4), name bytes, rank (BE4), dims (BE4 each), values
    (float64 LE each)."""
    from .wire import pack_record

    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_HEADER)
        for name, value in params.entries:
            fh.write(pack_record(name, value))


def load_checkpoint(path: str) -> ParameterSet:
    from .wire import unpack_records

    with open(path, "rb") as fh:
        header = fh.read(len(CHECKPOINT_HEADER))
        if header != CHECKPOINT_HEADER:
            raise Truncated(f"bad checkpoint header: {header!r}")
        blob = fh.read()
    return ParameterSet(unpack_records(blob), version=0)
