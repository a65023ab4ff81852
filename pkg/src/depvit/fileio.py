"""Binary tensor container, PPM reading, run configuration, serialization.

The container format is fixed: magic "DVTN", a version word, an entry
count, then per entry a length-prefixed UTF-8 name, a dtype code (0 for
float32, 1 for float64), a rank, the extents, and the raw little-endian
row-major payload.  All multi-byte integers are unsigned 32-bit
little-endian.  Readers fail loudly with the byte offset of the problem.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, UsageError
from .model import ModelConfig, ModelWeights, parameter_shapes
from .tensor import Tensor
from .tree import DependencyTree

MAGIC = b"DVTN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_container(path, entries: dict[str, np.ndarray]) -> None:
    """Write named arrays in declaration order; float32/float64 only."""
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    buf += struct.pack("<I", len(entries))
    for name, arr in entries.items():
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        if arr.dtype not in _CODES:
            raise UsageError(f"entry {name!r} has unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw))
        buf += raw
        buf += struct.pack("<I", _CODES[arr.dtype])
        buf += struct.pack("<I", arr.ndim)
        for ext in arr.shape:
            buf += struct.pack("<I", ext)
        buf += np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes()
    Path(path).write_bytes(bytes(buf))


def read_container(path) -> dict[str, np.ndarray]:
    """Parse a container file back into named arrays, strictly."""
    data = Path(path).read_bytes()
    pos = 0

    def need(nbytes: int, what: str) -> int:
        nonlocal pos
        if len(data) - pos < nbytes:
            raise FormatError(f"truncated while reading {what}", offset=pos)
        start = pos
        pos += nbytes
        return start

    def u32(what: str) -> int:
        start = need(4, what)
        return struct.unpack_from("<I", data, start)[0]

    start = need(4, "magic")
    if data[start:start + 4] != MAGIC:
        raise FormatError("bad magic, not a tensor container", offset=start)
    version_at = pos
    version = u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}", offset=version_at)
    count = u32("entry count")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        nlen = u32(f"name length of entry {i}")
        name_at = need(nlen, f"name of entry {i}")
        try:
            name = data[name_at:name_at + nlen].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"entry {i} name is not UTF-8", offset=name_at) from exc
        if name in out:
            raise FormatError(f"duplicate entry name {name!r}", offset=name_at)
        code_at = pos
        code = u32(f"dtype of {name!r}")
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code}", offset=code_at)
        rank = u32(f"rank of {name!r}")
        shape = tuple(u32(f"extent {d} of {name!r}") for d in range(rank))
        n_elem = 1
        for ext in shape:
            n_elem *= ext
        nbytes = n_elem * _DTYPES[code].itemsize
        payload_at = need(nbytes, f"payload of {name!r}")
        arr = np.frombuffer(data, dtype=_DTYPES[code], count=n_elem,
                            offset=payload_at).reshape(shape)
        out[name] = arr.copy()
    if pos != len(data):
        raise FormatError("trailing bytes after final entry", offset=pos)
    return out


def retrieve_tokens_entry(entries: dict[str, np.ndarray], path) -> np.ndarray:
    """The 'tokens' entry of a feature container, shape-checked to N x C."""
    if "tokens" not in entries:
        raise FormatError(f"{path}: container has no 'tokens' entry", offset=0)
    arr = entries["tokens"]
    if arr.ndim != 2:
        raise FormatError(f"{path}: 'tokens' must be 2-D, got rank {arr.ndim}", offset=0)
    return arr


def save_weights(path, weights: ModelWeights) -> None:
    write_container(path, weights.named_tensors())


def load_weights(path, config: ModelConfig) -> ModelWeights:
    """Rebuild model weights from a container, checking every shape."""
    entries = read_container(path)
    shapes = parameter_shapes(config)
    missing = sorted(set(shapes) - set(entries))
    if missing:
        raise FormatError(f"weights file lacks entries: {', '.join(missing)}", offset=0)
    extra = sorted(set(entries) - set(shapes))
    if extra:
        raise FormatError(f"weights file has unknown entries: {', '.join(extra)}", offset=0)
    tensors: dict[str, Tensor] = {}
    for name, shape in shapes.items():
        arr = entries[name]
        if arr.shape != shape:
            raise FormatError(
                f"entry {name!r} shaped {arr.shape}, config wants {shape}", offset=0
            )
        tensors[name] = Tensor(arr)
    return ModelWeights.from_named_tensors(config, tensors)


def read_ppm(path) -> np.ndarray:
    """Binary P6 image as float32 (H, W, 3) scaled to [0, 1]."""
    data = Path(path).read_bytes()
    pos = 0

    def token(what: str) -> tuple[bytes, int]:
        nonlocal pos
        while pos < len(data):
            c = data[pos:pos + 1]
            if c in b" \t\r\n":
                pos += 1
            elif c == b"#":
                while pos < len(data) and data[pos:pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and data[pos:pos + 1] not in b" \t\r\n#":
            pos += 1
        if start == pos:
            raise FormatError(f"missing {what} in header", offset=start)
        return data[start:pos], start

    def number(what: str) -> int:
        tok, at = token(what)
        try:
            val = int(tok)
        except ValueError as exc:
            raise FormatError(f"{what} is not a number: {tok!r}", offset=at) from exc
        if val <= 0:
            raise FormatError(f"{what} must be positive, got {val}", offset=at)
        return val

    magic, at = token("magic")
    if magic != b"P6":
        raise FormatError(f"not a binary P6 image (got {magic!r})", offset=at)
    width = number("width")
    height = number("height")
    maxval_at = pos
    maxval = number("maxval")
    if maxval != 255:
        raise FormatError(f"only maxval 255 supported, got {maxval}", offset=maxval_at)
    if pos >= len(data) or data[pos:pos + 1] not in b" \t\r\n":
        raise FormatError("expected single whitespace before pixels", offset=pos)
    pos += 1
    nbytes = width * height * 3
    if len(data) - pos < nbytes:
        raise FormatError(
            f"pixel payload needs {nbytes} bytes, {len(data) - pos} left",
            offset=len(data),
        )
    if len(data) - pos > nbytes:
        raise FormatError("trailing bytes after pixel payload", offset=pos + nbytes)
    arr = np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=pos)
    return (arr.reshape(height, width, 3).astype(np.float32)) / 255.0


def write_ppm(path, image: np.ndarray) -> None:
    """Inverse of read_ppm for float images in [0, 1]."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise UsageError("image must be (H, W, 3)")
    h, w = img.shape[:2]
    body = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + body.tobytes())


_CONFIG_DEFAULTS = {
    "image_size": 224,
    "patch_size": 16,
    "channels": 192,
    "heads": 12,
    "layers": 12,
    "temperature": 0.1,
    "prune_layers": (),
    "kept_tokens": (),
    "num_classes": 1000,
    "seed": 0,
    "min_part_size": 0.01,
    "beta2": 0.3,
    "alpha": 1.0,
    "tau_affinity": 0.2,
}
_INT_KEYS = {"image_size", "patch_size", "channels", "heads", "layers",
             "num_classes", "seed"}
_FLOAT_KEYS = {"temperature", "min_part_size", "beta2", "alpha", "tau_affinity"}
_LIST_KEYS = {"prune_layers", "kept_tokens"}


@dataclass(frozen=True)
class RunConfig:
    """Everything a command needs: model dimensions plus protocol knobs."""

    image_size: int = 224
    patch_size: int = 16
    channels: int = 192
    heads: int = 12
    layers: int = 12
    temperature: float = 0.1
    prune_layers: tuple[int, ...] = ()
    kept_tokens: tuple[int, ...] = ()
    num_classes: int = 1000
    seed: int = 0
    min_part_size: float = 0.01
    beta2: float = 0.3
    alpha: float = 1.0
    tau_affinity: float = 0.2

    def __post_init__(self):
        if len(self.prune_layers) != len(self.kept_tokens):
            raise ConfigError(
                "prune_layers and kept_tokens must pair up "
                f"({len(self.prune_layers)} vs {len(self.kept_tokens)})"
            )

    def to_model_config(self) -> ModelConfig:
        return ModelConfig(
            image_size=self.image_size,
            patch_size=self.patch_size,
            channels=self.channels,
            heads=self.heads,
            layers=self.layers,
            temperature=self.temperature,
            prune_schedule=tuple(zip(self.prune_layers, self.kept_tokens)),
            num_classes=self.num_classes,
            seed=self.seed,
        )


def parse_config(text: str) -> RunConfig:
    """key=value lines; # comments and blank lines ignored; keys fixed."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _CONFIG_DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            if key in _INT_KEYS:
                values[key] = int(val)
            elif key in _FLOAT_KEYS:
                values[key] = float(val)
            else:
                values[key] = tuple(int(v) for v in val.split(",") if v.strip()) \
                    if val else ()
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from exc
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def tree_to_json_dict(tree: DependencyTree) -> dict:
    nodes = [
        {
            "id": int(i),
            "parent": int(tree.parent[i]),
            "weight": float(tree.edge_weight[i]),
            "depth": int(tree.depth[i]),
            "subtree": int(tree.subtree[i]),
        }
        for i in range(tree.size)
    ]
    return {"nodes": nodes, "root": int(tree.root)}


def tree_from_json_dict(d: dict) -> DependencyTree:
    try:
        nodes = d["nodes"]
        root = int(d["root"])
        n = len(nodes)
        parent = np.zeros(n, dtype=np.int64)
        weight = np.zeros(n, dtype=np.float64)
        subtree = np.full(n, -1, dtype=np.int64)
        for node in nodes:
            i = int(node["id"])
            parent[i] = int(node["parent"])
            weight[i] = float(node["weight"])
            subtree[i] = int(node.get("subtree", -1))
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise FormatError(f"malformed tree JSON: {exc}", offset=0) from exc
    tree = DependencyTree(parent=parent, edge_weight=weight, root=root,
                          subtree=subtree)
    tree.validate()
    return tree


def tree_to_dot(tree: DependencyTree) -> str:
    """Graphviz digraph, parent -> child, weights as edge labels."""
    lines = ["digraph dependency {"]
    for i in range(tree.size):
        shape = "doublecircle" if i == tree.root else "circle"
        lines.append(f'  n{i} [label="{i}", shape={shape}];')
    for i in range(tree.size):
        p = int(tree.parent[i])
        if p >= 0:
            lines.append(f'  n{p} -> n{i} [label="{tree.edge_weight[i]:.6g}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def mask_to_json_dict(mask: np.ndarray) -> dict:
    m = np.asarray(mask, dtype=np.float64)
    return {"shape": list(m.shape), "data": m.tolist()}


def mask_from_json_dict(d: dict) -> np.ndarray:
    try:
        arr = np.asarray(d["data"], dtype=np.float64)
        if list(arr.shape) != list(d["shape"]):
            raise FormatError("mask data disagrees with declared shape", offset=0)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed mask JSON: {exc}", offset=0) from exc
    return arr


def grid_to_json_dict(grid) -> dict:
    return {
        "width": int(grid.width),
        "height": int(grid.height),
        "labels": np.asarray(grid.labels).tolist(),
    }


def load_grid_values(path) -> np.ndarray:
    """Grid JSON to a raw value array; labels may be soft for saliency."""
    try:
        d = json.loads(Path(path).read_text())
        arr = np.asarray(d["labels"], dtype=np.float64)
        if arr.shape != (int(d["height"]), int(d["width"])):
            raise FormatError("grid labels disagree with declared size", offset=0)
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed grid JSON: {exc}", offset=0) from exc
    return arr


def write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")
