"""Vision Transformer encoder with a DINO projection head.

Pre-norm blocks, exact GELU MLP (ratio 4), learned positional embeddings
that are bilinearly resized when the patch grid differs from the one the
model was built for.

Checkpoint layout (little-endian)::

    b"GSDG" | u16 version | config block | u32 n_records | records | u32 meta_len | meta JSON
    config block: u16 image_size, u16 bands, u16 patch_size, u16 depth,
                  u32 dim, u16 heads, u32 proto_count, u16 mlp_ratio, f64 ln_eps
    record:       u16 name_len | name (utf-8) | u8 rank | u32 extent * rank | f32 data

Parameter records are written in :func:`param_shapes` order; training
checkpoints append optimiser and teacher/student records after them.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numerics as nx
from .errors import ConfigError, FormatError, InvalidValue, NumericalError, ShapeError
from .numerics import Tensor

MAGIC = b"GSDG"
VERSION = 1
_CONFIG_FMT = "<HHHHIHIHd"


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    bands: int = 3
    patch_size: int = 8
    depth: int = 4
    dim: int = 64
    heads: int = 4
    proto_count: int = 256
    mlp_ratio: int = 4
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("image_size", "bands", "patch_size", "depth", "dim", "heads",
                     "proto_count", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if not self.ln_eps > 0:
            raise ConfigError("ln_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid ** 2

    @property
    def patch_len(self) -> int:
        return self.bands * self.patch_size ** 2

    @property
    def head_hidden(self) -> int:
        return 2 * self.dim

    @property
    def bottleneck(self) -> int:
        return self.dim


PRESETS = {
    "desk": ModelConfig(image_size=32, bands=3, patch_size=8, depth=4, dim=64, heads=4, proto_count=256),
    "base": ModelConfig(image_size=224, bands=3, patch_size=8, depth=12, dim=768, heads=12, proto_count=4096),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return ModelConfig(**{**asdict(cfg), **overrides}) if overrides else cfg


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, hid, mlp = cfg.dim, cfg.head_hidden, cfg.mlp_ratio * cfg.dim
    shapes = [
        ("patch_embed.weight", (cfg.patch_len, d)),
        ("patch_embed.bias", (d,)),
        ("cls_token", (d,)),
        ("pos_embed", (cfg.tokens + 1, d)),
    ]
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        shapes += [
            (b + "norm1.gain", (d,)), (b + "norm1.bias", (d,)),
            (b + "attn.q.weight", (d, d)), (b + "attn.q.bias", (d,)),
            (b + "attn.k.weight", (d, d)), (b + "attn.k.bias", (d,)),
            (b + "attn.v.weight", (d, d)), (b + "attn.v.bias", (d,)),
            (b + "attn.proj.weight", (d, d)), (b + "attn.proj.bias", (d,)),
            (b + "norm2.gain", (d,)), (b + "norm2.bias", (d,)),
            (b + "mlp.fc1.weight", (d, mlp)), (b + "mlp.fc1.bias", (mlp,)),
            (b + "mlp.fc2.weight", (mlp, d)), (b + "mlp.fc2.bias", (d,)),
        ]
    shapes += [
        ("norm.gain", (d,)), ("norm.bias", (d,)),
        ("head.fc1.weight", (d, hid)), ("head.fc1.bias", (hid,)),
        ("head.fc2.weight", (hid, hid)), ("head.fc2.bias", (hid,)),
        ("head.fc3.weight", (hid, cfg.bottleneck)), ("head.fc3.bias", (cfg.bottleneck,)),
        ("head.last.weight", (cfg.bottleneck, cfg.proto_count)),
    ]
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for _, s in param_shapes(cfg))


def is_decayed(name: str) -> bool:
    """Weight decay applies to matrices only, not biases, norms or tokens."""
    return name.endswith(".weight")


@dataclass
class VitParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.config)
        if [n for n, _ in expected] != list(self.tensors):
            raise ShapeError("parameter names/order do not match the config")
        for name, shape in expected:
            if self.tensors[name].shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {self.tensors[name].shape}")

    def as_tensors(self, requires_grad: bool = False, dtype=None) -> dict[str, Tensor]:
        return {k: Tensor(v if dtype is None else v.astype(dtype), requires_grad=requires_grad)
                for k, v in self.tensors.items()}

    def astype(self, dtype) -> "VitParams":
        return VitParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "VitParams":
        return VitParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(cfg: ModelConfig, seed: int, std: float = 0.02) -> VitParams:
    """Truncated-normal (±2 std) weights and tokens, zero biases, unit norm gains."""
    if not isinstance(cfg, ModelConfig):
        raise ConfigError("init_params needs a ModelConfig")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(cfg):
        if name.endswith(".gain"):
            arr = np.ones(shape)
        elif name.endswith(".bias"):
            arr = np.zeros(shape)
        else:
            arr = _trunc_normal(rng, shape, std)
        tensors[name] = arr.astype(np.float32)
    return VitParams(cfg, tensors)


# --- patches -----------------------------------------------------------------

def patchify(tile, patch_size: int):
    """``(bands, H, W)`` or ``(B, bands, H, W)`` -> ``(..., tokens, bands*p*p)``.

    Tokens run row-major over the patch grid; each token is flattened as
    (band, row-within-patch, col-within-patch). Accepts arrays or Tensors.
    """
    t = tile if isinstance(tile, Tensor) else Tensor(np.asarray(tile))
    single = t.ndim == 3
    if single:
        t = nx.reshape(t, (1,) + t.shape)
    if t.ndim != 4:
        raise ShapeError(f"expected (bands, H, W) raster, got shape {tile.shape}")
    b, c, h, w = t.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"raster {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = nx.reshape(t, (b, c, gh, p, gw, p))
    x = nx.transpose(x, (0, 2, 4, 1, 3, 5))
    x = nx.reshape(x, (b, gh * gw, c * p * p))
    if single:
        x = nx.reshape(x, x.shape[1:])
    return x if isinstance(tile, Tensor) else x.data


def unpatchify(tokens: np.ndarray, patch_size: int, bands: int, height: int, width: int) -> np.ndarray:
    p = patch_size
    gh, gw = height // p, width // p
    x = np.asarray(tokens).reshape(gh, gw, bands, p, p)
    return x.transpose(2, 0, 3, 1, 4).reshape(bands, height, width)


# --- attention ---------------------------------------------------------------

def attention(q, k, v):
    """``softmax(q k^T / sqrt(d_k)) v`` over the last two axes.

    Returns ``(output, weights)``; weights are row-stochastic over keys.
    """
    q, k, v = (x if isinstance(x, Tensor) else Tensor(np.asarray(x)) for x in (q, k, v))
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2] or q.shape[:-2] != k.shape[:-2]:
        raise ShapeError(f"incompatible q/k/v shapes {q.shape}, {k.shape}, {v.shape}")
    scores = nx.mul(nx.matmul(q, nx.swap_last(k)), 1.0 / math.sqrt(q.shape[-1]))
    weights = nx.softmax(scores, axis=-1)
    return nx.matmul(weights, v), weights


def _pos_embed(P: Mapping[str, Tensor], cfg: ModelConfig, gh: int, gw: int) -> Tensor:
    pos = P["pos_embed"]
    if (gh, gw) == (cfg.grid, cfg.grid):
        return pos
    wr = nx.bilinear_weights(cfg.grid, gh, pos.dtype)
    wc = nx.bilinear_weights(cfg.grid, gw, pos.dtype)
    interp = Tensor(np.kron(wr, wc))
    return nx.concat([pos[0:1], nx.matmul(interp, pos[1:])], axis=0)


def _block(P, pre: str, x: Tensor, cfg: ModelConfig, keep_maps: bool):
    b, t, d = x.shape
    h_, hd = cfg.heads, cfg.head_dim

    def heads(name):
        y = nx.linear(h, P[pre + f"attn.{name}.weight"], P[pre + f"attn.{name}.bias"])
        return nx.transpose(nx.reshape(y, (b, t, h_, hd)), (0, 2, 1, 3))

    h = nx.layer_norm(x, P[pre + "norm1.gain"], P[pre + "norm1.bias"], cfg.ln_eps)
    out, weights = attention(heads("q"), heads("k"), heads("v"))
    out = nx.reshape(nx.transpose(out, (0, 2, 1, 3)), (b, t, d))
    x = x + nx.linear(out, P[pre + "attn.proj.weight"], P[pre + "attn.proj.bias"])
    h = nx.layer_norm(x, P[pre + "norm2.gain"], P[pre + "norm2.bias"], cfg.ln_eps)
    h = nx.gelu(nx.linear(h, P[pre + "mlp.fc1.weight"], P[pre + "mlp.fc1.bias"]))
    x = x + nx.linear(h, P[pre + "mlp.fc2.weight"], P[pre + "mlp.fc2.bias"])
    return x, (weights.data if keep_maps else None)


def encode(P: Mapping[str, Tensor], cfg: ModelConfig, images, *, keep_maps=False, upto: int | None = None):
    """Run the encoder on ``(B, bands, H, W)`` images.

    Returns ``(normed_tokens (B, T+1, dim), maps)`` where ``maps`` is a list of
    ``(B, heads, T+1, T+1)`` arrays (``None`` entries unless ``keep_maps``).
    ``upto`` stops after that block index and skips the final norm.
    """
    images = images if isinstance(images, Tensor) else Tensor(np.asarray(images))
    if images.ndim != 4 or images.shape[1] != cfg.bands:
        raise ShapeError(f"expected (B, {cfg.bands}, H, W) images, got {images.shape}")
    p = cfg.patch_size
    b, _, hgt, wid = images.shape
    if hgt % p or wid % p:
        raise ShapeError(f"image {hgt}x{wid} not divisible by patch size {p}")
    try:
        tokens = nx.linear(patchify(images, p), P["patch_embed.weight"], P["patch_embed.bias"])
        cls = nx.add(Tensor(np.zeros((b, 1, cfg.dim), dtype=tokens.dtype)), P["cls_token"])
        x = nx.concat([cls, tokens], axis=1) + _pos_embed(P, cfg, hgt // p, wid // p)
    except InvalidValue as e:
        raise NumericalError(f"non-finite activations in patch embedding: {e}", layer=-1) from e
    maps = []
    last = cfg.depth - 1 if upto is None else upto
    for i in range(last + 1):
        try:
            x, m = _block(P, f"blocks.{i}.", x, cfg, keep_maps)
        except InvalidValue as e:
            raise NumericalError(f"non-finite activations in block {i}: {e}", layer=i) from e
        maps.append(m)
    if upto is not None:
        return x, maps
    try:
        x = nx.layer_norm(x, P["norm.gain"], P["norm.bias"], cfg.ln_eps)
    except InvalidValue as e:
        raise NumericalError(f"non-finite activations in final norm: {e}", layer=cfg.depth) from e
    return x, maps


def pool(tokens: Tensor, how: str = "cls") -> Tensor:
    if how == "cls":
        return tokens[:, 0]
    if how == "mean":
        return nx.mean(tokens[:, 1:], axis=1)
    raise ConfigError(f"unknown pooling {how!r}; use 'cls' or 'mean'")


def project(P: Mapping[str, Tensor], cfg: ModelConfig, emb: Tensor) -> Tensor:
    """DINO head: 3-layer GELU MLP, L2 normalisation, then prototypes."""
    try:
        h = nx.gelu(nx.linear(emb, P["head.fc1.weight"], P["head.fc1.bias"]))
        h = nx.gelu(nx.linear(h, P["head.fc2.weight"], P["head.fc2.bias"]))
        h = nx.linear(h, P["head.fc3.weight"], P["head.fc3.bias"])
        h = nx.l2_normalize(h, axis=-1)
        protos = nx.l2_normalize(P["head.last.weight"], axis=0)
        return nx.matmul(h, protos)
    except InvalidValue as e:
        raise NumericalError(f"non-finite activations in projection head: {e}", layer=cfg.depth) from e


@dataclass
class AttentionMaps:
    """Per-layer attention weights, each ``(heads, T+1, T+1)``."""

    layers: list[np.ndarray]

    def __getitem__(self, i: int) -> np.ndarray:
        return self.layers[i]

    def __len__(self):
        return len(self.layers)


def _coerce_tile(params: VitParams, tile) -> np.ndarray:
    arr = np.asarray(tile.data if isinstance(tile, Tensor) else tile)
    if arr.ndim != 3 or arr.shape[0] != params.config.bands:
        raise ShapeError(f"expected ({params.config.bands}, H, W) tile, got {arr.shape}")
    return arr


def forward(params: VitParams, tile, pool_by: str = "cls"):
    """Embed a single ``(bands, H, W)`` tile.

    Returns ``(embedding (dim,), head_logits (proto_count,), AttentionMaps)``
    as numpy arrays in the parameter dtype.
    """
    arr = _coerce_tile(params, tile)
    P = params.as_tensors()
    dtype = next(iter(params.tensors.values())).dtype
    tokens, maps = encode(P, params.config, arr[None].astype(dtype), keep_maps=True)
    emb = pool(tokens, pool_by)
    logits = project(P, params.config, emb)
    return emb.data[0], logits.data[0], AttentionMaps([m[0] for m in maps])


def embed_batch(params: VitParams, images: np.ndarray, pool_by: str = "cls") -> np.ndarray:
    P = params.as_tensors()
    dtype = next(iter(params.tensors.values())).dtype
    tokens, _ = encode(P, params.config, np.asarray(images, dtype=dtype))
    return pool(tokens, pool_by).data


@dataclass
class HeadOverlay:
    """CLS-row attention over patches for one layer, one grid per head."""

    layer: int
    weights: np.ndarray        # (heads, T+1, T+1)
    grids: np.ndarray          # (heads, gh, gw)

    @property
    def cls_self_mass(self) -> np.ndarray:
        return self.weights[:, 0, 0]


def attention_maps(params: VitParams, tile, layer: int) -> HeadOverlay:
    cfg = params.config
    if not 0 <= layer < cfg.depth:
        raise ConfigError(f"layer {layer} out of range for depth {cfg.depth}")
    arr = _coerce_tile(params, tile)
    p = cfg.patch_size
    gh, gw = arr.shape[1] // p, arr.shape[2] // p
    dtype = next(iter(params.tensors.values())).dtype
    _, maps = encode(params.as_tensors(), cfg, arr[None].astype(dtype), keep_maps=True, upto=layer)
    w = maps[layer][0]
    return HeadOverlay(layer, w, w[:, 0, 1:].reshape(cfg.heads, gh, gw))


def write_grid_csv(path, grid: np.ndarray) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in grid:
        writer.writerow([repr(float(v)) for v in row])
    _atomic_write(path, buf.getvalue().encode())


def read_grid_csv(path, dtype=np.float32) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)], dtype=dtype)


# --- checkpoints -------------------------------------------------------------

def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(cfg: ModelConfig, records: list[tuple[str, np.ndarray]], meta: dict | None = None) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<H", VERSION)
    out += struct.pack(_CONFIG_FMT, cfg.image_size, cfg.bands, cfg.patch_size, cfg.depth,
                       cfg.dim, cfg.heads, cfg.proto_count, cfg.mlp_ratio, cfg.ln_eps)
    out += struct.pack("<I", len(records))
    for name, arr in records:
        raw = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    out += struct.pack("<I", len(blob)) + blob
    return bytes(out)


def decode_checkpoint(buf: bytes):
    """Parse checkpoint bytes into ``(config, [(name, array)], meta)``."""
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"checkpoint truncated at byte {pos}", offset=pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise FormatError(f"bad magic: expected {MAGIC.decode()!r}", offset=0)
    (version,) = struct.unpack("<H", take(2))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    fields = struct.unpack(_CONFIG_FMT, take(struct.calcsize(_CONFIG_FMT)))
    try:
        cfg = ModelConfig(*fields)
    except ConfigError as e:
        raise FormatError(f"invalid config block: {e}", offset=6) from e
    (n,) = struct.unpack("<I", take(4))
    records = []
    for _ in range(n):
        (ln,) = struct.unpack("<H", take(2))
        name = take(ln).decode()
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        records.append((name, arr))
    (ml,) = struct.unpack("<I", take(4))
    meta = json.loads(take(ml).decode())
    if pos != len(buf):
        raise FormatError(f"trailing bytes after offset {pos}", offset=pos)
    return cfg, records, meta


def save_params(path, params: VitParams, meta: dict | None = None) -> None:
    _atomic_write(path, encode_checkpoint(params.config, list(params.tensors.items()), meta))


def load_params(path) -> VitParams:
    """Load the bare-named parameter records (the teacher in training checkpoints)."""
    cfg, records, _ = decode_checkpoint(Path(path).read_bytes())
    named = dict(records)
    try:
        tensors = {name: named[name] for name, _ in param_shapes(cfg)}
    except KeyError as e:
        raise FormatError(f"checkpoint lacks parameter record {e.args[0]}") from None
    return VitParams(cfg, tensors)
