"""Transformer-in-Transformer network with class and distillation tokens.

Layout conventions (used by every function in this module):

* Images are channel-first ``[C, H, W]`` (batches ``[B, C, H, W]``).
* A patch or pixel token is flattened channel-major, then row, then column.
* Patches and the pixel tokens inside a patch are enumerated in row-major
  grid order.

The outer sequence is ``[class; patch_1 .. patch_n; distill]`` so the class
token sits in row 0 and the distillation token in row ``n_patches + 1``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from titn import nn
from titn import tensor as T
from titn.tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    in_channels: int = 3
    patch_size: int = 8
    pixel_size: int = 2
    patch_dim: int = 192
    pixel_dim: int = 12
    depth: int = 12
    outer_heads: int = 3
    inner_heads: int = 2
    mlp_ratio: int = 4
    num_classes: int = 100

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("image_size", "in_channels", "patch_size", "pixel_size", "patch_dim",
                     "pixel_dim", "depth", "outer_heads", "inner_heads", "mlp_ratio", "num_classes"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.patch_size % self.pixel_size:
            raise ConfigError(
                f"patch_size {self.patch_size} is not divisible by pixel_size {self.pixel_size}")
        if self.patch_dim % self.outer_heads:
            raise ConfigError(
                f"patch_dim {self.patch_dim} is not divisible by outer_heads {self.outer_heads}")
        if self.pixel_dim % self.inner_heads:
            raise ConfigError(
                f"pixel_dim {self.pixel_dim} is not divisible by inner_heads {self.inner_heads}")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def n_pixels(self) -> int:
        """Pixel tokens per patch."""
        return (self.patch_size // self.pixel_size) ** 2

    @property
    def seq_len(self) -> int:
        return self.n_patches + 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: int(v) for k, v in d.items()})


# Reference student configurations: 8px patches of 2px pixels, and 16px patches of 4px pixels.
DEFAULT_TITN = ModelConfig()
LARGE_PATCH_TITN = ModelConfig(patch_size=16, pixel_size=4)


# -- token extraction ------------------------------------------------------------

def _blockify(x, size: int):
    """[..., C, H, W] -> [..., (H/size)*(W/size), C*size*size]."""
    x = T.as_tensor(x)
    *lead, c, h, w = x.shape
    if h % size or w % size:
        raise ConfigError(f"extent {h}x{w} is not divisible by block size {size}")
    gh, gw = h // size, w // size
    n = len(lead)
    y = x.reshape(*lead, c, gh, size, gw, size)
    y = T.transpose(y, (*range(n), n + 1, n + 3, n, n + 2, n + 4))
    return y.reshape(*lead, gh * gw, c * size * size)


def _unblockify(tokens, channels: int, height: int, width: int, size: int):
    tokens = T.as_tensor(tokens)
    *lead, _, _ = tokens.shape
    gh, gw = height // size, width // size
    n = len(lead)
    y = tokens.reshape(*lead, gh, gw, channels, size, size)
    y = T.transpose(y, (*range(n), n + 2, n, n + 3, n + 1, n + 4))
    return y.reshape(*lead, channels, height, width)


def patchify(image, p: int):
    """Split ``[C, H, W]`` (or a batch) into non-overlapping ``p x p`` patches."""
    return _blockify(image, p)


def unpatchify(patches, channels: int, image_size: int, p: int):
    return _unblockify(patches, channels, image_size, image_size, p)


def pixelify(patch, m: int):
    """Split a ``[C, p, p]`` patch into ``m x m`` pixel tokens."""
    return _blockify(patch, m)


def unpixelify(tokens, channels: int, p: int, m: int):
    return _unblockify(tokens, channels, p, p, m)


def pixel_tokens(images, cfg: ModelConfig):
    """[B, C, H, W] -> [B, n_patches, n_pixels, C*m*m] in one reshuffle.

    Equivalent to ``pixelify`` applied to every patch of ``patchify``.
    """
    images = T.as_tensor(images)
    b, c, h, w = images.shape
    p, m = cfg.patch_size, cfg.pixel_size
    g, q = h // p, p // m
    y = images.reshape(b, c, g, q, m, g, q, m)
    y = T.transpose(y, (0, 2, 5, 3, 6, 1, 4, 7))
    return y.reshape(b, g * g, q * q, c * m * m)


# -- parameters -------------------------------------------------------------------

@dataclass
class TitnBlock:
    inner: nn.TransformerBlockParams
    bridge: nn.LinearParams
    outer: nn.TransformerBlockParams


@dataclass
class TitnModel:
    config: ModelConfig
    pixel_embed: nn.LinearParams
    patch_embed: nn.LinearParams
    class_token: Tensor
    distill_token: Tensor
    outer_pos: Tensor
    inner_pos: Tensor
    blocks: list = field(default_factory=list)
    final_norm: Optional[nn.LayerNormParams] = None
    class_head: Optional[nn.LinearParams] = None
    distill_head: Optional[nn.LinearParams] = None

    @classmethod
    def init(cls, config: ModelConfig, seed=0, dtype=np.float64) -> "TitnModel":
        """Truncated-normal(0.02) weights, zero biases, unit norm scales,
        normal(0.02) tokens and positional embeddings."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        c = config
        d, e = c.patch_dim, c.pixel_dim

        def normal(shape):
            return Tensor((rng.standard_normal(shape) * 0.02).astype(dtype), requires_grad=True)

        return cls(
            config=c,
            pixel_embed=nn.LinearParams.init(rng, c.in_channels * c.pixel_size ** 2, e, dtype),
            patch_embed=nn.LinearParams.init(rng, c.n_pixels * e, d, dtype),
            class_token=normal(d),
            distill_token=normal(d),
            outer_pos=normal((c.seq_len, d)),
            inner_pos=normal((c.n_pixels, e)),
            blocks=[
                TitnBlock(
                    inner=nn.TransformerBlockParams.init(rng, e, c.inner_heads, c.mlp_ratio, dtype),
                    bridge=nn.LinearParams.init(rng, c.n_pixels * e, d, dtype),
                    outer=nn.TransformerBlockParams.init(rng, d, c.outer_heads, c.mlp_ratio, dtype),
                )
                for _ in range(c.depth)
            ],
            final_norm=nn.LayerNormParams.init(d, dtype=dtype),
            class_head=nn.LinearParams.init(rng, d, c.num_classes, dtype),
            distill_head=nn.LinearParams.init(rng, d, c.num_classes, dtype),
        )

    def named_parameters(self):
        for f in ("pixel_embed", "patch_embed", "class_token", "distill_token", "outer_pos",
                  "inner_pos", "blocks", "final_norm", "class_head", "distill_head"):
            yield from nn.named_parameters(getattr(self, f), f)

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    @property
    def dtype(self):
        return self.class_token.dtype

    def __call__(self, images, trace: Optional[dict] = None):
        return forward(self, images, trace)


def forward(model: TitnModel, images, trace: Optional[dict] = None):
    """Return ``(class_logits, distill_logits)``, each ``[B, num_classes]``.

    ``trace``, when given, receives the zero-padded patch residual of every
    depth step under ``"patch_residuals"`` and the final outer sequence
    under ``"outer"``.
    """
    cfg = model.config
    x = images.data if isinstance(images, Tensor) else np.asarray(images)
    if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
        raise ConfigError(
            f"batch shape {x.shape} does not match config "
            f"[B, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}]")
    x = Tensor(x.astype(model.dtype, copy=False))
    b = x.shape[0]
    n, q, d = cfg.n_patches, cfg.n_pixels, cfg.patch_dim

    pixels = nn.linear(pixel_tokens(x, cfg), model.pixel_embed)  # [B, n, q, e]
    # the outer patch token is a linear map of the patch's concatenated pixel embeddings
    patches = nn.linear(pixels.reshape(b, n, q * cfg.pixel_dim), model.patch_embed)
    pixels = (pixels + model.inner_pos).reshape(b * n, q, cfg.pixel_dim)

    cls_tok = T.broadcast_to(model.class_token.reshape(1, 1, d), (b, 1, d))
    dist_tok = T.broadcast_to(model.distill_token.reshape(1, 1, d), (b, 1, d))
    outer = T.concat([cls_tok, patches, dist_tok], axis=1) + model.outer_pos

    pad = np.zeros((b, 1, d), dtype=model.dtype)
    residuals = [] if trace is not None else None
    for blk in model.blocks:
        pixels = nn.transformer_block(pixels, blk.inner)
        bridged = nn.linear(pixels.reshape(b, n, q * cfg.pixel_dim), blk.bridge)
        padded = T.concat([Tensor(pad), bridged, Tensor(pad)], axis=1)
        if residuals is not None:
            residuals.append(padded.data)
        outer = nn.transformer_block(outer + padded, blk.outer)

    if trace is not None:
        trace["patch_residuals"] = residuals
        trace["outer"] = outer.data
    outer = nn.layer_norm(outer, model.final_norm)
    class_logits = nn.linear(outer[:, 0], model.class_head)
    distill_logits = nn.linear(outer[:, n + 1], model.distill_head)
    return class_logits, distill_logits


def fuse_logits(class_logits, distill_logits) -> np.ndarray:
    """Inference-time prediction scores: mean of the two heads."""
    c = class_logits.data if isinstance(class_logits, Tensor) else class_logits
    t = distill_logits.data if isinstance(distill_logits, Tensor) else distill_logits
    return 0.5 * (c + t)


# -- accounting -------------------------------------------------------------------

def _linear_count(d_in: int, d_out: int) -> int:
    return d_in * d_out + d_out


def _block_counts(d: int, ratio: int) -> dict:
    return {
        "norm1": 2 * d,
        "attn": 4 * d * d,
        "norm2": 2 * d,
        "mlp": _linear_count(d, ratio * d) + _linear_count(ratio * d, d),
    }


def layer_table(cfg: ModelConfig) -> list[dict]:
    """Per-component learnable scalar counts, in parameter order."""
    d, e = cfg.patch_dim, cfg.pixel_dim
    rows = [
        ("pixel_embed", _linear_count(cfg.in_channels * cfg.pixel_size ** 2, e)),
        ("patch_embed", _linear_count(cfg.n_pixels * e, d)),
        ("class_token", d),
        ("distill_token", d),
        ("outer_pos", cfg.seq_len * d),
        ("inner_pos", cfg.n_pixels * e),
    ]
    for i in range(cfg.depth):
        rows += [(f"blocks.{i}.inner.{k}", v) for k, v in _block_counts(e, cfg.mlp_ratio).items()]
        rows.append((f"blocks.{i}.bridge", _linear_count(cfg.n_pixels * e, d)))
        rows += [(f"blocks.{i}.outer.{k}", v) for k, v in _block_counts(d, cfg.mlp_ratio).items()]
    rows += [
        ("final_norm", 2 * d),
        ("class_head", _linear_count(d, cfg.num_classes)),
        ("distill_head", _linear_count(d, cfg.num_classes)),
    ]
    return [{"name": n, "params": c} for n, c in rows]


def parameter_count(cfg: ModelConfig) -> int:
    return sum(r["params"] for r in layer_table(cfg))


def _block_macs(tokens: int, d: int, ratio: int) -> dict:
    return {
        "qkv": 3 * tokens * d * d,
        "scores": tokens * tokens * d,
        "mix": tokens * tokens * d,
        "proj": tokens * d * d,
        "mlp": 2 * tokens * d * ratio * d,
    }


def flops_table(cfg: ModelConfig) -> list[dict]:
    """Matmul FLOPs (2 x multiply-accumulates) of one image's forward pass."""
    d, e = cfg.patch_dim, cfg.pixel_dim
    n, q = cfg.n_patches, cfg.n_pixels
    rows = [
        ("pixel_embed", n * q * cfg.in_channels * cfg.pixel_size ** 2 * e),
        ("patch_embed", n * q * e * d),
    ]
    for i in range(cfg.depth):
        rows += [(f"blocks.{i}.inner.{k}", n * v) for k, v in _block_macs(q, e, cfg.mlp_ratio).items()]
        rows.append((f"blocks.{i}.bridge", n * q * e * d))
        rows += [(f"blocks.{i}.outer.{k}", v) for k, v in _block_macs(cfg.seq_len, d, cfg.mlp_ratio).items()]
    rows += [("class_head", d * cfg.num_classes), ("distill_head", d * cfg.num_classes)]
    return [{"name": name, "flops": 2 * macs} for name, macs in rows]


def flops_per_image(cfg: ModelConfig) -> int:
    return sum(r["flops"] for r in flops_table(cfg))


# -- checkpoint file ----------------------------------------------------------------
#
#   magic      4 bytes  b"TITN"
#   version    u32
#   meta_len   u32, then meta_len bytes of UTF-8 JSON: {"config": {...}, "meta": {...}}
#   n_params   u32
#   per parameter, in named_parameters() order:
#     name_len u32, name (UTF-8)
#     dtype    u8   (4 = float32, 8 = float64)
#     rank     u32, then rank x u32 extents
#     data     prod(extents) little-endian floats, row-major
#
# All integers are little-endian.

CHECKPOINT_MAGIC = b"TITN"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: TitnModel, meta: Optional[dict] = None) -> None:
    header = json.dumps({"config": model.config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    params = list(model.named_parameters())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(params)))
        for name, p in params:
            raw = name.encode()
            arr = p.data
            width = arr.dtype.itemsize
            if width not in (4, 8):
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BI", width, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path) -> tuple[TitnModel, dict]:
    """Read a checkpoint; returns the model and its free-form ``meta`` dict."""
    buf = Path(path).read_bytes()
    try:
        return _parse_checkpoint(buf, path)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc


def _parse_checkpoint(buf: bytes, path) -> tuple[TitnModel, dict]:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    version, meta_len = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 12
    header = json.loads(buf[pos:pos + meta_len].decode())
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        width, rank = struct.unpack_from("<BI", buf, pos)
        pos += 5
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        dtype = np.dtype("<f4" if width == 4 else "<f8")
        nbytes = int(np.prod(shape, dtype=np.int64)) * width
        if pos + nbytes > len(buf):
            raise CheckpointError(f"{path}: truncated tensor {name}")
        state[name] = np.frombuffer(buf, dtype=dtype, count=nbytes // width, offset=pos).reshape(shape).astype(dtype.newbyteorder("="))
        pos += nbytes
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    config = ModelConfig.from_dict(header["config"])
    dtype = next(iter(state.values())).dtype if state else np.float64
    model = TitnModel.init(config, seed=0, dtype=dtype)
    model.load_state_dict(state)
    return model, header.get("meta", {})
