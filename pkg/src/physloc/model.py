"""Dual-stream encoders and the physical projection heads.

The image stream box-averages the raster onto a patch grid and projects it
with position-specific weights before pooling, so orientation and texture
survive into the global embedding; a shared projection followed by mean
pooling would reduce every image to its mean color. The text stream is an
embedding table plus positional offsets through one position-wise tanh
layer; its token sequence feeds three attention heads (color, structure,
texture) whose outputs live in the corresponding signature histogram
spaces.

All forward math runs on the reverse-mode tape in numerics, so the same
code path serves evaluation and gradient training.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numerics as nx
from .errors import (
    ConfigError,
    ContractError,
    CorruptionError,
    DataError,
    DegenerateInputError,
    DimensionError,
    FormatError,
    TruncatedDataError,
    ValidationError,
)
from .signatures import Image, SignatureConfig

_CKPT_MAGIC = b"PLNT"
_CKPT_VERSION = 1
_FNV_OFFSET = 14695981039346656037
_FNV_PRIME = 1099511628211

# additive mask value; exp(-1e30 - max) underflows to exactly 0.0, which is
# what gives padding positions exactly zero attention mass
_MASK_NEG = -1e30

_INIT_TEMP = 0.07

BRANCHES = ("color", "struc", "tex")


@dataclass(frozen=True)
class ModelConfig:
    """Widths and table sizes for both streams.

    hidden_dim = 0 means "same as embed_dim". color_dim must be divisible
    by 3 (one histogram per channel).
    """

    embed_dim: int
    vocab_size: int
    max_len: int = 300
    patch_grid: int = 8
    hidden_dim: int = 0
    color_dim: int = 48
    struc_dim: int = 18
    tex_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim < 8:
            raise ValidationError(f"embed_dim must be >= 8, got {self.embed_dim}")
        if self.vocab_size < 2:
            raise ValidationError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.max_len < 1:
            raise ValidationError(f"max_len must be >= 1, got {self.max_len}")
        if self.patch_grid < 1:
            raise ValidationError(f"patch_grid must be >= 1, got {self.patch_grid}")
        if self.hidden_dim < 0:
            raise ValidationError(f"hidden_dim must be >= 0, got {self.hidden_dim}")
        for name in ("color_dim", "struc_dim", "tex_dim"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.color_dim % 3:
            raise ValidationError(
                f"color_dim must be divisible by 3, got {self.color_dim}"
            )

    @property
    def mlp_dim(self) -> int:
        return self.hidden_dim or self.embed_dim

    def branch_dim(self, branch: str) -> int:
        return {"color": self.color_dim, "struc": self.struc_dim, "tex": self.tex_dim}[branch]

    @classmethod
    def for_signatures(cls, sig_cfg: SignatureConfig, **kw) -> "ModelConfig":
        return cls(
            color_dim=3 * sig_cfg.color_bins,
            struc_dim=sig_cfg.orient_bins,
            tex_dim=sig_cfg.texture_bins,
            **kw,
        )

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "vocab_size": self.vocab_size,
            "max_len": self.max_len,
            "patch_grid": self.patch_grid,
            "hidden_dim": self.hidden_dim,
            "color_dim": self.color_dim,
            "struc_dim": self.struc_dim,
            "tex_dim": self.tex_dim,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: int(v) for k, v in d.items()})


def _registry_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter tensor, in construction order."""
    d, h, g = cfg.embed_dim, cfg.mlp_dim, cfg.patch_grid
    shapes: dict[str, tuple[int, ...]] = {
        "tok_embed": (cfg.vocab_size, d),
        "pos_embed": (cfg.max_len, d),
        "txt_ff_w": (d, d),
        "txt_ff_b": (d,),
        "patch_w": (3 * g * g, d),
        "patch_b": (d,),
        "img_w1": (d, h),
        "img_b1": (h,),
        "img_w2": (h, d),
        "img_b2": (d,),
    }
    for b in BRANCHES:
        shapes[f"query_{b}"] = (1, d)
    shapes["key_w"] = (d, d)
    for b in BRANCHES:
        shapes[f"value_{b}_w"] = (d, cfg.branch_dim(b))
    for b in BRANCHES:
        shapes[f"ln_{b}_gain"] = (cfg.branch_dim(b),)
        shapes[f"ln_{b}_bias"] = (cfg.branch_dim(b),)
    shapes["log_temp"] = (1,)
    shapes["log_temp_phy"] = (1,)
    return shapes


# zeros, ones, or a constant; everything else draws from the seeded uniform
_FIXED_INIT = {
    "txt_ff_b": 0.0,
    "patch_b": 0.0,
    "img_b1": 0.0,
    "img_b2": 0.0,
    "ln_color_gain": 1.0,
    "ln_struc_gain": 1.0,
    "ln_tex_gain": 1.0,
    "ln_color_bias": 0.0,
    "ln_struc_bias": 0.0,
    "ln_tex_bias": 0.0,
    "log_temp": float(np.log(_INIT_TEMP)),
    "log_temp_phy": float(np.log(_INIT_TEMP)),
}


@dataclass
class ModelParams:
    """Parameter registry: every tensor appears exactly once under its name."""

    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def _uniform_limit(shape: tuple[int, ...]) -> float:
    if len(shape) == 2:
        fan_in, fan_out = shape
    else:
        fan_in = fan_out = shape[0]
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(cfg: ModelConfig, seed: int | None = None) -> ModelParams:
    """Seeded init: uniform(-a, a) with a = sqrt(6/(fan_in+fan_out)) for
    drawn tensors; biases start at zero, gains at one, temperatures at 0.07.
    """
    if seed is None:
        seed = cfg.seed
    rng = np.random.Generator(np.random.PCG64(seed))
    tensors: dict[str, np.ndarray] = {}
    for name, shape in _registry_shapes(cfg).items():
        if name in _FIXED_INIT:
            tensors[name] = np.full(shape, _FIXED_INIT[name], dtype=np.float64)
        else:
            a = _uniform_limit(shape)
            tensors[name] = rng.uniform(-a, a, size=shape)
    return ModelParams(config=cfg, tensors=tensors)


def wrap_params(tape: nx.GradientTape, params: ModelParams) -> dict[str, nx.Tensor]:
    """Watch every tensor on the tape under its registry name."""
    out = {}
    for name in params.names():
        t = nx.Tensor(params.tensors[name])
        tape.watch(t, name)
        out[name] = t
    return out


def constant_params(params: ModelParams) -> dict[str, nx.Tensor]:
    return {name: nx.Tensor(arr) for name, arr in params.tensors.items()}


# ---------------------------------------------------------------------------
# Forward pieces


def patch_means(img: Image, grid: int) -> np.ndarray:
    """Box-average onto a grid x grid x 3 block and flatten; values in [0,1].

    A fixed preprocessing step, not part of the differentiable graph.
    """
    h, w = img.height, img.width
    if h % grid or w % grid:
        raise DimensionError(
            f"image {h}x{w} does not divide into a {grid}x{grid} patch grid"
        )
    px = img.pixels.astype(np.float64) / 255.0
    blocks = px.reshape(grid, h // grid, grid, w // grid, 3)
    return blocks.mean(axis=(1, 3)).reshape(-1)


def _image_rows(p: Mapping[str, nx.Tensor], x) -> nx.Tensor:
    """(N, 3 G^2) patch means -> (N, D) unit-norm image embeddings.

    The matmul sums position-specific patch projections; dividing by the
    patch count makes that sum the mean pool.
    """
    n_patches = p["patch_w"].shape[0] // 3
    pooled = nx.add(nx.mul(nx.matmul(x, p["patch_w"]), 1.0 / n_patches), p["patch_b"])
    hidden = nx.tanh(nx.add(nx.matmul(pooled, p["img_w1"]), p["img_b1"]))
    out = nx.add(nx.matmul(hidden, p["img_w2"]), p["img_b2"])
    return nx.l2_normalize_rows(out)


def _token_mask(valid_lens: np.ndarray, max_len: int) -> np.ndarray:
    return (np.arange(max_len)[None, :] < np.asarray(valid_lens)[:, None]).astype(
        np.float64
    )


def _text_rows(
    p: Mapping[str, nx.Tensor], token_ids: np.ndarray, valid_lens: np.ndarray
) -> tuple[nx.Tensor, nx.Tensor, np.ndarray]:
    """Token ids (N, L) -> (token sequence (N L, D), unit t rows (N, D), mask)."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 2:
        raise DimensionError(f"token ids must be (N, L), got {ids.shape}")
    n, length = ids.shape
    if length != p["pos_embed"].shape[0]:
        raise DimensionError(
            f"token length {length} does not match positional table "
            f"{p['pos_embed'].shape[0]}"
        )
    valid = np.asarray(valid_lens, dtype=np.int64)
    if valid.shape != (n,):
        raise DimensionError(f"valid_lens shape {valid.shape} does not match batch {n}")
    if (valid < 1).any():
        bad = int(np.flatnonzero(valid < 1)[0])
        raise DegenerateInputError(f"sample {bad} has no valid tokens")
    if (valid > length).any():
        raise ContractError("valid_len exceeds token length")

    emb = nx.gather_rows(p["tok_embed"], ids.reshape(-1))
    pos = nx.tile_rows(p["pos_embed"], n)
    base = nx.add(emb, pos)
    seq = nx.tanh(nx.add(nx.matmul(base, p["txt_ff_w"]), p["txt_ff_b"]))
    mask = _token_mask(valid, length)

    masked = nx.mul(seq, mask.reshape(-1, 1))
    summed = nx.sum_(nx.reshape(masked, (n, length, seq.shape[1])), axis=1)
    t_rows = nx.l2_normalize_rows(nx.div(summed, valid[:, None].astype(np.float64)))
    return seq, t_rows, mask


def _phys_rows(
    p: Mapping[str, nx.Tensor], seq: nx.Tensor, mask: np.ndarray
) -> dict[str, tuple[nx.Tensor, nx.Tensor]]:
    """Per branch: (attention (N, L), descriptor rows (N, dim_k))."""
    n, length = mask.shape
    d = p["key_w"].shape[0]
    keys = nx.matmul(seq, p["key_w"])
    scale = 1.0 / float(np.sqrt(d))
    neg = (1.0 - mask) * _MASK_NEG
    out = {}
    for b in BRANCHES:
        logits = nx.matmul(keys, nx.transpose(p[f"query_{b}"]))
        logits = nx.add(nx.mul(nx.reshape(logits, (n, length)), scale), neg)
        attn = nx.softmax(logits, axis=-1)
        values = nx.matmul(seq, p[f"value_{b}_w"])
        weighted = nx.mul(values, nx.reshape(attn, (-1, 1)))
        pooled = nx.sum_(nx.reshape(weighted, (n, length, values.shape[1])), axis=1)
        desc = nx.layernorm(pooled, p[f"ln_{b}_gain"], p[f"ln_{b}_bias"])
        out[b] = (attn, desc)
    return out


@dataclass
class BatchOutputs:
    """Tape nodes for one forward pass over a batch."""

    v_rows: nx.Tensor
    t_rows: nx.Tensor
    descriptors: dict[str, nx.Tensor]
    attention: dict[str, nx.Tensor]


def forward_batch(
    p: Mapping[str, nx.Tensor],
    patch_x: np.ndarray,
    token_ids: np.ndarray,
    valid_lens: np.ndarray,
) -> BatchOutputs:
    """Full differentiable forward over aligned image/text arrays."""
    v_rows = _image_rows(p, np.asarray(patch_x, dtype=np.float64))
    seq, t_rows, mask = _text_rows(p, token_ids, valid_lens)
    heads = _phys_rows(p, seq, mask)
    return BatchOutputs(
        v_rows=v_rows,
        t_rows=t_rows,
        descriptors={b: heads[b][1] for b in BRANCHES},
        attention={b: heads[b][0] for b in BRANCHES},
    )


# ---------------------------------------------------------------------------
# Public single-sample views


@dataclass(frozen=True)
class EmbeddingBundle:
    """One encoded sample; v is None for text-only encoding."""

    v: np.ndarray | None
    t: np.ndarray | None
    seq: np.ndarray | None
    valid_len: int


@dataclass(frozen=True)
class PhysicalDescriptors:
    """Per-branch descriptor vectors and their attention maps.

    Attention rows cover the full padded length; padding positions hold
    exactly zero mass and each row sums to 1 over the valid prefix.
    """

    color: np.ndarray
    struc: np.ndarray
    tex: np.ndarray
    attention: dict[str, np.ndarray]


def encode_image(img: Image, params: ModelParams) -> np.ndarray:
    """Unit-norm global image embedding."""
    x = patch_means(img, params.config.patch_grid)[None, :]
    return _image_rows(constant_params(params), x).data[0].copy()


def encode_text(tokens, params: ModelParams) -> EmbeddingBundle:
    """Unit-norm global text embedding plus the token-level sequence."""
    ids = np.asarray(tokens.ids, dtype=np.int64)[None, :]
    seq, t_rows, _ = _text_rows(
        constant_params(params), ids, np.array([tokens.length])
    )
    length = ids.shape[1]
    return EmbeddingBundle(
        v=None,
        t=t_rows.data[0].copy(),
        seq=seq.data.reshape(length, -1).copy(),
        valid_len=int(tokens.length),
    )


def project_physical(seq: np.ndarray, valid_len: int, params: ModelParams) -> PhysicalDescriptors:
    """Project a token sequence into the three signature spaces."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2:
        raise DimensionError(f"token sequence must be (L, D), got {seq.shape}")
    if valid_len < 1:
        raise DegenerateInputError("need at least one valid token")
    if valid_len > seq.shape[0]:
        raise ContractError("valid_len exceeds sequence length")
    p = constant_params(params)
    mask = _token_mask(np.array([valid_len]), seq.shape[0])
    heads = _phys_rows(p, nx.Tensor(seq), mask)
    return PhysicalDescriptors(
        color=heads["color"][1].data[0].copy(),
        struc=heads["struc"][1].data[0].copy(),
        tex=heads["tex"][1].data[0].copy(),
        attention={b: heads[b][0].data[0].copy() for b in BRANCHES},
    )


# ---------------------------------------------------------------------------
# Checkpointing


def _fnv1a(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def save_checkpoint(params: ModelParams, path, vocab: dict | None = None,
                    extra: dict | None = None) -> int:
    """Write config, optional vocab/extra JSON, and all tensors; returns the
    content hash stored in the trailer."""
    shapes = _registry_shapes(params.config)
    if set(shapes) != set(params.tensors):
        missing = set(shapes) ^ set(params.tensors)
        raise ContractError(f"parameter registry incomplete: {sorted(missing)}")
    blob = json.dumps(
        {"config": params.config.to_dict(), "vocab": vocab, "extra": extra or {}},
        sort_keys=True,
    ).encode("utf-8")
    parts = [_CKPT_MAGIC, struct.pack("<HI", _CKPT_VERSION, len(blob)), blob,
             struct.pack("<I", len(params.tensors))]
    for name in params.names():
        arr = np.ascontiguousarray(params.tensors[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    digest = _fnv1a(body)
    Path(path).write_bytes(body + struct.pack("<Q", digest))
    return digest


def load_checkpoint(path, expect: ModelConfig | None = None):
    """Read a checkpoint; returns (params, vocab dict or None, extra dict)."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if len(data) < 4 + 6 + 8:
        raise TruncatedDataError(f"checkpoint {path} shorter than its fixed fields")
    if data[:4] != _CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:4]!r}")
    body, trailer = data[:-8], data[-8:]
    (stored,) = struct.unpack("<Q", trailer)
    if _fnv1a(body) != stored:
        raise CorruptionError(f"checkpoint {path} content hash mismatch")
    version, blob_len = struct.unpack_from("<HI", body, 4)
    if version != _CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos = 10
    try:
        meta = json.loads(body[pos:pos + blob_len].decode("utf-8"))
        cfg = ModelConfig.from_dict(meta["config"])
    except (ValueError, KeyError, TypeError) as e:
        raise CorruptionError(f"checkpoint {path} metadata unreadable: {e}") from e
    pos += blob_len
    if expect is not None and cfg != expect:
        raise ConfigError(
            f"checkpoint was built for {cfg.to_dict()}, expected {expect.to_dict()}"
        )
    shapes = _registry_shapes(cfg)
    tensors: dict[str, np.ndarray] = {}
    try:
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            if pos + 8 * size > len(body):
                raise TruncatedDataError(f"checkpoint tensor {name!r} truncated")
            arr = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            if name in tensors:
                raise CorruptionError(f"checkpoint repeats tensor {name!r}")
            if name not in shapes:
                raise CorruptionError(f"checkpoint has unknown tensor {name!r}")
            if tuple(shape) != shapes[name]:
                raise CorruptionError(
                    f"tensor {name!r} has shape {tuple(shape)}, config implies {shapes[name]}"
                )
            tensors[name] = arr.astype(np.float64)
    except struct.error as e:
        raise TruncatedDataError(f"checkpoint {path} table truncated: {e}") from e
    if set(tensors) != set(shapes):
        raise CorruptionError("checkpoint tensor table incomplete")
    return ModelParams(config=cfg, tensors=tensors), meta.get("vocab"), meta.get("extra", {})
