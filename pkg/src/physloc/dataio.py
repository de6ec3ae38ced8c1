"""Corpus plumbing: image codec, manifests, splits, vocabulary, synthesis, cache.

The synthetic generator is the test bed for everything downstream. Each
sample has three ground-truth attributes (a base color, a stripe
orientation, a micro-texture), rendered so the mined signature recovers the
attribute by argmax and the paired text states it in plain words. Images
are built from torus-periodic plane waves, so the circular-padding stencils
in the signature module see no wrap seam.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import struct
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    FormatError,
    ParseError,
    TruncatedDataError,
    UnsupportedFormatError,
    ValidationError,
)
from .signatures import Image, SignatureConfig

__all__ = [
    "Sample",
    "Vocabulary",
    "TokenizedText",
    "decode_ppm",
    "encode_ppm",
    "load_image",
    "load_manifest",
    "write_manifest",
    "resolve_image_path",
    "split_dataset",
    "build_vocab",
    "tokenize",
    "generate_synthetic",
    "write_signature_cache",
    "read_signature_cache",
    "COLOR_CLASSES",
    "TEXTURE_CLASSES",
    "REGIONS",
    "orientation_waves",
]

PAD_ID = 0
UNK_ID = 1

_WORD_RE = re.compile(r"[a-z0-9]+")

# Meters subtended by one degree of latitude on the reference sphere.
_M_PER_DEG = 6_371_000.0 * math.pi / 180.0


@dataclass(frozen=True)
class Sample:
    """One manifest record; ``split`` is None until assigned."""

    id: str
    image: str
    lat: float
    lon: float
    text: str
    region: str
    split: str | None = None


# ---------------------------------------------------------------------------
# PPM binary (P6) codec


def _next_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        c = data[pos]
        if c == 0x23:  # '#': comment runs to end of line
            while pos < n and data[pos] not in (0x0A, 0x0D):
                pos += 1
        elif c in (0x20, 0x09, 0x0A, 0x0D, 0x0B, 0x0C):
            pos += 1
        else:
            break
    start = pos
    while pos < n and data[pos] not in (0x20, 0x09, 0x0A, 0x0D, 0x0B, 0x0C, 0x23):
        pos += 1
    if start == pos:
        raise TruncatedDataError("unexpected end of PPM header")
    return data[start:pos], pos


def decode_ppm(data: bytes) -> Image:
    """Decode binary P6 with maxval 255; header comments are allowed."""
    magic, pos = _next_token(data, 0)
    if magic != b"P6":
        raise FormatError(f"not a binary PPM (magic {magic!r})")
    fields = []
    for _ in range(3):
        tok, pos = _next_token(data, pos)
        if not tok.isdigit():
            raise FormatError(f"non-numeric PPM header field {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"PPM dimensions {width}x{height} invalid")
    if maxval != 255:
        raise UnsupportedFormatError(f"only maxval 255 is supported, got {maxval}")
    # exactly one whitespace byte separates the header from the payload
    if pos >= len(data) or data[pos] not in (0x20, 0x09, 0x0A, 0x0D, 0x0B, 0x0C):
        raise FormatError("missing whitespace before PPM payload")
    pos += 1
    need = 3 * width * height
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise TruncatedDataError(
            f"PPM payload has {len(payload)} bytes, header promises {need}"
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return Image(pixels=pixels.copy())


def encode_ppm(img: Image) -> bytes:
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.pixels.tobytes()


def load_image(path) -> Image:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read image file {path}: {e}") from e
    return decode_ppm(data)


# ---------------------------------------------------------------------------
# Manifest

_REQUIRED_KEYS = ("id", "image", "lat", "lon", "text", "region")


def load_manifest(path) -> list[Sample]:
    """Parse a newline-delimited manifest; errors carry 1-based line numbers."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    samples: list[Sample] = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(f"manifest line {lineno}: invalid record ({e.msg})") from e
        if not isinstance(rec, dict):
            raise ParseError(f"manifest line {lineno}: record is not an object")
        for key in _REQUIRED_KEYS:
            if key not in rec:
                raise ParseError(f"manifest line {lineno}: missing field {key!r}")
        sid = rec["id"]
        if not isinstance(sid, str) or not sid:
            raise ValidationError(f"manifest line {lineno}: id must be a non-empty string")
        if sid in seen:
            raise ValidationError(
                f"duplicate id {sid!r} on lines {seen[sid]} and {lineno}"
            )
        seen[sid] = lineno
        try:
            lat = float(rec["lat"])
            lon = float(rec["lon"])
        except (TypeError, ValueError) as e:
            raise ValidationError(f"manifest line {lineno}: lat/lon not numeric") from e
        if not (-90.0 <= lat <= 90.0):
            raise ValidationError(f"manifest line {lineno}: lat {lat} out of range")
        if not (-180.0 <= lon <= 180.0):
            raise ValidationError(f"manifest line {lineno}: lon {lon} out of range")
        split = rec.get("split")
        if split is not None and split not in ("train", "test"):
            raise ValidationError(
                f"manifest line {lineno}: split must be 'train' or 'test', got {split!r}"
            )
        samples.append(
            Sample(
                id=sid,
                image=str(rec["image"]),
                lat=lat,
                lon=lon,
                text=str(rec["text"]),
                region=str(rec["region"]),
                split=split,
            )
        )
    return samples


def write_manifest(path, samples: list[Sample]) -> None:
    path = Path(path)
    lines = []
    for s in samples:
        rec = {
            "id": s.id,
            "image": s.image,
            "lat": s.lat,
            "lon": s.lon,
            "text": s.text,
            "region": s.region,
        }
        if s.split is not None:
            rec["split"] = s.split
        lines.append(json.dumps(rec))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def resolve_image_path(manifest_path, sample: Sample) -> Path:
    p = Path(sample.image)
    return p if p.is_absolute() else Path(manifest_path).parent / p


# ---------------------------------------------------------------------------
# Split and vocabulary


def _unit_hash(seed: int, sid: str) -> float:
    digest = hashlib.sha256(f"{seed}:{sid}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") / 2.0**64


def split_dataset(samples: list[Sample], ratio: float = 0.9, seed: int = 0) -> list[Sample]:
    """Assign train/test labels by a stable per-id hash.

    The assignment is a pure function of (id, seed, ratio): independent of
    list order and platform, and applied uniformly within every region, so
    each region subset is split at the same expected ratio.
    """
    if not (0.0 < ratio < 1.0):
        raise ValidationError(f"split ratio must lie in (0, 1), got {ratio}")
    out = []
    for s in samples:
        label = "train" if _unit_hash(seed, s.id) < ratio else "test"
        out.append(replace(s, split=label))
    return out


def _words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    """Token table with reserved ids 0 (padding) and 1 (unknown)."""

    token_to_id: dict[str, int]

    @property
    def size(self) -> int:
        return 2 + len(self.token_to_id)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def to_dict(self) -> dict:
        return dict(self.token_to_id)

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(token_to_id={str(k): int(v) for k, v in d.items()})


def build_vocab(texts: list[str], min_count: int = 1) -> Vocabulary:
    """Frequency-ordered vocabulary; count ties break lexicographically."""
    if min_count < 1:
        raise ValidationError(f"min_count must be >= 1, got {min_count}")
    counts = Counter()
    for text in texts:
        counts.update(_words(text))
    kept = [t for t, c in counts.items() if c >= min_count]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(token_to_id={t: i + 2 for i, t in enumerate(kept)})


@dataclass(frozen=True)
class TokenizedText:
    """Fixed-length id row plus the count of real (non-padding) positions."""

    ids: np.ndarray
    length: int


def tokenize(text: str, vocab: Vocabulary, max_len: int = 300) -> TokenizedText:
    if max_len < 1:
        raise ValidationError(f"max_len must be >= 1, got {max_len}")
    words = _words(text)[:max_len]
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    for i, w in enumerate(words):
        ids[i] = vocab.id_of(w)
    return TokenizedText(ids=ids, length=len(words))


# ---------------------------------------------------------------------------
# Synthetic corpus

# Eight base colors. The red channel sits at the center of a histogram bin
# (value = 16 b + 8) and carries the texture field, whose +-7 budget keeps
# every pixel inside its class bin; green and blue sit on bin edges and
# carry the stripe modulation, so their mass spreads over nearby bins and
# the red-channel bin stays the unique histogram argmax. Edge values lie in
# [32, 208], which keeps base plus stripe plus region shift inside [0, 255]
# without clipping.
COLOR_CLASSES = (
    ("crimson", (216, 48, 48)),
    ("amber", (232, 176, 32)),
    ("forest", (72, 160, 48)),
    ("azure", (56, 96, 208)),
    ("violet", (152, 48, 192)),
    ("teal", (40, 160, 160)),
    ("slate", (120, 128, 144)),
    ("sand", (200, 176, 112)),
)

TEXTURE_CLASSES = (
    ("smooth", "smooth asphalt"),
    ("gravel", "rough gravel"),
    ("checker", "tiled grid"),
)

# (label, descriptor word, anchor latitude, anchor longitude)
REGIONS = (
    ("region1", "lakeside", 40.71, -74.0),
    ("region2", "hillside", 48.85, 2.35),
    ("region3", "coastal", 35.68, 139.69),
    ("region4", "desert", -1.29, 36.82),
)

# Per-region brightness offsets, applied independently to green and blue.
# They keep each region's tiles separable in pixel space (and in the
# green/blue histogram profile) so a text query can prefer its own region's
# tile over an otherwise identical one. The largest edge base plus shift
# plus stripe stays below 255.
_REGION_SHIFT_G = (0.0, 0.0, 22.0, 22.0)
_REGION_SHIFT_B = (0.0, 22.0, 0.0, 22.0)

_STRIPE_AMPLITUDE = 24.0
# The unit texture field rides on the red channel at +-7, the widest
# excursion that keeps every red pixel inside its class bin; its
# luma-weighted gradient response stays far below the stripe response, so
# the orientation mask never admits it.
_TEX_R_AMPLITUDE = 7.0
_TILED_FREQ = 2.0
_GRAVEL_WAVES = ((1, 2), (2, -1))
_GRAVEL_PHASES = (0.7, 2.3)
_GRID_SPACING_M = 120.0
_JITTER_M = 20

# Lead-ins of word length 0..3 shift every later token by a per-sample
# offset, so digit words cannot be decoded from absolute position alone.
_LEAD_INS = ("", "surveyed", "newly surveyed", "aerial capture of")

_DIGITS = (
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight",
    "nine",
)


def _spell_digits(n: int) -> str:
    """Spell 0..999 digit by digit, zero-padded to three words ('zero nine five').

    Keeping the angle as separate digit words forces the text encoder to
    combine tokens across positions instead of memorizing one angle word per
    orientation class.
    """
    return " ".join(_DIGITS[int(c)] for c in f"{n:03d}")


def _predicted_sobel_angle(m: int, n: int, size: int) -> float:
    """Folded orientation the Sobel pair reports for the plane wave (m, n).

    For f = sin(2 pi (m x + n y) / size) the two Sobel responses at every
    pixel are proportional to sin(wx)(2 + 2 cos(wy)) and
    sin(wy)(2 + 2 cos(wx)), so the measured orientation is spatially uniform.
    """
    wx = 2.0 * math.pi * m / size
    wy = 2.0 * math.pi * n / size
    sx = math.sin(wx) * (2.0 + 2.0 * math.cos(wy))
    sy = math.sin(wy) * (2.0 + 2.0 * math.cos(wx))
    return math.atan2(sy, sx) % math.pi


def orientation_waves(orient_bins: int, size: int) -> list[tuple[int, int]]:
    """One integer wave vector per orientation bin.

    Each wave is exactly periodic on the size x size torus and its measured
    Sobel orientation falls inside the bin with at least 2.5 degrees of
    margin to both edges, so pixel quantization and the noise texture cannot
    push the histogram mode across a boundary. Waves whose Sobel response is
    weak relative to unit noise are rejected outright. Small radii are
    preferred so stripes stay visible after 8x8 patch pooling; bins hugging
    the 0 and 90 degree boundaries fall back to larger radii.
    """
    margin = math.radians(2.5)
    waves = []
    for k in range(orient_bins):
        lo = k * math.pi / orient_bins
        hi = (k + 1) * math.pi / orient_bins
        center = 0.5 * (lo + hi)
        best = None
        for m in range(-9, 10):
            for n in range(-9, 10):
                r = math.hypot(m, n)
                if not (2.5 <= r <= 8.5):
                    continue
                wx = 2.0 * math.pi * m / size
                wy = 2.0 * math.pi * n / size
                sx = math.sin(wx) * (2.0 + 2.0 * math.cos(wy))
                sy = math.sin(wy) * (2.0 + 2.0 * math.cos(wx))
                if math.hypot(sx, sy) < 1.5:
                    continue
                ang = _predicted_sobel_angle(m, n, size)
                if not (lo <= ang < hi):
                    continue
                if min(ang - lo, hi - ang) < margin:
                    continue
                key = (r, abs(ang - center))
                if best is None or key < best[0]:
                    best = (key, m, n)
        if best is None:
            raise ValidationError(
                f"no lattice wave lands safely in orientation bin {k} of {orient_bins}"
            )
        waves.append((best[1], best[2]))
    return waves


def render_tile(
    color_idx: int,
    orient_idx: int,
    texture_idx: int,
    phase_step: int,
    rng,
    cfg: SignatureConfig = SignatureConfig(),
    image_size: int = 64,
    waves=None,
    region_idx: int = 0,
) -> Image:
    """Render one synthetic tile from explicit attribute indices.

    Pixels depend only on the arguments; rng is accepted for interface
    stability but never consumed. The sin() output is rounded to 6 decimals
    before quantization; raw libm output can straddle .5 boundaries
    differently across platforms.
    """
    if waves is None:
        waves = orientation_waves(cfg.orient_bins, image_size)
    xs, ys = np.meshgrid(np.arange(image_size), np.arange(image_size))
    texture_name = TEXTURE_CLASSES[texture_idx][0]
    wm, wn = waves[orient_idx]
    phase = 2.0 * math.pi * (wm * xs + wn * ys + phase_step) / image_size
    stripes = np.round(_STRIPE_AMPLITUDE * np.sin(phase), 6)
    if texture_name == "gravel":
        field = np.zeros((image_size, image_size))
        for (gm, gn), gphase in zip(_GRAVEL_WAVES, _GRAVEL_PHASES):
            field += np.sin(2.0 * math.pi * (gm * xs + gn * ys) / image_size + gphase)
        texture = np.round(0.5 * field, 6)
    elif texture_name == "checker":
        gx = np.sin(2.0 * math.pi * _TILED_FREQ * xs / image_size)
        gy = np.sin(2.0 * math.pi * _TILED_FREQ * ys / image_size)
        texture = np.round(gx * gy, 6)
    else:
        texture = np.zeros((image_size, image_size))
    base = np.array(COLOR_CLASSES[color_idx][1], dtype=np.float64)
    pixels = np.broadcast_to(base[None, None, :], (image_size, image_size, 3)).copy()
    # red keeps its bin-center class identity plus the bin-safe texture
    # field; stripes and the regional brightness shift ride on the
    # edge-seated green and blue channels, so luma sees every wave for the
    # gradient statistics while each signal stays recoverable
    pixels[:, :, 0] += _TEX_R_AMPLITUDE * texture
    pixels[:, :, 1] += stripes + _REGION_SHIFT_G[region_idx]
    pixels[:, :, 2] += stripes + _REGION_SHIFT_B[region_idx]
    return Image(pixels=np.rint(pixels).astype(np.uint8))


def generate_synthetic(
    n: int,
    seed: int,
    out_dir,
    cfg: SignatureConfig = SignatureConfig(),
    image_size: int = 64,
) -> tuple[list[Sample], list[dict]]:
    """Write a corpus of n images plus a manifest; byte-identical per (n, seed).

    Returns the samples and, for test oracles, the drawn attribute record of
    each sample ({color, color_bin, orient_bin, texture}).
    """
    if n < 1:
        raise ValidationError(f"need n >= 1 samples, got {n}")
    if seed < 0:
        raise ValidationError(f"seed must be non-negative, got {seed}")
    if image_size < 16 or image_size % 2:
        raise ValidationError(f"image_size must be an even integer >= 16, got {image_size}")

    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)

    waves = orientation_waves(cfg.orient_bins, image_size)
    side = math.ceil(math.sqrt(math.ceil(n / len(REGIONS))))

    samples: list[Sample] = []
    attrs: list[dict] = []
    for i in range(n):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(i,))))
        color_idx = int(rng.integers(len(COLOR_CLASSES)))
        orient_idx = int(rng.integers(cfg.orient_bins))
        texture_idx = int(rng.integers(len(TEXTURE_CLASSES)))
        # stripes keep one canonical phase: translated copies of the same wave
        # read as near-orthogonal patch patterns to a position-specific
        # projection, which buries the orientation cue the retrieval head
        # needs, while the signature histograms are shift-invariant anyway
        phase_step = 0
        jitter = rng.integers(-_JITTER_M, _JITTER_M + 1, size=2)

        color_name, rgb = COLOR_CLASSES[color_idx]
        texture_name, texture_phrase = TEXTURE_CLASSES[texture_idx]
        img = render_tile(
            color_idx, orient_idx, texture_idx, phase_step, rng,
            cfg=cfg, image_size=image_size, waves=waves,
            region_idx=i % len(REGIONS),
        )

        sid = f"synth-{i:05d}"
        rel = f"images/{sid}.ppm"
        (out_dir / rel).write_bytes(encode_ppm(img))

        region, biome, lat0, lon0 = REGIONS[i % len(REGIONS)]
        slot = i // len(REGIONS)
        north = (slot // side) * _GRID_SPACING_M + float(jitter[0])
        east = (slot % side) * _GRID_SPACING_M + float(jitter[1])
        lat = lat0 + north / _M_PER_DEG
        lon = lon0 + east / (_M_PER_DEG * math.cos(math.radians(lat0)))

        grad_center = (orient_idx + 0.5) * 180.0 / cfg.orient_bins
        road_deg = int(round(grad_center + 90.0)) % 180
        lead = _LEAD_INS[int(rng.integers(len(_LEAD_INS)))]
        body = (
            f"{biome} area with mostly {color_name} surfaces, roads running near "
            f"{_spell_digits(road_deg)} degrees, and {texture_phrase} texture"
        )
        text = f"{lead} {body}" if lead else body
        samples.append(
            Sample(id=sid, image=rel, lat=lat, lon=lon, text=text, region=region)
        )
        attrs.append(
            {
                "color": color_name,
                "color_bin": rgb[0] * cfg.color_bins // 256,
                "orient_bin": orient_idx,
                "texture": texture_name,
            }
        )
    write_manifest(out_dir / "manifest.jsonl", samples)
    return samples, attrs


# ---------------------------------------------------------------------------
# Signature cache

_CACHE_MAGIC = b"PSIG"
_CACHE_VERSION = 1


def write_signature_cache(path, entries: list[tuple[str, np.ndarray]], cfg: SignatureConfig) -> None:
    """Binary little-endian cache of (id, float32 signature vector) records."""
    path = Path(path)
    dim = cfg.total_dim
    parts = [
        struct.pack(
            "<4sHHHHfI",
            _CACHE_MAGIC,
            _CACHE_VERSION,
            cfg.color_bins,
            cfg.orient_bins,
            cfg.texture_bins,
            cfg.tau_rel,
            len(entries),
        )
    ]
    for sid, vec in entries:
        vec = np.asarray(vec, dtype=np.float32)
        if vec.shape != (dim,):
            raise ValidationError(
                f"signature for {sid!r} has shape {vec.shape}, config expects ({dim},)"
            )
        raw = sid.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValidationError(f"id {sid!r} too long for the cache format")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(vec.astype("<f4").tobytes())
    path.write_bytes(b"".join(parts))


def read_signature_cache(
    path, expect: SignatureConfig | None = None
) -> tuple[list[tuple[str, np.ndarray]], SignatureConfig]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read signature cache {path}: {e}") from e
    head = struct.calcsize("<4sHHHHfI")
    if len(data) < head:
        raise TruncatedDataError("signature cache shorter than its header")
    magic, version, bc, bs, bt, tau, count = struct.unpack("<4sHHHHfI", data[:head])
    if magic != _CACHE_MAGIC:
        raise FormatError(f"bad signature cache magic {magic!r}")
    if version != _CACHE_VERSION:
        raise FormatError(f"unsupported signature cache version {version}")
    cfg = SignatureConfig(color_bins=bc, orient_bins=bs, texture_bins=bt, tau_rel=float(tau))
    if expect is not None and (
        (bc, bs, bt) != (expect.color_bins, expect.orient_bins, expect.texture_bins)
        or not math.isclose(float(tau), expect.tau_rel, rel_tol=1e-6)
    ):
        raise ConfigError(
            f"signature cache was built with {cfg.to_dict()}, expected {expect.to_dict()}"
        )
    dim = cfg.total_dim
    entries: list[tuple[str, np.ndarray]] = []
    pos = head
    for _ in range(count):
        if pos + 2 > len(data):
            raise TruncatedDataError("signature cache record header truncated")
        (id_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + id_len + 4 * dim > len(data):
            raise TruncatedDataError("signature cache record truncated")
        sid = data[pos:pos + id_len].decode("utf-8")
        pos += id_len
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=pos).astype(np.float64)
        pos += 4 * dim
        entries.append((sid, vec))
    return entries, cfg
