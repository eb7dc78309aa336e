"""CLIP-style dual encoder in plain numpy with explicit backward passes."""

from __future__ import annotations

import fnmatch
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import layers
from .data import Band, NormalizationStats, RGB_BANDS, as_bands
from .errors import (
    FormatError, InvalidConfig, InvalidPositions, MissingEOS, ShapeMismatch, TokenOutOfRange,
    UnknownPattern,
)
from .tokenizer import BOS, EOS

INIT_STD = 0.02
INIT_LOG_TEMPERATURE = math.log(1.0 / 0.07)
MAX_LOG_TEMPERATURE = math.log(100.0)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 16
    in_channels: int = 3
    vision_dim: int = 128
    vision_depth: int = 4
    vision_heads: int = 4
    text_dim: int = 128
    text_depth: int = 2
    text_heads: int = 4
    vocab_size: int = 1000
    context_length: int = 77
    proj_dim: int = 64
    mlp_ratio: float = 4.0
    # channel identities and input standardisation travel with the weights
    band_names: tuple[str, ...] | None = None
    norm_mean: tuple[float, ...] | None = None
    norm_std: tuple[float, ...] | None = None

    def validate(self) -> None:
        positive = ("image_size", "patch_size", "in_channels", "vision_dim", "vision_depth",
                    "vision_heads", "text_dim", "text_depth", "text_heads", "vocab_size", "proj_dim")
        for name in positive:
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be >= 1")
        if self.image_size % self.patch_size:
            raise InvalidConfig("image_size must be divisible by patch_size")
        if self.vision_dim % self.vision_heads or self.text_dim % self.text_heads:
            raise InvalidConfig("model dims must be divisible by their head counts")
        if self.context_length < 2:
            raise InvalidConfig("context_length must be >= 2 (BOS + EOS)")
        if self.vocab_size < 4:
            raise InvalidConfig("vocab_size must cover the 4 special tokens")
        if self.mlp_ratio <= 0 or int(round(self.vision_dim * self.mlp_ratio)) < 1:
            raise InvalidConfig("mlp_ratio must be positive")
        if self.band_names is not None:
            as_bands(self.band_names)
            if len(self.band_names) != self.in_channels:
                raise InvalidConfig("band_names length must equal in_channels")
        for stat in (self.norm_mean, self.norm_std):
            if stat is not None and len(stat) != self.in_channels:
                raise InvalidConfig("normalisation stats must have one value per channel")
        if self.norm_std is not None and any(s <= 0 for s in self.norm_std):
            raise InvalidConfig("normalisation std must be positive")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def bands(self) -> tuple[Band, ...]:
        if self.band_names is None:
            if self.in_channels == 3:
                return RGB_BANDS
            raise InvalidConfig("model has no band identities recorded")
        return as_bands(self.band_names)

    def stats(self) -> NormalizationStats | None:
        if self.norm_mean is None or self.norm_std is None:
            return None
        bands = self.bands()
        return NormalizationStats(dict(zip(bands, self.norm_mean)), dict(zip(bands, self.norm_std)))

    def with_stats(self, stats: NormalizationStats) -> "ModelConfig":
        mean, std = stats.arrays(self.bands())
        return replace(self, band_names=tuple(b.value for b in self.bands()),
                       norm_mean=tuple(float(v) for v in mean), norm_std=tuple(float(v) for v in std))

    def to_json(self) -> dict:
        d = asdict(self)
        for k in ("band_names", "norm_mean", "norm_std"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_json(cls, obj: Mapping) -> "ModelConfig":
        obj = dict(obj)
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown model config keys: {sorted(unknown)}")
        for k in ("band_names", "norm_mean", "norm_std"):
            if obj.get(k) is not None:
                obj[k] = tuple(obj[k])
        return cls(**obj)


def _tower_shapes(prefix: str, dim: int, depth: int, hidden: int) -> list[tuple[str, tuple]]:
    out = []
    for i in range(depth):
        b = f"{prefix}.blocks.{i}"
        out += [(f"{b}.ln1.weight", (dim,)), (f"{b}.ln1.bias", (dim,))]
        for proj in ("q", "k", "v", "out"):
            out += [(f"{b}.attn.{proj}.weight", (dim, dim)), (f"{b}.attn.{proj}.bias", (dim,))]
        out += [(f"{b}.ln2.weight", (dim,)), (f"{b}.ln2.bias", (dim,)),
                (f"{b}.mlp.fc1.weight", (dim, hidden)), (f"{b}.mlp.fc1.bias", (hidden,)),
                (f"{b}.mlp.fc2.weight", (hidden, dim)), (f"{b}.mlp.fc2.bias", (dim,))]
    return out


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter order and shapes. Weight matrices are stored (in, out)."""
    dv, dt, p = config.vision_dim, config.text_dim, config.patch_size
    hv = int(round(dv * config.mlp_ratio))
    ht = int(round(dt * config.mlp_ratio))
    shapes = [
        ("visual.patch_embed.weight", (dv, config.in_channels, p, p)),
        ("visual.patch_embed.bias", (dv,)),
        ("visual.class_token", (dv,)),
        ("visual.pos_embed", (config.num_patches + 1, dv)),
        *_tower_shapes("visual", dv, config.vision_depth, hv),
        ("visual.ln_final.weight", (dv,)), ("visual.ln_final.bias", (dv,)),
        ("vision_proj", (dv, config.proj_dim)),
        ("text.token_embed", (config.vocab_size, dt)),
        ("text.pos_embed", (config.context_length, dt)),
        *_tower_shapes("text", dt, config.text_depth, ht),
        ("text.ln_final.weight", (dt,)), ("text.ln_final.bias", (dt,)),
        ("text_proj", (dt, config.proj_dim)),
        ("log_temperature", ()),
    ]
    return dict(shapes)


@dataclass
class ModelParameters:
    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "ModelParameters":
        return ModelParameters(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParameters":
        return ModelParameters(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    @property
    def dtype(self):
        return self.tensors["vision_proj"].dtype

    @property
    def logit_scale(self) -> float:
        return float(np.exp(self.tensors["log_temperature"]))


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2 * std
    return out


def init_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParameters:
    """Truncated-normal (std 0.02, cut at 2 std) weights, zero biases, unit LN gains."""
    config.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name == "log_temperature":
            t = np.array(INIT_LOG_TEMPERATURE)
        elif ".ln" in name and name.endswith(".weight"):
            t = np.ones(shape)
        elif name.endswith(".bias"):
            t = np.zeros(shape)
        else:
            t = _trunc_normal(rng, shape, INIT_STD)
        tensors[name] = np.asarray(t, dtype=dtype)
    return ModelParameters(config, tensors)


def clamp_log_temperature(params: ModelParameters) -> None:
    t = params.tensors["log_temperature"]
    if t > MAX_LOG_TEMPERATURE:
        params.tensors["log_temperature"] = np.asarray(MAX_LOG_TEMPERATURE, dtype=t.dtype)


class InitMode(str, Enum):
    ZERO = "zero"
    MEAN_RGB = "mean"


def extend_patch_embed(params: ModelParameters, new_bands: Sequence[Band | str],
                       rgb_positions: Sequence[int] | None = None,
                       mode: InitMode | str = InitMode.ZERO,
                       stats: NormalizationStats | None = None) -> ModelParameters:
    """Widen a 3-channel patch embedding to ``len(new_bands)`` input channels.

    Original channel ``c`` is copied to ``rgb_positions[c]``; when positions are
    omitted they are found by band name. New channels are zero (``ZERO``) or the
    mean of the three original slices (``MEAN_RGB``). Normalisation stats for the
    new bands come from ``stats``; existing ones are kept.
    """
    mode = InitMode(mode)
    w = params["visual.patch_embed.weight"]
    if w.shape[1] != 3:
        raise ShapeMismatch(f"patch embedding has {w.shape[1]} input channels, expected 3")
    bands = as_bands(new_bands)
    if len(bands) < 3:
        raise ShapeMismatch("need at least 3 bands to extend")
    old_bands = params.config.bands()
    if rgb_positions is None:
        try:
            rgb_positions = [bands.index(b) for b in old_bands]
        except ValueError:
            raise InvalidPositions(f"new bands {bands} do not contain {old_bands}") from None
    pos = [int(i) for i in rgb_positions]
    if len(pos) != 3 or len(set(pos)) != 3 or any(not 0 <= i < len(bands) for i in pos):
        raise InvalidPositions(f"invalid rgb_positions {list(rgb_positions)} for {len(bands)} bands")

    new_w = np.zeros((w.shape[0], len(bands), w.shape[2], w.shape[3]), dtype=w.dtype)
    if mode is InitMode.MEAN_RGB:
        new_w[:] = w.mean(axis=1, keepdims=True)
    for c, i in enumerate(pos):
        new_w[:, i] = w[:, c]

    cfg = replace(params.config, in_channels=len(bands),
                  band_names=tuple(b.value for b in bands), norm_mean=None, norm_std=None)
    old_stats = params.config.stats()
    if old_stats is not None or stats is not None:
        mean, std = {}, {}
        for b in bands:
            if old_stats is not None and b in old_stats.mean and bands.index(b) in pos:
                mean[b], std[b] = old_stats.mean[b], old_stats.std[b]
            elif stats is not None and b in stats.mean:
                mean[b], std[b] = stats.mean[b], stats.std[b]
        if len(mean) == len(bands):
            cfg = cfg.with_stats(NormalizationStats(mean, std))
    tensors = {k: v.copy() for k, v in params.tensors.items()}
    tensors["visual.patch_embed.weight"] = new_w
    cfg.validate()
    return ModelParameters(cfg, tensors)


# ---------------------------------------------------------------------------
# image tower


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(N, C, H, W) -> (N, P, C*patch*patch), patches in row-major grid order."""
    n, c, h, w = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(n, c, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(n, gh * gw, c * patch * patch)


def _check_images(params: ModelParameters, batch: np.ndarray) -> np.ndarray:
    cfg = params.config
    batch = np.asarray(batch)
    if batch.ndim != 4 or batch.shape[1] != cfg.in_channels \
            or batch.shape[2] != cfg.image_size or batch.shape[3] != cfg.image_size:
        raise ShapeMismatch(
            f"expected (N, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}), got {batch.shape}")
    return batch.astype(params.dtype, copy=False)


def image_forward(params: ModelParameters, batch: np.ndarray):
    cfg = params.config
    p = params.tensors
    batch = _check_images(params, batch)
    n = batch.shape[0]
    patches = patchify(batch, cfg.patch_size)
    w = p["visual.patch_embed.weight"].reshape(cfg.vision_dim, -1)
    tok = patches @ w.T + p["visual.patch_embed.bias"]
    cls = np.broadcast_to(p["visual.class_token"], (n, 1, cfg.vision_dim))
    x = np.concatenate([cls, tok], axis=1) + p["visual.pos_embed"]
    caches = []
    for i in range(cfg.vision_depth):
        x, c = layers.block_forward(x, p, f"visual.blocks.{i}", cfg.vision_heads, causal=False)
        caches.append(c)
    h, c_ln = layers.layer_norm_forward(np.ascontiguousarray(x[:, 0]), p, "visual.ln_final")
    z = h @ p["vision_proj"]
    emb, norm = layers.l2_normalize_forward(z)
    return emb, (patches, caches, h, c_ln, emb, norm, x.shape)


def image_backward(params: ModelParameters, cache, d_emb: np.ndarray) -> dict[str, np.ndarray]:
    cfg = params.config
    p = params.tensors
    patches, caches, h, c_ln, emb, norm, xshape = cache
    grads: dict[str, np.ndarray] = {}
    dz = layers.l2_normalize_backward(d_emb.astype(emb.dtype, copy=False), emb, norm)
    grads["vision_proj"] = h.T @ dz
    dh = dz @ p["vision_proj"].T
    dcls = layers.layer_norm_backward(dh, c_ln, p, grads, "visual.ln_final")
    dx = np.zeros(xshape, dtype=emb.dtype)
    dx[:, 0] = dcls
    for i in reversed(range(cfg.vision_depth)):
        dx = layers.block_backward(dx, caches[i], p, grads, f"visual.blocks.{i}", cfg.vision_heads)
    grads["visual.pos_embed"] = dx.sum(axis=0)
    grads["visual.class_token"] = dx[:, 0].sum(axis=0)
    dtok = dx[:, 1:].reshape(-1, cfg.vision_dim)
    grads["visual.patch_embed.weight"] = (dtok.T @ patches.reshape(dtok.shape[0], -1)).reshape(
        p["visual.patch_embed.weight"].shape)
    grads["visual.patch_embed.bias"] = dtok.sum(axis=0)
    return grads


def encode_image(params: ModelParameters, batch: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Unit-norm (N, proj_dim) image embeddings."""
    batch = _check_images(params, batch)
    if batch.shape[0] == 0:
        return np.zeros((0, params.config.proj_dim), dtype=params.dtype)
    return np.concatenate([image_forward(params, batch[i:i + chunk])[0]
                           for i in range(0, batch.shape[0], chunk)])


# ---------------------------------------------------------------------------
# text tower


def _check_tokens(params: ModelParameters, tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cfg = params.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] != cfg.context_length:
        raise ShapeMismatch(f"expected (N, {cfg.context_length}) tokens, got {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ShapeMismatch("token ids must be integers")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise TokenOutOfRange(f"token ids must lie in [0, {cfg.vocab_size})")
    if tokens.shape[0] and np.any(tokens[:, 0] != BOS):
        raise MissingEOS("every token row must start with BOS")
    is_eos = tokens == EOS
    if np.any(is_eos.sum(axis=1) != 1):
        raise MissingEOS("every token row must contain exactly one EOS")
    return tokens, is_eos.argmax(axis=1)


def text_forward(params: ModelParameters, tokens: np.ndarray):
    cfg = params.config
    p = params.tensors
    tokens, eos = _check_tokens(params, tokens)
    n = tokens.shape[0]
    x = p["text.token_embed"][tokens] + p["text.pos_embed"]
    caches = []
    for i in range(cfg.text_depth):
        x, c = layers.block_forward(x, p, f"text.blocks.{i}", cfg.text_heads, causal=True)
        caches.append(c)
    pooled = np.ascontiguousarray(x[np.arange(n), eos])
    h, c_ln = layers.layer_norm_forward(pooled, p, "text.ln_final")
    z = h @ p["text_proj"]
    emb, norm = layers.l2_normalize_forward(z)
    return emb, (tokens, eos, caches, h, c_ln, emb, norm, x.shape)


def text_backward(params: ModelParameters, cache, d_emb: np.ndarray) -> dict[str, np.ndarray]:
    cfg = params.config
    p = params.tensors
    tokens, eos, caches, h, c_ln, emb, norm, xshape = cache
    grads: dict[str, np.ndarray] = {}
    dz = layers.l2_normalize_backward(d_emb.astype(emb.dtype, copy=False), emb, norm)
    grads["text_proj"] = h.T @ dz
    dh = dz @ p["text_proj"].T
    dpooled = layers.layer_norm_backward(dh, c_ln, p, grads, "text.ln_final")
    dx = np.zeros(xshape, dtype=emb.dtype)
    dx[np.arange(tokens.shape[0]), eos] = dpooled
    for i in reversed(range(cfg.text_depth)):
        dx = layers.block_backward(dx, caches[i], p, grads, f"text.blocks.{i}", cfg.text_heads)
    grads["text.pos_embed"] = dx.sum(axis=0)
    demb = np.zeros_like(p["text.token_embed"])
    np.add.at(demb, tokens.reshape(-1), dx.reshape(-1, cfg.text_dim))
    grads["text.token_embed"] = demb
    return grads


def encode_text(params: ModelParameters, tokens: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Unit-norm (N, proj_dim) text embeddings pooled at the EOS position."""
    tokens, _ = _check_tokens(params, tokens)
    if tokens.shape[0] == 0:
        return np.zeros((0, params.config.proj_dim), dtype=params.dtype)
    return np.concatenate([text_forward(params, tokens[i:i + chunk])[0]
                           for i in range(0, tokens.shape[0], chunk)])


# ---------------------------------------------------------------------------
# freeze policies


class FreezeKind(str, Enum):
    ALL_TRAINABLE = "all"
    PROJECTION_ONLY = "projection"
    ATTENTION_ONLY = "attention"
    IMAGE_ALL_TEXT_FROZEN = "image"
    CUSTOM = "custom"


@dataclass(frozen=True)
class FreezePolicy:
    kind: FreezeKind = FreezeKind.ALL_TRAINABLE
    patterns: tuple[str, ...] = ()
    patch_embed_always_trainable: bool = True

    @classmethod
    def parse(cls, text: str) -> "FreezePolicy":
        """``all``, ``projection``, ``attention``, ``image`` or ``custom:<glob>,<glob>``."""
        text = text.strip()
        if text.startswith("custom:"):
            pats = tuple(s.strip() for s in text[len("custom:"):].split(",") if s.strip())
            return cls(FreezeKind.CUSTOM, pats)
        try:
            return cls(FreezeKind(text))
        except ValueError:
            raise InvalidConfig(f"unknown freeze policy {text!r}") from None

    def describe(self) -> str:
        if self.kind is FreezeKind.CUSTOM:
            return "custom:" + ",".join(self.patterns)
        return self.kind.value


_ATTN_WEIGHT = ("*.attn.q.weight", "*.attn.k.weight", "*.attn.v.weight", "*.attn.out.weight")


def resolve_freeze(params: ModelParameters | Sequence[str], policy: FreezePolicy) -> dict[str, bool]:
    """Map every parameter name to ``True`` when it is trainable under ``policy``."""
    names = params.names() if isinstance(params, ModelParameters) else list(params)
    kind = FreezeKind(policy.kind)

    def any_match(name, pats):
        return any(fnmatch.fnmatchcase(name, pat) for pat in pats)

    if kind is FreezeKind.ALL_TRAINABLE:
        mask = {n: True for n in names}
    elif kind is FreezeKind.PROJECTION_ONLY:
        mask = {n: n in ("vision_proj", "text_proj", "log_temperature") for n in names}
    elif kind is FreezeKind.ATTENTION_ONLY:
        mask = {n: n == "log_temperature" or any_match(n, _ATTN_WEIGHT) for n in names}
    elif kind is FreezeKind.IMAGE_ALL_TEXT_FROZEN:
        mask = {n: n.startswith("visual.") or n in ("vision_proj", "log_temperature") for n in names}
    else:
        for pat in policy.patterns:
            if not any(fnmatch.fnmatchcase(n, pat) for n in names):
                raise UnknownPattern(f"pattern {pat!r} matches no parameter")
        mask = {n: any_match(n, policy.patterns) for n in names}
    if policy.patch_embed_always_trainable:
        for n in names:
            if n.startswith("visual.patch_embed."):
                mask[n] = True
    return mask


# ---------------------------------------------------------------------------
# checkpoint files

CKPT_MAGIC = b"MSCK"
CKPT_VERSION = 1


def checkpoint_bytes(params: ModelParameters) -> bytes:
    cfg = json.dumps(params.config.to_json(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION), struct.pack("<I", len(cfg)), cfg]
    for name, t in params.tensors.items():
        raw = name.encode("ascii")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return b"".join(parts)


def parse_checkpoint(buf: bytes) -> ModelParameters:
    try:
        return _parse_checkpoint(buf)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(f"corrupt checkpoint: {e}") from e


def _parse_checkpoint(buf: bytes) -> ModelParameters:
    if buf[:4] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (clen,) = struct.unpack_from("<I", buf, 6)
    pos = 10
    config = ModelConfig.from_json(json.loads(buf[pos:pos + clen].decode("utf-8")))
    pos += clen
    tensors = {}
    while pos < len(buf):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("ascii")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        if pos + 4 * count > len(buf):
            raise FormatError(f"truncated tensor {name!r}")
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos) \
            .astype(np.float32).reshape(shape)
        pos += 4 * count
    expected = param_shapes(config)
    if list(tensors) != list(expected):
        raise FormatError("checkpoint tensor names do not match its config")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise FormatError(f"tensor {name!r} has shape {tensors[name].shape}, expected {shape}")
    return ModelParameters(config, tensors)


def save_checkpoint(params: ModelParameters, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path: str | Path) -> ModelParameters:
    return parse_checkpoint(Path(path).read_bytes())
