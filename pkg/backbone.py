"""
Compact vision transformer backbone.

Patch embedding, a learned CLS token and optional register tokens, a stack of
pre-norm blocks, and a shared final norm. ``forward`` can tap the output of
any block (the multi-level features used by fusion heads) and always captures
the final block's post-softmax attention.

The checkpoint codec also lives here, since backbones, heads and probes all
serialize through the same named-parameter format.
"""

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

import numerics
from errors import (
    CheckpointError,
    ConfigurationError,
    ForenvitIOError,
    MagicMismatchError,
    ShapeError,
    TruncatedCheckpointError,
    VersionMismatchError,
)
from numerics import Block, LayerNorm, Linear, Module, Parameter, Rng

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FVT1"
CHECKPOINT_VERSION = 1


@dataclass
class ViTConfig:
    image_size: int = 28
    patch_size: int = 7
    depth: int = 8
    width: int = 64
    heads: int = 4
    registers: int = 4
    mlp_ratio: float = 4.0
    dropout_rate: float = 0.0
    channels: int = 1

    def __post_init__(self):
        for name in ("image_size", "patch_size", "depth", "width", "heads", "channels"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.registers < 0:
            raise ConfigurationError(f"registers must be non-negative, got {self.registers}")
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image size {self.image_size} is not divisible by patch size {self.patch_size}"
            )
        if self.width % self.heads:
            raise ConfigurationError(f"width {self.width} is not divisible by {self.heads} heads")
        if self.mlp_ratio <= 0:
            raise ConfigurationError("mlp_ratio must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"dropout rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid * self.grid

    @property
    def num_tokens(self):
        return 1 + self.registers + self.num_patches

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        return cls(**values)


@dataclass(frozen=True)
class TokenLayout:
    cls_row: int
    register_rows: tuple
    patch_rows: tuple

    @property
    def num_tokens(self):
        return 1 + len(self.register_rows) + len(self.patch_rows)


def token_layout(config):
    """Row indices of the CLS token, the registers and the patches."""
    registers = tuple(range(1, 1 + config.registers))
    patches = tuple(range(1 + config.registers, config.num_tokens))
    return TokenLayout(cls_row=0, register_rows=registers, patch_rows=patches)


@dataclass
class BlockFeatures:
    """Tokens (B, T, d) read out after block ``block_index``."""

    block_index: int
    tokens: numerics.Tensor


@dataclass
class AttentionRecord:
    """Post-softmax attention of one block; weights (B, h, T, T) or (h, T, T)."""

    block_index: int
    weights: np.ndarray

    def sample(self, index):
        if self.weights.ndim == 3:
            return self
        return AttentionRecord(self.block_index, self.weights[index])


@dataclass
class ForwardResult:
    tokens: numerics.Tensor
    features: list = field(default_factory=list)
    attention: AttentionRecord = None

    def feature(self, block_index):
        for record in self.features:
            if record.block_index == block_index:
                return record
        raise KeyError(block_index)


def extract_patches(images, patch_size):
    """(B, C, H, W) -> (B, N, C*P*P), patches in row-major grid order."""
    batch, channels, height, width = images.shape
    rows, cols = height // patch_size, width // patch_size
    patches = images.reshape(batch, channels, rows, patch_size, cols, patch_size)
    patches = patches.transpose(0, 2, 4, 1, 3, 5)
    return patches.reshape(batch, rows * cols, channels * patch_size * patch_size)


class Backbone(Module):
    """ViT feature extractor with ``config.depth`` blocks."""

    def __init__(self, config, rng):
        self.config = config
        dim = config.width
        patch_dim = config.channels * config.patch_size ** 2
        self.patch_embed = Linear(patch_dim, dim, rng.split("patch_embed"))
        self.pos_embed = Parameter(rng.split("pos_embed").normal((1, config.num_patches, dim), 0.02))
        self.cls_token = Parameter(rng.split("cls_token").normal((1, 1, dim), 0.02))
        if config.registers:
            self.register_tokens = Parameter(
                rng.split("register_tokens").normal((1, config.registers, dim), 0.02)
            )
        else:
            self.register_tokens = None
        self.blocks = [
            Block(dim, config.heads, config.mlp_ratio, rng.split(f"block{i}"), config.dropout_rate)
            for i in range(1, config.depth + 1)
        ]
        self.norm = LayerNorm(dim)

    @property
    def depth(self):
        return self.config.depth

    def block_prefix(self, index):
        return f"blocks.{index:02d}."

    def check_images(self, images):
        images = np.asarray(images, dtype=numerics.default_dtype())
        if images.ndim == 3:
            images = images[None]
        expected = (self.config.channels, self.config.image_size, self.config.image_size)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise ShapeError(f"expected images of shape (B, {expected}), got {images.shape}")
        return images

    def patchify(self, images):
        """Project each non-overlapping P x P patch and add its position embedding."""
        images = self.check_images(images)
        patches = extract_patches(images, self.config.patch_size)
        return self.patch_embed(patches) + self.pos_embed

    def prepend_tokens(self, patch_tokens):
        batch = patch_tokens.shape[0]
        dim = self.config.width
        parts = [numerics.broadcast_to(self.cls_token, (batch, 1, dim))]
        if self.register_tokens is not None:
            parts.append(numerics.broadcast_to(self.register_tokens, (batch, self.config.registers, dim)))
        parts.append(patch_tokens)
        return numerics.concat(parts, axis=1)

    def check_taps(self, taps):
        taps = sorted(set(int(i) for i in taps))
        for index in taps:
            if not 1 <= index <= self.depth:
                raise ConfigurationError(f"tap index {index} outside blocks 1..{self.depth}")
        return taps

    def run_blocks(self, tokens, taps=(), rng=None):
        """Run all blocks; tapped outputs and the final tokens go through the final norm."""
        taps = self.check_taps(taps)
        features = []
        weights = None
        final = None
        for index, block in enumerate(self.blocks, 1):
            block_rng = rng.split(f"block{index}") if rng is not None else None
            tokens, weights = block(tokens, block_rng)
            if index in taps or index == self.depth:
                normed = self.norm(tokens)
                if index in taps:
                    features.append(BlockFeatures(index, normed))
                if index == self.depth:
                    final = normed
        return ForwardResult(final, features, AttentionRecord(self.depth, weights))

    def forward(self, images, taps=(), rng=None):
        return self.run_blocks(self.prepend_tokens(self.patchify(images)), taps, rng)

    __call__ = forward


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params, path, metadata):
    """Write named arrays and JSON metadata in the FVT1 layout."""
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta)), meta]
    for name in sorted(params):
        value = np.ascontiguousarray(np.asarray(params[name], dtype="<f4"))
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        chunks.append(value.tobytes())
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(b"".join(chunks))
    except OSError as e:
        raise ForenvitIOError(f"cannot write checkpoint {path}: {e}") from e
    logger.info("saved %d parameters to %s", len(params), path)
    return path


@dataclass
class Checkpoint:
    metadata: dict
    params: dict


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.offset = 0

    def take(self, count):
        if self.offset + count > len(self.blob):
            raise TruncatedCheckpointError(
                f"checkpoint ends at byte {len(self.blob)}, needed {self.offset + count}"
            )
        chunk = self.blob[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    @property
    def done(self):
        return self.offset == len(self.blob)


def load_checkpoint(path):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise ForenvitIOError(f"cannot read checkpoint {path}: {e}") from e
    reader = _Reader(blob)
    if len(blob) < 4 or reader.take(4) != CHECKPOINT_MAGIC:
        raise MagicMismatchError(f"{path} is not a forenvit checkpoint")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path} has format version {version}, expected {CHECKPOINT_VERSION}")
    try:
        metadata = json.loads(reader.take(reader.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path} has unreadable metadata: {e}") from e
    if not isinstance(metadata, dict):
        raise CheckpointError(f"{path} metadata is not a JSON object")
    params = {}
    while not reader.done:
        try:
            name = reader.take(reader.u32()).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"{path} has a parameter name that is not UTF-8 at byte {reader.offset}") from e
        shape = tuple(reader.u32() for _ in range(reader.u32()))
        count = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    return Checkpoint(metadata, params)


def checkpoint_model_config(checkpoint):
    try:
        return ViTConfig.from_dict(checkpoint.metadata["model"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"checkpoint has no usable model config: {e}") from e


def backbone_from_checkpoint(checkpoint, rng=None):
    """Rebuild a backbone from a checkpoint's model config and weights."""
    config = checkpoint_model_config(checkpoint)
    backbone = Backbone(config, rng or Rng(0))
    state = {name: value for name, value in checkpoint.params.items() if "/" not in name}
    backbone.load_state_dict(state)
    return backbone
