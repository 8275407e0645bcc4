"""
Tests for the ViT backbone and the checkpoint codec.
"""

import struct

import numpy as np
import pytest

import numerics
from backbone import (
    Backbone,
    ViTConfig,
    backbone_from_checkpoint,
    extract_patches,
    load_checkpoint,
    save_checkpoint,
    token_layout,
)
from errors import (
    CheckpointError,
    ConfigurationError,
    ForenvitIOError,
    MagicMismatchError,
    ShapeError,
    ShapeMismatchError,
    TruncatedCheckpointError,
    VersionMismatchError,
)
from numerics import Rng


@pytest.fixture
def images():
    return Rng(7).random((2, 1, 16, 16))


# =============================================================================
# Configuration and layout
# =============================================================================

class TestViTConfig:
    def test_default_token_count(self):
        config = ViTConfig()
        assert config.grid == 4
        assert config.num_tokens == 1 + 4 + 16

    def test_patch_must_divide_image(self):
        with pytest.raises(ConfigurationError):
            ViTConfig(image_size=28, patch_size=5)

    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigurationError):
            ViTConfig(width=10, heads=4)

    def test_round_trips_through_dict(self):
        config = ViTConfig(depth=3, registers=0)
        assert ViTConfig.from_dict(config.to_dict()) == config


class TestLayout:
    def test_rows(self, tiny_config):
        layout = token_layout(tiny_config)
        assert layout.cls_row == 0
        assert layout.register_rows == (1,)
        assert layout.patch_rows == (2, 3, 4, 5)
        assert layout.num_tokens == tiny_config.num_tokens

    def test_patches_in_row_major_order(self):
        image = np.arange(16.0).reshape(1, 1, 4, 4)
        patches = extract_patches(image, 2)
        assert patches.shape == (1, 4, 4)
        assert np.array_equal(patches[0, 0], [0, 1, 4, 5])
        assert np.array_equal(patches[0, 1], [2, 3, 6, 7])
        assert np.array_equal(patches[0, 2], [8, 9, 12, 13])

    def test_large_patches_with_four_registers(self):
        layout = token_layout(ViTConfig(image_size=28, patch_size=14, width=16, registers=4))
        assert layout.num_tokens == 9
        assert layout.cls_row == 0
        assert layout.register_rows == (1, 2, 3, 4)
        assert layout.patch_rows == (5, 6, 7, 8)

    def test_no_registers(self):
        layout = token_layout(ViTConfig(image_size=28, patch_size=7, width=16, registers=0))
        assert layout.register_rows == ()
        assert layout.num_tokens == 17


class TestPatchify:
    def test_zero_image_gives_position_embeddings(self, tiny_config):
        backbone = Backbone(tiny_config, Rng(0))
        tokens = backbone.patchify(np.zeros((1, 1, 8, 8)))
        assert tokens.shape == (1, 4, 16)
        assert np.array_equal(tokens.data[0], backbone.pos_embed.data[0])

    def test_rows_match_sliced_patches(self, small_backbone, images):
        tokens = small_backbone.patchify(images).data
        weight = small_backbone.patch_embed.weight.data
        bias = small_backbone.patch_embed.bias.data
        pos = small_backbone.pos_embed.data[0]
        for j in range(16):
            r, c = divmod(j, 4)
            patch = images[1, 0, 4 * r:4 * r + 4, 4 * c:4 * c + 4].ravel()
            assert np.allclose(tokens[1, j], patch @ weight + bias + pos, atol=1e-5)

    def test_wrong_channels(self, tiny_config):
        with pytest.raises(ShapeError):
            Backbone(tiny_config, Rng(0)).patchify(np.zeros((1, 3, 8, 8)))


# =============================================================================
# Forward pass
# =============================================================================

class TestForward:
    def test_shapes(self, small_backbone, small_config, images):
        with numerics.inference():
            result = small_backbone(images)
        assert result.tokens.shape == (2, small_config.num_tokens, 16)
        assert result.attention.block_index == 4
        assert result.attention.weights.shape == (2, 2, 19, 19)
        assert np.allclose(result.attention.weights.sum(axis=-1), 1.0, atol=1e-5)
        assert result.features == []

    def test_taps_are_ascending_and_last_matches_output(self, small_backbone, images):
        with numerics.inference():
            result = small_backbone(images, taps=(4, 2))
        assert [record.block_index for record in result.features] == [2, 4]
        assert np.array_equal(result.feature(4).tokens.data, result.tokens.data)

    def test_tapped_features_go_through_final_norm(self, small_backbone, images):
        with numerics.inference():
            result = small_backbone(images, taps=(1,))
        rows = result.feature(1).tokens.data
        assert np.allclose(rows.mean(axis=-1), 0.0, atol=1e-5)

    def test_single_image_gets_batch_axis(self, small_backbone, images):
        with numerics.inference():
            result = small_backbone(images[0])
        assert result.tokens.shape[0] == 1

    def test_tap_outside_depth(self, small_backbone, images):
        with pytest.raises(ConfigurationError):
            small_backbone(images, taps=(5,))
        with pytest.raises(ConfigurationError):
            small_backbone(images, taps=(0,))

    def test_wrong_image_size(self, small_backbone):
        with pytest.raises(ShapeError):
            small_backbone(np.zeros((1, 1, 12, 12)))

    def test_without_registers(self):
        config = ViTConfig(image_size=8, patch_size=4, depth=1, width=8, heads=2, registers=0)
        with numerics.inference():
            result = Backbone(config, Rng(0))(np.zeros((1, 1, 8, 8)))
        assert result.tokens.shape == (1, 5, 8)

    def test_same_seed_same_weights(self, small_config):
        a = Backbone(small_config, Rng(4)).state_dict()
        b = Backbone(small_config, Rng(4)).state_dict()
        assert a.keys() == b.keys()
        assert all(np.array_equal(a[name], b[name]) for name in a)

    def test_parameter_names(self, tiny_backbone_names):
        assert "cls_token" in tiny_backbone_names
        assert "register_tokens" in tiny_backbone_names
        assert "blocks.01.attn.qkv.weight" in tiny_backbone_names
        assert "blocks.02.mlp.fc2.bias" in tiny_backbone_names
        assert "norm.gain" in tiny_backbone_names


def _norm(rows, module):
    centered = rows - rows.mean(axis=-1, keepdims=True)
    return centered / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + module.eps) * module.gain.data + module.bias.data


def _hand_forward(backbone, image):
    """One-block, one-head forward written out token by token."""
    p = backbone.config.patch_size
    grid = backbone.config.grid
    rows = [backbone.cls_token.data[0, 0]]
    for j in range(grid * grid):
        r, c = divmod(j, grid)
        patch = image[0, p * r:p * r + p, p * c:p * c + p].ravel()
        rows.append(patch @ backbone.patch_embed.weight.data + backbone.patch_embed.bias.data
                    + backbone.pos_embed.data[0, j])
    x = np.stack(rows)
    block = backbone.blocks[0]
    width = x.shape[1]
    qkv = _norm(x, block.norm1) @ block.attn.qkv.weight.data + block.attn.qkv.bias.data
    q, k, v = qkv[:, :width], qkv[:, width:2 * width], qkv[:, 2 * width:]
    scores = q @ k.T / np.sqrt(width)
    weights = np.exp(scores - scores.max(axis=1, keepdims=True))
    weights /= weights.sum(axis=1, keepdims=True)
    x = x + (weights @ v) @ block.attn.proj.weight.data + block.attn.proj.bias.data
    hidden = _norm(x, block.norm2) @ block.mlp.fc1.weight.data + block.mlp.fc1.bias.data
    hidden = 0.5 * hidden * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (hidden + 0.044715 * hidden ** 3)))
    x = x + hidden @ block.mlp.fc2.weight.data + block.mlp.fc2.bias.data
    return _norm(x, backbone.norm), weights


class TestHandComputedForward:
    def test_one_block_one_head_width_four(self, float64):
        config = ViTConfig(image_size=4, patch_size=2, depth=1, width=4, heads=1, registers=0)
        backbone = Backbone(config, Rng(21))
        image = Rng(22).random((1, 4, 4))
        expected_tokens, expected_weights = _hand_forward(backbone, image)
        with numerics.inference():
            result = backbone(image)
        assert result.tokens.shape == (1, 5, 4)
        assert np.allclose(result.tokens.data[0], expected_tokens, atol=1e-10)
        assert np.allclose(result.attention.weights[0, 0], expected_weights, atol=1e-12)


class TestBatchInvariance:
    def test_duplicated_input_gives_identical_rows(self, small_backbone, images):
        single = images[:1]
        with numerics.inference():
            alone = small_backbone(single)
            doubled = small_backbone(np.concatenate([single, single, images[1:]]))
        assert np.allclose(doubled.tokens.data[0], doubled.tokens.data[1], atol=1e-6)
        assert np.allclose(doubled.tokens.data[0], alone.tokens.data[0], atol=1e-5)
        assert np.allclose(doubled.attention.weights[1], alone.attention.weights[0], atol=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_token_count_for_random_configs(seed):
    draw = Rng(seed)
    patch = int(draw.integers(1, 5))
    grid = int(draw.integers(1, 5))
    heads = int(draw.integers(1, 3))
    registers = int(draw.integers(0, 5))
    config = ViTConfig(
        image_size=patch * grid, patch_size=patch, depth=1,
        width=heads * int(draw.integers(2, 5)), heads=heads, registers=registers,
    )
    expected = 1 + registers + grid * grid
    assert config.num_tokens == expected
    assert token_layout(config).num_tokens == expected
    with numerics.inference():
        result = Backbone(config, draw)(np.zeros((1, 1, config.image_size, config.image_size)))
    assert result.tokens.shape == (1, expected, config.width)


@pytest.fixture
def tiny_backbone_names(tiny_config):
    return [name for name, _ in Backbone(tiny_config, Rng(0)).named_parameters()]


# =============================================================================
# Checkpoints
# =============================================================================

class TestCheckpoint:
    def _save(self, backbone, path):
        return save_checkpoint(backbone.state_dict(), path, {"model": backbone.config.to_dict()})

    def test_save_load_save_is_byte_identical(self, small_backbone, tmp_path):
        first = self._save(small_backbone, tmp_path / "a.fvt")
        checkpoint = load_checkpoint(first)
        second = save_checkpoint(checkpoint.params, tmp_path / "b.fvt", checkpoint.metadata)
        assert first.read_bytes() == second.read_bytes()

    def test_reload_gives_same_outputs(self, small_backbone, images, tmp_path):
        path = self._save(small_backbone, tmp_path / "a.fvt")
        restored = backbone_from_checkpoint(load_checkpoint(path), Rng(99))
        with numerics.inference():
            expected = small_backbone(images).tokens.data
            actual = restored(images).tokens.data
        assert np.array_equal(expected, actual)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.fvt"
        path.write_bytes(b"NOPE" + bytes(12))
        with pytest.raises(MagicMismatchError):
            load_checkpoint(path)

    def test_unknown_version(self, small_backbone, tmp_path):
        path = self._save(small_backbone, tmp_path / "a.fvt")
        blob = bytearray(path.read_bytes())
        blob[4:8] = (2).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(VersionMismatchError):
            load_checkpoint(path)

    def test_truncated(self, small_backbone, tmp_path):
        path = self._save(small_backbone, tmp_path / "a.fvt")
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(TruncatedCheckpointError):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ForenvitIOError):
            load_checkpoint(tmp_path / "absent.fvt")

    def test_other_width_names_the_parameter(self, tmp_path):
        wide = Backbone(ViTConfig(image_size=8, patch_size=4, depth=2, width=32, heads=2, registers=1), Rng(0))
        narrow = ViTConfig(image_size=8, patch_size=4, depth=2, width=16, heads=2, registers=1)
        path = save_checkpoint(wide.state_dict(), tmp_path / "w.fvt", {"model": narrow.to_dict()})
        with pytest.raises(ShapeMismatchError) as excinfo:
            backbone_from_checkpoint(load_checkpoint(path))
        assert excinfo.value.name in wide.state_dict()
        assert excinfo.value.name in str(excinfo.value)

    def test_garbled_metadata(self, tmp_path):
        path = tmp_path / "garbled.fvt"
        path.write_bytes(b"FVT1" + struct.pack("<II", 1, 3) + b"{x}")
        with pytest.raises(CheckpointError, match="metadata"):
            load_checkpoint(path)

    def test_metadata_that_is_not_an_object(self, tmp_path):
        path = tmp_path / "list.fvt"
        path.write_bytes(b"FVT1" + struct.pack("<II", 1, 2) + b"[]")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_parameter_name_not_utf8(self, tmp_path):
        path = tmp_path / "name.fvt"
        meta = b"{}"
        path.write_bytes(
            b"FVT1" + struct.pack("<II", 1, len(meta)) + meta
            + struct.pack("<I", 2) + b"\xff\xfe" + struct.pack("<II", 1, 1) + struct.pack("<f", 0.5)
        )
        with pytest.raises(CheckpointError, match="UTF-8"):
            load_checkpoint(path)

    def test_model_config_missing(self, small_backbone, tmp_path):
        path = save_checkpoint(small_backbone.state_dict(), tmp_path / "bare.fvt", {"note": "no model"})
        with pytest.raises(CheckpointError, match="model config"):
            backbone_from_checkpoint(load_checkpoint(path))
