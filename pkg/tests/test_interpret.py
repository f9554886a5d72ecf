"""Tests for the interpret module."""

import json
import math

import numpy as np
import pytest
import torch

from src.encoder import EncoderConfig, build_encoder
from src.interpret import (
    AttentionStack,
    attention_distance_map,
    attention_stack_from_embeddings,
    export_heatmap,
    patch_distance,
    patch_distance_matrix,
    save_distance_map_json,
)
from src.utils.errors import InterpretError
from src.volume_store import Volume


def _stack(rows, grid=(2, 1, 1), patch_size=4):
    return AttentionStack(weights=np.asarray(rows, dtype=float)[None, None], grid=grid, patch_size=patch_size)


class TestPatchDistance:
    """Test patch-centre distances."""

    def test_diagonal(self):
        """Test opposite corners of a 2x2x2 grid are sqrt(3) patches apart."""
        assert patch_distance(0, 7, (2, 2, 2), 8) == pytest.approx(8 * math.sqrt(3))

    def test_matrix_matches_pairs(self):
        """Test the matrix agrees with the pairwise function."""
        matrix = patch_distance_matrix((2, 3, 1), 5)
        assert matrix[1, 4] == pytest.approx(patch_distance(1, 4, (2, 3, 1), 5))
        np.testing.assert_array_equal(np.diag(matrix), 0.0)

    def test_out_of_range(self):
        """Test indices outside the grid are rejected."""
        with pytest.raises(InterpretError):
            patch_distance(0, 8, (2, 2, 2), 8)


class TestAttentionDistance:
    """Test attention-distance maps."""

    def test_identity_attention_is_zero(self):
        """Test every patch attending only to itself gives distance 0."""
        stack = AttentionStack(weights=np.eye(9)[None, None].repeat(2, axis=0), grid=(2, 2, 2), patch_size=8)
        np.testing.assert_array_equal(attention_distance_map(stack).values, np.zeros(8))

    def test_hand_example(self):
        """Test CLS mass is dropped and rows renormalized before weighting distances."""
        rows = [
            [1.0, 0.0, 0.0],
            [0.5, 0.25, 0.25],
            [0.2, 0.8, 0.0],
        ]
        values = attention_distance_map(_stack(rows)).values
        np.testing.assert_allclose(values, [2.0, 4.0])

    def test_cls_only_row_is_null(self):
        """Test a row with all mass on CLS becomes NaN."""
        rows = [[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
        dm = attention_distance_map(_stack(rows))
        assert dm.null_mask.tolist() == [True, False]
        assert dm.values[1] == pytest.approx(4.0)

    def test_reductions(self):
        """Test per-layer and per-head shapes."""
        weights = np.full((3, 2, 9, 9), 1.0 / 9)
        stack = AttentionStack(weights=weights, grid=(2, 2, 2), patch_size=4)
        assert attention_distance_map(stack, "per_layer").values.shape == (3, 8)
        assert attention_distance_map(stack, "per_head").values.shape == (3, 2, 8)
        with pytest.raises(InterpretError):
            attention_distance_map(stack, "max")

    def test_random_stack_matches_double_loop(self):
        """Test every reduction against an explicit loop over layers, heads and patch pairs."""
        grid, patch_size = (4, 4, 4), 3
        rng = np.random.default_rng(11)
        weights = rng.dirichlet(np.ones(65), size=(2, 3, 65))
        dm = attention_distance_map(AttentionStack(weights=weights, grid=grid, patch_size=patch_size), "per_head")
        distances = [[patch_distance(i, j, grid, patch_size) for j in range(64)] for i in range(64)]

        expected = np.zeros((2, 3, 64))
        for layer in range(2):
            for head in range(3):
                for i in range(64):
                    row = weights[layer, head, i + 1, 1:]
                    mass = sum(row)
                    expected[layer, head, i] = sum(row[j] / mass * distances[i][j] for j in range(64))
        np.testing.assert_allclose(dm.values, expected, rtol=0, atol=1e-6)
        stack = AttentionStack(weights=weights, grid=grid, patch_size=patch_size)
        np.testing.assert_allclose(attention_distance_map(stack).values, expected.mean(axis=(0, 1)), rtol=0, atol=1e-6)

    def test_uniform_attention_is_mean_distance(self):
        """Test uniform attention gives each patch its mean distance to every patch."""
        grid, patch_size = (2, 3, 4), 5
        weights = np.full((2, 2, 25, 25), 1.0 / 25)
        values = attention_distance_map(AttentionStack(weights=weights, grid=grid, patch_size=patch_size)).values
        expected = [np.mean([patch_distance(i, j, grid, patch_size) for j in range(24)]) for i in range(24)]
        np.testing.assert_allclose(values, expected, rtol=0, atol=1e-9)

    def test_rows_must_sum_to_one(self):
        """Test unnormalized weights are rejected."""
        with pytest.raises(InterpretError, match="sum to 1"):
            _stack([[0.5, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])

    def test_from_encoder(self):
        """Test captured encoder attention yields one finite distance per patch."""
        cfg = EncoderConfig(input_dims=(8, 8, 8), channels=1, patch_size=4, embed_dim=12, depth=2, heads=2,
                            mlp_hidden=16)
        te = build_encoder(cfg, 0).encode_volumes(torch.rand(1, 1, 8, 8, 8), capture_attention=True)
        dm = attention_distance_map(attention_stack_from_embeddings(te, cfg.grid, cfg.patch_size))
        assert dm.values.shape == (8,)
        assert np.isfinite(dm.values).all()
        assert (dm.values <= 4 * math.sqrt(3) + 1e-9).all()

    def test_without_capture(self):
        """Test embeddings without attention are rejected."""
        cfg = EncoderConfig(input_dims=(8, 8, 8), channels=1, patch_size=4, embed_dim=12, depth=1, heads=2,
                            mlp_hidden=16)
        te = build_encoder(cfg, 0).encode_volumes(torch.rand(1, 1, 8, 8, 8))
        with pytest.raises(InterpretError, match="capture_attention"):
            attention_stack_from_embeddings(te, cfg.grid, cfg.patch_size)


class TestHeatmap:
    """Test heatmap export."""

    def test_scaled_and_upsampled(self):
        """Test values scale to [0, 1] and fill each patch cube."""
        hm = export_heatmap(np.array([2.0, 4.0]), (8, 4, 4), grid=(2, 1, 1), patch_size=4)
        assert hm.dims == (8, 4, 4)
        assert np.all(hm.voxels[:4] == 0.0)
        assert np.all(hm.voxels[4:] == 1.0)

    def test_constant_map(self):
        """Test a constant map exports mid-scale."""
        base = Volume(voxels=np.zeros((4, 4, 4)), id="x")
        hm = export_heatmap(np.full(8, 3.0), base, grid=(2, 2, 2), patch_size=2)
        assert np.all(hm.voxels == 0.5)
        assert hm.id == "x_heatmap"

    def test_null_patches_export_zero(self):
        """Test NaN patches become 0."""
        hm = export_heatmap(np.array([np.nan, 1.0, 3.0]), (3, 1, 1), grid=(3, 1, 1), patch_size=1)
        assert hm.voxels[:, 0, 0].tolist() == [0.0, 0.0, 1.0]

    def test_grid_must_tile_volume(self):
        """Test mismatched grid and dims are rejected."""
        with pytest.raises(InterpretError):
            export_heatmap(np.zeros(8), (10, 8, 8), grid=(2, 2, 2), patch_size=4)

    def test_json_nulls(self, tmp_path):
        """Test null patches are written as JSON null."""
        rows = [[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
        path = save_distance_map_json(attention_distance_map(_stack(rows)), tmp_path / "d.json")
        payload = json.loads(path.read_text())
        assert payload["values"] == [[[None]], [[4.0]]]
        assert payload["units"] == "voxels"
