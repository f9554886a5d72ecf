"""Test fixtures for voxel-fm."""
