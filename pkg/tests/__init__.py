"""Test package for voxel-fm."""
