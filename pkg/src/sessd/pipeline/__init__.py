"""Toy-scale training pipeline: voxelizer, detector, optimiser, EMA teacher and loop."""
