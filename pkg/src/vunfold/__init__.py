"""Virtual unfolding of tubular organ walls from voxel volumes."""

__version__ = "0.1.0"
