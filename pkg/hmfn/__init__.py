"""HMFN - multi-scale pillar fusion network for LiDAR pedestrian detection."""

__version__ = "0.1.0"
