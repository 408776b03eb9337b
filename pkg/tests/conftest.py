"""Shared fixtures: a tiny synthetic dataset written once per session."""

import pytest

from hmfn.config import RunConfig
from hmfn.dataset import build_tables, split_scenes, write_dataset, write_split
from hmfn.synth import CrowdModel, LidarModel, SynthRequest, generate_scenes

TINY_LIDAR = LidarModel(beams=16, horizontal_resolution=2.0, range_noise=0.0)
TINY_CROWD = CrowdModel(pedestrians_per_frame=6.0, cluster_count=2, cluster_spread=1.5)


def tiny_request(scenes: int = 5, frames: int = 2, seed: int = 0) -> SynthRequest:
    return SynthRequest(scenes=scenes, frames=frames, seed=seed, crowd=TINY_CROWD, lidar=TINY_LIDAR)


def tiny_config(**overrides) -> RunConfig:
    """Two scales (0.2 m, 0.3 m) over +-4.8 m with narrow layers.

    Output grids are 24x24 for the reference and 8x8 for the coarse branch.
    """
    settings = dict(
        scales=(0.2, 0.3),
        half_extent=4.8,
        max_points_per_pillar=8,
        max_pillars=2000,
        feature_dim=4,
        stage_channels=(4, 6),
        base_strides=(1, 2),
        refine_depth=1,
        refine_channels=6,
        branch_channels=4,
        attention_hidden=3,
        head_channels=4,
        epochs=1,
        batch_size=2,
    )
    settings.update(overrides)
    return RunConfig(**settings)


@pytest.fixture(scope="session")
def tiny_scenes():
    """Five two-frame scenes, one per layout kind."""
    return generate_scenes(tiny_request())


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_scenes):
    """Root of the tiny dataset on disk, with a split manifest."""
    root = tmp_path_factory.mktemp("tiny") / "data"
    tables, payloads = build_tables(tiny_scenes, seed=0)
    write_dataset(tables, root, payloads)
    write_split(root, split_scenes(tables, ratios=(0.6, 0.2, 0.2), rng_seed=0))
    return root
