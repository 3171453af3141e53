from __future__ import annotations

import pytest

from thz_sensing import geometry


@pytest.fixture
def sounder() -> geometry.SounderConfig:
    return geometry.SounderConfig()


@pytest.fixture
def single_wall_pose() -> geometry.TrxPose:
    return geometry.TrxPose((0.0, 0.0), 0.2, 1)


@pytest.fixture
def single_wall_scene(single_wall_pose: geometry.TrxPose) -> geometry.SceneModel:
    wall = geometry.WallSegment((-3.0, 1.2), (3.0, 1.2), geometry.CEMENT_WALL)
    return geometry.SceneModel([wall], [single_wall_pose], name="single-wall")


@pytest.fixture
def corner_scene() -> geometry.SceneModel:
    walls = geometry.polyline(
        [(-1.2, 3.0), (-1.2, -1.2), (3.0, -1.2)], geometry.CEMENT_WALL
    )
    poses = [geometry.TrxPose((0.0, 0.0), 0.2, 1), geometry.TrxPose((0.5, 0.0), 0.2, 2)]
    return geometry.SceneModel(walls, poses, name="corner")
