import numpy as np
from hypothesis import strategies as st

from mdnslam.geometry import Pose6


def random_pose(rng, max_pitch=1.3, scale=5.0):
    t = rng.uniform(-scale, scale, 3)
    r = np.array([rng.uniform(-np.pi, np.pi), rng.uniform(-max_pitch, max_pitch), rng.uniform(-np.pi, np.pi)])
    return Pose6(t, r)


_coord = st.floats(-10, 10, allow_nan=False)
_ang = st.floats(-np.pi, np.pi, allow_nan=False)
_pitch = st.floats(-1.3, 1.3, allow_nan=False)

poses = st.builds(
    lambda x, y, z, a, b, c: Pose6([x, y, z], [a, b, c]),
    _coord, _coord, _coord, _ang, _pitch, _ang,
)
