import math

import numpy as np
import pytest

from mdnslam import io
from mdnslam.errors import InvalidArgumentError
from mdnslam.geometry import Pose6, euler_to_matrix
from mdnslam.outlier_rejection import LoopProposal
from mdnslam.simulator import WorldSpec, generate
from scipy.spatial.transform import Rotation

from helpers import random_pose


def poses(rng, n=10):
    return np.array([random_pose(rng).to_vector() for _ in range(n)])


class TestQuaternion:
    def test_matches_matrix(self, rng):
        x = poses(rng)
        q = io.euler_to_quat(x[:, 3:])
        np.testing.assert_allclose(Rotation.from_quat(q).as_matrix(), euler_to_matrix(x[:, 3:]), atol=1e-12)
        assert np.all(q[:, 3] >= 0)

    def test_roundtrip(self, rng):
        x = poses(rng)
        np.testing.assert_allclose(io.quat_to_euler(io.euler_to_quat(x[:, 3:])), x[:, 3:], atol=1e-10)


class TestTum:
    def test_roundtrip(self, tmp_path, rng):
        x = poses(rng)
        io.write_tum(tmp_path / "a.tum", x)
        ts, y = io.read_tum(tmp_path / "a.tum")
        np.testing.assert_array_equal(ts, np.arange(10.0))
        np.testing.assert_array_equal(y[:, :3], x[:, :3])
        np.testing.assert_allclose(y[:, 3:], x[:, 3:], atol=1e-10)

    def test_format(self, tmp_path):
        io.write_tum(tmp_path / "a.tum", [np.zeros(6)], timestamps=[1.5])
        assert (tmp_path / "a.tum").read_text().split() == ["1.500000", "0.0", "0.0", "0.0", "0.0", "0.0", "0.0", "1.0"]

    def test_comments_and_errors(self, tmp_path):
        (tmp_path / "a.tum").write_text("# header\n0 1 2 3 0 0 0 1\n")
        _, y = io.read_tum(tmp_path / "a.tum")
        np.testing.assert_array_equal(y, [[1, 2, 3, 0, 0, 0]])
        (tmp_path / "b.tum").write_text("0 1 2\n")
        with pytest.raises(InvalidArgumentError):
            io.read_tum(tmp_path / "b.tum")

    def test_non_finite_rejected(self, tmp_path):
        with pytest.raises(InvalidArgumentError):
            io.write_tum(tmp_path / "a.tum", [[math.nan, 0, 0, 0, 0, 0]])


class TestG2o:
    def test_roundtrip(self, tmp_path, rng):
        x = poses(rng, 4)
        edges = [(0, 1, random_pose(rng), np.arange(1.0, 7.0)), (1, 3, rng.normal(size=6) * 0.3, np.full(6, 2.0))]
        io.write_g2o(tmp_path / "g.g2o", x, edges, fixed=(0,))
        nodes, back, fixed = io.read_g2o(tmp_path / "g.g2o")
        np.testing.assert_allclose(nodes, x, atol=1e-10)
        assert fixed == [0]
        for (i, j, m, d), (i2, j2, m2, info) in zip(edges, back):
            assert (i, j) == (i2, j2)
            m = m.to_vector() if isinstance(m, Pose6) else m
            np.testing.assert_allclose(m2, m, atol=1e-10)
            np.testing.assert_allclose(info, np.diag(d), atol=1e-12)

    def test_quaternion_information_scaling(self, tmp_path):
        io.write_g2o(tmp_path / "g.g2o", np.zeros((2, 6)), [(0, 1, np.zeros(6), np.ones(6))])
        line = [l for l in (tmp_path / "g.g2o").read_text().splitlines() if l.startswith("EDGE")][0]
        upper = np.array(line.split()[10:], dtype=float)
        full = np.zeros((6, 6))
        full[np.triu_indices(6)] = upper
        np.testing.assert_allclose(np.diag(full), [1, 1, 1, 4, 4, 4])

    def test_bad_records(self, tmp_path):
        (tmp_path / "g.g2o").write_text("VERTEX_XY 0 1 2\n")
        with pytest.raises(InvalidArgumentError):
            io.read_g2o(tmp_path / "g.g2o")
        (tmp_path / "h.g2o").write_text("VERTEX_SE3:QUAT 1 0 0 0 0 0 0 1\n")
        with pytest.raises(InvalidArgumentError):
            io.read_g2o(tmp_path / "h.g2o")


class TestCsv:
    def test_odometry(self, tmp_path, rng):
        u, c = rng.normal(size=(5, 6)), rng.uniform(size=(5, 6))
        io.write_odometry(tmp_path / "o.csv", u, c)
        u2, c2 = io.read_odometry(tmp_path / "o.csv")
        np.testing.assert_array_equal(u2, u)
        np.testing.assert_array_equal(c2, c)

    def test_missing_column(self, tmp_path):
        (tmp_path / "o.csv").write_text("i,tx\n0,1\n")
        with pytest.raises(InvalidArgumentError):
            io.read_odometry(tmp_path / "o.csv")

    def test_proposals(self, tmp_path, rng):
        props = [LoopProposal(i, i + 5, random_pose(rng), rng.uniform(0.1, 1, 6), float(i)) for i in range(4)]
        io.write_proposals(tmp_path / "p.csv", props, [False, True, False, False])
        back, flags = io.read_proposals(tmp_path / "p.csv")
        assert flags.tolist() == [False, True, False, False]
        for a, b in zip(props, back):
            assert (a.i, a.j, a.score) == (b.i, b.j, b.score)
            np.testing.assert_array_equal(a.rel.to_vector(), b.rel.to_vector())
            np.testing.assert_array_equal(a.cov, b.cov)

    def test_loops_matrix_verdicts(self, tmp_path, rng):
        io.write_loops(tmp_path / "l.csv", [(1, 9, 0.25)])
        assert io.read_loops(tmp_path / "l.csv") == [(1, 9, 0.25)]
        m = rng.normal(size=(4, 4))
        io.write_matrix(tmp_path / "m.csv", m)
        np.testing.assert_array_equal(io.read_matrix(tmp_path / "m.csv"), m)
        props = [LoopProposal(0, 5, Pose6.identity(), np.ones(6)), LoopProposal(1, 6, Pose6.identity(), np.ones(6))]
        io.write_verdicts(tmp_path / "v.csv", props, props[1:], [0.1, 0.9])
        assert io.read_verdicts(tmp_path / "v.csv") == [(0, 5, 0.1, False), (1, 6, 0.9, True)]


class TestJson:
    def test_canonical(self):
        s = io.dumps({"b": np.float64(1.5), "a": [np.int64(2), math.inf], "c": np.zeros(2)})
        assert s == io.dumps({"c": [0.0, 0.0], "a": [2, None], "b": 1.5})

    def test_vectors(self, tmp_path, rng):
        v = rng.normal(size=(6, 3))
        io.write_vectors(tmp_path / "v.jsonl", v)
        np.testing.assert_array_equal(io.read_vectors(tmp_path / "v.jsonl"), v)

    def test_vector_gap(self, tmp_path):
        (tmp_path / "v.jsonl").write_text('{"frame_id": 1, "vector": [1]}\n')
        with pytest.raises(InvalidArgumentError):
            io.read_vectors(tmp_path / "v.jsonl")

    def test_metrics(self, tmp_path):
        io.write_metrics(tmp_path, {"ate_m": 0.5, "pearson": None, "extra": 3})
        head, row = (tmp_path / "metrics.csv").read_text().splitlines()
        assert head.split(",")[:6] == list(io.METRIC_KEYS)
        assert head.split(",")[-1] == "extra"
        assert row.split(",")[0] == "0.5" and row.split(",")[3] == ""
        assert io.read_json(tmp_path / "metrics.json")["ate_m"] == 0.5


def test_scenario_roundtrip(tmp_path):
    sc = generate(WorldSpec(seed=3, false_loop_rate=0.2, nuc_intervals=[(5, 15, 2.0)], turn_noise_multiplier=3.0))
    io.write_scenario(tmp_path, sc)
    back = io.read_scenario(tmp_path)
    assert back.spec == sc.spec
    np.testing.assert_array_equal(back.odometry, sc.odometry)
    np.testing.assert_array_equal(back.odometry_cov, sc.odometry_cov)
    np.testing.assert_array_equal(back.observations, sc.observations)
    np.testing.assert_array_equal(back.noise_multiplier, sc.noise_multiplier)
    np.testing.assert_array_equal(back.proposal_is_false, sc.proposal_is_false)
    np.testing.assert_allclose(back.gt, sc.gt, atol=1e-12)
    assert [(i, j) for i, j, _ in back.true_loops] == [(i, j) for i, j, _ in sc.true_loops]
