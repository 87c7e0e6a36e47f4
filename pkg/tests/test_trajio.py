import numpy as np
import pytest

from mcfusion.geometry import AbsolutePose, Trajectory
from mcfusion.trajio import TrajectoryParseError, format_trajectory, read_trajectory, write_trajectory

from conftest import random_pose


def make_traj(rng, n=6):
    return Trajectory(np.arange(n) * 0.1, tuple(random_pose(rng) for _ in range(n)))


def test_round_trip_exact(tmp_path, rng):
    traj = make_traj(rng)
    path = tmp_path / "t.txt"
    write_trajectory(path, traj, header="config_hash=abc")
    back = read_trajectory(path)
    assert np.array_equal(back.timestamps, traj.timestamps)
    for p, q in zip(back.poses, traj.poses):
        assert np.allclose(p.rotation, q.rotation, atol=1e-12)
        assert np.array_equal(p.translation, q.translation)


def test_header_lines_are_comments(rng):
    text = format_trajectory(make_traj(rng, 2), header="a=1\nb=2")
    lines = text.splitlines()
    assert lines[:2] == ["# a=1", "# b=2"] and len(lines) == 4


def test_canonical_quaternion_sign(tmp_path):
    R = np.diag([1.0, -1.0, -1.0])  # 180 degrees about x
    traj = Trajectory(np.array([0.0]), (AbsolutePose(R, np.zeros(3)),))
    qw = float(format_trajectory(traj).split()[-1])
    assert qw >= 0


def test_rounded_file_still_parses(tmp_path):
    c, s = np.cos(0.3), np.sin(0.3)
    path = tmp_path / "r.txt"
    path.write_text(f"0.0 1 2 3 0 0 {np.sin(0.15):.7f} {np.cos(0.15):.7f}\n")
    pose = read_trajectory(path).poses[0]
    assert np.allclose(pose.rotation, [[c, -s, 0], [s, c, 0], [0, 0, 1]], atol=1e-6)


@pytest.mark.parametrize(
    "bad, reason",
    [
        ("0.5 1 2 3 0 0 0", "expected 8 fields"),
        ("0.5 1 2 x 0 0 0 1", "could not convert"),
        ("0.5 1 2 3 0 0 0 0", "zero or non-finite quaternion"),
    ],
)
def test_parse_error_reports_line(tmp_path, bad, reason):
    path = tmp_path / "bad.txt"
    path.write_text("# comment\n0.0 0 0 0 0 0 0 1\n\n0.2 0 0 0 0 0 0 1\n" + bad + "\n")
    with pytest.raises(TrajectoryParseError) as err:
        read_trajectory(path)
    assert err.value.line_no == 5
    assert reason in err.value.reason
    assert str(path) in str(err.value)


def test_empty_and_non_monotone_files(tmp_path):
    empty = tmp_path / "e.txt"
    empty.write_text("# nothing\n")
    with pytest.raises(TrajectoryParseError):
        read_trajectory(empty)
    back = tmp_path / "b.txt"
    back.write_text("1.0 0 0 0 0 0 0 1\n0.5 0 0 0 0 0 0 1\n")
    with pytest.raises(TrajectoryParseError):
        read_trajectory(back)
