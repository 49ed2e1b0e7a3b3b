
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ndm.errors import CorruptionError, FormatError, ParameterError, PersistenceError
from ndm.stimulus import (DatasetManifest, Direction, RdkParams, build_dataset, dot_trajectory,
                          generate_stimulus, load_stimulus, n_signal_dots, plan_dataset, save_stimulus,
                          stimulus_bytes)

SMALL = dict(frame_size=60, aperture_diameter=54.0, n_dots=30, n_frames=24)


def _steps(traj):
    """Per-frame displacement of every dot over non-reset transitions."""
    d = np.diff(traj.positions, axis=0)
    keep = ~traj.reset[1:]
    return d, keep


def test_default_geometry():
    stim = generate_stimulus(RdkParams(coherence=0.3, seed=4))
    assert stim.voxels.shape == (300, 300, 120)
    assert stim.voxels.dtype == np.uint8
    assert set(np.unique(stim.voxels)) <= {0, 255}


def test_high_coherence_signal_dots_step_right():
    traj = dot_trajectory(RdkParams(coherence=0.99, direction=Direction.RIGHT, seed=11))
    d, keep = _steps(traj)
    assert traj.is_signal.sum() == 198
    for f in range(d.shape[0]):
        moved = keep[f]
        exact = np.all(np.isclose(d[f], [2.0, 0.0]), axis=1) & moved
        # every non-reset signal dot moved exactly (+2, 0)
        assert np.all(exact[traj.is_signal & moved])
        if moved.all():
            assert exact.sum() >= 198


def test_zero_coherence_has_no_signal_dots():
    traj = dot_trajectory(RdkParams(coherence=0.0, seed=2))
    assert not traj.is_signal.any()
    d, keep = _steps(traj)
    angles = np.arctan2(d[..., 1], d[..., 0])[keep]
    # random directions: not concentrated on the horizontal
    assert np.std(np.cos(angles)) > 0.5


def test_noise_dots_move_at_signal_speed():
    traj = dot_trajectory(RdkParams(coherence=0.25, seed=3, **SMALL))
    d, keep = _steps(traj)
    speed = np.hypot(d[..., 0], d[..., 1])[keep]
    assert np.allclose(speed, 2.0)


def test_resets_every_fourth_frame():
    traj = dot_trajectory(RdkParams(coherence=0.5, seed=5, **SMALL))
    for f in range(SMALL["n_frames"]):
        if f % 4 == 0:
            assert traj.reset[f].all()


@given(c=st.floats(0, 1), seed=st.integers(0, 2**32))
@settings(max_examples=25, deadline=None)
def test_dots_stay_inside_aperture(c, seed):
    p = RdkParams(coherence=c, seed=seed, **SMALL)
    traj = dot_trajectory(p)
    r = np.hypot(traj.positions[..., 0] - 30.0, traj.positions[..., 1] - 30.0)
    assert np.all(r <= p.aperture_diameter / 2 + 1e-9)


@given(seed=st.integers(0, 2**32), direction=st.sampled_from(list(Direction)))
@settings(max_examples=20, deadline=None)
def test_signal_displacement_is_exactly_speed(seed, direction):
    traj = dot_trajectory(RdkParams(coherence=0.6, direction=direction, seed=seed, **SMALL))
    d, keep = _steps(traj)
    mask = keep & traj.is_signal[None, :]
    assert np.mean(d[..., 0][mask]) == pytest.approx(direction.sign * 2.0, abs=1e-12)


@given(c1=st.floats(0, 1), c2=st.floats(0, 1))
def test_signal_count_monotone_in_coherence(c1, c2):
    lo, hi = sorted((c1, c2))
    assert n_signal_dots(lo, 200) <= n_signal_dots(hi, 200)


def test_signal_count_rounding():
    # 1 % steps are exact on 200 dots
    assert [n_signal_dots(i / 100, 200) for i in range(100)] == [2 * i for i in range(100)]
    assert n_signal_dots(0.0025, 200) == 1  # half rounds up


@given(seed=st.integers(0, 2**32))
@settings(max_examples=10, deadline=None)
def test_every_dot_rendered(seed):
    # isolated dots: each renders as the same 6 px disc, so lit pixels scale with dot count
    p = RdkParams(coherence=0.5, seed=seed, frame_size=60, aperture_diameter=54.0, n_dots=1, n_frames=8)
    stim = generate_stimulus(p)
    lit = (stim.voxels > 0).sum(axis=(0, 1))
    assert np.all(lit >= 24) and np.all(lit <= 37)


def test_deterministic_bytes():
    p = RdkParams(coherence=0.37, seed=123, **SMALL)
    assert stimulus_bytes(generate_stimulus(p)) == stimulus_bytes(generate_stimulus(p))
    other = RdkParams(coherence=0.37, seed=124, **SMALL)
    assert stimulus_bytes(generate_stimulus(p)) != stimulus_bytes(generate_stimulus(other))


@pytest.mark.parametrize("field,kw", [
    ("coherence", dict(coherence=1.5)),
    ("aperture_diameter", dict(aperture_diameter=400.0)),
    ("n_frames", dict(n_frames=0)),
    ("n_dots", dict(n_dots=0)),
])
def test_invalid_params_name_field(field, kw):
    with pytest.raises(ParameterError) as err:
        RdkParams(**kw)
    assert err.value.field == field


def test_round_trip(tmp_path):
    stim = generate_stimulus(RdkParams(coherence=0.2, seed=9, **SMALL))
    save_stimulus(stim, tmp_path / "a.rdk")
    back = load_stimulus(tmp_path / "a.rdk")
    assert np.array_equal(back.voxels, stim.voxels)
    assert back.params == stim.params


def test_truncated_file_is_format_error(tmp_path):
    stim = generate_stimulus(RdkParams(seed=9, **SMALL))
    save_stimulus(stim, tmp_path / "a.rdk")
    data = (tmp_path / "a.rdk").read_bytes()
    (tmp_path / "a.rdk").write_bytes(data[:-10])
    with pytest.raises(FormatError):
        load_stimulus(tmp_path / "a.rdk")
    (tmp_path / "b.rdk").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        load_stimulus(tmp_path / "b.rdk")


def test_dataset_counts():
    assert len(plan_dataset().entries) == 2000
    assert len(plan_dataset([0.5], 1).entries) == 2


def test_build_dataset_reproducible(tmp_path):
    a = build_dataset(tmp_path / "a", [0.0, 0.5], 2, seed=7, base=RdkParams(**SMALL))
    b = build_dataset(tmp_path / "b", [0.0, 0.5], 2, seed=7, base=RdkParams(**SMALL), workers=2)
    assert len(a.entries) == 8
    assert [e.checksum for e in a.entries] == [e.checksum for e in b.entries]
    assert DatasetManifest.load(tmp_path / "a").verify() == []


def test_manifest_mismatch_is_corruption(tmp_path):
    m = build_dataset(tmp_path, [0.5], 1, seed=1, base=RdkParams(**SMALL))
    path = tmp_path / m.entries[0].path
    data = bytearray(path.read_bytes())
    data[-1] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CorruptionError):
        load_stimulus(path)
    assert DatasetManifest.load(tmp_path).verify() == [m.entries[0]]


def test_unwritable_root(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(PersistenceError):
        build_dataset(blocker / "sub", [0.5], 1, base=RdkParams(**SMALL))


def test_missing_manifest(tmp_path):
    with pytest.raises(PersistenceError):
        DatasetManifest.load(tmp_path)
