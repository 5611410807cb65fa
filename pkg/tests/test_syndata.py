import numpy as np
import pytest

from fnode.syndata import (
    DatasetFormatError,
    PanelDataset,
    Trajectory,
    generate_set_a,
    generate_set_b,
    load_dataset,
    save_dataset,
)


class TestTrajectory:
    def test_rejects_decreasing_times(self):
        with pytest.raises(ValueError):
            Trajectory([0.0, 0.5, 0.4], [1.0, 2.0, 3.0])

    def test_promotes_1d_values(self):
        t = Trajectory([0.0, 1.0], [1.0, 2.0])
        assert t.values.shape == (2, 1)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            Trajectory([0.0, 1.0], [1.0, np.inf])


class TestGenerators:
    def test_set_a_formula_noiseless(self):
        data = generate_set_a(n_per_class=3, n_classes=4, seed=11, noise="none")
        amps = data.metadata["amplitudes"]
        for traj in data.trajectories:
            expected = amps[traj.label] * np.sin(2 * np.pi * traj.times)
            np.testing.assert_allclose(traj.values[:, 0], expected, rtol=0, atol=0)

    def test_set_a_per_trajectory_noise_is_constant_offset(self):
        data = generate_set_a(n_per_class=4, n_classes=3, seed=2)
        amps = data.metadata["amplitudes"]
        for traj in data.trajectories:
            resid = traj.values[:, 0] - amps[traj.label] * np.sin(2 * np.pi * traj.times)
            # one epsilon per trajectory (up to rounding of the recovery)
            assert np.ptp(resid) < 1e-12
            assert abs(resid[0]) < 5 * np.sqrt(1e-3)

    def test_set_a_per_point_noise_varies(self):
        data = generate_set_a(n_per_class=2, n_classes=2, seed=2, noise="per_point")
        amps = data.metadata["amplitudes"]
        traj = data.trajectories[0]
        resid = traj.values[:, 0] - amps[traj.label] * np.sin(2 * np.pi * traj.times)
        assert np.ptp(resid) > 0.0

    def test_set_b_formula_noiseless(self):
        data = generate_set_b(n_per_class=3, n_classes=4, seed=7, noise="none")
        freqs = data.metadata["frequencies"]
        for traj in data.trajectories:
            expected = np.sin(2 * np.pi * freqs[traj.label] * traj.times)
            np.testing.assert_allclose(traj.values[:, 0], expected, rtol=0, atol=0)

    def test_shared_initial_condition_is_zero(self):
        # x(0) = 0 for every amplitude class by construction
        data = generate_set_a(n_per_class=1, n_classes=5, seed=3, noise="none")
        for traj in data.trajectories:
            amp = data.metadata["amplitudes"][traj.label]
            assert amp * np.sin(0.0) == 0.0

    def test_determinism(self):
        a = generate_set_a(n_per_class=2, n_classes=3, seed=42)
        b = generate_set_a(n_per_class=2, n_classes=3, seed=42)
        for ta, tb in zip(a.trajectories, b.trajectories):
            np.testing.assert_array_equal(ta.times, tb.times)
            np.testing.assert_array_equal(ta.values, tb.values)
            assert ta.label == tb.label

    def test_labels_partition_and_bound(self):
        data = generate_set_a(n_per_class=5, n_classes=4, seed=1)
        labels = np.array(data.labels())
        assert sorted(set(labels.tolist())) == [0, 1, 2, 3]
        assert all((labels == c).sum() == 5 for c in range(4))
        amps = np.array(data.metadata["amplitudes"])
        bound = amps.max() + 5 * np.sqrt(1e-3)
        assert max(np.abs(t.values).max() for t in data.trajectories) <= bound

    def test_counts_validated(self):
        with pytest.raises(ValueError):
            generate_set_a(n_per_class=0)


class TestRoundTrip:
    def test_save_load_is_bit_exact(self, tmp_path):
        data = generate_set_a(n_per_class=2, n_classes=3, seed=9)
        path = tmp_path / "d.jsonl"
        save_dataset(data, path)
        loaded = load_dataset(path)
        assert loaded.obs_dim == data.obs_dim
        assert loaded.metadata["amplitudes"] == data.metadata["amplitudes"]
        for ta, tb in zip(data.trajectories, loaded.trajectories):
            np.testing.assert_array_equal(ta.times, tb.times)
            np.testing.assert_array_equal(ta.values, tb.values)
            assert ta.label == tb.label

    def test_save_is_deterministic(self, tmp_path):
        data = generate_set_a(n_per_class=2, n_classes=2, seed=5)
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_dataset(data, p1)
        save_dataset(data, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_empty_file_is_parse_error(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        with pytest.raises(DatasetFormatError):
            load_dataset(path)

    def test_malformed_line_reports_locus(self, tmp_path):
        data = generate_set_a(n_per_class=1, n_classes=2, seed=5)
        path = tmp_path / "bad.jsonl"
        save_dataset(data, path)
        lines = path.read_text().splitlines()
        lines[2] = "{not json"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetFormatError, match=":3"):
            load_dataset(path)

    def test_mixed_obs_dim_rejected(self, tmp_path):
        path = tmp_path / "mixed.jsonl"
        path.write_text(
            '{"record": "header", "obs_dim": 1, "generator": "g", "seed": 0, "metadata": {}}\n'
            '{"id": 0, "label": null, "times": [0.0, 1.0], "values": [[1.0], [2.0]], "meta": {}}\n'
            '{"id": 1, "label": null, "times": [0.0, 1.0], "values": [[1.0, 2.0], [2.0, 3.0]], "meta": {}}\n'
        )
        with pytest.raises(DatasetFormatError, match="obs_dim"):
            load_dataset(path)

    def test_missing_header_rejected(self, tmp_path):
        path = tmp_path / "nohdr.jsonl"
        path.write_text('{"id": 0, "times": [0.0], "values": [[1.0]]}\n')
        with pytest.raises(DatasetFormatError, match="header"):
            load_dataset(path)


class TestPanelDataset:
    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            PanelDataset([], obs_dim=1)

    def test_rejects_mixed_dims(self):
        t1 = Trajectory([0.0], [[1.0]])
        t2 = Trajectory([0.0], [[1.0, 2.0]])
        with pytest.raises(ValueError):
            PanelDataset([t1, t2], obs_dim=1)
