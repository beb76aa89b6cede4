import numpy as np
import pytest

from netlasso_aid.data import (
    ClusterProfile,
    Dataset,
    GeneratorConfig,
    IncidentRecord,
    SplitSpec,
    TrafficSeries,
    generate_synthetic,
    incident_ramp,
    load_csv,
    make_splits,
    node_bias,
    occupancy_difference,
    read_dataset_csv,
    windowize,
    write_dataset_csv,
    write_incidents_csv,
    write_series_csv,
)
from netlasso_aid.errors import InvalidInputError, QuotaError
from netlasso_aid.ocsvm import INCIDENT, NORMAL

from oracles import rescan_window_labels


def small_cfg(**kwargs):
    defaults = dict(
        n_nodes=3,
        cluster_profiles=(ClusterProfile(diff_bias=-0.1, node_bias_step=0.0),),
        train_days=1,
        test_days=1,
        records_per_day=60,
        seed=0,
    )
    defaults.update(kwargs)
    return GeneratorConfig(**defaults)


class TestGenerateSynthetic:
    def test_deterministic(self):
        cfg = small_cfg(seed=5)
        s1, i1 = generate_synthetic(cfg)
        s2, i2 = generate_synthetic(cfg)
        assert i1 == i2
        for a, b in zip(s1, s2):
            assert np.array_equal(a.occ_up, b.occ_up)
            assert np.array_equal(a.occ_down, b.occ_down)

    def test_noise_free_difference_equals_bias(self):
        cfg = small_cfg(noise_std=0.0, incident_rate=0.0, confounder_rate=0.0)
        series, incidents = generate_synthetic(cfg)
        assert incidents == []
        for s in series:
            diff = occupancy_difference(s)
            assert np.allclose(diff, -0.1, atol=1e-12)

    def test_zero_bias_symmetric_construction(self):
        cfg = small_cfg(
            cluster_profiles=(ClusterProfile(diff_bias=0.0, node_bias_step=0.0),),
            noise_std=0.0, incident_rate=0.0, confounder_rate=0.0,
        )
        series, _ = generate_synthetic(cfg)
        for s in series:
            assert np.allclose(occupancy_difference(s), 0.0)

    def test_incident_core_bump_is_twice_delta(self):
        cfg = small_cfg(
            n_nodes=1, noise_std=0.0, confounder_rate=0.0,
            incident_rate=1.0, incident_delta=0.2, duration_range=(7, 7), seed=1,
        )
        series, incidents = generate_synthetic(cfg)
        assert len(incidents) == 1
        inc = incidents[0]
        diff = occupancy_difference(series[0])
        core = diff[inc.start_index : inc.end_index]
        assert core.max() == pytest.approx(-0.1 + 0.4)

    def test_incidents_only_in_test_days(self):
        cfg = small_cfg(n_nodes=6, incident_rate=1.0, seed=2)
        _series, incidents = generate_synthetic(cfg)
        assert incidents
        for inc in incidents:
            assert inc.start_index >= cfg.train_end_index

    def test_occupancy_stays_in_unit_interval(self):
        cfg = small_cfg(noise_std=0.2, seed=3)
        series, _ = generate_synthetic(cfg)
        for s in series:
            assert s.occ_up.min() >= 0.0 and s.occ_up.max() <= 1.0
            assert s.occ_down.min() >= 0.0 and s.occ_down.max() <= 1.0

    def test_duration_exceeding_day_is_config_error(self):
        with pytest.raises(InvalidInputError):
            small_cfg(duration_range=(61, 70))

    def test_cluster_noise_scale_applies(self):
        quiet = ClusterProfile(diff_bias=-0.1, node_bias_step=0.0, noise_scale=0.0)
        cfg = small_cfg(cluster_profiles=(quiet,), noise_std=0.05,
                        incident_rate=0.0, confounder_rate=0.0)
        series, _ = generate_synthetic(cfg)
        assert np.allclose(occupancy_difference(series[0]), -0.1)


class TestNodeBias:
    def test_jitter_centres_on_cluster_bias(self):
        cfg = small_cfg(
            n_nodes=4,
            cluster_profiles=(ClusterProfile(diff_bias=-0.2, node_bias_step=0.01),),
        )
        biases = [node_bias(cfg, i) for i in range(4)]
        assert np.mean(biases) == pytest.approx(-0.2)
        assert np.allclose(np.diff(biases), 0.01)


class TestOccupancyDifference:
    def test_equal_series_gives_zeros(self):
        s = TrafficSeries("n", np.full(10, 0.4), np.full(10, 0.4))
        assert np.all(occupancy_difference(s) == 0.0)

    def test_hand_value(self):
        s = TrafficSeries("n", np.array([0.6]), np.array([0.2]))
        assert occupancy_difference(s)[0] == pytest.approx(0.4)

    def test_extreme_bound(self):
        s = TrafficSeries("n", np.array([0.0]), np.array([1.0]))
        assert occupancy_difference(s)[0] == -1.0

    def test_always_within_bounds(self):
        rng = np.random.default_rng(4)
        s = TrafficSeries("n", rng.uniform(0, 1, 50), rng.uniform(0, 1, 50))
        d = occupancy_difference(s)
        assert d.min() >= -1.0 and d.max() <= 1.0


class TestWindowize:
    def test_minimum_length_gives_one_window(self):
        ends, X, labels = windowize(np.arange(4.0), width=4)
        assert len(ends) == 1 and ends[0] == 3
        assert np.array_equal(X[0], [0.0, 1.0, 2.0, 3.0])

    def test_window_count(self):
        ends, X, _ = windowize(np.arange(10.0), width=4)
        assert len(ends) == 7 and X.shape == (7, 4)

    def test_label_by_window_end(self):
        inc = IncidentRecord("n", 5, 3)  # covers 5, 6, 7
        ends, _X, labels = windowize(np.arange(10.0), 4, [inc])
        flagged = set(ends[labels == INCIDENT].tolist())
        assert flagged == {5, 6, 7}

    def test_labels_match_brute_force_rescan(self):
        rng = np.random.default_rng(6)
        incs = [IncidentRecord("n", 10, 4), IncidentRecord("n", 30, 2)]
        ends, _X, labels = windowize(rng.uniform(-1, 1, 50), 4, incs)
        want = rescan_window_labels(ends, incs)
        assert np.array_equal(labels == INCIDENT, want)

    def test_too_short_series_rejected(self):
        with pytest.raises(InvalidInputError):
            windowize(np.arange(3.0), width=4)


class TestMakeSplits:
    def build(self, cfg=None, seed=0):
        cfg = cfg or GeneratorConfig(
            n_nodes=24, train_days=2, test_days=1, seed=seed,
            cluster_profiles=(ClusterProfile(diff_bias=-0.1),),
        )
        series, incidents = generate_synthetic(cfg)
        windows = {
            s.node_id: windowize(
                occupancy_difference(s), cfg.window,
                [i for i in incidents if i.node_id == s.node_id],
            )
            for s in series
        }
        return cfg, windows, incidents

    def test_default_quota_matches_protocol(self):
        cfg, windows, incidents = self.build()
        train, test = make_splits(windows, incidents, SplitSpec(cfg.train_end_index))
        assert len(test) == 1200
        assert int((test.labels == INCIDENT).sum()) == 60
        assert int((test.labels == NORMAL).sum()) == 1140

    def test_splits_are_disjoint(self):
        cfg, windows, incidents = self.build()
        train, test = make_splits(windows, incidents, SplitSpec(cfg.train_end_index))
        assert not (train.key_set() & test.key_set())

    def test_train_has_no_incident_labels(self):
        cfg, windows, incidents = self.build()
        train, _test = make_splits(windows, incidents, SplitSpec(cfg.train_end_index))
        assert int((train.labels == INCIDENT).sum()) == 0
        assert np.all(train.end_indices < cfg.train_end_index)

    def test_zero_incident_rate_fails_with_deficit(self):
        cfg = GeneratorConfig(
            n_nodes=24, train_days=2, test_days=1, incident_rate=0.0,
            cluster_profiles=(ClusterProfile(diff_bias=-0.1),),
        )
        series, incidents = generate_synthetic(cfg)
        windows = {
            s.node_id: windowize(occupancy_difference(s), cfg.window, [])
            for s in series
        }
        with pytest.raises(QuotaError):
            make_splits(windows, incidents, SplitSpec(cfg.train_end_index))

    def test_normal_deficit_lists_nodes(self):
        cfg, windows, incidents = self.build()
        spec = SplitSpec(cfg.train_end_index, test_total=120000)
        with pytest.raises(QuotaError, match="deficit"):
            make_splits(windows, incidents, spec)

    def test_metadata_records_actual_counts(self):
        cfg, windows, incidents = self.build()
        train, test = make_splits(windows, incidents, SplitSpec(cfg.train_end_index))
        actual = test.metadata["train_records_actual"]
        assert set(actual) == set(windows)
        assert test.metadata["train_records_target_per_node"] == 2640
        assert test.metadata["test_quota"] == (60, 1140)

    def test_sampled_incidents_have_windows_in_test(self):
        cfg, windows, incidents = self.build()
        _train, test = make_splits(windows, incidents, SplitSpec(cfg.train_end_index))
        keys = test.key_set()
        for inc in test.metadata["incidents"]:
            covered = any(
                (inc.node_id, e) in keys
                for e in range(inc.start_index, inc.end_index)
            )
            assert covered

    def test_deterministic_given_seed(self):
        cfg, windows, incidents = self.build()
        a = make_splits(windows, incidents, SplitSpec(cfg.train_end_index, seed=3))
        b = make_splits(windows, incidents, SplitSpec(cfg.train_end_index, seed=3))
        assert np.array_equal(a[1].end_indices, b[1].end_indices)
        assert np.array_equal(a[1].node_ids, b[1].node_ids)


class TestSeriesCsv:
    def test_round_trip(self, tmp_path):
        cfg = small_cfg(seed=7)
        series, incidents = generate_synthetic(cfg)
        sp, ip = tmp_path / "series.csv", tmp_path / "incidents.csv"
        write_series_csv(sp, series)
        write_incidents_csv(ip, incidents, cfg.timestep_minutes)
        series2, incidents2 = load_csv(sp, ip, cfg.timestep_minutes)
        assert incidents2 == incidents
        for a, b in zip(series, series2):
            assert a.node_id == b.node_id
            assert np.array_equal(a.occ_up, b.occ_up)
            assert np.array_equal(a.occ_down, b.occ_down)

    def test_out_of_range_occupancy_names_line(self, tmp_path):
        path = tmp_path / "series.csv"
        path.write_text(
            "node_id,timestamp,occ_up,occ_down\n"
            "n1,2016-01-01T00:00:00,0.5,0.5\n"
            "n1,2016-01-01T00:05:00,1.5,0.5\n"
        )
        with pytest.raises(InvalidInputError, match=":3"):
            load_csv(path)

    def test_nan_occupancy_rejected_with_line(self, tmp_path):
        path = tmp_path / "series.csv"
        path.write_text(
            "node_id,timestamp,occ_up,occ_down\n"
            "n1,2016-01-01T00:00:00,nan,0.5\n"
        )
        with pytest.raises(InvalidInputError, match=":2"):
            load_csv(path)

    def test_broken_cadence_rejected(self, tmp_path):
        path = tmp_path / "series.csv"
        path.write_text(
            "node_id,timestamp,occ_up,occ_down\n"
            "n1,2016-01-01T00:00:00,0.5,0.5\n"
            "n1,2016-01-01T00:07:00,0.5,0.5\n"
        )
        with pytest.raises(InvalidInputError, match="cadence"):
            load_csv(path)

    def test_overlapping_incidents_rejected(self, tmp_path):
        sp = tmp_path / "series.csv"
        rows = ["node_id,timestamp,occ_up,occ_down"]
        for t in range(12):
            rows.append(f"n1,2016-01-01T00:{5*t:02d}:00,0.5,0.5")
        sp.write_text("\n".join(rows) + "\n")
        ip = tmp_path / "incidents.csv"
        ip.write_text(
            "node_id,start_timestamp,duration_steps\n"
            "n1,2016-01-01T00:10:00,4\n"
            "n1,2016-01-01T00:20:00,3\n"
        )
        with pytest.raises(InvalidInputError, match="overlap"):
            load_csv(sp, ip)

    def test_wrong_header_rejected(self, tmp_path):
        path = tmp_path / "series.csv"
        path.write_text("a,b,c,d\n")
        with pytest.raises(InvalidInputError, match="header"):
            load_csv(path)


class TestDatasetCsv:
    def test_round_trip(self, tmp_path):
        cfg, windows, incidents = TestMakeSplits().build()
        _train, test = make_splits(windows, incidents, SplitSpec(cfg.train_end_index))
        path = tmp_path / "test.csv"
        write_dataset_csv(path, test)
        back = read_dataset_csv(path, "test")
        assert np.array_equal(back.node_ids, test.node_ids)
        assert np.array_equal(back.end_indices, test.end_indices)
        assert np.array_equal(back.X, test.X)
        assert np.array_equal(back.labels, test.labels)

    def test_header_carries_window_width(self, tmp_path):
        ds = Dataset(
            np.array(["n"], dtype=object), np.array([3]),
            np.array([[0.1, 0.2, 0.3, 0.4]]), np.array([NORMAL], dtype=object),
            "test",
        )
        path = tmp_path / "ds.csv"
        write_dataset_csv(path, ds)
        assert path.read_text().splitlines()[0] == "node_id,end_index,f1,f2,f3,f4,label"


class TestValidationTypes:
    def test_series_rejects_out_of_range(self):
        with pytest.raises(InvalidInputError):
            TrafficSeries("n", np.array([1.2]), np.array([0.5]))

    def test_series_rejects_length_mismatch(self):
        with pytest.raises(InvalidInputError):
            TrafficSeries("n", np.zeros(3), np.zeros(4))

    def test_incident_requires_positive_duration(self):
        with pytest.raises(InvalidInputError):
            IncidentRecord("n", 0, 0)

    def test_incident_ramp_peaks_at_one(self):
        for dur in range(1, 12):
            ramp = incident_ramp(dur)
            assert ramp.max() == 1.0 and ramp.min() > 0.0 and len(ramp) == dur
