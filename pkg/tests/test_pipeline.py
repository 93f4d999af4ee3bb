import json
from dataclasses import replace

import numpy as np
import pytest

from facegaze.errors import ParseError, ValidationError
from facegaze.pipeline import (
    PipelineConfig,
    config_from_dict,
    dumps_report,
    iter_suite,
    load_config,
    load_suite,
    parse_override,
    run_pipeline,
    split_track,
    suite_model,
    write_suite,
)
from facegaze.regress import gaze_angles, select_sparse_indices
from facegaze.synth import generate_gaze_track


def small_config(**scenario):
    cfg = PipelineConfig()
    # enough sparse-grid samples (16) to span the 15-d feature space for ALR
    sc = dict(frames=64, track_rows=8, scan_size=2000)
    sc.update(scenario)
    return replace(cfg, fit=replace(cfg.fit, source_samples=800),
                   regress=replace(cfg.regress, grid=4, test_frames=4),
                   scenario=replace(cfg.scenario, **sc))


class TestConfig:
    def test_defaults_echoed(self):
        doc = PipelineConfig().to_dict()
        for section in ("fit", "render", "regress", "scenario", "paths"):
            assert section in doc
        assert doc["regress"]["k"] == 3
        assert config_from_dict(doc).to_dict() == doc

    def test_overrides(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"regress": {"k": 5}, "fit": {"max_iters": 50}}))
        cfg = load_config(path, ["regress.k=7", "scenario.sessions=[\"static\", \"moving\"]"], seed=9)
        assert cfg.regress.k == 7
        assert cfg.fit.max_iters == 50
        assert cfg.scenario.sessions == ("static", "moving")
        assert cfg.seed == 9

    def test_parse_override(self):
        assert parse_override("fit.d_t=0.02") == (["fit", "d_t"], 0.02)
        assert parse_override("scenario.track=raster")[1] == "raster"
        with pytest.raises(ValidationError):
            parse_override("no_equals")

    @pytest.mark.parametrize("override", [
        "scenario.outlier_fraction=1.0",
        "scenario.sessions=[]",
        "scenario.sessions=[\"dancing\"]",
        "regress.k=0",
        "bogus.key=1",
        "fit.not_a_field=1",
    ])
    def test_invalid(self, override):
        with pytest.raises(ValidationError):
            load_config(None, [override])

    def test_bad_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{nope")
        with pytest.raises(ParseError):
            load_config(path)


class TestSuite:
    def test_split(self):
        screens = np.array([p for p, _ in generate_gaze_track("raster", 600, 20)])
        train, test = split_track(screens, 14, 100)
        assert len(train) == 196
        assert len(test) == 100
        assert not set(train) & set(test)
        np.testing.assert_array_equal(train, select_sparse_indices(screens, 14))

    def test_moving_poses_keep_eyes_in_range(self):
        cfg = small_config(sessions=("moving",), frames=20, track_rows=2)
        model = suite_model(cfg.scenario)
        yaws = []
        for frame in iter_suite(model, cfg):
            yaw, pitch = gaze_angles(frame.head_gaze)
            assert max(abs(yaw), abs(pitch)) <= np.radians(30) + 1e-12
            hy, _ = gaze_angles(frame.scenario.rotation @ [0, 0, -1.0])
            assert abs(hy) <= np.radians(20) + 1e-12
            yaws.append(hy)
        assert np.std(yaws) > np.radians(3)

    def test_write_and_load(self, tmp_path):
        cfg = small_config(frames=12, track_rows=2)
        cfg = replace(cfg, regress=replace(cfg.regress, grid=2, test_frames=2))
        manifest = write_suite(tmp_path, cfg)
        for rel in manifest["checksums"]:
            assert (tmp_path / rel).is_file()
        model, frames, intr = load_suite(tmp_path)
        assert len(frames) == len(manifest["frames"]) == 6
        mem = list(iter_suite(suite_model(cfg.scenario), cfg, intr))
        for a, b in zip(frames, mem):
            np.testing.assert_allclose(a.scan.points, b.scan.points, atol=1e-12)
            np.testing.assert_allclose(a.image.data, b.image.data, atol=0.5 / 255 + 1e-12)
            np.testing.assert_array_equal(a.scenario.rotation, b.scenario.rotation)


@pytest.fixture(scope="module")
def report():
    return run_pipeline(small_config(sessions=("static", "moving")))


@pytest.mark.slow
class TestRunPipeline:
    def test_sessions(self, report):
        assert set(report["sessions"]) == {"static", "moving"}

    def test_counts(self, report):
        cfg = small_config()
        screens = np.array([p for p, _ in generate_gaze_track("raster", cfg.scenario.frames, cfg.scenario.track_rows)])
        train, test = split_track(screens, cfg.regress.grid, cfg.regress.test_frames)
        for s in report["sessions"].values():
            f = s["frames"]
            assert f["train"] == len(train)
            assert f["test"] == len(test) == 4
            assert f["failed"] == 0
            assert len(s["per_frame"]) == len(train) + len(test)

    def test_mean_column(self, report):
        for s in report["sessions"].values():
            for reg in ("knn", "alr"):
                r = s["results"][reg]
                assert r["mean"]["mean"] == pytest.approx(0.5 * (r["left"]["mean"] + r["right"]["mean"]))

    def test_fit_statistics(self, report):
        fit = report["sessions"]["static"]["fit"]
        assert fit["rotation_error_deg"]["count"] == report["sessions"]["static"]["frames"]["total"]
        assert fit["rotation_error_deg"]["median"] < 1.0

    def test_config_echo_and_schema(self, report):
        assert report["schema_version"] == "1.0"
        assert report["config"] == small_config(sessions=("static", "moving")).to_dict()
        text = dumps_report(report)
        assert text.endswith("\n")
        assert json.loads(text)["tool_version"]

    def test_empty_suite(self):
        with pytest.raises(ValidationError):
            run_pipeline(small_config(), frames=[])
