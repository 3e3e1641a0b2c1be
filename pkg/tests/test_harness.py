import csv
import io
import json

import numpy as np
import pytest

from otat.blocks import ConfigError
from otat.harness import (
    METRICS_HEADER,
    MetricsReport,
    RunConfig,
    SeedResult,
    ablation_suite,
    ablation_table_csv,
    acceptance_config,
    csv_text,
    export_heatmaps,
    fit_seed,
    load_config,
    load_checkpoint,
    parse_config_text,
    save_checkpoint,
    train,
    write_report,
)
from otat.network import Arm
from otat.transport import CostKind

TINY = parse_config_text("""
# small enough for unit tests
episode.n_classes = 3
episode.shots = 2
episode.queries = 2
episode.latent_dim = 4
episode.dim = 8
episode.visual_tokens = 6
episode.text_tokens = 2
model.adapter_rank = 2
epochs = 2
seeds = 0,1
""")


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


class TestConfig:
    def test_parse(self):
        assert TINY.episode.dim == 8 and TINY.dim == 8
        assert TINY.seeds == (0, 1)
        assert TINY.model.adapter_rank == 2

    def test_coercion(self):
        cfg = RunConfig().with_overrides({"ablation": "OTO", "cost": "euclidean", "sinkhorn.stabilized": "false",
                                          "weights.xi": "0.5", "dim": "32"})
        assert cfg.ablation is Arm.OTO and cfg.cost is CostKind.EUCLIDEAN
        assert cfg.sinkhorn.stabilized is False and cfg.weights.xi == 0.5 and cfg.episode.dim == 32

    @pytest.mark.parametrize("bad", [{"nope": "1"}, {"model.nope": "1"}, {"epochs.x": "1"}, {"epochs": "many"},
                                     {"ablation": "all"}, {"episode.gap_rank": "99"}, {"seeds": ""}])
    def test_rejects(self, bad):
        with pytest.raises(ConfigError):
            RunConfig().with_overrides(bad)

    def test_parse_errors(self):
        with pytest.raises(ConfigError):
            parse_config_text("epochs 3")

    def test_text_round_trip(self, tmp_path):
        path = tmp_path / "run.txt"
        path.write_text(TINY.to_text())
        assert load_config(path) == TINY
        assert load_config(path).run_id() == TINY.run_id()

    def test_run_id_tracks_config(self):
        assert TINY.run_id().startswith("OTA_OTO_EAW-")
        assert TINY.with_overrides({"epochs": 3}).run_id() != TINY.run_id()

    def test_get(self):
        assert RunConfig().get("sinkhorn.lam") == 10.0
        assert "optimizer.lr" in RunConfig().keys()
        with pytest.raises(ConfigError):
            RunConfig().get("lam")

    def test_acceptance_defaults(self):
        cfg = acceptance_config()
        assert cfg.optimizer.lr == 1e-3 and cfg.epochs == 50 and cfg.batch_size == 64
        assert cfg.sinkhorn.lam == 10.0 and cfg.sinkhorn.max_iters == 100
        assert len(cfg.seeds) == 5


@pytest.fixture(scope="module")
def report():
    return train(TINY)


class TestReport:
    def test_final_statistics(self, report):
        acc = report.accuracies
        assert report.final["accuracy_mean"] == pytest.approx(acc.mean())
        assert report.final["accuracy_std"] == pytest.approx(np.std(acc, ddof=1))

    def test_metric_rows(self, report):
        table = rows(report.metrics_csv())
        assert list(table[0]) == METRICS_HEADER
        finals = [r for r in table if r["seed"] == "all"]
        assert {r["metric"] for r in finals} == {"accuracy_mean", "accuracy_std", "mnn_mean", "mnn_std"}
        assert {r["split"] for r in table} == {"query", "train"}
        assert len([r for r in table if r["metric"] == "accuracy" and r["seed"] != "all"]) == 2 * 2

    def test_validation(self, report):
        with pytest.raises(ValueError):
            MetricsReport("x", TINY, [])
        with pytest.raises(ValueError):
            MetricsReport("x", TINY, [SeedResult(0, [], [], 1.5, 0.0)])

    def test_write(self, report, tmp_path):
        written = write_report(report, tmp_path)
        names = sorted(p.name for p in written)
        assert names == sorted(["metrics.csv", "config.txt", "timing.json",
                                f"losses_{report.run_id}_seed0.csv", f"losses_{report.run_id}_seed1.csv"])
        assert json.loads((tmp_path / "timing.json").read_text())["run_id"] == report.run_id
        losses = rows((tmp_path / f"losses_{report.run_id}_seed0.csv").read_text())
        assert [int(r["step"]) for r in losses] == [1, 2]
        assert "wall" not in (tmp_path / "metrics.csv").read_text()

    def test_write_failure_names_path(self, report, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(OSError, match="file"):
            write_report(report, blocker / "sub")

    def test_deterministic(self, report):
        assert train(TINY).metrics_csv() == report.metrics_csv()


class TestAblation:
    def test_grid_shape(self):
        one = TINY.with_overrides({"seeds": "0", "epochs": "1"})
        table = ablation_suite(one, {"ablation": ["Baseline", "OTO"], "cost": ["cosine", "constant", "euclidean"]})
        assert len(table) == 6
        assert [p["cost"] for p, _ in table[:3]] == ["cosine", "constant", "euclidean"]
        csv_rows = rows(ablation_table_csv(table))
        assert len(csv_rows) == 6
        assert csv_rows[0]["point"] == "ablation=Baseline;cost=cosine"
        assert csv_rows[4]["ablation"] == "OTO" and csv_rows[4]["cost"] == "constant"

    def test_empty_grid_is_base(self):
        one = TINY.with_overrides({"seeds": "0", "epochs": "1"})
        table = ablation_suite(one)
        assert len(table) == 1 and table[0][0] == {}
        assert rows(ablation_table_csv(table))[0]["point"] == "base"

    def test_empty_axis(self):
        with pytest.raises(ConfigError):
            ablation_suite(TINY, {"weights.xi": []})

    def test_workers_match_serial(self):
        one = TINY.with_overrides({"epochs": "1"})
        serial = ablation_suite(one, {"weights.xi": [0.0, 1.0]})
        parallel = ablation_suite(one, {"weights.xi": [0.0, 1.0]}, workers=2)
        assert [r.metrics_csv() for _, r in serial] == [r.metrics_csv() for _, r in parallel]


class TestExports:
    def test_heatmaps(self, tmp_path):
        written = export_heatmaps(TINY, tmp_path)
        table = rows((tmp_path / "heatmaps.csv").read_text())
        assert len(table) == 6 * 3
        for r in table:
            h = np.array([float(r[f"h_{i}"]) for i in range(6)])
            assert abs((1 - h).sum() - float(r["distance"])) <= 1e-9
        assert len([p for p in written if p.suffix == ".svg"]) == 6
        assert (tmp_path / "svg" / "query_000.svg").read_text().startswith("<svg")

    def test_heatmaps_byte_identical(self, tmp_path):
        export_heatmaps(TINY, tmp_path / "a", trained=False)
        export_heatmaps(TINY, tmp_path / "b", trained=False)
        for name in ("heatmaps.csv", "ot_distances.csv", "svg/query_005.svg"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_checkpoint_round_trip(self, tmp_path):
        clf, _ = fit_seed(TINY, 0)
        save_checkpoint(clf, tmp_path)
        tensors, manifest = load_checkpoint(tmp_path)
        params = {**clf.network_.trainable(), **clf.network_.frozen()}
        assert set(tensors) == set(params)
        for name, value in params.items():
            assert tensors[name].tobytes() == np.ascontiguousarray(value).tobytes()
        assert manifest["classes"] == [0, 1, 2]
        assert set(manifest["trainable"]).isdisjoint(manifest["frozen"])


def test_csv_text_uses_full_precision():
    assert csv_text(["x"], [[0.1 + 0.2]]) == "x\n0.30000000000000004\n"
