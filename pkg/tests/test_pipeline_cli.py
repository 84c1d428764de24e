"""Pipeline and CLI tests: config validation and merging, stage artifacts,
deterministic outputs, graceful per-site failure, and process exit codes."""

import json
import math

import numpy as np
import pytest

from lrf.allocation import CompressionPlan
from lrf.calibration import ToyModel, WeightSite, forward_capture, generate_calibration
from lrf.cli import (
    EXIT_ALL_FAILED,
    EXIT_CONFIG,
    EXIT_INFEASIBLE,
    EXIT_IO,
    EXIT_OK,
    main,
)
from lrf.exceptions import AllSitesFailed, ConfigError
from lrf.model_io import (
    blob_path,
    load_compressed,
    load_grams,
    load_json,
    manifest_path,
    save_grams,
    save_model,
)
from lrf.pipeline import (
    DEFAULT_CONFIG,
    RunConfig,
    build_toy_model,
    cmd_allocate,
    cmd_bench,
    cmd_calibrate,
    cmd_compress,
    cmd_evaluate,
    cmd_run,
    resolve_threads,
)


def _cfg(tmp_path, name="run", **over):
    base = {
        "out_dir": str(tmp_path / name),
        "model": {
            "n_layers": 2,
            "matrix_types": ["Q", "V"],
            "input_dim": 8,
            "hidden_dim": 8,
        },
        "calibration": {"n_samples": 64},
        "evaluation": {"n_samples": 32},
    }
    for key, value in over.items():
        if isinstance(value, dict):
            base.setdefault(key, {}).update(value)
        else:
            base[key] = value
    return RunConfig.from_dict(base)


# ----------------------------------------------------- configuration


def test_defaults_validate():
    config = RunConfig.from_dict()
    assert config["ratio"] == DEFAULT_CONFIG["ratio"]
    assert config.seed == 1234


def test_override_merges_nested_sections():
    config = RunConfig.from_dict({"model": {"n_layers": 2}})
    assert config["model"]["n_layers"] == 2
    assert config["model"]["hidden_dim"] == DEFAULT_CONFIG["model"]["hidden_dim"]


@pytest.mark.parametrize(
    "override",
    [
        {"nope": 1},
        {"model": {"nope": 1}},
        {"model": 3},
        {"seed": -1},
        {"seed": "many"},
        {"ratio": 1.0},
        {"ratio": -0.1},
        {"ratio": "half"},
        {"engine": "magic"},
        {"allocation": "sideways"},
        {"refine": "yes"},
        {"jitter": -1e-6},
        {"noise_eps": -1.0},
        {"admm_max_iter": 0},
        {"refine_max_iter": 0},
        {"ratio_floor": 0.5, "ratio_ceiling": 0.4},
        {"threads": -2},
        {"model": {"n_layers": 0}},
        {"model": {"matrix_types": []}},
        {"model": {"matrix_types": ["Q", "Mystery"]}},
        {"model": {"input_dim": 1}},
        {"model": {"activation": "tanh"}},
        {"model": {"rank_limit": -1}},
        {"calibration": {"n_samples": 0}},
        {"calibration": {"distribution": "cauchy"}},
        {"calibration": {"distribution": "low_rank", "rank": 0}},
        {"evaluation": {"n_samples": 0}},
    ],
)
def test_bad_config_rejected(override):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(override)


def test_resolve_threads_precedence(tmp_path, monkeypatch):
    config = _cfg(tmp_path, threads=3)
    monkeypatch.delenv("LRF_THREADS", raising=False)
    assert resolve_threads(config) == 3
    monkeypatch.setenv("LRF_THREADS", "2")
    assert resolve_threads(config) == 2
    monkeypatch.setenv("LRF_THREADS", "0")  # non-positive: fall through
    assert resolve_threads(config) == 3
    monkeypatch.setenv("LRF_THREADS", "eight")
    with pytest.raises(ConfigError):
        resolve_threads(config)


def test_resolve_threads_auto_is_positive(tmp_path, monkeypatch):
    monkeypatch.delenv("LRF_THREADS", raising=False)
    assert resolve_threads(_cfg(tmp_path, threads=0)) >= 1


# ------------------------------------------------------- calibrate


def test_toy_model_is_deterministic(tmp_path):
    m1 = build_toy_model(_cfg(tmp_path))
    m2 = build_toy_model(_cfg(tmp_path))
    for a, b in zip(m1.sites, m2.sites):
        np.testing.assert_array_equal(a.weight, b.weight)
    assert [s.site_id for s in m1.sites] == ["L00.Q", "L00.V", "L01.Q", "L01.V"]


def test_toy_model_rank_limit_plants_exact_rank(tmp_path):
    model = build_toy_model(_cfg(tmp_path, model={"rank_limit": 3}))
    for site in model.sites:
        sigma = np.linalg.svd(site.weight, compute_uv=False)
        assert np.sum(sigma > 1e-12) == 3


def test_calibrate_writes_deterministic_grams(tmp_path):
    c1 = _cfg(tmp_path, "one")
    c2 = _cfg(tmp_path, "two")
    cmd_calibrate(c1)
    cmd_calibrate(c2)
    assert (
        blob_path(c1.path("grams")).read_bytes() == blob_path(c2.path("grams")).read_bytes()
    )
    grams, counts = load_grams(c1.path("grams"))
    assert set(grams) == {"L00.Q", "L00.V", "L01.Q", "L01.V"}
    assert all(n == 64 for n in counts.values())


def test_calibrate_grams_match_scripted_forward(tmp_path):
    config = _cfg(tmp_path)
    cmd_calibrate(config)
    model = build_toy_model(config)
    batch = generate_calibration(
        seed=config.seed + 1, n_samples=64, dim=8, distribution="gaussian"
    )
    # Straight-line reference: site inputs under the relu chain.
    expected = {}
    x = batch
    for i, site in enumerate(model.sites):
        expected[site.site_id] = x @ x.T
        z = site.weight @ x
        x = z if i == len(model.sites) - 1 else np.maximum(z, 0.0)
    grams, _ = load_grams(config.path("grams"))
    for sid, gram in grams.items():
        np.testing.assert_allclose(gram, expected[sid], rtol=1e-12, atol=1e-12)


# -------------------------------------------------------- allocate


def _write_two_site_artifacts(config, tail_a, tail_b):
    """Model + gram artifacts for two same-type sites with exact loss tails.

    Diagonal weights and identity Grams make the per-site score equal the
    diagonal tail past the kept rank (2 of 8 at the configured ratio).
    """
    diag_a = np.diag([10.0, 9.0, tail_a, 0.0, 0.0, 0.0, 0.0, 0.0])
    diag_b = np.diag([10.0, 9.0, tail_b, 0.0, 0.0, 0.0, 0.0, 0.0])
    model = ToyModel(
        sites=[
            WeightSite("siteA", 0, "Q", diag_a),
            WeightSite("siteB", 0, "Q", diag_b),
        ],
        activation="identity",
    )
    save_model(config.path("model"), model)
    save_grams(
        config.path("grams"),
        {"siteA": np.eye(8), "siteB": np.eye(8)},
        {"siteA": 1, "siteB": 1},
    )


def test_allocate_single_site_gets_target(tmp_path):
    config = _cfg(
        tmp_path,
        ratio=0.3,
        model={"n_layers": 1, "matrix_types": ["Q"]},
    )
    cmd_calibrate(config)
    cmd_allocate(config)
    plan = CompressionPlan.from_dict(load_json(config.path("plan.json")))
    assert plan.entry_for("L00.Q").allocated_ratio == 0.3


def test_allocate_equal_scores_split_evenly(tmp_path):
    config = _cfg(tmp_path, ratio=0.3, ratio_floor=0.0, ratio_ceiling=1.0)
    config.out_dir.mkdir(parents=True, exist_ok=True)
    _write_two_site_artifacts(config, math.e, math.e)
    cmd_allocate(config)
    plan = CompressionPlan.from_dict(load_json(config.path("plan.json")))
    assert plan.entry_for("siteA").allocated_ratio == 0.3
    assert plan.entry_for("siteB").allocated_ratio == 0.3


def test_allocate_crafted_tails_split_four_thirds(tmp_path):
    config = _cfg(tmp_path, ratio=0.3, ratio_floor=0.0, ratio_ceiling=1.0)
    config.out_dir.mkdir(parents=True, exist_ok=True)
    _write_two_site_artifacts(config, math.e, math.e**2)
    cmd_allocate(config)
    plan = CompressionPlan.from_dict(load_json(config.path("plan.json")))
    a = plan.entry_for("siteA")
    b = plan.entry_for("siteB")
    assert a.score == pytest.approx(math.e, rel=1e-12)
    assert b.score == pytest.approx(math.e**2, rel=1e-12)
    assert a.allocated_ratio == pytest.approx(0.4, rel=1e-9)
    assert b.allocated_ratio == pytest.approx(0.2, rel=1e-9)


def test_allocate_homogeneous_ignores_scores(tmp_path):
    config = _cfg(tmp_path, ratio=0.25, allocation="homogeneous")
    config.out_dir.mkdir(parents=True, exist_ok=True)
    _write_two_site_artifacts(config, math.e, math.e**2)
    cmd_allocate(config)
    plan = CompressionPlan.from_dict(load_json(config.path("plan.json")))
    assert plan.allocation == "homogeneous"
    assert all(e.allocated_ratio == 0.25 for e in plan.entries)


# -------------------------------------------------------- compress


def test_compress_hits_certified_floor_per_site(tmp_path):
    config = _cfg(tmp_path, ratio=0.2)
    cmd_calibrate(config)
    cmd_allocate(config)
    cmd_compress(config)
    reports = load_json(config.path("reports.json"))["reports"]
    assert len(reports) == 4
    for rep in reports:
        assert rep["status"] == "ok"
        assert rep["achieved_loss"] <= rep["theoretical_loss"] * (1.0 + 1e-8)
        assert rep["achieved_loss"] >= rep["theoretical_loss"] * (1.0 - 1e-8)


def test_compress_lossless_when_budget_covers_planted_rank(tmp_path):
    config = _cfg(
        tmp_path,
        ratio=0.0,
        allocation="homogeneous",
        model={"rank_limit": 3},
    )
    result = cmd_run(config)
    assert result["compress"]["failed"] == 0
    summary = load_json(config.path("summary.json"))
    assert summary["holdout"]["output_mse"] <= 1e-18


def test_compress_records_partial_failures_and_completes(tmp_path):
    config = _cfg(
        tmp_path,
        engine="cholesky",
        jitter=0.0,
        allocation="homogeneous",
        calibration={"distribution": "low_rank", "rank": 4, "n_samples": 64},
    )
    cmd_calibrate(config)
    cmd_allocate(config)
    result = cmd_compress(config)
    reports = load_json(config.path("reports.json"))["reports"]
    statuses = {r["site_id"]: r["status"] for r in reports}
    # The rank-4 batch starves the first site; the relu chain re-inflates
    # rank so deeper sites factor fine.
    assert statuses["L00.Q"] == "failed"
    assert any(s == "ok" for s in statuses.values())
    assert 1 <= result["failed"] < 4
    _, pairs = load_compressed(config.path("compressed"))
    assert set(pairs) == {sid for sid, s in statuses.items() if s == "ok"}
    # Evaluation still runs; failed sites keep their dense weights.
    cmd_evaluate(config)
    summary = load_json(config.path("summary.json"))
    assert summary["failed_sites"] == ["L00.Q"]


def test_compress_all_failed_still_writes_artifacts(tmp_path):
    config = _cfg(
        tmp_path,
        engine="cholesky",
        jitter=0.0,
        allocation="homogeneous",
        model={"n_layers": 1, "matrix_types": ["Q"]},
        calibration={"distribution": "low_rank", "rank": 1, "n_samples": 32},
    )
    cmd_calibrate(config)
    cmd_allocate(config)
    with pytest.raises(AllSitesFailed):
        cmd_compress(config)
    # Crash-free degradation: the record of the failure is on disk.
    assert manifest_path(config.path("compressed")).exists()
    reports = load_json(config.path("reports.json"))["reports"]
    assert [r["status"] for r in reports] == ["failed"]
    manifest, pairs = load_compressed(config.path("compressed"))
    assert pairs == {}
    assert manifest.metadata["site.L00.Q.status"] == "failed"


def test_compress_deterministic_across_thread_counts(tmp_path, monkeypatch):
    blobs = {}
    for name, threads in (("one", "1"), ("four", "4")):
        config = _cfg(tmp_path, name)
        monkeypatch.setenv("LRF_THREADS", threads)
        cmd_run(config)
        blobs[name] = blob_path(config.path("compressed")).read_bytes()
    assert blobs["one"] == blobs["four"]


# -------------------------------------------------------- evaluate


def test_evaluate_csv_row_per_site(tmp_path):
    config = _cfg(tmp_path)
    cmd_run(config)
    lines = config.path("per_site.csv").read_text().splitlines()
    assert len(lines) == 1 + 4
    assert lines[0].split(",")[0] == "site_id"
    layer_lines = config.path("per_layer.csv").read_text().splitlines()
    assert len(layer_lines) == 1 + 2


def test_evaluate_summary_accounts_parameters(tmp_path):
    config = _cfg(tmp_path, ratio=0.2, allocation="homogeneous")
    cmd_run(config)
    summary = load_json(config.path("summary.json"))
    dense = summary["params"]["dense"]
    compressed = summary["params"]["compressed"]
    assert dense == 4 * 64
    # Ranks are floored, so the achieved ratio is at least the target.
    assert summary["params"]["achieved_ratio"] >= 0.2 - 1e-12
    assert compressed == sum(
        int(r.split(",")[9])
        for r in config.path("per_site.csv").read_text().splitlines()[1:]
    )


def test_run_outputs_byte_deterministic(tmp_path):
    c1 = _cfg(tmp_path, "one")
    c2 = _cfg(tmp_path, "two")
    cmd_run(c1)
    cmd_run(c2)
    for name in ("model", "grams", "compressed"):
        assert blob_path(c1.path(name)).read_bytes() == blob_path(c2.path(name)).read_bytes()
    assert c1.path("plan.json").read_bytes() == c2.path("plan.json").read_bytes()
    assert c1.path("per_site.csv").read_bytes() == c2.path("per_site.csv").read_bytes()
    assert c1.path("per_layer.csv").read_bytes() == c2.path("per_layer.csv").read_bytes()

    def strip(doc):
        if isinstance(doc, dict):
            return {k: strip(v) for k, v in doc.items() if not k.endswith("_ms")}
        if isinstance(doc, list):
            return [strip(v) for v in doc]
        return doc

    r1 = strip(load_json(c1.path("reports.json")))
    r2 = strip(load_json(c2.path("reports.json")))
    assert r1 == r2


def test_seed_changes_artifacts(tmp_path):
    c1 = _cfg(tmp_path, "one", seed=7)
    c2 = _cfg(tmp_path, "two", seed=8)
    cmd_calibrate(c1)
    cmd_calibrate(c2)
    assert (
        blob_path(c1.path("model")).read_bytes() != blob_path(c2.path("model")).read_bytes()
    )


def test_holdout_losses_consistent_with_forward_capture(tmp_path):
    config = _cfg(tmp_path)
    cmd_run(config)
    model = build_toy_model(config)
    _, pairs = load_compressed(config.path("compressed"))
    holdout = generate_calibration(seed=config.seed + 2, n_samples=32, dim=8)
    captures, _ = forward_capture(model, holdout)
    rows = config.path("per_site.csv").read_text().splitlines()
    cols = rows[0].split(",")
    for line in rows[1:]:
        cells = dict(zip(cols, line.split(",")))
        sid = cells["site_id"]
        site = next(s for s in model.sites if s.site_id == sid)
        x = captures[sid]
        pair = pairs[sid]
        expected = float(np.linalg.norm((site.weight - pair.densify()) @ x, "fro"))
        assert float(cells["holdout_loss"]) == pytest.approx(expected, rel=1e-9)


# ------------------------------------------------------------ bench


def test_bench_profiles_every_stage(tmp_path):
    config = _cfg(tmp_path)
    doc = cmd_bench(config)
    assert set(doc["stage_ms"]) == {"calibrate", "allocate", "compress", "evaluate"}
    assert all(ms > 0 for ms in doc["stage_ms"].values())
    assert doc["sites"] == 4
    saved = load_json(config.path("bench.json"))
    assert saved["engine"] == "double_svd"
    assert saved["threads"] >= 1


# -------------------------------------------------------------- cli


def _write_config(tmp_path, **over):
    doc = {
        "model": {
            "n_layers": 2,
            "matrix_types": ["Q", "V"],
            "input_dim": 8,
            "hidden_dim": 8,
        },
        "calibration": {"n_samples": 64},
        "evaluation": {"n_samples": 32},
    }
    for key, value in over.items():
        if isinstance(value, dict):
            doc.setdefault(key, {}).update(value)
        else:
            doc[key] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return str(path)


def test_cli_run_end_to_end(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["run", "--config", cfg, "--out", str(out)]) == EXIT_OK
    printed = json.loads(capsys.readouterr().out)
    assert set(printed) == {"calibrate", "allocate", "compress", "evaluate"}
    for name in ("model.json", "grams.json", "plan.json", "compressed.json",
                 "reports.json", "summary.json", "per_site.csv", "per_layer.csv",
                 "run_config.json"):
        assert (out / name).exists(), name


@pytest.mark.filterwarnings("ignore::lrf.exceptions.LineSearchWarning")
def test_cli_flag_overrides_reach_the_run(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    out = tmp_path / "out"
    code = main(
        ["run", "--config", cfg, "--out", str(out), "--seed", "9",
         "--ratio", "0.4", "--engine", "plain", "--allocation", "homogeneous",
         "--refine"]
    )
    assert code == EXIT_OK
    capsys.readouterr()
    recorded = load_json(out / "run_config.json")
    assert recorded["seed"] == 9
    assert recorded["ratio"] == 0.4
    assert recorded["engine"] == "plain"
    assert recorded["allocation"] == "homogeneous"
    assert recorded["refine"] is True


def test_cli_rejects_bad_ratio(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    code = main(["run", "--config", cfg, "--out", str(tmp_path / "o"), "--ratio", "1.5"])
    assert code == EXIT_CONFIG
    assert "error" in capsys.readouterr().err


def test_cli_rejects_unknown_config_key(tmp_path, capsys):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"mystery": 1}))
    code = main(["run", "--config", str(path), "--out", str(tmp_path / "o")])
    assert code == EXIT_CONFIG
    capsys.readouterr()


def test_cli_rejects_malformed_config_file(tmp_path, capsys):
    path = tmp_path / "config.json"
    path.write_text("{not json")
    code = main(["run", "--config", str(path), "--out", str(tmp_path / "o")])
    assert code == EXIT_CONFIG
    capsys.readouterr()


def test_cli_missing_config_file(tmp_path, capsys):
    code = main(["run", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path / "o")])
    assert code == EXIT_CONFIG
    capsys.readouterr()


def test_cli_infeasible_ratio_exit_code(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["calibrate", "--config", cfg, "--out", str(out)]) == EXIT_OK
    code = main(["allocate", "--config", cfg, "--out", str(out), "--ratio", "0.01"])
    assert code == EXIT_INFEASIBLE
    capsys.readouterr()


def test_cli_missing_artifacts_exit_code(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    code = main(["compress", "--config", cfg, "--out", str(tmp_path / "empty")])
    assert code == EXIT_IO
    capsys.readouterr()


def test_cli_all_sites_failed_exit_code(tmp_path, capsys):
    cfg = _write_config(
        tmp_path,
        engine="cholesky",
        jitter=0.0,
        allocation="homogeneous",
        model={"n_layers": 1, "matrix_types": ["Q"]},
        calibration={"distribution": "low_rank", "rank": 1, "n_samples": 32},
    )
    out = tmp_path / "out"
    code = main(["run", "--config", cfg, "--out", str(out)])
    assert code == EXIT_ALL_FAILED
    capsys.readouterr()
    # The failure run still left complete artifacts behind.
    assert (out / "compressed.json").exists()
    assert (out / "reports.json").exists()


def test_cli_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    assert "calibrate" in capsys.readouterr().out


def test_cli_rejects_unknown_engine_choice(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["run", "--engine", "magic", "--out", str(tmp_path / "o")])
    assert exc.value.code == 2
    capsys.readouterr()
