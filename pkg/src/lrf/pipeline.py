"""End-to-end compression pipeline: calibrate, allocate, compress, evaluate.

Every stage reads and writes artifacts under a single output directory, so
stages can run individually (the CLI exposes each) or chained by ``run``.
All randomness flows from one seed in the run configuration; stage outputs
are byte-deterministic apart from explicitly labeled ``*_ms`` timing
fields.
"""

from __future__ import annotations

import csv
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model_io
from .allocation import CompressionPlan, allocate, homogeneous_plan, score_sites
from .calibration import (
    ACTIVATIONS,
    MATRIX_TYPES,
    GramAccumulator,
    ToyModel,
    WeightSite,
    forward_capture,
    generate_calibration,
)
from .engines import (
    ENGINES,
    activation_loss,
    gram_loss,
    run_engine,
    tail_loss_from_sigma,
    whitened_spectrum,
)
from .exceptions import AllSitesFailed, ConfigError, LrfError
from .validation import as_matrix

__all__ = [
    "DEFAULT_CONFIG",
    "RunConfig",
    "build_toy_model",
    "cmd_calibrate",
    "cmd_allocate",
    "cmd_compress",
    "cmd_evaluate",
    "cmd_bench",
    "cmd_run",
    "resolve_threads",
]

DEFAULT_CONFIG = {
    "seed": 1234,
    "ratio": 0.2,
    "engine": "double_svd",
    "allocation": "heterogeneous",
    "refine": False,
    "jitter": 1e-6,
    "noise_eps": 1e-3,
    "admm_rho": 1.0,
    "admm_max_iter": 50,
    "ratio_floor": 0.02,
    "ratio_ceiling": 0.98,
    "refine_lr": 0.01,
    "refine_max_iter": 40,
    "threads": 0,
    "out_dir": "runs/default",
    "model": {
        "n_layers": 4,
        "matrix_types": ["Q", "K", "V", "O"],
        "input_dim": 32,
        "hidden_dim": 32,
        "activation": "relu",
        "spectrum_decay_start": 1.0,
        "spectrum_decay_end": 12.0,
        "type_spread": 0.6,
        "rank_limit": 0,
    },
    "calibration": {
        "n_samples": 256,
        "distribution": "gaussian",
        "rank": 0,
    },
    "evaluation": {
        "n_samples": 128,
    },
}

# Seed offsets keep the three sample streams distinct but all derived from
# the one configured seed.
_SEED_MODEL = 0
_SEED_CALIBRATION = 1
_SEED_HOLDOUT = 2


def _merge(defaults: dict, override: dict, path: str = "") -> dict:
    out = {}
    for key, dval in defaults.items():
        if key in override:
            oval = override[key]
            if isinstance(dval, dict):
                if not isinstance(oval, dict):
                    raise ConfigError(f"config key {path + key!r} must be an object")
                out[key] = _merge(dval, oval, path + key + ".")
            else:
                out[key] = oval
        else:
            out[key] = dval if not isinstance(dval, dict) else _merge(dval, {}, path + key + ".")
    for key in override:
        if key not in defaults:
            raise ConfigError(f"unknown config key {path + key!r}")
    return out


@dataclass
class RunConfig:
    """Validated, fully merged run configuration."""

    values: dict

    @classmethod
    def from_dict(cls, override: dict | None = None) -> "RunConfig":
        merged = _merge(DEFAULT_CONFIG, override or {})
        cls._validate(merged)
        return cls(values=merged)

    @staticmethod
    def _validate(v: dict) -> None:
        try:
            seed = int(v["seed"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"seed must be an integer: {exc}") from exc
        if seed < 0:
            raise ConfigError("seed must be >= 0")
        ratio = v["ratio"]
        if not isinstance(ratio, (int, float)) or not (0.0 <= float(ratio) < 1.0):
            raise ConfigError(f"ratio must lie in [0, 1), got {ratio!r}")
        if v["engine"] not in ENGINES:
            raise ConfigError(f"engine must be one of {ENGINES}, got {v['engine']!r}")
        if v["allocation"] not in ("heterogeneous", "homogeneous"):
            raise ConfigError(
                f"allocation must be 'heterogeneous' or 'homogeneous', got {v['allocation']!r}"
            )
        if not isinstance(v["refine"], bool):
            raise ConfigError("refine must be a boolean")
        for key in ("jitter", "noise_eps", "admm_rho", "refine_lr"):
            if not isinstance(v[key], (int, float)) or float(v[key]) < 0:
                raise ConfigError(f"{key} must be a non-negative number")
        for key in ("admm_max_iter", "refine_max_iter"):
            if int(v[key]) < 1:
                raise ConfigError(f"{key} must be >= 1")
        floor, ceiling = v["ratio_floor"], v["ratio_ceiling"]
        if not (0.0 <= float(floor) <= float(ceiling) <= 1.0):
            raise ConfigError("need 0 <= ratio_floor <= ratio_ceiling <= 1")
        if int(v["threads"]) < 0:
            raise ConfigError("threads must be >= 0 (0 means auto)")
        m = v["model"]
        if int(m["n_layers"]) < 1:
            raise ConfigError("model.n_layers must be >= 1")
        if not m["matrix_types"]:
            raise ConfigError("model.matrix_types must be non-empty")
        for t in m["matrix_types"]:
            if t not in MATRIX_TYPES:
                raise ConfigError(f"unknown matrix type {t!r} (valid: {MATRIX_TYPES})")
        if int(m["input_dim"]) < 2 or int(m["hidden_dim"]) < 2:
            raise ConfigError("model dims must be >= 2")
        if m["activation"] not in ACTIVATIONS:
            raise ConfigError(f"model.activation must be one of {tuple(ACTIVATIONS)}")
        if int(m["rank_limit"]) < 0:
            raise ConfigError("model.rank_limit must be >= 0 (0 means full rank)")
        c = v["calibration"]
        if int(c["n_samples"]) < 1:
            raise ConfigError("calibration.n_samples must be >= 1")
        if c["distribution"] not in ("gaussian", "heavy_tailed", "low_rank"):
            raise ConfigError(f"unknown calibration distribution {c['distribution']!r}")
        if c["distribution"] == "low_rank" and int(c["rank"]) < 1:
            raise ConfigError("calibration.rank must be >= 1 for low_rank")
        if int(v["evaluation"]["n_samples"]) < 1:
            raise ConfigError("evaluation.n_samples must be >= 1")

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    @property
    def out_dir(self) -> Path:
        return Path(self.values["out_dir"])

    def path(self, name: str) -> Path:
        return self.out_dir / name


def resolve_threads(config: RunConfig) -> int:
    """Worker count: LRF_THREADS env wins, then config, then the CPU count."""
    env = os.environ.get("LRF_THREADS", "").strip()
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise ConfigError(f"LRF_THREADS must be an integer, got {env!r}") from exc
        if n >= 1:
            return n
    n = int(config["threads"])
    if n >= 1:
        return n
    return max(1, os.cpu_count() or 1)


def build_toy_model(config: RunConfig) -> ToyModel:
    """Deterministic synthetic model with planted per-site spectral decay.

    Each weight is built from seeded orthogonal bases with singular values
    exp(-alpha * i / (min_dim - 1)); alpha varies across layers (between
    the configured decay endpoints) and across matrix types (spread
    factor), so sites differ in how much of their energy a low-rank
    truncation can keep. That spread is what heterogeneous allocation
    exploits.
    """
    m = config["model"]
    rng = np.random.default_rng([config.seed, _SEED_MODEL])
    n_layers = int(m["n_layers"])
    types = list(m["matrix_types"])
    input_dim = int(m["input_dim"])
    hidden_dim = int(m["hidden_dim"])
    rank_limit = int(m["rank_limit"])
    spread = float(m["type_spread"])
    if n_layers > 1:
        layer_decay = np.linspace(
            float(m["spectrum_decay_start"]), float(m["spectrum_decay_end"]), n_layers
        )
    else:
        layer_decay = np.array([float(m["spectrum_decay_start"])])
    sites = []
    in_dim = input_dim
    for layer in range(n_layers):
        for j, mtype in enumerate(types):
            out_dim = hidden_dim
            min_dim = min(out_dim, in_dim)
            factor = 1.0
            if len(types) > 1:
                factor = 1.0 + spread * (j / (len(types) - 1) - 0.5)
            alpha = float(layer_decay[layer]) * factor
            if min_dim > 1:
                sigma = np.exp(-alpha * np.arange(min_dim) / (min_dim - 1))
            else:
                sigma = np.ones(1)
            if rank_limit and rank_limit < min_dim:
                sigma = sigma.copy()
                sigma[rank_limit:] = 0.0
            lu, _ = np.linalg.qr(rng.standard_normal((out_dim, out_dim)))
            rv, _ = np.linalg.qr(rng.standard_normal((in_dim, in_dim)))
            weight = (lu[:, :min_dim] * sigma) @ rv[:, :min_dim].T
            sites.append(
                WeightSite(
                    site_id=f"L{layer:02d}.{mtype}",
                    layer_index=layer,
                    matrix_type=mtype,
                    weight=weight,
                )
            )
            in_dim = out_dim
    return ToyModel(sites=sites, activation=str(m["activation"]))


def _ensure_model(config: RunConfig) -> ToyModel:
    base = config.path("model")
    if model_io.manifest_path(base).exists():
        return model_io.load_model(base)
    model = build_toy_model(config)
    model_io.save_model(base, model)
    return model


def cmd_calibrate(config: RunConfig) -> dict:
    """Generate calibration data, capture per-site inputs, save the Grams."""
    t0 = time.perf_counter()
    model = _ensure_model(config)
    c = config["calibration"]
    batch = generate_calibration(
        seed=config.seed + _SEED_CALIBRATION,
        n_samples=int(c["n_samples"]),
        dim=model.input_dim,
        distribution=str(c["distribution"]),
        rank=int(c["rank"]) or None,
    )
    captures, _ = forward_capture(model, batch)
    grams = {}
    counts = {}
    for site in model.sites:
        acc = GramAccumulator(site.site_id, site.in_dim)
        acc.update(captures[site.site_id])
        grams[site.site_id] = acc.matrix()
        counts[site.site_id] = acc.sample_count
    model_io.save_grams(config.path("grams"), grams, counts)
    return {
        "model": str(config.path("model")),
        "grams": str(config.path("grams")),
        "sites": len(model.sites),
        "wall_ms": (time.perf_counter() - t0) * 1e3,
    }


def cmd_allocate(config: RunConfig) -> dict:
    """Score sites from the saved Grams and emit the compression plan."""
    t0 = time.perf_counter()
    model = model_io.load_model(config.path("model"))
    grams, _ = model_io.load_grams(config.path("grams"))
    ratio = float(config["ratio"])
    scores = score_sites(model.sites, grams, ratio)
    if config["allocation"] == "heterogeneous":
        plan = allocate(
            model.sites,
            scores,
            ratio,
            ratio_floor=float(config["ratio_floor"]),
            ratio_ceiling=float(config["ratio_ceiling"]),
        )
    else:
        plan = homogeneous_plan(model.sites, ratio, scores)
    model_io.save_json(config.path("plan.json"), plan.to_dict())
    return {
        "plan": str(config.path("plan.json")),
        "sites": len(plan.entries),
        "wall_ms": (time.perf_counter() - t0) * 1e3,
    }


def _compress_site(site: WeightSite, gram: np.ndarray, entry, config: RunConfig) -> dict:
    t0 = time.perf_counter()
    report = {
        "site_id": site.site_id,
        "layer_index": site.layer_index,
        "matrix_type": site.matrix_type,
        "rows": site.out_dim,
        "cols": site.in_dim,
        "engine": str(config["engine"]),
        "refined": bool(config["refine"]),
        "target_ratio": entry.allocated_ratio,
        "rank": entry.resolved_rank,
        "status": "ok",
        "detail": "",
        "achieved_loss": None,
        "theoretical_loss": None,
        "factors": None,
    }
    try:
        spectrum = whitened_spectrum(site.weight, gram)
        theoretical = tail_loss_from_sigma(spectrum, entry.resolved_rank)
        outcome = run_engine(
            site.weight,
            gram,
            entry.resolved_rank,
            str(config["engine"]),
            jitter=float(config["jitter"]),
            noise_eps=float(config["noise_eps"]),
            admm_rho=float(config["admm_rho"]),
            admm_max_iter=int(config["admm_max_iter"]),
            refine=bool(config["refine"]),
            refine_lr=float(config["refine_lr"]),
            refine_max_iter=int(config["refine_max_iter"]),
        )
        if outcome.factors is None:
            report["status"] = "failed"
            report["detail"] = outcome.detail
        else:
            report["status"] = outcome.status
            report["detail"] = outcome.detail
            report["achieved_loss"] = gram_loss(site.weight, outcome.factors, gram)
            report["theoretical_loss"] = theoretical
            report["factors"] = outcome.factors
    except LrfError as exc:
        report["status"] = "failed"
        report["detail"] = f"{type(exc).__name__}: {exc}"
    report["wall_ms"] = (time.perf_counter() - t0) * 1e3
    return report


def cmd_compress(config: RunConfig) -> dict:
    """Factor every site according to the plan, in parallel, deterministically.

    Sites fan out over a thread pool; results are keyed and written in site
    order so the artifacts do not depend on scheduling. Raises
    AllSitesFailed only when not a single site produced factors.
    """
    t0 = time.perf_counter()
    model = model_io.load_model(config.path("model"))
    grams, _ = model_io.load_grams(config.path("grams"))
    plan = CompressionPlan.from_dict(model_io.load_json(config.path("plan.json")))
    workers = resolve_threads(config)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {
            site.site_id: pool.submit(
                _compress_site, site, grams[site.site_id], plan.entry_for(site.site_id), config
            )
            for site in model.sites
        }
        reports = {sid: fut.result() for sid, fut in futures.items()}

    factors = {}
    site_meta = {}
    ordered = []
    for site in sorted(model.sites, key=lambda s: s.site_id):
        rep = reports[site.site_id]
        pair = rep.pop("factors")
        if pair is not None:
            factors[site.site_id] = pair
        site_meta[site.site_id] = {
            "engine": rep["engine"],
            "status": rep["status"],
            "rank": rep["rank"],
            "target_ratio": repr(rep["target_ratio"]),
        }
        ordered.append(rep)
    # Artifacts are written even when nothing factorized: failure statuses
    # are part of the record, and readers must never see a partial file.
    model_io.save_compressed(config.path("compressed"), factors, site_meta)
    doc = {"reports": ordered, "threads": workers, "wall_ms": (time.perf_counter() - t0) * 1e3}
    model_io.save_json(config.path("reports.json"), doc)
    if not factors:
        raise AllSitesFailed("no site produced factors")
    return {
        "compressed": str(config.path("compressed")),
        "reports": str(config.path("reports.json")),
        "sites": len(ordered),
        "failed": sum(1 for r in ordered if r["status"] == "failed"),
        "wall_ms": doc["wall_ms"],
    }


def _compressed_forward(model: ToyModel, pairs: dict, batch: np.ndarray) -> np.ndarray:
    """Forward pass with factored weights where available (failed sites keep
    their dense weight)."""
    act = ACTIVATIONS[model.activation]
    x = as_matrix(batch, "batch")
    last = len(model.sites) - 1
    for i, site in enumerate(model.sites):
        if site.site_id in pairs:
            pair = pairs[site.site_id]
            z = pair.a @ (pair.b @ x)
        else:
            z = site.weight @ x
        x = z if i == last else act(z)
    return x


def cmd_evaluate(config: RunConfig) -> dict:
    """Score the compressed model on held-out data and write the summary.

    Per-site losses are measured both on the calibration Grams (stored in
    the compression reports) and on a fresh holdout batch routed through
    the ORIGINAL model (so per-site inputs are identical for both weight
    versions); the end-to-end error routes the holdout through the
    compressed chain.
    """
    t0 = time.perf_counter()
    model = model_io.load_model(config.path("model"))
    _, pairs = model_io.load_compressed(config.path("compressed"))
    reports_doc = model_io.load_json(config.path("reports.json"))
    reports = {r["site_id"]: r for r in reports_doc["reports"]}

    holdout = generate_calibration(
        seed=config.seed + _SEED_HOLDOUT,
        n_samples=int(config["evaluation"]["n_samples"]),
        dim=model.input_dim,
        distribution="gaussian",
    )
    captures, original_out = forward_capture(model, holdout)
    compressed_out = _compressed_forward(model, pairs, holdout)
    mse = float(np.mean((original_out - compressed_out) ** 2))

    per_site = []
    dense_total = 0
    factored_total = 0
    sq_loss_total = 0.0
    sq_floor_total = 0.0
    for site in model.sites:
        rep = reports[site.site_id]
        x = captures[site.site_id]
        dense = site.out_dim * site.in_dim
        dense_total += dense
        row = {
            "site_id": site.site_id,
            "layer_index": site.layer_index,
            "matrix_type": site.matrix_type,
            "rows": site.out_dim,
            "cols": site.in_dim,
            "engine": rep["engine"],
            "status": rep["status"],
            "rank": rep["rank"],
            "target_ratio": rep["target_ratio"],
            "calib_loss": rep["achieved_loss"],
            "calib_floor": rep["theoretical_loss"],
        }
        if site.site_id in pairs:
            pair = pairs[site.site_id]
            factored = pair.rank * (site.out_dim + site.in_dim)
            holdout_loss = activation_loss(site.weight, pair, x)
            ref = float(np.linalg.norm(site.weight @ x, "fro"))
            row["params"] = factored
            row["holdout_loss"] = holdout_loss
            row["holdout_rel"] = holdout_loss / ref if ref > 0 else 0.0
            factored_total += factored
            sq_loss_total += holdout_loss**2
            if rep["theoretical_loss"] is not None:
                sq_floor_total += rep["theoretical_loss"] ** 2
        else:
            row["params"] = dense
            row["holdout_loss"] = None
            row["holdout_rel"] = None
            factored_total += dense
        per_site.append(row)

    layers: dict = {}
    for row in per_site:
        agg = layers.setdefault(
            row["layer_index"],
            {"layer_index": row["layer_index"], "sites": 0, "params": 0,
             "sq_holdout_loss": 0.0, "ratio_sum": 0.0},
        )
        agg["sites"] += 1
        agg["params"] += row["params"]
        agg["sq_holdout_loss"] += (row["holdout_loss"] or 0.0) ** 2
        agg["ratio_sum"] += float(row["target_ratio"])
    per_layer = []
    for idx in sorted(layers):
        agg = layers[idx]
        per_layer.append(
            {
                "layer_index": agg["layer_index"],
                "sites": agg["sites"],
                "params": agg["params"],
                "sq_holdout_loss": agg["sq_holdout_loss"],
                "mean_target_ratio": agg["ratio_sum"] / agg["sites"],
            }
        )

    summary = {
        "config": config.values,
        "sites": len(model.sites),
        "failed_sites": sorted(s.site_id for s in model.sites if s.site_id not in pairs),
        "params": {
            "dense": dense_total,
            "compressed": factored_total,
            "achieved_ratio": 1.0 - factored_total / dense_total,
        },
        "holdout": {
            "n_samples": int(config["evaluation"]["n_samples"]),
            "output_mse": mse,
            "sum_sq_site_loss": sq_loss_total,
            "sum_sq_calib_floor": sq_floor_total,
        },
        "wall_ms": (time.perf_counter() - t0) * 1e3,
    }
    model_io.save_json(config.path("summary.json"), summary)
    _write_csv(
        config.path("per_site.csv"),
        per_site,
        ["site_id", "layer_index", "matrix_type", "rows", "cols", "engine", "status",
         "rank", "target_ratio", "params", "calib_loss", "calib_floor",
         "holdout_loss", "holdout_rel"],
    )
    _write_csv(
        config.path("per_layer.csv"),
        per_layer,
        ["layer_index", "sites", "params", "sq_holdout_loss", "mean_target_ratio"],
    )
    return {
        "summary": str(config.path("summary.json")),
        "per_site": str(config.path("per_site.csv")),
        "per_layer": str(config.path("per_layer.csv")),
        "output_mse": mse,
        "wall_ms": summary["wall_ms"],
    }


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, rows: list, columns: list) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format_cell(row.get(c)) for c in columns])
    os.replace(tmp, path)


def cmd_run(config: RunConfig) -> dict:
    """Full pipeline: calibrate, allocate, compress, evaluate."""
    config.out_dir.mkdir(parents=True, exist_ok=True)
    model_io.save_json(config.path("run_config.json"), config.values)
    results = {
        "calibrate": cmd_calibrate(config),
        "allocate": cmd_allocate(config),
        "compress": cmd_compress(config),
        "evaluate": cmd_evaluate(config),
    }
    return results


def cmd_bench(config: RunConfig) -> dict:
    """Time each stage of a fresh run and record the profile."""
    stages = {}
    config.out_dir.mkdir(parents=True, exist_ok=True)
    for name, fn in (
        ("calibrate", cmd_calibrate),
        ("allocate", cmd_allocate),
        ("compress", cmd_compress),
        ("evaluate", cmd_evaluate),
    ):
        t0 = time.perf_counter()
        fn(config)
        stages[name] = (time.perf_counter() - t0) * 1e3
    doc = {
        "stage_ms": stages,
        "sites": len(model_io.load_model(config.path("model")).sites),
        "threads": resolve_threads(config),
        "engine": config["engine"],
    }
    model_io.save_json(config.path("bench.json"), doc)
    return doc
