"""Experiment harness: dataset generation, training, evaluation and timing.

Every cell is keyed by ``(environment, snr_db)``; file names and random
streams are derived from that key and the config seed, so reruns are
bit-identical apart from timing columns.
"""
import csv
import json
import logging
import os
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .channel import (
    SpatialCovariance,
    build_geometry,
    isotropic_covariance,
    synthesize_dataset,
    truncated_covariance,
)
from .estimators import (
    estimate_ls,
    estimate_oracle_mmse,
    estimate_sample_mmse,
    estimate_score_mmse,
    nmse,
)
from .numerics import RngStream, solve_spd
from .scorenet import ScoreNetError, ScoreNetwork, TrainConfig, load_model, save_model, score, train
from .snr import SnrError, VscConfig, estimate_inv_snr, estimate_inv_snr_groups, snr_statistics
from .storage import DatasetManifest, read_dataset, read_pilots, write_dataset

log = logging.getLogger(__name__)

OUTPUT_ENV = "HMIMOSCORE_OUTPUT_DIR"
CSV_SCHEMA = "nmse-v1"
CSV_COLUMNS = (
    "schema",
    "environment",
    "snr_db",
    "inv_snr_true",
    "estimator",
    "inv_snr_source",
    "inv_snr_used",
    "nmse",
    "nmse_db",
    "seconds_per_estimate",
    "seed",
)


class ConfigError(ValueError):
    """Invalid experiment configuration or command-line usage."""


def inv_snr_from_db(snr_db: float) -> float:
    """Noise variance ``1/rho`` for ``rho`` given as ``10 log10(rho)``."""
    return float(10 ** (-snr_db / 10))


@dataclass
class ExperimentConfig:
    """Scenario grid and hyperparameters for one benchmark run."""

    n_antennas: int = 256
    spacing: float = 0.25
    beta: float = 1.0
    environments: list = field(default_factory=lambda: ["isotropic", "truncated"])
    truncation_denominator: int = 8
    snr_db: list = field(default_factory=lambda: [0.0, 5.0, 10.0, 15.0, 20.0])
    train_count: int = 5000
    test_count: int = 2000
    window: int = 5
    snr_group: int = 4
    seed: int = 0
    sweep_snr_db: float = 10.0
    sweep_inv_snr: list = field(default_factory=lambda: [round(0.02 * k, 2) for k in range(13)])
    output_dir: str = "runs"
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if not self.snr_db:
            raise ConfigError("SNR grid must be nonempty")
        if self.test_count < 1 or self.train_count < 1:
            raise ConfigError("train and test counts must be positive")
        for env in self.environments:
            if env not in ("isotropic", "truncated"):
                raise ConfigError(f"unknown environment {env!r}")
        side = int(round(np.sqrt(self.n_antennas)))
        if side * side != self.n_antennas:
            raise ConfigError(f"antenna count {self.n_antennas} is not a perfect square")
        if not 1 <= self.window <= side:
            raise ConfigError(f"window {self.window} does not fit a {side}x{side} array")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**raw)
        except (TypeError, ScoreNetError, SnrError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        out = asdict(self)
        out["train"]["shrinkage"] = list(out["train"]["shrinkage"])
        return out

    @property
    def output(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.output_dir)

    def vsc(self) -> VscConfig:
        return VscConfig.for_antennas(self.n_antennas, self.window)


def load_config(path=None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Read a YAML config and apply ``key=value`` overrides (``train.key`` for nested keys)."""
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path} must hold a mapping")
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        target = raw
        *parents, leaf = key.strip().split(".")
        for p in parents:
            target = target.setdefault(p, {})
        target[leaf] = yaml.safe_load(value)
    return ExperimentConfig.from_dict(raw)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def cell_name(environment: str, snr_db: float) -> str:
    return f"{environment}_{snr_db:g}dB"


def stream_id(*parts) -> int:
    return zlib.crc32("/".join(str(p) for p in parts).encode())


def covariance_for(cfg: ExperimentConfig, environment: str, cache: dict | None = None) -> SpatialCovariance:
    cache = {} if cache is None else cache
    if environment not in cache:
        iso = cache.get("isotropic") or isotropic_covariance(
            build_geometry(cfg.n_antennas, cfg.spacing), cfg.beta
        )
        cache["isotropic"] = iso
        if environment == "truncated":
            cache[environment] = truncated_covariance(iso, cfg.truncation_denominator)
    return cache[environment]


def dataset_paths(cfg: ExperimentConfig, environment: str, snr_db: float) -> tuple[Path, Path]:
    base = cfg.output / "data" / cell_name(environment, snr_db)
    return base.with_name(base.name + "_train.bin"), base.with_name(base.name + "_test.bin")


def model_paths(cfg: ExperimentConfig, environment: str, snr_db: float) -> tuple[Path, Path]:
    base = cfg.output / "models" / cell_name(environment, snr_db)
    return base.with_name(base.name + ".model"), base.with_name(base.name + ".trace.json")


def select_cells(cfg: ExperimentConfig, environment=None, snr_db=None):
    envs = [environment] if environment else cfg.environments
    snrs = [float(snr_db)] if snr_db is not None else [float(s) for s in cfg.snr_db]
    for env in envs:
        if env not in cfg.environments:
            raise ConfigError(f"environment {env!r} is not in the config")
        for s in snrs:
            yield env, s


def generate(cfg: ExperimentConfig, environment=None, snr_db=None) -> list[Path]:
    """Write a pilots-only training file and a test file with ground truth per cell."""
    cache, written = {}, []
    for env, s in select_cells(cfg, environment, snr_db):
        cov = covariance_for(cfg, env, cache)
        tau = inv_snr_from_db(s)
        for path, part, count, truth in zip(
            dataset_paths(cfg, env, s), ("train", "test"), (cfg.train_count, cfg.test_count), (False, True)
        ):
            sid = stream_id(env, f"{s:g}", part)
            pilots = synthesize_dataset(cov, tau, count, RngStream(cfg.seed, sid), with_truth=truth)
            manifest = DatasetManifest(
                cfg.n_antennas, cfg.spacing, env, cfg.beta, tau, count, cfg.seed, truth
            )
            write_dataset(path, pilots, manifest)
            written.append(path)
            log.info("wrote %s (%d records)", path, count)
    return written


def train_cells(cfg: ExperimentConfig, environment=None, snr_db=None) -> list[Path]:
    """Train one network per cell from the pilots-only training files."""
    written = []
    for env, s in select_cells(cfg, environment, snr_db):
        train_path, _ = dataset_paths(cfg, env, s)
        pilots, _ = read_pilots(train_path)
        t0 = time.perf_counter()
        net, trace = train(pilots, cfg.train)
        model_path, trace_path = model_paths(cfg, env, s)
        save_model(net, model_path, trace.config)
        trace.save(trace_path)
        written.append(model_path)
        log.info(
            "trained %s in %.1fs, shrinkage %s", cell_name(env, s), time.perf_counter() - t0, trace.selected_shrinkage
        )
    return written


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


def grouped_inv_snr(pilots: np.ndarray, vsc: VscConfig, group: int) -> np.ndarray:
    """Per-pilot ``1/rho`` estimate, shared within consecutive groups of ``group``."""
    est = estimate_inv_snr_groups(pilots, vsc, group)
    return np.repeat(est, group)[: len(pilots)]


def evaluate_cell(cfg: ExperimentConfig, environment: str, snr_db: float, cov_cache=None):
    """NMSE of every estimator on one cell's test file.

    Returns the report rows and the SNR-estimation statistics.
    """
    _, test_path = dataset_paths(cfg, environment, snr_db)
    model_path, _ = model_paths(cfg, environment, snr_db)
    test, manifest = read_dataset(test_path)
    net, _ = load_model(model_path)
    cov = covariance_for(cfg, environment, cov_cache).real
    tau = manifest.inv_snr
    y, h = test.y, test.h
    n = len(y)
    est_tau, t_snr = _timed(lambda: grouped_inv_snr(y, cfg.vsc(), cfg.snr_group))
    runs = {
        ("ls", "none", None): lambda: estimate_ls(y).h_hat,
        ("sample", "true", tau): lambda: estimate_sample_mmse(y, y, tau).h_hat,
        ("oracle", "true", tau): lambda: estimate_oracle_mmse(y, cov, tau).h_hat,
        ("score", "true", tau): lambda: estimate_score_mmse(y, net, tau).h_hat,
        ("score", "estimated", float(np.mean(est_tau))): lambda: y + est_tau[:, None] * score(net, y),
    }
    rows = []
    for (name, source, used), fn in runs.items():
        h_hat, secs = _timed(fn)
        if source == "estimated":
            secs += t_snr
        err = nmse(h_hat, h)
        rows.append(
            {
                "schema": CSV_SCHEMA,
                "environment": environment,
                "snr_db": snr_db,
                "inv_snr_true": tau,
                "estimator": name,
                "inv_snr_source": source,
                "inv_snr_used": used,
                "nmse": err.ratio,
                "nmse_db": err.db,
                "seconds_per_estimate": secs / n,
                "seed": cfg.seed,
            }
        )
    stats = snr_statistics(estimate_inv_snr_groups(y, cfg.vsc(), cfg.snr_group), tau)
    stats.update({"environment": environment, "snr_db": snr_db, "inv_snr_true": tau, "group": cfg.snr_group})
    return rows, stats


def write_csv(rows: list[dict], path, columns=CSV_COLUMNS) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        writer.writerows(rows)


def write_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, default=float) + "\n")


def evaluate(cfg: ExperimentConfig, environment=None, snr_db=None) -> dict:
    """Evaluate all selected cells and write ``report.csv`` and ``report.json``."""
    cache, rows, snr_rows = {}, [], []
    for env, s in select_cells(cfg, environment, snr_db):
        cell_rows, stats = evaluate_cell(cfg, env, s, cache)
        rows += cell_rows
        snr_rows.append(stats)
    report = {"schema": CSV_SCHEMA, "config": cfg.to_dict(), "cells": rows, "snr_estimation": snr_rows}
    write_csv(rows, cfg.output / "reports" / "report.csv")
    write_json(report, cfg.output / "reports" / "report.json")
    return report


SNR_COLUMNS = ("schema", "index", "inv_snr_true", "inv_snr_hat", "redundant", "principal", "iterations")


def estimate_snr_file(path, vsc: VscConfig, group: int = 1, out_dir=None) -> dict:
    """Estimate ``1/rho`` over a dataset, pooling ``group`` consecutive pilots per estimate."""
    pilots, manifest = read_pilots(path)
    rows = []
    for i, start in enumerate(range(0, len(pilots), group)):
        est = estimate_inv_snr(pilots[start : start + group], vsc)
        rows.append(
            {
                "schema": "snr-v1",
                "index": i,
                "inv_snr_true": manifest.inv_snr,
                "inv_snr_hat": est.inv_rho_hat,
                "redundant": est.redundant,
                "principal": est.principal,
                "iterations": est.iterations,
            }
        )
    summary = snr_statistics([r["inv_snr_hat"] for r in rows], manifest.inv_snr)
    summary.update({"dataset": str(path), "window": vsc.window, "group": group})
    if out_dir is not None:
        stem = Path(path).name.removesuffix(".bin")
        write_csv(rows, Path(out_dir) / f"{stem}_snr.csv", SNR_COLUMNS)
        write_json(summary, Path(out_dir) / f"{stem}_snr.json")
    return summary


SWEEP_COLUMNS = ("schema", "environment", "snr_db", "inv_snr_true", "inv_snr_swept", "nmse", "nmse_db", "ls_nmse_db")


def sweep_inv_snr(cfg: ExperimentConfig, environment: str, snr_db=None, grid=None) -> list[dict]:
    """NMSE of the score estimator when fed each swept ``1/rho`` value."""
    snr_db = cfg.sweep_snr_db if snr_db is None else float(snr_db)
    grid = cfg.sweep_inv_snr if grid is None else grid
    _, test_path = dataset_paths(cfg, environment, snr_db)
    model_path, _ = model_paths(cfg, environment, snr_db)
    test, manifest = read_dataset(test_path)
    net, _ = load_model(model_path)
    s = score(net, test.y)
    ls_db = nmse(test.y, test.h).db
    rows = []
    for t in grid:
        err = nmse(test.y + float(t) * s, test.h)
        rows.append(
            {
                "schema": "sweep-v1",
                "environment": environment,
                "snr_db": snr_db,
                "inv_snr_true": manifest.inv_snr,
                "inv_snr_swept": float(t),
                "nmse": err.ratio,
                "nmse_db": err.db,
                "ls_nmse_db": ls_db,
            }
        )
    write_csv(rows, cfg.output / "reports" / f"sweep_{cell_name(environment, snr_db)}.csv", SWEEP_COLUMNS)
    return rows


TIMING_COLUMNS = ("schema", "n_antennas", "window", "estimator", "median_seconds", "min_seconds", "max_seconds", "repeats")


def _median_latency(fn, repeats: int) -> tuple[float, float, float]:
    fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return float(np.median(samples)), float(np.min(samples)), float(np.max(samples))


def timing(
    antennas=(256, 1024), window: int = 7, spacing: float = 0.25, snr_db: float = 10.0,
    width: int = 256, repeats: int = 20, seed: int = 0, out_dir=None,
) -> list[dict]:
    """Per-pilot latency of the score and oracle estimators.

    The score estimator includes blind SNR estimation and one network
    evaluation. The oracle factorizes ``C + (1/rho) I`` on every call, since
    the noise level changes from pilot to pilot in deployment.
    """
    rows = []
    tau = inv_snr_from_db(snr_db)
    for n in antennas:
        cov = isotropic_covariance(build_geometry(n, spacing))
        c = cov.real
        y = synthesize_dataset(cov, tau, 1, RngStream(seed, n)).y[0]
        net = ScoreNetwork.init(2 * n, width, RngStream(seed, 7).generator(), float(np.sqrt(0.5 + tau)))
        vsc = VscConfig.for_antennas(n, window)

        def score_path():
            t = estimate_inv_snr(y, vsc).inv_rho_hat
            return y + t * score(net, y)

        def oracle_path():
            return c @ solve_spd(c + tau * np.eye(2 * n), y)

        for name, fn in (("score", score_path), ("oracle", oracle_path)):
            med, lo, hi = _median_latency(fn, repeats)
            rows.append(
                {
                    "schema": "timing-v1",
                    "n_antennas": n,
                    "window": window,
                    "estimator": name,
                    "median_seconds": med,
                    "min_seconds": lo,
                    "max_seconds": hi,
                    "repeats": repeats,
                }
            )
    if out_dir is not None:
        write_csv(rows, Path(out_dir) / "timing.csv", TIMING_COLUMNS)
    return rows

