"""Experiment harness: strict JSON config, grid runner, CSV metrics, CLI.

Commands:
  run        --config cfg.json [--seed N] [--out DIR] [--jobs J]
  validate   --config cfg.json
  summarize  --in DIR

Each (adapter mode, epsilon) grid cell trains independently under an rng
path that embeds the cell key, writes one CSV of per-epoch metrics, and
contributes to a cross-cell summary and MANIFEST. Outputs are a pure
function of (config bytes, seed): no timestamps, sorted keys, repr floats.

Exit codes: 0 success, 2 config error, 3 runtime failure. When --seed is
absent the SIM_DEFAULT_SEED environment variable applies, then seed 0.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .channel import FadingModel
from .federation import TrainingConfig, run_training
from .lora import UpdateMode
from .numerics import RngStream
from .privacy import Binding, epsilon_from_sigma

SCHEMA_VERSION = 1

CSV_COLUMNS = [
    "schema_version", "mode", "epsilon_target", "epoch", "train_loss",
    "test_accuracy", "realized_epsilon_max", "power_bound_fraction",
    "mean_snr", "mean_alpha",
]


class ConfigError(ValueError):
    """Anything wrong with a config file: syntax, unknown keys, bad values."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Grid-level configuration mirroring the JSON schema one to one."""

    seed: int | None = None
    devices: int = 15
    rounds: int = 30
    epsilon_grid: tuple[float, ...] = (3.0, 5.0, 10.0, 100.0)
    delta: float = 1e-5
    clip_c: float = 0.01
    c1: float = 1.0
    strong_composition: bool = False
    fading: FadingModel = field(default_factory=FadingModel.rayleigh)
    n0: float = 1.0
    p_max: float = 25.0
    eta_global: float = 1e-3
    eta_local: float = 0.05
    local_optimizer: str = "gd"
    descale: bool = True
    d_x: int = 16
    width: int = 32
    layers: int = 2
    rank: int = 4
    scale: float = 0.1
    classes: int = 4
    activation: str = "tanh"
    n_samples: int = 600
    fraction: float = 0.05
    margin: float = 3.0
    modes: tuple[UpdateMode, ...] = (UpdateMode.UPDATE_BOTH,
                                     UpdateMode.FIXED_GAUSSIAN_A,
                                     UpdateMode.FIXED_ORTHONORMAL_A)
    out_dir: str = "results"

    def training_config(self, mode: UpdateMode, epsilon: float) -> TrainingConfig:
        return TrainingConfig(
            mode=mode, rounds=self.rounds, devices=self.devices,
            epsilon_target=epsilon, delta=self.delta, clip_c=self.clip_c,
            c1=self.c1, strong_composition=self.strong_composition,
            fading=self.fading, n0=self.n0, p_max=self.p_max,
            eta_global=self.eta_global, eta_local=self.eta_local,
            local_optimizer=self.local_optimizer, descale=self.descale,
            d_x=self.d_x, width=self.width, layers=self.layers, rank=self.rank,
            scale=self.scale, classes=self.classes, activation=self.activation,
            n_samples=self.n_samples, fraction=self.fraction, margin=self.margin)


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_keys(obj: dict, allowed: set[str], prefix: str = "") -> None:
    for key in obj:
        _require(key in allowed, f"unknown key: {prefix}{key}")


_TOP_KEYS = {
    "seed", "devices", "rounds", "epsilon_grid", "delta", "clip_c", "c1",
    "strong_composition", "fading", "n0", "p_max", "eta_global", "eta_local",
    "local_optimizer", "descale", "model", "data", "modes", "out_dir",
}
_FADING_KEYS = {"kind", "h0", "h_floor"}
_MODEL_KEYS = {"d_x", "width", "layers", "rank", "scale", "classes", "activation"}
_DATA_KEYS = {"n", "fraction", "margin"}


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Validate a parsed JSON document; unknown keys and bad values raise
    ConfigError with a key-path diagnostic."""
    _require(isinstance(raw, dict), "config root must be a JSON object")
    _check_keys(raw, _TOP_KEYS)
    base = ExperimentConfig()

    seed = raw.get("seed", None)
    _require(seed is None or _is_int(seed), "seed: must be an integer")

    def pos_int(key, default, minimum=1):
        v = raw.get(key, default)
        _require(_is_int(v) and v >= minimum, f"{key}: must be an integer >= {minimum}")
        return v

    def pos_num(key, default, allow_zero=False):
        v = raw.get(key, default)
        ok = _is_num(v) and math.isfinite(v) and (v >= 0 if allow_zero else v > 0)
        _require(ok, f"{key}: must be a {'nonnegative' if allow_zero else 'positive'} number")
        return float(v)

    devices = pos_int("devices", base.devices)
    rounds = pos_int("rounds", base.rounds)

    grid = raw.get("epsilon_grid", list(base.epsilon_grid))
    _require(isinstance(grid, list) and grid, "epsilon_grid: must be a non-empty list")
    for i, e in enumerate(grid):
        _require(_is_num(e) and math.isfinite(e) and e > 0,
                 f"epsilon_grid[{i}]: must be a positive number")
    _require(len(set(map(float, grid))) == len(grid), "epsilon_grid: entries must be distinct")

    delta = raw.get("delta", base.delta)
    _require(_is_num(delta) and 0.0 < delta < 1.0, "delta must lie in (0,1)")

    clip_c = pos_num("clip_c", base.clip_c)
    c1 = pos_num("c1", base.c1)
    strong = raw.get("strong_composition", base.strong_composition)
    _require(isinstance(strong, bool), "strong_composition: must be a boolean")

    fading_raw = raw.get("fading", {})
    _require(isinstance(fading_raw, dict), "fading: must be an object")
    _check_keys(fading_raw, _FADING_KEYS, "fading.")
    kind = fading_raw.get("kind", "rayleigh")
    _require(kind in ("rayleigh", "constant"),
             "fading.kind: must be 'rayleigh' or 'constant'")
    h0 = fading_raw.get("h0", 1.0)
    _require(_is_num(h0) and h0 >= 0, "fading.h0: must be a nonnegative number")
    h_floor = fading_raw.get("h_floor", 1e-3)
    _require(_is_num(h_floor) and h_floor > 0, "fading.h_floor: must be a positive number")
    fading = FadingModel(kind=kind, h0=float(h0), h_floor=float(h_floor))

    n0 = pos_num("n0", base.n0, allow_zero=True)
    p_max = pos_num("p_max", base.p_max)
    eta_global = pos_num("eta_global", base.eta_global, allow_zero=True)
    eta_local = pos_num("eta_local", base.eta_local, allow_zero=True)

    local_opt = raw.get("local_optimizer", base.local_optimizer)
    _require(local_opt in ("gd", "adam"), "local_optimizer: must be 'gd' or 'adam'")
    descale = raw.get("descale", base.descale)
    _require(isinstance(descale, bool), "descale: must be a boolean")

    model_raw = raw.get("model", {})
    _require(isinstance(model_raw, dict), "model: must be an object")
    _check_keys(model_raw, _MODEL_KEYS, "model.")

    def model_int(key, default, minimum=1):
        v = model_raw.get(key, default)
        _require(_is_int(v) and v >= minimum, f"model.{key}: must be an integer >= {minimum}")
        return v

    d_x = model_int("d_x", base.d_x)
    width = model_int("width", base.width, 2)
    layers = model_int("layers", base.layers)
    rank = model_int("rank", base.rank)
    _require(rank <= width // 2, "model.rank: must be at most model.width / 2")
    scale = model_raw.get("scale", base.scale)
    _require(_is_num(scale) and scale > 0, "model.scale: must be a positive number")
    classes = model_int("classes", base.classes, 2)
    _require(d_x >= classes, "model.d_x: must be at least model.classes")
    activation = model_raw.get("activation", base.activation)
    _require(activation in ("tanh", "relu", "identity"),
             "model.activation: must be 'tanh', 'relu' or 'identity'")

    data_raw = raw.get("data", {})
    _require(isinstance(data_raw, dict), "data: must be an object")
    _check_keys(data_raw, _DATA_KEYS, "data.")
    n_samples = data_raw.get("n", base.n_samples)
    _require(_is_int(n_samples) and n_samples >= 2 * classes,
             "data.n: must be an integer >= 2 * model.classes")
    fraction = data_raw.get("fraction", base.fraction)
    _require(_is_num(fraction) and 0.0 < fraction <= 1.0,
             "data.fraction: must lie in (0, 1]")
    margin = data_raw.get("margin", base.margin)
    _require(_is_num(margin) and margin >= 0, "data.margin: must be a nonnegative number")

    modes_raw = raw.get("modes", [m.value for m in base.modes])
    _require(isinstance(modes_raw, list) and modes_raw, "modes: must be a non-empty list")
    valid = {m.value for m in UpdateMode}
    for i, m in enumerate(modes_raw):
        _require(m in valid, f"modes[{i}]: must be one of {sorted(valid)}")
    _require(len(set(modes_raw)) == len(modes_raw), "modes: entries must be distinct")

    out_dir = raw.get("out_dir", base.out_dir)
    _require(isinstance(out_dir, str) and out_dir, "out_dir: must be a non-empty string")

    cfg = ExperimentConfig(
        seed=seed, devices=devices, rounds=rounds,
        epsilon_grid=tuple(float(e) for e in grid), delta=float(delta),
        clip_c=clip_c, c1=c1, strong_composition=strong, fading=fading, n0=n0,
        p_max=p_max, eta_global=eta_global, eta_local=eta_local,
        local_optimizer=local_opt, descale=descale, d_x=d_x, width=width,
        layers=layers, rank=rank, scale=float(scale), classes=classes,
        activation=activation, n_samples=n_samples, fraction=float(fraction),
        margin=float(margin), modes=tuple(UpdateMode(m) for m in modes_raw),
        out_dir=out_dir)
    try:
        cfg.training_config(cfg.modes[0], cfg.epsilon_grid[0])
    except ValueError as exc:  # downstream constraint not caught above
        raise ConfigError(str(exc)) from exc
    return cfg


def parse_config(path) -> ExperimentConfig:
    """Load and validate a JSON config file."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}") from exc
    return config_from_dict(raw)


def serialize_config(cfg: ExperimentConfig) -> dict:
    """Dict form that parses back to an identical config."""
    return {
        "seed": cfg.seed,
        "devices": cfg.devices,
        "rounds": cfg.rounds,
        "epsilon_grid": list(cfg.epsilon_grid),
        "delta": cfg.delta,
        "clip_c": cfg.clip_c,
        "c1": cfg.c1,
        "strong_composition": cfg.strong_composition,
        "fading": {"kind": cfg.fading.kind, "h0": cfg.fading.h0,
                   "h_floor": cfg.fading.h_floor},
        "n0": cfg.n0,
        "p_max": cfg.p_max,
        "eta_global": cfg.eta_global,
        "eta_local": cfg.eta_local,
        "local_optimizer": cfg.local_optimizer,
        "descale": cfg.descale,
        "model": {"d_x": cfg.d_x, "width": cfg.width, "layers": cfg.layers,
                  "rank": cfg.rank, "scale": cfg.scale, "classes": cfg.classes,
                  "activation": cfg.activation},
        "data": {"n": cfg.n_samples, "fraction": cfg.fraction, "margin": cfg.margin},
        "modes": [m.value for m in cfg.modes],
        "out_dir": cfg.out_dir,
    }


def format_epsilon(eps: float) -> str:
    """Stable file-name token for an epsilon value (3.0 -> '3', 0.5 -> '0p5')."""
    if float(eps).is_integer():
        return str(int(eps))
    return repr(float(eps)).replace(".", "p").replace("-", "m")


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _cell_rows_and_summary(cfg: ExperimentConfig, seed: int, mode: UpdateMode,
                           epsilon: float):
    """Train one grid cell; returns (csv rows, cell summary dict)."""
    tcfg = cfg.training_config(mode, epsilon)
    rng = RngStream(seed).child("cell", mode.value, format_epsilon(epsilon))
    result = run_training(tcfg, rng)
    privacy = tcfg.privacy_config()
    sqrt_n0 = math.sqrt(cfg.n0)
    rows = []
    running_worst = [0.0] * cfg.devices
    binding_counts = {Binding.PRIVACY: 0, Binding.POWER: 0}
    for record in result.records:
        t = record.round_index
        for st in record.device_stats:
            running_worst[st.device] = max(running_worst[st.device], st.alpha * st.h)
            binding_counts[st.binding] += 1
        realized = max(
            epsilon_from_sigma(privacy.c1, worst, privacy.clip_c, sqrt_n0, t,
                               privacy.delta)
            for worst in running_worst)
        stats = record.device_stats
        rows.append([
            SCHEMA_VERSION, mode.value, _fmt(float(epsilon)), t,
            _fmt(record.train_loss), _fmt(record.test_accuracy), _fmt(realized),
            _fmt(sum(1 for s in stats if s.binding is Binding.POWER) / len(stats)),
            _fmt(float(sum(s.snr for s in stats) / len(stats))),
            _fmt(float(sum(s.alpha for s in stats) / len(stats))),
        ])
    accuracies = [r.test_accuracy for r in result.records]
    best_idx = max(range(len(accuracies)), key=accuracies.__getitem__)
    summary = {
        "mode": mode.value,
        "epsilon_target": float(epsilon),
        "final_accuracy": accuracies[-1],
        "best_accuracy": accuracies[best_idx],
        "epochs_to_best": best_idx + 1,
        "realized_epsilon_max": max(s.realized_epsilon for s in result.spends),
        "binding_counts": {"privacy": binding_counts[Binding.PRIVACY],
                           "power": binding_counts[Binding.POWER]},
    }
    return rows, summary


def _execute_cell(payload):
    """Top-level worker so grid cells can run in separate processes."""
    raw_cfg, seed, mode_value, epsilon, out_dir = payload
    cfg = config_from_dict(raw_cfg)
    mode = UpdateMode(mode_value)
    csv_name = f"{mode.value}_eps{format_epsilon(epsilon)}.csv"
    try:
        rows, summary = _cell_rows_and_summary(cfg, seed, mode, epsilon)
    except Exception as exc:  # cell failures must not kill sibling cells
        return {"mode": mode.value, "epsilon_target": float(epsilon),
                "csv": csv_name, "status": "failed", "error": str(exc)}
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    writer.writerows(rows)
    (Path(out_dir) / csv_name).write_text(buf.getvalue())
    summary["csv"] = csv_name
    summary["status"] = "ok"
    return summary


def summarize(cells: list[dict]) -> dict:
    """Cross-cell summary: per-cell metrics plus accuracy orderings per epsilon."""
    if not any(c.get("status") == "ok" for c in cells):
        raise ValueError("no completed cells to summarize")
    ok_cells = [c for c in cells if c.get("status") == "ok"]
    orderings = {}
    for eps in sorted({c["epsilon_target"] for c in ok_cells}):
        group = [c for c in ok_cells if c["epsilon_target"] == eps]
        ranked = sorted(group, key=lambda c: (-c["final_accuracy"], c["mode"]))
        orderings[format_epsilon(eps)] = [c["mode"] for c in ranked]
    cell_entries = sorted(
        ok_cells, key=lambda c: (c["mode"], c["epsilon_target"]))
    return {
        "schema_version": SCHEMA_VERSION,
        "cells": [{k: v for k, v in c.items() if k != "status"} for c in cell_entries],
        "final_accuracy_ordering": orderings,
    }


def run_grid(cfg: ExperimentConfig, seed: int, out_dir: str | None = None,
             jobs: int = 1) -> int:
    """Run every (mode, epsilon) cell; returns a process exit code."""
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    raw_cfg = serialize_config(cfg)
    payloads = [(raw_cfg, seed, mode.value, eps, str(out))
                for mode in cfg.modes for eps in cfg.epsilon_grid]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_execute_cell, payloads))
    else:
        results = [_execute_cell(p) for p in payloads]
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "config": raw_cfg,
        "cells": [
            {"mode": r["mode"], "epsilon_target": r["epsilon_target"],
             "csv": r["csv"], "status": r["status"],
             **({"error": r["error"]} if r.get("error") else {})}
            for r in sorted(results, key=lambda r: (r["mode"], r["epsilon_target"]))
        ],
    }
    _write_json(out / "MANIFEST.json", manifest)
    failures = [r for r in results if r["status"] != "ok"]
    if len(failures) < len(results):
        _write_json(out / "summary.json", summarize(results))
    if failures:
        for f in failures:
            print(f"cell {f['mode']} eps={f['epsilon_target']} failed: {f['error']}",
                  file=sys.stderr)
        return 3
    return 0


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def summarize_dir(in_dir) -> dict:
    """Rebuild the cross-cell summary from MANIFEST and the cell CSVs."""
    in_path = Path(in_dir)
    manifest_path = in_path / "MANIFEST.json"
    if not manifest_path.exists():
        raise ConfigError(f"no MANIFEST.json under {in_dir}")
    manifest = json.loads(manifest_path.read_text())
    devices = manifest["config"]["devices"]
    cells = []
    for entry in manifest["cells"]:
        if entry["status"] != "ok":
            cells.append(dict(entry))
            continue
        with open(in_path / entry["csv"], newline="") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
        accs = [float(r["test_accuracy"]) for r in rows]
        best_idx = max(range(len(accs)), key=accs.__getitem__)
        power = sum(round(float(r["power_bound_fraction"]) * devices) for r in rows)
        cells.append({
            "mode": entry["mode"],
            "epsilon_target": entry["epsilon_target"],
            "final_accuracy": accs[-1],
            "best_accuracy": accs[best_idx],
            "epochs_to_best": best_idx + 1,
            "realized_epsilon_max": float(rows[-1]["realized_epsilon_max"]),
            "binding_counts": {"privacy": devices * len(rows) - power, "power": power},
            "csv": entry["csv"],
            "status": "ok",
        })
    return summarize(cells)


def _resolve_seed(cli_seed: int | None, cfg_seed: int | None) -> int:
    if cli_seed is not None:
        return cli_seed
    if cfg_seed is not None:
        return cfg_seed
    env = os.environ.get("SIM_DEFAULT_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"SIM_DEFAULT_SEED must be an integer, got {env!r}") from exc
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="splitlora",
        description="Split federated LoRA fine-tuning simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run the experiment grid")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--jobs", type=int, default=1)
    p_val = sub.add_parser("validate", help="check a config file")
    p_val.add_argument("--config", required=True)
    p_sum = sub.add_parser("summarize", help="summarize a results directory")
    p_sum.add_argument("--in", dest="in_dir", required=True)
    args = parser.parse_args(argv)
    try:
        if args.command == "validate":
            parse_config(args.config)
            print(f"ok: {args.config}")
            return 0
        if args.command == "run":
            cfg = parse_config(args.config)
            seed = _resolve_seed(args.seed, cfg.seed)
            if args.jobs < 1:
                raise ConfigError("--jobs must be at least 1")
            return run_grid(cfg, seed, out_dir=args.out, jobs=args.jobs)
        if args.command == "summarize":
            summary = summarize_dir(args.in_dir)
            _write_json(Path(args.in_dir) / "summary.json", summary)
            print(json.dumps(summary, indent=2, sort_keys=True))
            return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 3
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
