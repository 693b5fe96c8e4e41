"""Monte-Carlo driver: scenario grid x replicates x model roster.

Every (scenario, replicate, model) cell is an independent task: it simulates
its replicate from the keyed substream, splits it, fits one model on the
training part and scores the test part. Results go to an append-only ledger
as cells finish and are rewritten sorted into ``raw.csv`` at the end, so the
final file does not depend on scheduling or on the number of workers.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import itertools
import json
import logging
import math
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any

import numpy as np

from . import cox, ranknet
from .data import ModelKind, RecurrentDataset, expand_layout, train_test_split
from .metrics import evaluate
from .simulate import ScenarioSpec, generate_scenario

log = logging.getLogger(__name__)

COX_MODELS = ("AG", "PWP", "WLW", "Frailty")
PENALTIES = ("none", "lasso", "ridge", "bar0.05", "bar0.1")
RANKNET = "RankDeepSurv"

RAW_FILE = "raw.csv"
LEDGER_FILE = "cells.partial.csv"
MANIFEST_FILE = "manifest.json"

# short scenario-id prefixes for grid keys
_ALIASES = {
    "p": "p",
    "n": "n",
    "sparse_rate": "sr",
    "censoring_rate": "cr",
    "rho": "rho",
    "frailty_variance": "fv",
    "beta_active": "b",
    "covariate_mean": "a",
}


def default_roster() -> list[tuple[str, str]]:
    return [(m, pen) for m in COX_MODELS for pen in PENALTIES] + [(RANKNET, "none")]


@dataclass
class RunManifest:
    scenarios: list[ScenarioSpec]
    scenario_ids: list[str]
    grid_keys: list[str]
    roster: list[tuple[str, str]] = field(default_factory=default_roster)
    seed: int = 20211101
    replicates: int = 10
    train_fraction: float = 0.7
    harrell_max_k: int = 4
    rank_epochs: int = 200
    rank_batch: int = 512
    rank_learning_rate: float = 0.01
    rank_mode: str = "gap"
    distribution: list[str] = field(default_factory=list)
    parallel: int = 1

    def __post_init__(self):
        if not self.scenarios:
            raise ValueError("the scenario grid is empty")
        if len(set(self.scenario_ids)) != len(self.scenario_ids):
            raise ValueError("scenario ids must be unique")
        if self.replicates < 1 or self.parallel < 1:
            raise ValueError("replicates and parallel must be >= 1")
        for model, pen in self.roster:
            if model == RANKNET:
                continue
            if model not in COX_MODELS or pen not in PENALTIES:
                raise ValueError(f"unknown roster entry {model}:{pen}")

    def resolved(self) -> dict[str, Any]:
        """Everything that determines the results; parallelism is left out."""
        return {
            "seed": self.seed,
            "replicates": self.replicates,
            "train_fraction": self.train_fraction,
            "harrell_max_k": self.harrell_max_k,
            "rank": {
                "epochs": self.rank_epochs,
                "batch": self.rank_batch,
                "learning_rate": self.rank_learning_rate,
                "mode": self.rank_mode,
            },
            "roster": [list(r) for r in self.roster],
            "grid_keys": self.grid_keys,
            "distribution": self.distribution,
            "scenarios": [
                {"id": sid, **spec.replace(seed=self.seed).to_dict()}
                for sid, spec in zip(self.scenario_ids, self.scenarios)
            ],
        }

    @property
    def sha256(self) -> str:
        text = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def cells(self) -> list[tuple[int, int, int]]:
        return list(
            itertools.product(range(len(self.scenarios)), range(self.replicates), range(len(self.roster)))
        )


def _split_list(raw: str) -> list[str]:
    return [v.strip() for v in raw.replace("\n", ",").split(",") if v.strip()]


def _fmt_value(v) -> str:
    return f"{v:g}" if isinstance(v, float) else str(v)


def scenario_id(values: dict[str, Any]) -> str:
    if not values:
        return "base"
    return "_".join(f"{_ALIASES.get(k, k)}{_fmt_value(v)}" for k, v in values.items())


def read_manifest(path: "str | Path", seed: int | None = None, parallel: int | None = None) -> RunManifest:
    """Parse an INI manifest with [run], [grid] and [scenario] sections."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    return manifest_from_config(cp, seed, parallel)


def manifest_from_config(
    cp: configparser.ConfigParser, seed: int | None = None, parallel: int | None = None
) -> RunManifest:
    base = ScenarioSpec.from_mapping(dict(cp["scenario"])) if cp.has_section("scenario") else ScenarioSpec()
    run = cp["run"] if cp.has_section("run") else {}
    grid: dict[str, list] = {}
    if cp.has_section("grid"):
        for key, raw in cp["grid"].items():
            if key in ("seed", "replicates"):
                raise ValueError(f"{key} belongs in [run], not [grid]")
            grid[key] = _split_list(raw)
    keys = list(grid)
    scenarios, ids = [], []
    for combo in itertools.product(*(grid[k] for k in keys)):
        spec = ScenarioSpec.from_mapping({**{k: str(v) for k, v in base.to_dict().items()}, **dict(zip(keys, combo))})
        scenarios.append(spec)
        ids.append(scenario_id({k: getattr(spec, k) for k in keys}))
    if "roster" in run:
        roster = []
        for item in _split_list(run["roster"]):
            model, _, pen = item.partition(":")
            model = RANKNET if model.lower() == RANKNET.lower() else ModelKind.parse(model).value
            roster.append((model, pen or "none"))
    else:
        roster = default_roster()
    run_seed = int(run.get("seed", base.seed))
    return RunManifest(
        scenarios=scenarios,
        scenario_ids=ids,
        grid_keys=keys,
        roster=roster,
        seed=int(seed) if seed is not None else run_seed,
        replicates=int(run.get("replicates", base.replicates)),
        train_fraction=float(run.get("train_fraction", 0.7)),
        harrell_max_k=int(run.get("harrell_max_k", 4)),
        rank_epochs=int(run.get("rank_epochs", 200)),
        rank_batch=int(run.get("rank_batch", 512)),
        rank_learning_rate=float(run.get("rank_learning_rate", 0.01)),
        rank_mode=run.get("rank_mode", "gap"),
        distribution=_split_list(run.get("distribution", "")),
        parallel=int(parallel) if parallel is not None else int(run.get("parallel", 1)),
    )


def columns(max_k: int) -> list[str]:
    cols = ["scenario_id", "replicate", "model", "penalty", "kim_c", "kim_pairs", "err", "fp", "fn"]
    for k in range(1, max_k + 1):
        cols += [f"harrell_k{k}", f"harrell_k{k}_pairs"]
    return cols + ["converged", "reason", "n_selected", "frailty_variance"]


# -- one cell -------------------------------------------------------------------


def _seed_int(seed: int, *keys: int) -> int:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1)[0])


@lru_cache(maxsize=4)
def _replicate(spec: ScenarioSpec, replicate: int, fraction: float) -> tuple[RecurrentDataset, RecurrentDataset]:
    data, _ = generate_scenario(spec, replicate)
    return train_test_split(data, fraction, _seed_int(spec.seed, replicate, 1))


def _cox_config(penalty: str, layout) -> cox.FitConfig:
    logp = math.log(max(layout.p, 2))
    if penalty == "none":
        pen = cox.Penalty.none()
    elif penalty == "ridge":
        pen = cox.Penalty.ridge(logp)
    elif penalty == "lasso":
        pen = cox.Penalty.lasso(0.1 * cox.lasso_max_strength(layout))
    else:
        pen = cox.Penalty.bar(logp, float(penalty[3:]) * logp)
    return cox.FitConfig(penalty=pen)


def _fill_metrics(row: dict, test: RecurrentDataset, scores, flagged, max_k: int) -> None:
    rep = evaluate(test, scores, flagged, max_k=max_k)
    row["kim_c"], row["kim_pairs"] = rep.kim_c, rep.kim_pair_count
    if flagged is not None:
        row["err"], row["fp"], row["fn"] = rep.error_rate, rep.fp, rep.fn
    for k in range(1, max_k + 1):
        row[f"harrell_k{k}"], row[f"harrell_k{k}_pairs"] = rep.harrell(k)


def run_cell(manifest: RunManifest, s_idx: int, rep: int, r_idx: int) -> dict[str, Any]:
    """Fit and score one roster entry on one replicate. Failures become rows."""
    spec = manifest.scenarios[s_idx].replace(seed=manifest.seed)
    model, penalty = manifest.roster[r_idx]
    row: dict[str, Any] = {
        "scenario_id": manifest.scenario_ids[s_idx],
        "replicate": rep,
        "model": model,
        "penalty": penalty,
        "converged": False,
        "reason": "",
    }
    try:
        train, test = _replicate(spec, rep, manifest.train_fraction)
        if model == RANKNET:
            net_spec = ranknet.NetworkSpec.default(
                spec.p,
                epochs=manifest.rank_epochs,
                batch=manifest.rank_batch,
                learning_rate=manifest.rank_learning_rate,
            )
            rng = np.random.default_rng(np.random.SeedSequence(manifest.seed, spawn_key=(rep, 2, s_idx)))
            net = ranknet.train(ranknet.to_samples(train, manifest.rank_mode), net_spec, rng)
            row["converged"], row["reason"] = True, cox.OK
            _fill_metrics(row, test, ranknet.predict_risk(net, test), None, manifest.harrell_max_k)
            return row
        kind = ModelKind.parse(model)
        layout = expand_layout(train, kind)
        config = _cox_config(penalty, layout)
        if kind is ModelKind.FRAILTY:
            res = cox.fit_frailty(layout, config)
            row["frailty_variance"] = res.frailty_variance
        else:
            res = cox.fit(layout, config)
        row["converged"], row["reason"] = res.converged, res.reason
        row["n_selected"] = int(np.count_nonzero(res.selected_covariates))
        if res.converged:
            flagged = cox.significant(res, cox.wald_pvalues(res, layout, config))
            _fill_metrics(row, test, test.X @ res.coefficients, flagged, manifest.harrell_max_k)
    except Exception as exc:  # a failing model is a data point, not a crash
        log.warning("cell %s/%s/%s failed: %s", row["scenario_id"], rep, model, exc)
        row["converged"] = False
        row["reason"] = f"ERROR:{type(exc).__name__}"
    return row


# -- CSV ------------------------------------------------------------------------


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "" if not math.isfinite(v) else repr(float(v))
    return str(v)


def format_row(row: dict[str, Any], cols: list[str]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow([_cell(row.get(c)) for c in cols])
    return buf.getvalue()


def _header(sha: str, cols: list[str]) -> str:
    return f"# manifest_sha256={sha}\n" + ",".join(cols) + "\n"


def _read_ledger(path: Path, sha: str, cols: list[str]) -> dict[tuple[str, int, str, str], str]:
    done: dict[tuple[str, int, str, str], str] = {}
    if not path.exists():
        return done
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != f"# manifest_sha256={sha}":
            raise ValueError(f"{path} belongs to a different manifest")
        if fh.readline().rstrip("\n").split(",") != cols:
            raise ValueError(f"{path} has unexpected columns")
        for line in fh:
            if not line.endswith("\n"):
                break  # torn final write
            rec = next(csv.reader([line]))
            if len(rec) != len(cols):
                continue
            done[(rec[0], int(rec[1]), rec[2], rec[3])] = line
    return done


# -- run ------------------------------------------------------------------------


def _init_worker():
    logging.basicConfig(level=logging.WARNING)


def _pool(k: int) -> ProcessPoolExecutor:
    # single-threaded BLAS in every worker keeps floating-point results identical
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = "1"
    return ProcessPoolExecutor(
        max_workers=k, mp_context=multiprocessing.get_context("spawn"), initializer=_init_worker
    )


class RunIncomplete(RuntimeError):
    pass


def run(manifest: RunManifest, out_dir: "str | Path", resume: bool = False, progress=None) -> Path:
    """Execute every cell and write ``raw.csv``; returns its path.

    With ``resume`` the completed cells of a prior run of the same manifest
    are taken from the ledger; otherwise an existing ledger is an error.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sha = manifest.sha256
    cols = columns(manifest.harrell_max_k)
    ledger = out / LEDGER_FILE
    if ledger.exists() and not resume:
        raise FileExistsError(f"{ledger} exists; pass resume=True to continue it")
    done = _read_ledger(ledger, sha, cols) if resume else {}
    (out / MANIFEST_FILE).write_text(
        json.dumps({"manifest_sha256": sha, **manifest.resolved()}, indent=2, sort_keys=True) + "\n"
    )

    cells = manifest.cells()
    key = lambda c: (manifest.scenario_ids[c[0]], c[1], *manifest.roster[c[2]])  # noqa: E731
    todo = [c for c in cells if key(c) not in done]
    log.info("%d cells, %d already done", len(cells), len(cells) - len(todo))

    if not ledger.exists() or not done:
        ledger.write_text(_header(sha, cols))
    failed = 0
    with open(ledger, "a", newline="") as fh, _pool(manifest.parallel) as pool:
        futures = {pool.submit(run_cell, manifest, *c): c for c in todo}
        for i, fut in enumerate(as_completed(futures), 1):
            c = futures[fut]
            try:
                row = fut.result()
            except Exception as exc:  # worker died; the cell stays pending
                log.error("cell %s did not execute: %s", key(c), exc)
                failed += 1
                continue
            line = format_row(row, cols)
            fh.write(line)
            fh.flush()
            done[key(c)] = line
            if progress:
                progress(i, len(todo))
    if failed:
        raise RunIncomplete(f"{failed} cells did not execute; rerun with --resume")

    order = {key(c): i for i, c in enumerate(cells)}
    raw = out / RAW_FILE
    with open(raw, "w", newline="") as fh:
        fh.write(_header(sha, cols))
        for k in sorted(done, key=order.__getitem__):
            fh.write(done[k])
    return raw


# -- aggregate ------------------------------------------------------------------


def read_raw(path: "str | Path"):
    import pandas as pd

    path = Path(path)
    with open(path) as fh:
        first = fh.readline().strip()
    if not first.startswith("# manifest_sha256="):
        raise ValueError(f"{path} lacks the manifest header")
    df = pd.read_csv(path, skiprows=1, keep_default_na=False, na_values=[""], dtype={"reason": str})
    return df, first.split("=", 1)[1]


def _metric_columns(df) -> list[str]:
    return ["kim_c"] + sorted(
        (c for c in df.columns if c.startswith("harrell_k") and not c.endswith("_pairs")),
        key=lambda c: int(c[9:]),
    ) + ["err"]


def aggregate(in_dir: "str | Path", out_dir: "str | Path") -> dict[str, Path]:
    """Fold ``raw.csv`` into summary and plot-ready long-format tables."""
    import pandas as pd

    src = Path(in_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    df, sha = read_raw(src / RAW_FILE)
    if df.empty:
        raise ValueError("the result store is empty")
    meta = json.loads((src / MANIFEST_FILE).read_text()) if (src / MANIFEST_FILE).exists() else {}
    grid_keys = meta.get("grid_keys", [])
    scen = pd.DataFrame(meta.get("scenarios", []))
    metrics = _metric_columns(df)
    keys = ["scenario_id", "model", "penalty"]

    long = df.melt(id_vars=keys + ["replicate"], value_vars=metrics, var_name="metric")
    g = long.groupby(keys + ["metric"], sort=False)["value"]
    summary = pd.DataFrame(
        {
            "mean": g.mean(),
            "sd": g.std(ddof=1),
            "min": g.min(),
            "max": g.max(),
            "count": g.count(),
        }
    ).reset_index()
    if grid_keys and not scen.empty:
        summary = summary.merge(scen[["id"] + grid_keys].rename(columns={"id": "scenario_id"}), on="scenario_id", how="left")
        summary = summary[["scenario_id"] + grid_keys + [c for c in summary.columns if c not in grid_keys and c != "scenario_id"]]

    def write(frame, name):
        path = out / name
        with open(path, "w", newline="") as fh:
            fh.write(f"# manifest_sha256={sha}\n")
            frame.to_csv(fh, index=False, lineterminator="\n")
        return path

    paths = {"summary": write(summary, "summary.csv")}
    curve_cols = [c for c in summary.columns if c not in ("min", "max")]
    concord = summary[summary["metric"] != "err"][curve_cols]
    paths["concordance"] = write(concord, "concordance_curves.csv")
    paths["error_rate"] = write(summary[summary["metric"] == "err"][curve_cols], "error_rate_curves.csv")
    chosen = meta.get("distribution") or []
    dist = long[long["scenario_id"].isin(chosen)] if chosen else long.iloc[0:0]
    paths["distribution"] = write(dist[keys + ["replicate", "metric", "value"]], "distribution.csv")
    return paths
