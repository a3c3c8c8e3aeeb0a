"""
Monte Carlo campaigns over (n, beta) grids.

Each replication draws its own seed from ``(master_seed, n, beta, rep)``,
so a cell can be rerun alone and results do not depend on the number of
worker processes. Records are kept in long form for plotting.
"""

from __future__ import annotations

import csv
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from ..forest.model import ForestConfig, TreeStructure, fit_forest
from ..pinball import check_tau, knight_decompose, pinball_loss
from ..quantile import DENSITY_FLOOR, predict_with_interval
from ..vimp import FeatureSubset, cross_fit_split, run_vimp
from .dgp import DGPSpec, generate
from .oracles import oracle_quantile, oracle_restricted_quantile, oracle_vi

__all__ = [
    "SimConfig",
    "SimResult",
    "ReplicationFailure",
    "replication_seed",
    "run_phase_transition",
    "run_pointwise_normality",
    "run_bias_scaling",
    "loglog_slope",
    "qq_correlation",
    "knight_error_decomposition",
    "ErrorDecomposition",
    "leaf_diameters",
    "mean_leaf_diameter",
]

MAX_FAILURE_FRACTION = 0.10


@dataclass(frozen=True)
class SimConfig:
    """
    Grid, replication count and forest settings for one campaign.

    For importance campaigns ``n`` is the evaluation-fold size: each
    replication draws ``2n`` rows and splits them in half. For pointwise
    campaigns ``n`` is the number of rows the forest is fitted on.
    ``num_trees`` is raised to ``ceil(trees_per_ratio * n_fit / s)`` when
    that is larger, which keeps the Monte Carlo noise of the forest weights
    small at small subsample sizes.
    """

    dgp: DGPSpec = field(default_factory=DGPSpec)
    tau: float = 0.5
    n_grid: tuple = (2000,)
    beta_grid: tuple = (0.3,)
    replications: int = 300
    level: float = 0.95
    subset: tuple = (0,)
    num_trees: int = 500
    trees_per_ratio: float = 0.0
    min_leaf_est: int = 5
    alpha: float = 0.05
    mtry: int | None = None
    probes: tuple = ((0.5, 0.5),)
    master_seed: int = 0

    def __post_init__(self):
        check_tau(self.tau)
        if not self.n_grid or not self.beta_grid:
            raise ValueError("n_grid and beta_grid must be nonempty")
        if any(int(n) < 4 for n in self.n_grid):
            raise ValueError("grid sizes must be at least 4")
        if any(not (0.0 < b < 1.0) for b in self.beta_grid):
            raise ValueError("beta values must lie in (0, 1)")
        if int(self.replications) < 1:
            raise ValueError("replications must be positive")
        if not (0.0 < self.level < 1.0):
            raise ValueError("level must lie in (0, 1)")
        FeatureSubset(tuple(self.subset)).validate(self.dgp.p)
        if len(set(self.subset)) >= self.dgp.p:
            raise ValueError("subset cannot remove every feature")
        for pt in self.probes:
            if len(pt) != self.dgp.p:
                raise ValueError("probe dimension does not match the DGP")
        object.__setattr__(self, "n_grid", tuple(int(n) for n in self.n_grid))
        object.__setattr__(self, "beta_grid", tuple(float(b) for b in self.beta_grid))
        object.__setattr__(self, "subset", tuple(int(j) for j in self.subset))
        object.__setattr__(self, "probes", tuple(tuple(float(v) for v in p) for p in self.probes))

    def forest_config(self, n_fit: int, beta: float, seed: int) -> ForestConfig:
        base = ForestConfig(num_trees=self.num_trees, beta=beta, alpha=self.alpha,
                            min_leaf_est=self.min_leaf_est, mtry=self.mtry,
                            seed=seed, tau=self.tau)
        s = base.resolve_subsample(n_fit)
        trees = max(self.num_trees, math.ceil(self.trees_per_ratio * n_fit / s))
        return ForestConfig(num_trees=trees, beta=beta, alpha=self.alpha,
                            min_leaf_est=self.min_leaf_est, mtry=self.mtry,
                            seed=seed, tau=self.tau)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dgp"] = self.dgp.to_dict()
        d["n_grid"] = list(self.n_grid)
        d["beta_grid"] = list(self.beta_grid)
        d["subset"] = list(self.subset)
        d["probes"] = [list(p) for p in self.probes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        d["dgp"] = DGPSpec.from_dict(d.get("dgp", {}))
        for key in ("n_grid", "beta_grid", "subset"):
            if key in d:
                d[key] = tuple(d[key])
        if "probes" in d:
            d["probes"] = tuple(tuple(p) for p in d["probes"])
        return cls(**d)


def replication_seed(master: int, n: int, beta: float, rep: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master), int(n), int(round(beta * 1e6)), int(rep)])


def _streams(master, n, beta, rep):
    """Independent data, split and forest streams for one replication."""
    data_ss, split_ss, forest_ss = replication_seed(master, n, beta, rep).spawn(3)
    forest_seed = int(forest_ss.generate_state(1)[0])
    return np.random.default_rng(data_ss), np.random.default_rng(split_ss), forest_seed


@dataclass(frozen=True)
class ReplicationFailure:
    n: int
    beta: float
    rep: int
    error: str


@dataclass
class SimResult:
    """Per-replication metrics plus per-cell aggregates."""

    campaign: str
    config: SimConfig
    records: list  # dicts with keys n, beta, rep and metric values
    failures: list
    summary: dict

    def long_rows(self):
        for rec in self.records:
            for key, value in rec.items():
                if key in ("n", "beta", "rep"):
                    continue
                yield rec["n"], rec["beta"], rec["rep"], key, value

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "beta", "rep", "metric", "value"])
            for n, beta, rep, metric, value in self.long_rows():
                w.writerow([n, repr(beta), rep, metric, repr(float(value))])

    def summary_dict(self) -> dict:
        return {"campaign": self.campaign, "config": self.config.to_dict(),
                "n_failures": len(self.failures),
                "failures": [asdict(f) for f in self.failures],
                "cells": self.summary}

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def cell(self, n, beta=None) -> dict:
        return self.summary[_cell_key(n, beta)]


def _cell_key(n, beta=None):
    return f"n={int(n)}" if beta is None else f"n={int(n)},beta={float(beta):g}"


def _run_tasks(fn, tasks, workers):
    if workers is None:
        workers = int(os.environ.get("QRFVIMP_THREADS", "1") or 1)
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (8 * workers))))


def _collect(outcomes, total):
    records, failures = [], []
    for out in outcomes:
        (failures if isinstance(out, ReplicationFailure) else records).append(out)
    if len(failures) > MAX_FAILURE_FRACTION * total:
        raise RuntimeError(f"{len(failures)} of {total} replications failed; "
                           f"first error: {failures[0].error}")
    records.sort(key=lambda r: (r["n"], r["beta"], r["rep"]))
    return records, failures


def _proportion(x):
    x = np.asarray(x, dtype=float)
    c = float(x.mean()) if x.size else float("nan")
    return c, math.sqrt(c * (1 - c) / x.size) if x.size else float("nan")


# importance campaigns -------------------------------------------------------

def _vi_replication(task):
    cfg, n, beta, rep, truth = task
    try:
        data_rng, split_rng, forest_seed = _streams(cfg.master_seed, n, beta, rep)
        data = generate(cfg.dgp, 2 * n, data_rng)
        split = cross_fit_split(data, split_rng)
        fcfg = cfg.forest_config(split.train_rows.size, beta, forest_seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            r = run_vimp(data, cfg.subset, fcfg, level=cfg.level, split=split)
        err = r.v_hat - truth
        return {
            "n": n, "beta": beta, "rep": rep,
            "v_hat": r.v_hat, "v_tilde": r.v_tilde, "c_hat": r.c_hat,
            "sigma_s_hat": r.sigma_s_hat, "beta_used": r.beta_used,
            "subsample_size": r.subsample_size, "num_trees": fcfg.num_trees,
            "hit": float(r.ci_low <= truth <= r.ci_high),
            "hit_tilde": float(r.ci_tilde_low <= truth <= r.ci_tilde_high),
            "error": err, "error_tilde": r.v_tilde - truth,
            "scaled_error": r.n_eval ** (1.0 - beta) * err,
            "floor_fraction": r.floor_fraction,
        }
    except (ValueError, RuntimeError, FloatingPointError) as exc:
        return ReplicationFailure(n, beta, rep, f"{type(exc).__name__}: {exc}")


def _summarize_vi(records, truth):
    out = {}
    cells = sorted({(r["n"], r["beta"]) for r in records})
    for n, beta in cells:
        rs = [r for r in records if r["n"] == n and r["beta"] == beta]
        col = {k: np.array([r[k] for r in rs], dtype=float) for k in rs[0]
               if k not in ("n", "beta", "rep")}
        cov, cov_se = _proportion(col["hit"])
        cov_t, cov_t_se = _proportion(col["hit_tilde"])
        out[_cell_key(n, beta)] = {
            "n": n, "beta": beta, "replications": len(rs), "oracle_vi": truth,
            "subsample_size": int(col["subsample_size"][0]),
            "num_trees": int(col["num_trees"][0]),
            "coverage": cov, "coverage_se": cov_se,
            "coverage_tilde": cov_t, "coverage_tilde_se": cov_t_se,
            "mean_error": float(col["error"].mean()),
            "mean_abs_error": float(np.abs(col["error"]).mean()),
            "mean_abs_error_tilde": float(np.abs(col["error_tilde"]).mean()),
            "sd_v_hat": float(col["v_hat"].std(ddof=1)) if len(rs) > 1 else 0.0,
            "mean_se": float(col["sigma_s_hat"].mean() / math.sqrt(n)),
            "mean_abs_scaled_error": float(np.abs(col["scaled_error"]).mean()),
            "mean_c_hat": float(col["c_hat"].mean()),
        }
    return out


def _vi_campaign(name, cfg, n_grid, beta_grid, workers):
    truth = float(oracle_vi(cfg.dgp, cfg.tau, cfg.subset))
    tasks = [(cfg, n, b, rep, truth) for n in n_grid for b in beta_grid
             for rep in range(cfg.replications)]
    records, failures = _collect(_run_tasks(_vi_replication, tasks, workers), len(tasks))
    return SimResult(name, cfg, records, failures, _summarize_vi(records, truth))


def run_phase_transition(cfg: SimConfig, workers: int | None = None) -> SimResult:
    """Coverage of the raw and bias-corrected importance intervals per (n, beta)."""
    return _vi_campaign("phase_transition", cfg, cfg.n_grid, cfg.beta_grid, workers)


def loglog_slope(ns, values):
    """Least-squares slope of log(values) on log(ns) with its standard error."""
    x, y = np.log(np.asarray(ns, dtype=float)), np.log(np.asarray(values, dtype=float))
    if x.size < 3:
        raise ValueError("slope needs at least 3 grid sizes")
    fit = stats.linregress(x, y)
    return float(fit.slope), float(fit.stderr)


def run_bias_scaling(cfg: SimConfig, workers: int | None = None) -> SimResult:
    """
    Decay of ``mean |v_hat - V|`` in ``n`` at a single ``beta > 1/2``.

    The summary gains ``slope`` and ``slope_se`` from regressing the log mean
    absolute error on log n.
    """
    if len(cfg.beta_grid) != 1 or cfg.beta_grid[0] <= 0.5:
        raise ValueError("bias scaling needs a single beta above 1/2")
    if len(cfg.n_grid) < 3:
        raise ValueError("bias scaling needs at least 3 grid sizes")
    res = _vi_campaign("bias_scaling", cfg, cfg.n_grid, cfg.beta_grid, workers)
    beta = cfg.beta_grid[0]
    ns = sorted(cfg.n_grid)
    mae = [res.summary[_cell_key(n, beta)]["mean_abs_error"] for n in ns]
    slope, se = loglog_slope(ns, mae)
    res.summary["slope"] = {"beta": beta, "slope": slope, "slope_se": se,
                            "target": beta - 1.0, "n": ns, "mean_abs_error": mae}
    return res


# pointwise campaign ---------------------------------------------------------

def _pointwise_replication(task):
    cfg, n, beta, rep, truths = task
    try:
        data_rng, _, forest_seed = _streams(cfg.master_seed, n, beta, rep)
        data = generate(cfg.dgp, n, data_rng)
        fcfg = cfg.forest_config(n, beta, forest_seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            model = fit_forest(data, fcfg)
        preds = predict_with_interval(model, data, np.array(cfg.probes), level=cfg.level)
        rec = {"n": n, "beta": beta, "rep": rep,
               "subsample_size": model.subsample_size, "num_trees": fcfg.num_trees}
        scale = math.sqrt(model.subsample_size / n)
        for k, (p, q) in enumerate(zip(preds, truths)):
            floored = p.f_hat <= DENSITY_FLOOR
            rec[f"q_hat_{k}"] = p.q_hat
            rec[f"error_{k}"] = p.q_hat - q
            rec[f"floored_{k}"] = float(floored)
            rec[f"z_{k}"] = (p.q_hat - q) / (scale * math.sqrt(p.sigma2_hat))
            rec[f"hit_{k}"] = float(p.ci_low <= q <= p.ci_high)
        return rec
    except (ValueError, RuntimeError, FloatingPointError) as exc:
        return ReplicationFailure(n, beta, rep, f"{type(exc).__name__}: {exc}")


def qq_correlation(z) -> float:
    """Correlation of the sorted sample with standard normal plotting positions."""
    z = np.asarray(z, dtype=float)
    if z.size < 3:
        raise ValueError("QQ correlation needs at least 3 points")
    (_, _), (_, _, r) = stats.probplot(z, dist="norm")
    return float(r)


def run_pointwise_normality(cfg: SimConfig, workers: int | None = None) -> SimResult:
    """
    Standardized errors ``sqrt(n/s) (q_hat - q) / sigma_hat`` at fixed probes.

    Replications whose density estimate hit the floor are excluded from the
    normality summaries and counted separately.
    """
    truths = [oracle_quantile(cfg.dgp, cfg.tau, np.array(p)) for p in cfg.probes]
    tasks = [(cfg, n, b, rep, truths) for n in cfg.n_grid for b in cfg.beta_grid
             for rep in range(cfg.replications)]
    records, failures = _collect(_run_tasks(_pointwise_replication, tasks, workers), len(tasks))
    summary = {}
    for n in cfg.n_grid:
        for beta in cfg.beta_grid:
            rs = [r for r in records if r["n"] == n and r["beta"] == beta]
            probes = []
            for k, (pt, q) in enumerate(zip(cfg.probes, truths)):
                ok = [r for r in rs if not r[f"floored_{k}"]]
                z = np.array([r[f"z_{k}"] for r in ok])
                cov, cov_se = _proportion([r[f"hit_{k}"] for r in ok])
                inside, _ = _proportion(np.abs(z) <= 1.96)
                probes.append({
                    "probe": list(pt), "oracle_quantile": q,
                    "excluded_floor": len(rs) - len(ok), "used": len(ok),
                    "qq_correlation": qq_correlation(z) if z.size >= 3 else float("nan"),
                    "fraction_within_1.96": inside, "coverage": cov, "coverage_se": cov_se,
                    "mean_z": float(z.mean()) if z.size else float("nan"),
                    "sd_z": float(z.std(ddof=1)) if z.size > 1 else float("nan"),
                    "rmse": float(np.sqrt(np.mean([r[f"error_{k}"] ** 2 for r in rs]))),
                })
            summary[_cell_key(n, beta)] = {"n": n, "beta": beta, "replications": len(rs),
                                           "subsample_size": int(rs[0]["subsample_size"]) if rs else None,
                                           "probes": probes}
    return SimResult("pointwise_normality", cfg, records, failures, summary)


# diagnostics ----------------------------------------------------------------

@dataclass(frozen=True)
class ErrorDecomposition:
    """
    ``v_hat - V = main + remainder``.

    ``main`` is the centred average of the oracle per-row importances;
    ``remainder`` is the extra loss from estimated quantiles, split further
    into the score (linear) part and the integral part.
    """

    main: float
    remainder: float
    remainder_linear: float
    remainder_integral: float

    @property
    def total(self) -> float:
        return self.main + self.remainder


def knight_error_decomposition(y, q_full_hat, q_restr_hat, q_full, q_restr, tau,
                               truth) -> ErrorDecomposition:
    """
    Split the importance error into an empirical-process term and a remainder.

    Each estimated loss is expanded around the oracle residual with
    ``rho(u - d) - rho(u) = -d psi(u) + int_0^d (1{u <= s} - 1{u <= 0}) ds``.
    """
    tau = check_tau(tau)
    y = np.asarray(y, dtype=float)
    u_r, u_f = y - np.asarray(q_restr), y - np.asarray(q_full)
    d_r = np.asarray(q_restr_hat) - np.asarray(q_restr)
    d_f = np.asarray(q_full_hat) - np.asarray(q_full)
    oracle_terms = pinball_loss(u_r, tau) - pinball_loss(u_f, tau)
    kr = knight_decompose(u_r, d_r, tau)
    kf = knight_decompose(u_f, d_f, tau)
    return ErrorDecomposition(
        main=float(oracle_terms.mean() - truth),
        remainder=float(np.mean(kr.total - kf.total)),
        remainder_linear=float(np.mean(kr.linear - kf.linear)),
        remainder_integral=float(np.mean(kr.integral - kf.integral)),
    )


def oracle_quantiles_for(dgp: DGPSpec, tau, X, s_set):
    """Oracle full and restricted quantiles at the rows of ``X``."""
    X = np.asarray(X, dtype=float)
    full = oracle_quantile(dgp, tau, X)
    restr = np.array([oracle_restricted_quantile(dgp, tau, x, s_set) for x in X])
    return full, restr


def leaf_diameters(tree: TreeStructure, p: int) -> np.ndarray:
    """Euclidean diameter of every leaf cell, with the root cell [0, 1]^p."""
    out = np.empty(tree.n_leaves)
    stack = [(0, np.zeros(p), np.ones(p))]
    while stack:
        node, lo, hi = stack.pop()
        if tree.is_leaf(node):
            out[tree.leaf_id[node]] = float(np.linalg.norm(hi - lo))
            continue
        f, t = tree.feature[node], tree.threshold[node]
        hi_l, lo_r = hi.copy(), lo.copy()
        hi_l[f] = min(hi[f], t)
        lo_r[f] = max(lo[f], t)
        stack.append((tree.left[node], lo, hi_l))
        stack.append((tree.right[node], lo_r, hi))
    return out


def mean_leaf_diameter(model) -> float:
    """Average over trees of the mean leaf diameter within each tree."""
    return float(np.mean([leaf_diameters(t, model.n_features).mean() for t in model.trees()]))
