"""Training loop, Adam, evaluation metrics, and configuration plumbing.

One iteration samples a minibatch of contexts (epoch-shuffled, without
replacement), runs the network forward, estimates the surrogate gradient
against the power-flow oracle, pulls it back through the network, and
averages the per-context parameter gradients into one Adam step.
"""

from __future__ import annotations

import json
import math
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import policy as policy_mod
from . import rng as grng
from .baseline import init_baseline, tune_baseline_offset
from .estimator import EstimatorConfig, GradEstimate, estimate_gradient
from .gridgen import Normalizer, fit_normalizer, load_dataset, load_manifest, normalize
from .h2mg import CONTROLLER_CLASSES, Decision, H2MGContext, H2MGError
from .model import (
    ModelConfig,
    ModelParams,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    vjp,
)
from .policy import PolicyConfig
from .powerflow import SolverOptions, count_metrics, evaluate_objective

__all__ = [
    "AdamState", "TrainConfig", "adam_step", "train", "evaluate",
    "init_baseline", "tune_baseline_offset",
]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    minibatch: int = 4
    iterations: int = 1000
    eval_every: int = 200
    eval_limit: int = 0          # 0 evaluates the full validation split
    seed: int = 0
    workers: int = 0             # 0 runs in-process
    train_dir: str = "data/train"
    val_dir: str = "data/val"
    out_dir: str = "runs/default"
    normalizer_path: str | None = None
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    solver: SolverOptions = field(default_factory=SolverOptions)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.minibatch < 1:
            raise ValueError("minibatch must be at least 1")

    def to_json(self) -> dict:
        doc = {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "minibatch": self.minibatch, "iterations": self.iterations,
            "eval_every": self.eval_every, "eval_limit": self.eval_limit,
            "seed": self.seed, "workers": self.workers,
            "train_dir": self.train_dir, "val_dir": self.val_dir,
            "out_dir": self.out_dir, "normalizer_path": self.normalizer_path,
            "estimator": {"beta": self.estimator.beta, "tau": self.estimator.tau,
                          "samples": dict(self.estimator.samples),
                          "prohibitive_cost": self.estimator.prohibitive_cost},
            "policy": {"sigma": self.policy.sigma,
                       "binary_offset": self.policy.binary_offset,
                       "rtc_offset_scale": self.policy.rtc_offset_scale,
                       "svr_offset": self.policy.svr_offset},
            "solver": {"tolerance": self.solver.tolerance,
                       "max_inner": self.solver.max_inner,
                       "max_outer": self.solver.max_outer,
                       "rtc_deadband": self.solver.rtc_deadband,
                       "svr_deadband": self.solver.svr_deadband,
                       "lambda_v": self.solver.lambda_v,
                       "lambda_i": self.solver.lambda_i,
                       "lambda_j": self.solver.lambda_j,
                       "eps_v": self.solver.eps_v, "eps_i": self.solver.eps_i,
                       "prohibitive_cost": self.solver.prohibitive_cost},
            "model": self.model.to_json(),
        }
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        kwargs = {k: v for k, v in doc.items()
                  if k not in ("estimator", "policy", "solver", "model")}
        if "estimator" in doc:
            kwargs["estimator"] = EstimatorConfig(**doc["estimator"])
        if "policy" in doc:
            kwargs["policy"] = PolicyConfig(**doc["policy"])
        if "solver" in doc:
            kwargs["solver"] = SolverOptions(**doc["solver"])
        if "model" in doc:
            kwargs["model"] = ModelConfig.from_json(doc["model"])
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.values.items()},
                   {k: np.zeros_like(a) for k, a in params.values.items()}, 0)


def adam_step(params: ModelParams, grad: ModelParams, state: AdamState,
              cfg: TrainConfig) -> tuple[ModelParams, AdamState, bool]:
    """Bias-corrected moment update; a non-finite gradient rejects the step."""
    for k in sorted(grad.values):
        if not np.all(np.isfinite(grad.values[k])):
            return params, state, False
    t = state.t + 1
    new_m, new_v, new_p = {}, {}, {}
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for k in params.values:
        g = grad.values[k]
        m = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g
        new_m[k], new_v[k] = m, v
        new_p[k] = params.values[k] - cfg.learning_rate * (m / c1) / (
            np.sqrt(v / c2) + cfg.eps)
    return (ModelParams(params.config, new_p), AdamState(new_m, new_v, t), True)


# ---------------------------------------------------------------------------
# Per-context work unit (runs in-process or in a worker process)

def _context_pass(params: ModelParams, x: H2MGContext, xn: H2MGContext,
                  est_cfg: EstimatorConfig, pol_cfg: PolicyConfig,
                  solver: SolverOptions, rng_key: tuple) -> dict:
    def oracle(xc, y):
        return evaluate_objective(xc, y, solver)

    z_raw = forward(params, xn)
    z = policy_mod.apply_offsets(z_raw, x, pol_cfg)
    est = estimate_gradient(x, z, est_cfg, oracle, grng.stream(*rng_key), pol_cfg)
    if est.converged:
        grad = vjp(params, xn, est.grads)
    else:
        grad = params.zeros_like()
    return {
        "grad": grad.values,
        "f_ref": est.f_ref,
        "converged": est.converged,
        "class_norms": {c: est.norm(c) for c in CONTROLLER_CLASSES},
    }


def _pool_task(payload):
    (values, cfg_json, x, xn, est_cfg, pol_cfg, solver, rng_key) = payload
    params = ModelParams(ModelConfig.from_json(cfg_json), values)
    return _context_pass(params, x, xn, est_cfg, pol_cfg, solver, rng_key)


# ---------------------------------------------------------------------------
# Training

def _check_disjoint_ids(train_ids, val_ids):
    overlap = set(train_ids) & set(val_ids)
    if overlap:
        raise H2MGError(f"train/val context ids overlap: {sorted(overlap)[:5]}")


def _epoch_order(n: int, seed: int, needed: int) -> list[int]:
    order: list[int] = []
    epoch = 0
    while len(order) < needed:
        perm = grng.stream(seed, "epoch", epoch).permutation(n)
        order.extend(int(i) for i in perm)
        epoch += 1
    return order[:needed]


def _validation_objective(params, val_pairs, pol_cfg, solver, limit=0):
    totals, converged = [], 0
    subset = val_pairs if limit <= 0 else val_pairs[:limit]
    for x, xn in subset:
        z = policy_mod.apply_offsets(forward(params, xn), x, pol_cfg)
        y = policy_mod.most_probable(z)
        res = evaluate_objective(x, y, solver)
        totals.append(res.total)
        converged += res.converged
    n = len(totals)
    return float(np.mean(totals)), converged / n if n else 0.0


def train(cfg: TrainConfig) -> dict:
    """Run the full loop; returns a summary with checkpoint paths."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_set = load_dataset(cfg.train_dir)
    val_set = load_dataset(cfg.val_dir)
    if not train_set:
        raise H2MGError("training dataset is empty")
    _check_disjoint_ids(load_manifest(cfg.train_dir)["ids"],
                        load_manifest(cfg.val_dir)["ids"])

    if cfg.normalizer_path and Path(cfg.normalizer_path).exists():
        norm = Normalizer.load(cfg.normalizer_path)
    else:
        norm = fit_normalizer(train_set)
    norm.save(out / "normalizer.json")

    train_pairs = [(x, normalize(x, norm)) for x in train_set]
    val_pairs = [(x, normalize(x, norm)) for x in val_set]

    params = init_params(cfg.model, grng.stream(cfg.seed, "init"))
    adam = AdamState.zeros(params)
    order = _epoch_order(len(train_pairs), cfg.seed,
                         cfg.iterations * cfg.minibatch)

    pool = None
    if cfg.workers > 1:
        import multiprocessing as mp
        pool = ProcessPoolExecutor(max_workers=cfg.workers,
                                   mp_context=mp.get_context("spawn"))

    log_path = out / "train_log.jsonl"
    best = (math.inf, -1)
    summary = {"iterations": cfg.iterations, "rejected_steps": 0}
    try:
        with open(log_path, "w") as log:
            for it in range(cfg.iterations):
                batch = order[it * cfg.minibatch:(it + 1) * cfg.minibatch]
                keys = [(cfg.seed, "est", it, train_set[i].metadata["origin"])
                        for i in batch]
                if pool is not None:
                    payloads = [(params.values, cfg.model.to_json(),
                                 train_pairs[i][0], train_pairs[i][1],
                                 cfg.estimator, cfg.policy, cfg.solver, key)
                                for i, key in zip(batch, keys)]
                    results = list(pool.map(_pool_task, payloads))
                else:
                    results = [_context_pass(params, train_pairs[i][0],
                                             train_pairs[i][1], cfg.estimator,
                                             cfg.policy, cfg.solver, key)
                               for i, key in zip(batch, keys)]

                mean_grad = params.zeros_like()
                for res in results:
                    for k, g in res["grad"].items():
                        mean_grad.values[k] += g
                for k in mean_grad.values:
                    mean_grad.values[k] /= len(results)
                params, adam, ok = adam_step(params, mean_grad, adam, cfg)
                if not ok:
                    summary["rejected_steps"] += 1

                record = {
                    "iteration": it,
                    "mean_f_ref": float(np.mean([r["f_ref"] for r in results])),
                    "convergence_rate": float(np.mean(
                        [r["converged"] for r in results])),
                    "grad_norm": {
                        c: float(np.mean([r["class_norms"][c] for r in results]))
                        for c in CONTROLLER_CLASSES},
                    "param_grad_norm": float(math.sqrt(sum(
                        float((g * g).sum())
                        for g in mean_grad.values.values()))),
                    "step_rejected": not ok,
                }
                log.write(json.dumps(record, sort_keys=True) + "\n")

                if cfg.eval_every and (it + 1) % cfg.eval_every == 0 and val_pairs:
                    val_obj, val_rate = _validation_objective(
                        params, val_pairs, cfg.policy, cfg.solver,
                        cfg.eval_limit)
                    ckpt = out / f"ckpt_{it + 1:06d}.npz"
                    save_checkpoint(ckpt, params, norm, cfg.seed,
                                    {"iteration": it + 1,
                                     "val_mean_objective": val_obj})
                    log.write(json.dumps({
                        "iteration": it, "event": "eval",
                        "val_mean_objective": val_obj,
                        "val_convergence_rate": val_rate,
                        "checkpoint": ckpt.name}, sort_keys=True) + "\n")
                    if val_obj < best[0]:
                        best = (val_obj, it + 1)
                        shutil.copyfile(ckpt, out / "ckpt_best.npz")
    finally:
        if pool is not None:
            pool.shutdown()

    save_checkpoint(out / "ckpt_final.npz", params, norm, cfg.seed,
                    {"iteration": cfg.iterations})
    if best[1] < 0:
        shutil.copyfile(out / "ckpt_final.npz", out / "ckpt_best.npz")
    summary["best_val_objective"] = best[0] if best[1] >= 0 else None
    summary["best_iteration"] = best[1] if best[1] >= 0 else cfg.iterations
    summary["final_checkpoint"] = str(out / "ckpt_final.npz")
    summary["best_checkpoint"] = str(out / "ckpt_best.npz")
    summary["log"] = str(log_path)
    return summary


# ---------------------------------------------------------------------------
# Evaluation

def _policy_metrics(records: list) -> dict:
    valid = [m for m in records if m.valid]
    n = len(records)
    out = {
        "contexts": n,
        "converged": len(valid),
        "convergence_rate": len(valid) / n if n else 0.0,
    }
    if valid:
        out.update({
            "mean_over_voltages": float(np.mean([m.over_voltages for m in valid])),
            "mean_under_voltages": float(np.mean([m.under_voltages for m in valid])),
            "mean_violations": float(np.mean([m.violations for m in valid])),
            "mean_overflows": float(np.mean([m.overflows for m in valid])),
            "mean_joule_losses": float(np.mean([m.joule_losses for m in valid])),
        })
    return out


def _lever_usage(decisions: list[Decision], contexts: list[H2MGContext]) -> dict:
    opened, switched = [], []
    svr_setpoints: list[float] = []
    rtc_counts = np.zeros(4)
    per_lever: dict[tuple[str, str], list[int]] = {}
    for x, y in zip(contexts, decisions):
        zones = {z.ports["zone"]: z for z in x.edges_of("svr_zone")}
        for cname, per_edge in y.values.items():
            for eid, val in per_edge.items():
                if cname in ("line_controller", "shunt_controller"):
                    per_lever.setdefault((cname, eid), []).append(int(val))
                    (opened if cname == "line_controller" else switched).append(val)
                elif cname == "svr_controller":
                    ctrl = x.edge("svr_controller", eid)
                    zone = zones[ctrl.ports["zone"]]
                    svr_setpoints.append(zone.features["v_target"] + float(val))
                else:
                    rtc_counts[int(val)] += 1
    usage = {f"{c}:{e}": float(np.mean(v)) for (c, e), v in sorted(per_lever.items())}
    total_rtc = rtc_counts.sum()
    return {
        "pct_lines_opened": float(np.mean(opened)) * 100 if opened else 0.0,
        "pct_shunts_switched": float(np.mean(switched)) * 100 if switched else 0.0,
        "svr_setpoint_mean": float(np.mean(svr_setpoints)) if svr_setpoints else None,
        "svr_setpoint_std": float(np.std(svr_setpoints)) if svr_setpoints else None,
        "rtc_category_shares": (rtc_counts / total_rtc).tolist()
        if total_rtc else [0.0] * 4,
        "per_lever_usage": usage,
        "svr_setpoints": svr_setpoints,
        "rtc_category_counts": rtc_counts.tolist(),
    }


def evaluate(params: ModelParams, dataset: list[H2MGContext], norm: Normalizer,
             pol_cfg: PolicyConfig = PolicyConfig(),
             solver: SolverOptions = SolverOptions(),
             out_dir: str | Path | None = None) -> dict:
    """Compare the trained policy against the tuned reference on one split.

    Per context both the network's most-probable decision and the baseline
    decision go through the oracle; non-convergent contexts are excluded
    from the means and show up in the convergence rates.  With ``out_dir``
    set, histogram data files and rendered figures are written next to the
    report.
    """
    gnn_records, init_records = [], []
    gnn_decisions, init_decisions = [], []
    gnn_counts, init_counts = [], []
    gnn_voltages, init_voltages = [], []
    for x in dataset:
        xn = normalize(x, norm)
        z = policy_mod.apply_offsets(forward(params, xn), x, pol_cfg)
        y_gnn = policy_mod.most_probable(z)
        y_init = init_baseline(x, pol_cfg.svr_offset)
        m_gnn = count_metrics(x, y_gnn, solver)
        m_init = count_metrics(x, y_init, solver)
        gnn_records.append((True, m_gnn))
        init_records.append((True, m_init))
        gnn_decisions.append(y_gnn)
        init_decisions.append(y_init)
        if m_gnn.valid:
            gnn_counts.append(m_gnn.violations)
            gnn_voltages.extend(m_gnn.normalized_voltages.tolist())
        if m_init.valid:
            init_counts.append(m_init.violations)
            init_voltages.extend(m_init.normalized_voltages.tolist())

    report = {
        "gnn": {**_policy_metrics(gnn_records),
                **{k: v for k, v in _lever_usage(gnn_decisions, dataset).items()
                   if k not in ("svr_setpoints", "rtc_category_counts")}},
        "init": {**_policy_metrics(init_records),
                 **{k: v for k, v in _lever_usage(init_decisions, dataset).items()
                    if k not in ("svr_setpoints", "rtc_category_counts")}},
    }
    if out_dir is not None:
        from . import report as report_mod
        gnn_usage = _lever_usage(gnn_decisions, dataset)
        init_usage = _lever_usage(init_decisions, dataset)
        report_mod.write_report(
            Path(out_dir), report,
            violation_counts={"init": init_counts, "gnn": gnn_counts},
            voltages={"init": init_voltages, "gnn": gnn_voltages},
            lever_usage={"init": init_usage["per_lever_usage"],
                         "gnn": gnn_usage["per_lever_usage"]},
            setpoints={"init": {"svr": init_usage["svr_setpoints"],
                                "rtc": init_usage["rtc_category_counts"]},
                       "gnn": {"svr": gnn_usage["svr_setpoints"],
                               "rtc": gnn_usage["rtc_category_counts"]}})
    return report


def evaluate_checkpoint(ckpt_path: str | Path, data_dir: str | Path,
                        out_dir: str | Path | None = None,
                        pol_cfg: PolicyConfig | None = None,
                        solver: SolverOptions = SolverOptions()) -> dict:
    params, meta = load_checkpoint(ckpt_path)
    norm_path = Path(ckpt_path).parent / "normalizer.json"
    if not norm_path.exists():
        raise H2MGError(f"normalizer not found next to checkpoint: {norm_path}")
    norm = Normalizer.load(norm_path)
    if meta.get("normalizer_hash") and meta["normalizer_hash"] != norm.digest():
        raise H2MGError("checkpoint was trained with a different normalizer")
    dataset = load_dataset(data_dir)
    if pol_cfg is None:
        pol_cfg = PolicyConfig(svr_offset=float(meta.get("svr_offset", 0.0)))
    return evaluate(params, dataset, norm, pol_cfg, solver, out_dir)
