"""Experiment drivers behind the command line.

Every driver returns an ``ExperimentResult``: named tables (lists of row
dicts, one per emitted figure) and a JSON-serializable summary. Stochastic
drivers split the work into independent runs with seeds derived from the
base seed and the run index, persist each finished run as a ``RunRecord``
and aggregate from the records sorted by run id, so the tables do not depend
on the worker count or on completion order.
"""
from __future__ import annotations

import math
import multiprocessing as mp
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from ..errors import ConfigError, NumericalError
from ..flow import GammaCorrection, integrate_flow, tied_flow, untied_flow
from ..hermite import (
    BEYOND_TRUNCATION,
    contract_all_ones,
    hermite_sum_expansion,
    sequence_information_exponent,
)
from ..landscape import classify_phase, loss_surface, phase_model, transition_omega
from ..models import NetworkModel, get_activation, positional_semantic_link
from ..sgd import SgdConfig, learning_rate_policy, run_sgd
from .config import GAIN_POLICIES, ExperimentSpec, build_model, build_target, derive_seed, target_terms
from .records import RecordStore, RunRecord

__all__ = [
    "ExperimentResult",
    "run_experiment",
    "run_sie",
    "run_landscape",
    "run_sgd_experiment",
    "run_gain_experiment",
    "run_phase_experiment",
    "run_ode_experiment",
    "fit_loglog",
]

TRAJ_DIR = "trajectories"


@dataclass
class ExperimentResult:
    tables: dict
    summary: dict = field(default_factory=dict)


# --- run execution ----------------------------------------------------------

def _gain_run(p: dict, seed: int, out: Path):
    L = p["L"]
    cfg = SgdConfig(
        d=p["d"], L=L,
        model=NetworkModel(get_activation(p["activation"]), tied=p["tied"]),
        target=build_target(p["target"], L),
        lr=p["lr"], t_max=p["t_max"], eta=p["eta"], seed=seed, backend=p["backend"],
    )
    try:
        tr = run_sgd(cfg)
    except NumericalError:
        return {"tau": None, "final_overlap": None, "diverged": True}, ()
    return {"tau": tr.recovery_step, "final_overlap": float(tr.overlap[-1]), "diverged": False}, ()


def _phase_run(p: dict, seed: int, out: Path):
    cfg = SgdConfig(
        d=p["d"], L=2, model=phase_model(),
        target=positional_semantic_link(p["omega"], p["a"]),
        lr=p["lr"], t_max=p["t_max"], seed=seed, stop="box",
        stop_m=p["semantic_threshold"], stop_e=p["semantic_threshold"],
    )
    try:
        tr = run_sgd(cfg)
    except NumericalError:
        return {"m": None, "e": None, "diverged": True}, ()
    s = tr.final
    return {"m": float(s.m_scalar), "e": float(np.linalg.norm(s.eps)), "steps": tr.final_step, "diverged": False}, ()


def _sgd_run(p: dict, seed: int, out: Path):
    L = p["L"]
    cfg = SgdConfig(
        d=p["d"], L=L, model=build_model(p["model"], L), target=build_target(p["target"], L),
        lr=p["lr"], t_max=p["t_max"], eta=p["eta"], seed=seed, backend=p["backend"],
        stop=p["stop"], sign_randomize=p["sign_randomize"],
    )
    tr = run_sgd(cfg)
    rel = f"{TRAJ_DIR}/{p['run_id'].replace('/', '_')}.npz"
    (out / TRAJ_DIR).mkdir(parents=True, exist_ok=True)
    np.savez(out / rel, steps=tr.steps, m=tr.m, eps=tr.eps, loss=tr.loss)
    scalars = {
        "tau": tr.recovery_step,
        "final_overlap": float(tr.overlap[-1]),
        "final_step": tr.final_step,
        "lr": tr.lr,
    }
    return scalars, (rel,)


RUNNERS = {"gain": _gain_run, "phase": _phase_run, "sgd-run": _sgd_run}


def _execute(task):
    kind, h, run_id, seed, params, out = task
    t0 = time.perf_counter()
    scalars, files = RUNNERS[kind](dict(params, run_id=run_id), seed, Path(out))
    return RunRecord(h, run_id, seed, scalars, tuple(files), time.perf_counter() - t0)


def _run_all(spec: ExperimentSpec, tasks: list) -> list[RunRecord]:
    """Run ``(run_id, params)`` tasks, skipping runs already on record."""
    store = RecordStore(spec.out, spec.hash)
    todo = []
    for index, (run_id, params) in enumerate(tasks):
        if run_id not in store:
            todo.append((spec.kind, spec.hash, run_id, derive_seed(spec.seed, index), params, str(spec.out)))
    if todo:
        if spec.workers == 1 or len(todo) == 1:
            for task in todo:
                store.add(_execute(task))
        else:
            ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else mp.get_context()
            with ctx.Pool(min(spec.workers, len(todo))) as pool:
                for rec in pool.imap_unordered(_execute, todo, chunksize=1):
                    store.add(rec)
    wanted = {run_id for run_id, _ in tasks}
    return [r for r in store.sorted() if r.run_id in wanted]


# --- fitting ------------------------------------------------------------------

def fit_loglog(x, y) -> dict:
    """Least-squares slope of ``log y`` on ``log x`` with its standard error."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = np.isfinite(y) & (y > 0)
    if ok.sum() < 2:
        return {"slope": None, "stderr": None, "intercept": None, "n_points": int(ok.sum())}
    res = stats.linregress(np.log(x[ok]), np.log(y[ok]))
    return {
        "slope": float(res.slope),
        "stderr": float(res.stderr),
        "intercept": float(res.intercept),
        "n_points": int(ok.sum()),
    }


# --- drivers ------------------------------------------------------------------

def run_sie(spec: ExperimentSpec) -> ExperimentResult:
    p = spec.params
    rows = []
    for t in p["targets"]:
        L = int(t["L"])
        terms = target_terms({"type": "terms", "terms": t["terms"]}, L)
        top = max(sum(deg) for _, deg in terms)
        exp = hermite_sum_expansion(terms, L, max(int(p["k_max"]), top))
        sie = sequence_information_exponent(exp, float(p["tol"]))
        rows.append({"name": t.get("name", f"target-{len(rows)}"), "L": L, "sie": sie})
    return ExperimentResult({"sie": rows}, {"n_targets": len(rows)})


def run_landscape(spec: ExperimentSpec) -> ExperimentResult:
    p = spec.params
    surf_rows, label_rows, trans = [], [], {}
    for a in p["a"]:
        for w in p["omega"]:
            lab = classify_phase(w, a, p["n_int"], p["n_theta"])
            surface = loss_surface(positional_semantic_link(w, a), phase_model(), p["n_int"], p["n_theta"])
            label_rows.append({
                "omega": w, "a": a, "label": lab.label,
                "steepest": lab.steepest, "global_kind": lab.global_kind,
            })
            for th, (e, m), v in zip(surface.thetas, surface.points, surface.values):
                surf_rows.append({
                    "omega": w, "a": a, "label": lab.label, "theta": float(th),
                    "eps": float(e), "m": float(m), "loss": float(v),
                })
        if p["transition"]:
            trans[repr(a)] = transition_omega(a, p["n_int"])
    return ExperimentResult(
        {"landscape": surf_rows, "phase-diagram": label_rows},
        {"transition_omega": trans},
    )


def run_sgd_experiment(spec: ExperimentSpec) -> ExperimentResult:
    p = spec.params
    tasks = [(f"r={r:04d}", {k: v for k, v in p.items() if k != "replicas"}) for r in range(p["replicas"])]
    recs = _run_all(spec, tasks)
    traj_rows, summ_rows = [], []
    for r, rec in enumerate(recs):
        with np.load(spec.out / rec.files[0]) as z:
            steps, m, eps = z["steps"], z["m"], z["eps"]
        overlap = m if m.ndim == 1 else np.sqrt(np.mean(m**2, axis=1))
        en = np.sqrt(np.sum(eps**2, axis=1)) if eps.size else np.zeros(steps.size)
        lr = abs(rec.scalars["lr"])
        for s, o, e in zip(steps, overlap, en):
            traj_rows.append({
                "replica": r, "seed": rec.seed, "step": int(s),
                "time": lr * int(s) / p["d"], "overlap": float(o), "eps_norm": float(e),
            })
        tau = rec.scalars["tau"]
        summ_rows.append({
            "replica": r, "seed": rec.seed, "tau": tau,
            "final_overlap": rec.scalars["final_overlap"], "recovered": tau is not None,
        })
    taus = [row["tau"] for row in summ_rows if row["tau"] is not None]
    summary = {
        "recovered": len(taus),
        "replicas": len(summ_rows),
        "median_tau": float(np.median(taus)) if taus else None,
    }
    return ExperimentResult({"sgd-run": traj_rows, "sgd-summary": summ_rows}, summary)


def gain_learning_rates(p: dict, L: int) -> tuple[float, float]:
    """Tied and untied learning rates of a gain spec at sequence length ``L``."""
    terms = target_terms(p["target"], L)
    top = max(sum(deg) for _, deg in terms)
    exp = hermite_sum_expansion(terms, L, top)
    sie = sequence_information_exponent(exp)
    if sie == BEYOND_TRUNCATION:
        raise ConfigError("target has no non-constant Hermite component")
    C = exp[sie]
    pt, pu = GAIN_POLICIES[p["policy"]]
    lr_t = learning_rate_policy(pt, C, L, p["scale_tied"], p["gamma0"])
    lr_u = learning_rate_policy(pu, C, L, p["scale_untied"], p["gamma0"])
    return lr_t, lr_u


def run_gain_experiment(spec: ExperimentSpec) -> ExperimentResult:
    """Median weak-recovery times of tied and untied networks against ``L``.

    Under the optimal policy, replicas that never recover are censored and
    dropped with a warning; an ``L`` with every replica censored aborts the
    fit. Under other policies a censored run counts as an infinite time.
    """
    p = spec.params
    optimal = p["policy"] == "optimal"
    base = {k: p[k] for k in ("d", "activation", "target", "eta", "t_max", "backend")}
    tasks, rates = [], {}
    for L in p["L"]:
        rates[L] = gain_learning_rates(p, L)
        for tied, lr in ((True, rates[L][0]), (False, rates[L][1])):
            for r in range(p["replicas"]):
                run_id = f"L={L:04d}/{'tied' if tied else 'untied'}/r={r:04d}"
                tasks.append((run_id, dict(base, L=L, tied=tied, lr=lr)))
    recs = {rec.run_id: rec for rec in _run_all(spec, tasks)}
    rows, run_rows, censored = [], [], {}
    for L in p["L"]:
        med = {}
        for tied in (True, False):
            net = "tied" if tied else "untied"
            taus = []
            for r in range(p["replicas"]):
                rec = recs[f"L={L:04d}/{net}/r={r:04d}"]
                tau = rec.scalars["tau"]
                run_rows.append({
                    "L": L, "network": net, "replica": r, "seed": rec.seed,
                    "lr": rates[L][0 if tied else 1], "tau": tau, "censored": tau is None,
                })
                taus.append(math.inf if tau is None else float(tau))
            n_cens = sum(math.isinf(t) for t in taus)
            censored[f"{L}/{net}"] = n_cens
            if optimal and n_cens:
                if n_cens == len(taus):
                    raise NumericalError(f"every {net} replica at L={L} is censored; gain fit aborted")
                warnings.warn(f"{n_cens} censored {net} replicas at L={L} excluded", RuntimeWarning, stacklevel=2)
                taus = [t for t in taus if math.isfinite(t)]
            med[tied] = float(np.median(taus))
        g = med[False] / med[True] if math.isfinite(med[False]) and math.isfinite(med[True]) else math.inf
        if math.isinf(med[True]):
            g = math.nan
        rows.append({
            "L": L,
            "tau_tied": med[True],
            "tau_untied": med[False],
            "gain": g,
            "policy": p["policy"],
        })
    fit = fit_loglog([r["L"] for r in rows], [r["gain"] for r in rows])
    summary = {
        "fit": fit,
        "censored": censored,
        "learning_rates": {str(L): {"tied": rates[L][0], "untied": rates[L][1]} for L in p["L"]},
    }
    return ExperimentResult({"gain": rows, "gain-runs": run_rows}, summary)


def half_crossing(x, y) -> float | None:
    """First ``x`` where ``y`` falls through 1/2, by linear interpolation."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    for i in range(x.size - 1):
        if y[i] >= 0.5 > y[i + 1]:
            return float(x[i] + (y[i] - 0.5) * (x[i + 1] - x[i]) / (y[i] - y[i + 1]))
    return None


def run_phase_experiment(spec: ExperimentSpec) -> ExperimentResult:
    """Classifier labels and empirical semantic-convergence probabilities.

    A replica counts as semantic when ``|m|`` exceeds the threshold at the
    end of the run; replicas whose state collapsed are excluded with a
    warning.
    """
    p = spec.params
    omegas = sorted(p["omega"])
    base = {k: p[k] for k in ("d", "lr", "t_max", "semantic_threshold")}
    tasks = []
    for a in p["a"]:
        for w in omegas:
            for r in range(p["replicas"]):
                tasks.append((f"a={a:.6f}/w={w:.6f}/r={r:04d}", dict(base, omega=w, a=a)))
    recs = {rec.run_id: rec for rec in _run_all(spec, tasks)}
    diag, prob, crossing, trans = [], [], {}, {}
    for a in p["a"]:
        ps = []
        for w in omegas:
            lab = classify_phase(w, a, p["n_int"], p["n_theta"])
            diag.append({"omega": w, "a": a, "label": lab.label, "steepest": lab.steepest, "global_kind": lab.global_kind})
            sem = n = div = 0
            for r in range(p["replicas"]):
                s = recs[f"a={a:.6f}/w={w:.6f}/r={r:04d}"].scalars
                if s["diverged"]:
                    div += 1
                    continue
                n += 1
                sem += abs(s["m"]) > p["semantic_threshold"]
            if div:
                warnings.warn(f"{div} diverged replicas at omega={w}, a={a} excluded", RuntimeWarning, stacklevel=2)
            pr = sem / n if n else math.nan
            ps.append(pr)
            prob.append({"omega": w, "a": a, "label": lab.label, "p_semantic": pr, "n_runs": n})
        crossing[repr(a)] = half_crossing(omegas, ps)
        try:
            trans[repr(a)] = transition_omega(a, p["n_int"])
        except ConfigError:
            trans[repr(a)] = None
    summary = {"empirical_crossing": crossing, "transition_omega": trans}
    return ExperimentResult({"phase": prob, "phase-diagram": diag}, summary)


def run_ode_experiment(spec: ExperimentSpec) -> ExperimentResult:
    """Flow hitting times from ``m0 = kappa / sqrt(d)`` across ``d``."""
    p = spec.params
    L = p["L"]
    terms = target_terms(p["target"], L)
    K = max(sum(deg) for _, deg in terms)
    exp = hermite_sum_expansion(terms, L, K)
    sig = get_activation(p["activation"]).hermite_coeffs(K)
    kw = {"eta": p["eta"], "dt": p["dt"], "horizon": p["horizon"]}
    if p["lr"] > 0:
        kw["correction"] = GammaCorrection(p["lr"], p["grad_norm"])
    hit_rows, path_rows = [], []
    for d in p["d"]:
        m0 = p["kappa"] / math.sqrt(d)
        if p["tied"]:
            contractions = [contract_all_ones(exp[k]) for k in range(K + 1)]
            fs = tied_flow(sig, contractions, L, m0, **kw)
        else:
            fs = untied_flow(sig, [exp[k] for k in range(K + 1)], np.full(L, m0), **kw)
        res = integrate_flow(fs)
        hit_rows.append({"d": d, "m0": m0, "tau": res.hitting_time})
        ov = np.abs(res.path[:, 0]) if p["tied"] else np.linalg.norm(res.path, axis=1) / math.sqrt(L)
        idx = np.unique(np.linspace(0, res.times.size - 1, min(500, res.times.size)).astype(int))
        for i in idx:
            path_rows.append({"d": d, "t": float(res.times[i]), "overlap": float(ov[i])})
    taus = [r["tau"] for r in hit_rows]
    summary: dict = {"log_fit": None}
    if len(taus) >= 2 and all(t is not None for t in taus):
        res = stats.linregress(np.log(p["d"]), taus)
        summary["log_fit"] = {"slope": float(res.slope), "intercept": float(res.intercept), "r2": float(res.rvalue**2)}
    return ExperimentResult({"ode": hit_rows, "ode-paths": path_rows}, summary)


DRIVERS = {
    "sie": run_sie,
    "landscape": run_landscape,
    "sgd-run": run_sgd_experiment,
    "gain": run_gain_experiment,
    "phase": run_phase_experiment,
    "ode": run_ode_experiment,
}


def run_experiment(spec: ExperimentSpec) -> ExperimentResult:
    return DRIVERS[spec.kind](spec)
