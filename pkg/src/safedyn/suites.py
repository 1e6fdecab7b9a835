"""Experiment suites: each writes deterministic CSV/JSON tables and SVG figures.

Every suite returns a summary dict (also written as ``<suite>.json``) that
carries the pass/fail verdicts of the property it exercises. Wall-clock
numbers are the only non-reproducible outputs and go to ``timing.txt``.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time

import numpy as np

from . import harness as H
from .figures import emit_figures
from .harness import MethodId, Profile

__all__ = ["SUITES", "run_suite", "table_verdict", "recovery_time", "ablation_verdict",
           "write_json", "write_csv"]

SUITES = ("table1", "fig1", "fig2", "fig3", "prop2", "prop3")
DEFAULT_EPISODES = {"table1": 50, "fig1": 1, "fig2": 100, "fig3": 30, "prop2": 0, "prop3": 20}
RECOVERY_BAND = 0.05
RECOVERY_DWELL = 0.5
DROP_TIME = 5.0


def _clean(v):
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def write_json(path, obj):
    with open(path, "w", newline="\n") as fh:
        json.dump(_clean(obj), fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\r\n")
        wr.writerow(header)
        for r in rows:
            wr.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _timing(out, suite, seconds, extra=None):
    with open(os.path.join(out, "timing.txt"), "a") as fh:
        fh.write(f"{suite} wall_s = {seconds:.3f}\n")
        for k, v in (extra or {}).items():
            fh.write(f"{suite} {k} = {v:.4g}\n")


# ---------------------------------------------------------------------------
# Verdicts
# ---------------------------------------------------------------------------


def table_verdict(reports, margin=0.25):
    """Ordering full < certified Koopman < min(uncertified) on one benchmark.

    ``reports`` maps method value -> MetricsReport. ``improvement`` is the
    relative RMSE reduction of the full pipeline over the best uncertified
    method.
    """
    r = {k: v.tracking_rmse for k, v in reports.items()}
    full = r[MethodId.CsodeIcodeMppi.value]
    kiss = r[MethodId.KoopmanIss.value]
    best_unc = min(r[MethodId.KoopmanUncert.value], r[MethodId.VanillaNode.value])
    improvement = 1.0 - full / best_unc
    ok = bool(full < kiss < best_unc and improvement >= margin)
    return {"full_lt_koopman_iss": bool(full < kiss),
            "koopman_iss_lt_uncertified": bool(kiss < best_unc), "improvement": improvement, "required_improvement": margin, "pass": ok}


def ablation_verdict(reports, ratio=2.0):
    order = [m.value for m in H.ABLATION_METHODS]
    rm = [reports[m].tracking_rmse for m in order]
    ordered = all(a < b for a, b in zip(rm, rm[1:]))
    vr = reports[MethodId.AblateNoIss.value].cost_variance_ratio
    return {"order": order, "rmse": rm, "ordered": bool(ordered), "no_iss_variance_ratio": vr,
            "required_ratio": ratio, "pass": bool(ordered and vr >= ratio)}


def recovery_time(t, err, t_drop=DROP_TIME, band=RECOVERY_BAND, dwell=RECOVERY_DWELL):
    """Seconds after ``t_drop`` until ``|err|`` enters ``band`` and stays there for ``dwell``.

    Returns ``inf`` when it never settles before the end of the record.
    """
    t, a = np.asarray(t, float), np.abs(np.asarray(err, float))
    inside = a < band
    dt = t[1] - t[0]
    need = max(1, int(round(dwell / dt)))
    for k in np.flatnonzero(t >= t_drop - 1e-12):
        if k + need > len(t):
            break
        if inside[k:k + need].all():
            return float(t[k] - t_drop)
    return float("inf")


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------


def suite_table1(out, episodes, seed, profile, cache, workers):
    rows, reports, verdicts, timing = [], {}, {}, {}
    for bench in ("b1", "b2"):
        reports[bench] = {}
        for m in H.TABLE_METHODS:
            rep, _ = H.run_method(bench, m, episodes, seed, profile, out, cache, a_w=0.5,
                                  workers=workers)
            reports[bench][m.value] = rep
            timing[f"{bench}_{m.value}_step_ms"] = rep.step_time_ms
            d = rep.deterministic_dict()
            rows.append([d[k] for k in TABLE_FIELDS])
        verdicts[bench] = table_verdict(reports[bench])
    write_csv(os.path.join(out, "table1.csv"), TABLE_FIELDS, rows)
    figs = {f"table1_{b}_rmse": {
        "kind": "bar", "labels": list(reports[b]), "title": f"Tracking RMSE ({b})",
        "values": [r.tracking_rmse for r in reports[b].values()],
        "errors": [r.tracking_rmse_std for r in reports[b].values()], "ylabel": "RMSE"}
        for b in reports}
    emit_figures(out, figs)
    summary = {"suite": "table1", "episodes": episodes, "seed": seed,
               "reports": {b: {k: v.deterministic_dict() for k, v in r.items()}
                           for b, r in reports.items()},
               "verdicts": verdicts, "pass": all(v["pass"] for v in verdicts.values())}
    return summary, timing


TABLE_FIELDS = ("benchmark", "method", "episodes", "tracking_rmse", "tracking_rmse_std",
                "steering_rate", "steering_rate_std", "lmi_feasibility_rate",
                "lmi_feasibility_rate_strict", "cost_variance", "bound_satisfaction",
                "failed_episodes", "cost_variance_ratio")


def fig1_scenario(seed):
    """Friction-drop episode without wind, isolating the parameter jump."""
    s = H.episode_seeds(seed, 1)[0]
    return H.evaluation_scenario("b1", s, wind_mean=0.0, wind_gust=0.0), s


def suite_fig1(out, episodes, seed, profile, cache, workers):
    setup = H.benchmark_setup("b1", profile)
    sc, s = fig1_scenario(seed)
    series, rows, per = {}, [], {}
    for m in H.TABLE_METHODS:
        art = H.build_method("b1", m, seed, profile, cache)
        r = H.run_episode(art, setup, sc, s, 0, keep=True)
        e = setup.tracking_error(r.traj)
        t = r.traj.t
        after = t >= DROP_TIME
        peak = float(np.max(np.abs(e[after])))
        rec = recovery_time(t, e)
        per[m.value] = {"peak_after_drop": peak, "recovery_s": rec, "rmse": r.rmse,
                        "failed": r.failed}
        series[m.value] = (t, e)
        rows.append([m.value, peak, rec, r.rmse])
    write_csv(os.path.join(out, "fig1_summary.csv"),
              ("method", "peak_after_drop", "recovery_s", "rmse"), rows)
    emit_figures(out, {"fig1_tracking": {
        "kind": "line", "series": series, "title": "Lateral deviation, friction drop at t = 5 s",
        "xlabel": "t (s)", "ylabel": "lateral error (m)", "vlines": (DROP_TIME,)}})
    full = per[MethodId.CsodeIcodeMppi.value]
    unc = per[MethodId.KoopmanUncert.value]
    ratio = unc["peak_after_drop"] / full["peak_after_drop"] if full["peak_after_drop"] > 0 \
        else float("inf")
    verdict = {"full_recovery_s": full["recovery_s"], "recovery_limit_s": 1.5,
               "peak_ratio_uncertified_over_full": ratio, "required_ratio": 2.0,
               "pass": bool(full["recovery_s"] <= 1.5 and ratio >= 2.0)}
    return {"suite": "fig1", "seed": seed, "episode_seed": s, "methods": per,
            "verdict": verdict, "pass": verdict["pass"]}, {}


def suite_fig2(out, episodes, seed, profile, cache, workers,
               methods=(MethodId.KoopmanIss, MethodId.KoopmanUncert)):
    res = H.disturbance_sweep(methods, count=episodes, seed=seed, profile=profile, cache=cache)
    grid = res["a_w"]
    keys = list(res["rmse"])
    write_csv(os.path.join(out, "fig2.csv"), ["a_w"] + keys,
              [[a] + [res["rmse"][k][i] for k in keys] for i, a in enumerate(grid)])
    emit_figures(out, {"fig2_sweep": {
        "kind": "line", "series": {k: (grid, res["rmse"][k]) for k in keys},
        "title": "Open-loop position RMSE vs forcing amplitude", "xlabel": "a_w",
        "ylabel": "RMSE"}})
    col = res["rmse"][res["fit_method"]]
    mono = all(b >= a for a, b in zip(col, col[1:]))
    verdict = {"r2": res["r2"], "required_r2": 0.9, "monotone": mono,
               "pass": bool(res["r2"] >= 0.9 and mono)}
    return {"suite": "fig2", "trajectories": episodes, "seed": seed, **res,
            "verdict": verdict, "pass": verdict["pass"]}, {}


def suite_fig3(out, episodes, seed, profile, cache, workers):
    reports = H.ablation(episodes, seed, profile, out, cache, workers)
    keys = list(reports)
    write_csv(os.path.join(out, "fig3.csv"),
              ("variant", "tracking_rmse", "tracking_rmse_std", "cost_variance",
               "cost_variance_ratio"),
              [[k, r.tracking_rmse, r.tracking_rmse_std, r.cost_variance, r.cost_variance_ratio]
               for k, r in reports.items()])
    emit_figures(out, {"fig3_ablation": {
        "kind": "bar", "labels": keys, "values": [reports[k].tracking_rmse for k in keys],
        "errors": [reports[k].tracking_rmse_std for k in keys],
        "title": "Ablation: tracking RMSE (b1)", "ylabel": "RMSE"}})
    verdict = ablation_verdict(reports)
    return {"suite": "fig3", "episodes": episodes, "seed": seed,
            "reports": {k: r.deterministic_dict() for k, r in reports.items()},
            "verdict": verdict, "pass": verdict["pass"]}, \
        {f"{k}_step_ms": r.step_time_ms for k, r in reports.items()}


def suite_prop2(out, episodes, seed, profile, cache, workers):
    data = H.snapshot_data("b2", profile, seed)
    res = H.dictionary_sweep(data, (1, 2, 3, 4), profile)
    cols = ("degree", "size", "rho", "gamma_star", "gamma", "eps_state", "eps_state_certified",
            "eps_lifted", "diagnosis")
    write_csv(os.path.join(out, "prop2.csv"), cols, [[r[c] for c in cols] for r in res["rows"]])
    deg = [r["degree"] for r in res["rows"]]
    emit_figures(out, {"prop2_residual": {
        "kind": "line", "series": {"eps_state": (deg, [r["eps_state"] for r in res["rows"]])},
        "title": "One-step state residual vs dictionary degree", "xlabel": "degree",
        "ylabel": "residual"}})
    ok = bool(res["eps_monotone"] and res["gamma_monotone"])
    return {"suite": "prop2", "seed": seed, **res, "pass": ok}, {}


def bound_satisfaction(telemetry):
    """Fraction of steps (with a finite variance) where ``sigma_J2 <= bound``."""
    var = np.array([r["sigma_J2"] for r in telemetry], float)
    b = np.array([np.nan if r["bound"] is None else r["bound"] for r in telemetry], float)
    ok = np.isfinite(var) & np.isfinite(b)
    return float(np.mean(var[ok] <= b[ok])) if ok.any() else float("nan"), int(ok.sum())


def suite_prop3(out, episodes, seed, profile, cache, workers):
    rep, results = H.run_method("b1", MethodId.CsodeIcodeMppi, episodes, seed, profile, out,
                                cache, keep=True, workers=workers)
    tel = [dict(r, episode=res.index) for res in results for r in res.telemetry]
    frac, steps = bound_satisfaction(tel)
    with open(os.path.join(out, "prop3_telemetry.csv"), "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\r\n")
        wr.writerow(("episode", "t", "sigma_J2", "bound", "e0"))
        for r in tel:
            wr.writerow([r["episode"], repr(r["t"]), repr(r["sigma_J2"]),
                         repr(float("nan") if r["bound"] is None else r["bound"]), repr(r["e0"])])
    e0 = [r for r in tel if r["episode"] == 0]
    emit_figures(out, {"prop3_variance": {
        "kind": "line", "title": "Rollout cost variance and its bound (episode 0)",
        "series": {"sigma_J2": ([r["t"] for r in e0], [r["sigma_J2"] for r in e0]),
                   "bound": ([r["t"] for r in e0],
                             [np.nan if r["bound"] is None else r["bound"] for r in e0])},
        "xlabel": "t (s)", "ylabel": "variance"}})
    verdict = {"satisfaction": frac, "steps": steps, "required": 0.99, "pass": bool(frac >= 0.99)}
    return {"suite": "prop3", "episodes": episodes, "seed": seed,
            "report": rep.deterministic_dict(), "verdict": verdict, "pass": verdict["pass"]}, {}


RUNNERS = {"table1": suite_table1, "fig1": suite_fig1, "fig2": suite_fig2, "fig3": suite_fig3,
           "prop2": suite_prop2, "prop3": suite_prop3}


def run_suite(name, out, episodes=None, seed=0, profile=Profile(), cache=None, workers=1):
    """Run suite ``name`` into directory ``out`` and return its summary dict."""
    if name not in RUNNERS:
        raise ValueError(f"unknown suite {name!r} (choose from {', '.join(SUITES)})")
    episodes = DEFAULT_EPISODES[name] if episodes is None else int(episodes)
    if name in ("table1", "fig3", "prop3", "fig2") and episodes < 1:
        raise ValueError("episodes must be >= 1")
    os.makedirs(out, exist_ok=True)
    t0 = time.perf_counter()
    summary, timing = RUNNERS[name](out, episodes, seed, profile, cache, workers)
    write_json(os.path.join(out, f"{name}.json"), summary)
    _timing(out, name, time.perf_counter() - t0, timing)
    return summary
