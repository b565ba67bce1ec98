"""Stage runner behind the command line.

Every stage writes into ``<output>/<stage>/``.  Files are first built in a
scratch directory and moved into place only when the stage succeeds, so a
failure leaves earlier artifacts untouched.  Each stage directory carries a
``manifest.json`` with the package version, seed, resolved settings and the
SHA-256 of its inputs and artifacts; ``<output>/manifest.json`` indexes the
stage manifests.  Manifests contain no timestamps or absolute paths.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import shutil
import tempfile
from collections.abc import Iterable, Mapping
from concurrent.futures import ThreadPoolExecutor
from datetime import date
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from . import metrics as M
from .breakdetect import break_date_histogram, fit_community_break, fit_individual_breaks
from .cdr import call_legs, cluster_activity_matrix, daily_cluster_calls, daily_cluster_volume, filter_regular_users, load_towers, parse_cdr
from .classify import classify_cohort, compute_dq_frame, posterior_frame, roc_auc, vacation_check
from .config import ConfigError, PipelineConfig, format_value, read_config, write_config
from .macro.forecast import cdr_scores, cross_validate
from .macro.panel import (
    FEATURES,
    ProvincePanel,
    demean_and_correlate,
    format_quarter,
    full_quarter_features,
    half_quarter_features,
    parse_quarter,
    province_aggregate,
    read_gdp,
    read_panel_features,
    read_unemployment,
    rsd_curve,
    sample_users,
    write_gdp,
    write_panel_features,
    write_unemployment,
)
from .synth.province import generate_province_panel, rsd_population
from .synth.town import generate_corpus, write_corpus

logger = logging.getLogger(__name__)

STAGES = ("synth", "break", "classify", "metrics", "forecast", "rsd")
DERIVED_CONFIG = "pipeline.conf"
FLOAT = "%.10g"


class PipelineError(RuntimeError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _clean(obj):
    """JSON-safe copy: NaN/inf become null, numpy scalars plain numbers."""
    if isinstance(obj, Mapping):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, (date, pd.Period)):
        return str(obj)
    return obj


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n")


def write_csv(df: pd.DataFrame, path, index: bool = False) -> None:
    df.to_csv(path, index=index, float_format=FLOAT, lineterminator="\n")


class Pipeline:
    """Runs stages against one output directory.

    ``layers`` are config mappings in increasing precedence (config file, then
    command-line overrides).  Values derived by the synth stage sit below them.
    """

    def __init__(self, layers: Iterable[Mapping] = (), output: str | Path | None = None, threads: int | None = None):
        self.layers = [dict(x) for x in layers]
        out = output or PipelineConfig.from_layers(*self.layers).get("output", "out")
        self.output = Path(out)
        self.threads = threads
        self.metrics_action = "all"
        self._cache: dict = {}

    # configuration --------------------------------------------------------

    @property
    def config(self) -> PipelineConfig:
        derived = self.output / "synth" / DERIVED_CONFIG
        base = [read_config(derived)] if derived.exists() else []
        return PipelineConfig.from_layers(*base, *self.layers)

    @property
    def n_threads(self) -> int:
        return max(1, int(self.threads or self.config.get("threads", 1)))

    def _path(self, cfg: PipelineConfig, key: str, stage: str, hint: str = "synth") -> Path:
        v = cfg.get(key)
        if v is None:
            raise PipelineError(f"{stage}: no '{key}' input configured; set {key}= or run the {hint} stage first")
        p = Path(v)
        if not p.exists():
            raise PipelineError(f"{stage}: input {key}={p} does not exist")
        return p

    def _artifact(self, stage: str, name: str, needed_by: str) -> Path:
        p = self.output / stage / name
        if not p.exists():
            raise PipelineError(f"{needed_by}: missing {stage}/{name}; run the {stage} stage first")
        return p

    # shared inputs ---------------------------------------------------------

    def _records(self, cfg: PipelineConfig, stage: str):
        cdr = self._path(cfg, "cdr", stage)
        tw = self._path(cfg, "towers", stage)
        cal = cfg.calendar()
        key = ("records", str(cdr), sha256_file(cdr), str(tw), cal, cfg["max_reject_fraction"])
        if key not in self._cache:
            self._cache.clear()
            towers = load_towers(tw)
            parsed = parse_cdr(cdr, towers, cal, cfg["max_reject_fraction"])
            self._cache[key] = (parsed, towers)
        parsed, towers = self._cache[key]
        return parsed, towers, cal, {"cdr": sha256_file(cdr), "towers": sha256_file(tw)}

    # running ---------------------------------------------------------------

    def run(self, stages: Iterable[str]) -> dict[str, dict]:
        wanted = set(stages)
        unknown = wanted - set(STAGES)
        if unknown:
            raise PipelineError(f"unknown stage(s): {', '.join(sorted(unknown))}")
        self.output.mkdir(parents=True, exist_ok=True)
        done = {}
        try:
            for stage in STAGES:
                if stage in wanted:
                    done[stage] = self._run_stage(stage)
        finally:
            self._write_index()
        return done

    def _run_stage(self, stage: str) -> dict:
        cfg = self.config
        fn = getattr(self, f"stage_{stage}")
        tmp = Path(tempfile.mkdtemp(prefix=f".{stage}-", dir=self.output))
        try:
            info = fn(cfg, tmp) or {}
            inputs = info.pop("inputs", {})
            summary = info.pop("summary", [])
            (tmp / "summary.txt").write_text("\n".join([f"stage: {stage}", *summary]) + "\n")
            artifacts = {p.name: sha256_file(p) for p in sorted(tmp.iterdir()) if p.is_file()}
            manifest = {
                "stage": stage,
                "version": __version__,
                "seed": cfg["seed"],
                "config": cfg.canonical(),
                "inputs": inputs,
                "artifacts": artifacts,
            }
            write_json(manifest, tmp / "manifest.json")
            final = self.output / stage
            if final.exists():
                old = self.output / f".{stage}-old"
                if old.exists():
                    shutil.rmtree(old)
                final.rename(old)
                tmp.rename(final)
                shutil.rmtree(old)
            else:
                tmp.rename(final)
            logger.info("%s: wrote %d artifacts", stage, len(artifacts))
            return manifest
        finally:
            if tmp.exists():
                shutil.rmtree(tmp)

    def _write_index(self) -> None:
        index = {"version": __version__, "stages": {}}
        for stage in STAGES:
            m = self.output / stage / "manifest.json"
            if m.exists():
                index["stages"][stage] = sha256_file(m)
        write_json(index, self.output / "manifest.json")

    # stages ----------------------------------------------------------------

    def stage_synth(self, cfg: PipelineConfig, out: Path) -> dict:
        scfg = cfg.synth_config()
        corpus = generate_corpus(scfg)
        write_corpus(corpus.records, corpus.truth, out, corpus.layout.towers)
        pcfg = cfg.province_config()
        prov = generate_province_panel(pcfg, threads=self.n_threads)
        write_unemployment(prov.panel.unemployment, out / "unemployment.csv")
        write_gdp(prov.panel.gdp, out / "gdp.csv")
        write_panel_features(pd.concat([prov.panel.features, prov.panel.ci], axis=1), out / "panel_features.csv")
        write_panel_features(prov.half_features, out / "panel_features_half.csv")
        cal = scfg.calendar
        final = self.output / "synth"
        derived = {
            "cdr": str(final / "cdr.csv"),
            "towers": str(final / "towers.csv"),
            "truth": str(final / "truth.csv"),
            "unemployment": str(final / "unemployment.csv"),
            "gdp": str(final / "gdp.csv"),
            "panel_features": str(final / "panel_features.csv"),
            "panel_features_half": str(final / "panel_features_half.csv"),
            "calendar.start": cal.start,
            "calendar.end": cal.end,
            "calendar.gaps": cal.gaps,
            "calendar.utc_offset_hours": cal.utc_offset_hours,
            f"cluster.{corpus.layout.cluster.cluster_id}": tuple(sorted(corpus.layout.cluster.tower_ids)),
            "plant_cluster": corpus.layout.cluster.cluster_id,
            "forecast.masked_quarters": tuple(format_quarter(parse_quarter(q)) for q in pcfg.masked_quarters),
        }
        if scfg.vacation is not None:
            derived["vacation"] = scfg.vacation
        write_config(derived, out / DERIVED_CONFIG, base=final)
        truth = corpus.truth.to_frame()
        return {
            "summary": [
                f"users: {len(truth)} ({', '.join(f'{k}={v}' for k, v in truth['role'].value_counts().sort_index().items())})",
                f"records: {len(corpus.records)}",
                f"planted layoff: {scfg.layoff_date}",
                f"provinces: {pcfg.n_provinces} x {len(pcfg.quarters)} quarters",
            ]
        }

    def stage_break(self, cfg: PipelineConfig, out: Path) -> dict:
        parsed, towers, cal, inputs = self._records(cfg, "break")
        cluster = cfg.plant_cluster()
        records = parsed.records
        vol = daily_cluster_volume(records, cluster, cal)
        calls = daily_cluster_calls(records, cluster, cal)
        margin, thr = cfg["min_margin"], cfg["break_threshold"]
        fit = fit_community_break(vol.astype(float), margin, thr)
        write_csv(pd.DataFrame({"day": vol.index.strftime("%Y-%m-%d"), "volume": vol.to_numpy(), "calls": calls.to_numpy()}), out / "daily_volume.csv")
        result = {"cluster": cluster.cluster_id, "n_days": int(len(vol)), "rejected_rows": len(parsed.rejects)}
        summary = []
        if fit is None:
            result.update({"t_break": None, "level_pre": None, "level_post": None, "relative_reduction": None})
            summary.append(f"no community break (reduction below {thr})")
            write_csv(pd.DataFrame(columns=["user_id", "t_break", "level_pre", "level_post", "relative_reduction"]), out / "user_breaks.csv")
        else:
            result.update(fit.as_dict())
            users = sorted(filter_regular_users(records, cluster, cal, fit.t_break, cfg["min_calls"]))
            act = cluster_activity_matrix(records, cluster, cal, users)
            fits = fit_individual_breaks(act, margin, thr) if len(users) else {}
            rows = [
                {"user_id": u, **(f.as_dict() if f is not None else {"t_break": "", "level_pre": np.nan, "level_post": np.nan, "relative_reduction": np.nan})}
                for u, f in fits.items()
            ]
            ub = pd.DataFrame(rows, columns=["user_id", "t_break", "level_pre", "level_post", "relative_reduction"])
            write_csv(ub, out / "user_breaks.csv")
            summary.append(f"community break: {fit.t_break} (reduction {fit.relative_reduction:.3f}, {fit.level_pre:.1f} -> {fit.level_post:.1f} users/day)")
            if any(f is not None for f in fits.values()):
                h = break_date_histogram(fits)
                write_csv(pd.DataFrame({"date": h.counts.index.strftime("%Y-%m-%d"), "count": h.counts.to_numpy()}), out / "break_histogram.csv")
                pmax = h.placebo_max(fit.t_break)
                result["histogram"] = {
                    "mode": h.mode.isoformat(),
                    "mode_count": int(h.counts.max()),
                    "mode_share": h.mode_share,
                    "n_fits": h.n_fits,
                    "n_users": len(users),
                    "placebo_max": pmax,
                }
                summary.append(f"individual breaks: {h.n_fits}/{len(users)} regular users, mode {h.mode} ({int(h.counts.max())} vs placebo max {pmax})")
        write_json(result, out / "community_break.json")
        return {"inputs": inputs, "summary": summary}

    def _layoff(self, cfg: PipelineConfig, stage: str) -> tuple[date, dict]:
        if cfg.get("layoff_date") is not None:
            return cfg["layoff_date"], {}
        p = self.output / "break" / "community_break.json"
        if not p.exists():
            raise PipelineError(f"{stage}: break stage or layoff_date required")
        t = json.loads(p.read_text()).get("t_break")
        if t is None:
            raise PipelineError(f"{stage}: break stage or layoff_date required (the break stage found no significant break)")
        return date.fromisoformat(t), {"break/community_break.json": sha256_file(p)}

    def _regular_activity(self, cfg, records, cluster, cal, layoff):
        users = sorted(filter_regular_users(records, cluster, cal, layoff, cfg["min_calls"]))
        return cluster_activity_matrix(records, cluster, cal, users)

    def stage_classify(self, cfg: PipelineConfig, out: Path) -> dict:
        layoff, up = self._layoff(cfg, "classify")
        parsed, towers, cal, inputs = self._records(cfg, "classify")
        cluster = cfg.plant_cluster()
        act = self._regular_activity(cfg, parsed.records, cluster, cal, layoff)
        windows, excluded = compute_dq_frame(act, layoff)
        post = posterior_frame(windows, cfg["gamma"], cfg["d"])
        cols = ["q_pre", "q_post", "dq", "sigma", "p_laidoff"]
        write_csv(post[cols].reset_index(), out / "posteriors.csv")
        write_csv(excluded.rename("reason").rename_axis("user_id").reset_index(), out / "excluded.csv")
        p = post["p_laidoff"].astype(float)
        thr = cfg["classify_threshold"]
        result = {
            "layoff_date": layoff,
            "gamma": cfg["gamma"],
            "d": cfg["d"],
            "threshold": thr,
            "n_regular": int(len(act)),
            "n_classified": int(len(post)),
            "n_excluded": int(len(excluded)),
            "n_affected": int((p > thr).sum()),
            "expected_laidoff": float(p.sum()),
        }
        summary = [f"layoff date: {layoff}", f"classified {len(post)} regular users; {result['n_affected']} with p > {thr} (sum p = {p.sum():.1f})"]
        vac = cfg.get("vacation")
        if vac is not None and len(post):
            vc = vacation_check(post, act, vac, layoff)
            result["vacation_check"] = {"window": list(vac), "affected_drop": vc.affected_drop, "control_drop": vc.control_drop, "ratio": vc.ratio, "z": vc.diff_z, "p_value": vc.p_value}
            s = vc.series
            write_csv(pd.DataFrame({"day": s.index.strftime("%Y-%m-%d"), "top_decile": s["top_decile"], "control": s["control"]}), out / "vacation_series.csv")
            summary.append(f"vacation check: top-decile drop {vc.affected_drop:.3f} vs control {vc.control_drop:.3f}")
        if cfg.get("truth") is not None and len(post):
            tp = self._path(cfg, "truth", "classify")
            inputs["truth"] = sha256_file(tp)
            truth = pd.read_csv(tp, dtype={"user_id": str}, float_precision="round_trip").set_index("user_id")
            role = truth["role"].reindex(post.index)
            labels = (role == "nonresident_worker").to_numpy()
            ev = {"n_planted_workers": int((truth["role"] == "nonresident_worker").sum())}
            if labels.any() and (~labels).any():
                ev["roc_auc"] = roc_auc(p.to_numpy(), labels)
            if ev["n_planted_workers"]:
                ev["affected_share"] = result["n_affected"] / ev["n_planted_workers"]
            result["evaluation"] = ev
            summary.append("evaluation: " + ", ".join(f"{k}={format_value(v) if not isinstance(v, float) else f'{v:.3f}'}" for k, v in sorted(ev.items())))
        write_json(result, out / "summary.json")
        return {"inputs": {**inputs, **up}, "summary": summary}

    def stage_metrics(self, cfg: PipelineConfig, out: Path) -> dict:
        action = self.metrics_action
        if action not in ("all", "features", "fit"):
            raise PipelineError(f"metrics: unknown action {action!r}")
        layoff, up = self._layoff(cfg, "metrics")
        post_path = self._artifact("classify", "posteriors.csv", "metrics")
        up["classify/posteriors.csv"] = sha256_file(post_path)
        post = pd.read_csv(post_path, dtype={"user_id": str}, float_precision="round_trip").set_index("user_id")
        p = post["p_laidoff"].astype(float)
        parsed, towers, cal, inputs = self._records(cfg, "metrics")
        cluster = cfg.plant_cluster()
        legs = call_legs(parsed.records)
        pool = country_pool(legs, cluster, cal)
        cohort = classify_cohort(post, cfg["classify_threshold"], pool, cfg["n_country"], cfg["seed"])
        country = cohort.country_sample
        users = sorted(set(p.index) | set(country))
        feats = M.monthly_features(parsed.records, towers, cluster, cal, users, cfg["mobility_min_calls"], cfg["tower_min_calls"], legs=legs)
        base = pd.Period(cfg["baseline_month"], freq="M") if cfg.get("baseline_month") else M.baseline_month(layoff)
        summary = [f"layoff date: {layoff}", f"baseline month: {base}", f"users: {len(p)} town, {len(country)} country"]
        if action in ("all", "features"):
            f = feats.copy()
            f["month"] = f["month"].astype(str)
            write_csv(f, out / "features.csv")
            groups = {"affected": p, "town": 1.0 - p}
            if country:
                groups["country"] = pd.Series(1.0, index=country)
            series = M.normalize_and_difference(feats, groups, base)
            rows = []
            for m, gs in series.items():
                for month in gs.means.index:
                    row = {"metric": m, "month": str(month)}
                    row.update({g: gs.means.loc[month, g] for g in gs.means.columns})
                    row.update({f"diff_{c}": gs.diffs.loc[month, c] for c in gs.diffs.columns})
                    rows.append(row)
            write_csv(pd.DataFrame(rows), out / "group_diffs.csv")
            pc = M.percent_change_report(feats, groups, layoff, n_boot=cfg["n_boot"], seed=cfg["seed"])
            write_csv(pc, out / "percent_change.csv")
        if action in ("all", "fit"):
            norm = M.normalize_features(feats, base)
            table = {"layoff_date": layoff, "baseline_month": str(base), "rows": []}
            for variant in ("weight", "dummy"):
                for fit in M.fit_all_metrics(norm, p, layoff, country, variant=variant):
                    table["rows"].append(fit.as_dict())
            write_json(table, out / "fit.json")
            for r in table["rows"]:
                if r["variant"] == "weight":
                    eff = f"{100 * r['percent_change']:+.1f}%" if r["form"] == "log" else f"{r['interaction']:+.4f}"
                    summary.append(f"{r['control']:8s} {r['metric']:9s} {eff:>9s}  95% CI [{r['ci95'][0]:+.4f}, {r['ci95'][1]:+.4f}]")
        return {"inputs": {**inputs, **up}, "summary": summary}

    # forecast --------------------------------------------------------------

    def _province_panel(self, cfg: PipelineConfig, stage: str):
        """Full and (optional) half-quarter panels plus input hashes."""
        inputs = {}
        up = self._path(cfg, "unemployment", stage)
        gp = self._path(cfg, "gdp", stage)
        inputs.update(unemployment=sha256_file(up), gdp=sha256_file(gp))
        rates, gdp = read_unemployment(up), read_gdp(gp)
        masked = frozenset(parse_quarter(q) for q in cfg.get("forecast.masked_quarters", ()))
        names = list(FEATURES)
        if cfg.get("user_ratios") is not None:
            rp = self._path(cfg, "user_ratios", stage)
            inputs["user_ratios"] = sha256_file(rp)
            ratios = pd.read_csv(rp, dtype={"province_id": str, "user_id": str}, float_precision="round_trip")
            ratios["month"] = pd.PeriodIndex(ratios["month"], freq="M")
            rosters = {pid: sorted(g["user_id"].unique()) for pid, g in ratios.groupby("province_id", sort=True)}
            chosen = sample_users(rosters, cfg["k"], cfg["seed"])
            kw = {"n_boot": cfg["n_boot"], "seed": cfg["seed"], "min_users": cfg["min_users"]}
            has_half = "half" in ratios.columns

            def one(pid):
                r = ratios[(ratios["province_id"] == pid) & ratios["user_id"].isin(set(chosen[pid]))]
                if has_half:
                    return full_quarter_features(r, **kw), half_quarter_features(r, **{**kw, "n_boot": 0})
                return province_aggregate(r, **kw), None

            with ThreadPoolExecutor(max_workers=self.n_threads) as ex:
                parts = list(ex.map(one, sorted(chosen)))
            full = pd.concat([a for a, _ in parts]).sort_index()
            half = pd.concat([b for _, b in parts]).sort_index() if has_half else None
        else:
            fp = self._path(cfg, "panel_features", stage)
            inputs["panel_features"] = sha256_file(fp)
            full = read_panel_features(fp)
            half = None
            if cfg.get("panel_features_half") is not None:
                hp = self._path(cfg, "panel_features_half", stage)
                inputs["panel_features_half"] = sha256_file(hp)
                half = read_panel_features(hp)
        ci_cols = [c for c in full.columns if c.endswith(("_lo", "_hi"))]
        panel = ProvincePanel(rates, gdp, full[names], full[ci_cols] if ci_cols else None, masked)
        half_panel = panel.with_features(half[names]) if half is not None else None
        return panel, half_panel, inputs

    def stage_forecast(self, cfg: PipelineConfig, out: Path) -> dict:
        panel, half_panel, inputs = self._province_panel(cfg, "forecast")
        seed = cfg["seed"]
        _, pca = cdr_scores(panel)
        corr = demean_and_correlate(panel)
        write_csv(corr.reset_index(), out / "correlations.csv")
        loadings = pca.loadings_frame().rename_axis("feature").reset_index()
        write_csv(loadings, out / "pca_loadings.csv")
        summary = [
            f"provinces: {len(panel.provinces)}, quarters: {len(panel.quarters)}, usable rows: {pca.n_rows}",
            f"PCA: eigenvalues {', '.join(f'{v:.3f}' for v in pca.eigenvalues)}; PC1 explains {100 * pca.explained[0]:.1f}%; {pca.retained} retained",
        ]
        result = {"pca": pca.as_dict(), "correlations": corr.reset_index().to_dict(orient="records"), "evaluations": [], "half_quarter": []}
        preds = []
        variants = [("full", panel, "evaluations")] + ([("half", half_panel, "half_quarter")] if half_panel is not None else [])
        for label, pnl, key in variants:
            for fam in cfg["forecast.families"]:
                for hor in cfg["forecast.horizons"]:
                    ev = cross_validate(pnl, fam, hor, seed, cfg["forecast.intercept"])
                    result[key].append(ev.as_dict())
                    pr = ev.predictions.copy()
                    pr.insert(0, "panel", label)
                    pr.insert(1, "family", fam)
                    pr.insert(2, "horizon", hor)
                    preds.append(pr)
                    summary.append(f"{label:4s} {fam:8s} {hor:8s} n={ev.n_obs:4d} RMSE {ev.rmse_without:.5f} -> {ev.rmse_with:.5f} ({100 * ev.delta_rmse_pct:+.1f}%), rho {ev.rho_without:.3f} -> {ev.rho_with:.3f}")
        pr = pd.concat(preds, ignore_index=True)
        pr["quarter"] = pr["quarter"].map(format_quarter)
        pr["target_quarter"] = pr["target_quarter"].map(format_quarter)
        write_csv(pr, out / "predictions.csv")
        write_json(result, out / "eval.json")
        return {"inputs": inputs, "summary": summary}

    def stage_rsd(self, cfg: PipelineConfig, out: Path) -> dict:
        inputs = {}
        if cfg.get("rsd_population") is not None:
            pp = self._path(cfg, "rsd_population", "rsd")
            inputs["rsd_population"] = sha256_file(pp)
            pop = pd.read_csv(pp, dtype={"province_id": str}, float_precision="round_trip")
        else:
            pop = rsd_population(cfg.province_config(), n_users=cfg["rsd.population"])
        mean, se = rsd_curve(pop, cfg["rsd.k_grid"], T=cfg["rsd.T"], seed=cfg["seed"], with_se=True)
        df = mean.join(se.add_suffix("_se"))
        write_csv(df.reset_index(), out / "rsd.csv")
        last = mean.iloc[-1]
        return {
            "inputs": inputs,
            "summary": [f"provinces: {pop['province_id'].nunique()}, k grid {mean.index[0]}..{mean.index[-1]}, T={cfg['rsd.T']}",
                        f"RSD at k={mean.index[-1]}: " + ", ".join(f"{n}={v:.4f}" for n, v in last.items())],
        }


def country_pool(legs: pd.DataFrame, cluster, calendar) -> list[str]:
    """Candidate country-control users.

    Users who never call through the cluster, never talk to anyone who does
    (no spillover from the town) and are seen in every usable month.
    """
    town = set(legs.loc[legs["tower"].isin(cluster.tower_ids), "user_id"])
    linked = set(legs.loc[legs["counterparty_id"].isin(town), "user_id"])
    cand = legs[~legs["user_id"].isin(town | linked)]
    months = [m for m in calendar.month_boundaries if not calendar.month_in_gap(m)]
    month = calendar.local_days(cand["timestamp"]).to_period("M")
    seen = pd.DataFrame({"user_id": cand["user_id"].to_numpy(), "month": month})
    seen = seen[seen["month"].isin(months)].drop_duplicates()
    n = seen.groupby("user_id").size()
    return sorted(n.index[n == len(months)])


def run_pipeline(config: PipelineConfig | Mapping, stages: Iterable[str], output=None, threads: int | None = None) -> dict[str, dict]:
    """Library entry point: run ``stages`` (in dependency order) with ``config``."""
    layer = config.values if isinstance(config, PipelineConfig) else dict(config)
    try:
        return Pipeline([layer], output, threads).run(stages)
    except ConfigError as exc:
        raise PipelineError(str(exc)) from exc
