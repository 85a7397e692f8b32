"""Figure data: per-figure CSV tables, SVG plots and a hash manifest."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .harness import SweepResult  # noqa: E402

NA = "NA"

CSV_COLUMNS = {
    "fig4_provider_reward.csv": ["lambda", "lr", "provider_reward_mean", "provider_reward_se",
                                 "provider_reward_per_provider_mean", "viable_providers_mean",
                                 "viable_providers_se"],
    "fig5_pareto.csv": ["lambda", "user_reward_mean", "user_reward_se", "provider_reward_mean",
                        "provider_reward_se"],
    "fig6_decomposition.csv": ["lambda", "rec_part_mean", "rec_part_se", "feedback_part_mean",
                               "feedback_part_se", "drift_part_mean", "drift_part_se"],
    "fig8_scatter.csv": ["lambda", "satisfaction", "uplift"],
    "fig9_linear.csv": ["lambda", "lr", "provider_reward_mean", "provider_reward_se",
                        "user_reward_mean", "user_reward_se"],
    "fig11_subgroup.csv": ["lambda", "group", "viable_providers_mean", "viable_providers_se"],
    "fig12_rec_counts.csv": ["lambda", "group", "recommendations_mean", "recommendations_se"],
}


def fmt(x) -> str:
    if x is None:
        return NA
    if isinstance(x, str):
        return x
    return f"{float(x):.9g}"


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def _labelled(sweep: SweepResult):
    """(label, row) for each selected lambda, then the random agent."""
    out = [(fmt(r["lambda"]), r) for r in sweep.selected_rows()]
    if sweep.random is not None:
        out.append(("random", sweep.random))
    return out


def figure_tables(sweep: SweepResult) -> dict:
    """File name -> CSV text for every figure table."""
    rows = {name: [] for name in CSV_COLUMNS}
    sel = sweep.selected_rows()
    for label, r in _labelled(sweep):
        lr = r.get("lr")
        rows["fig4_provider_reward.csv"].append(
            [label, lr, r["provider_accumulated_reward_mean"], r["provider_accumulated_reward_se"],
             r["provider_reward_per_provider_mean"], r["viable_providers_mean"],
             r["viable_providers_se"]])
        rows["fig5_pareto.csv"].append(
            [label, r["user_accumulated_reward_mean"], r["user_accumulated_reward_se"],
             r["provider_accumulated_reward_mean"], r["provider_accumulated_reward_se"]])
        rows["fig6_decomposition.csv"].append(
            [label, r["rec_part_mean"], r["rec_part_se"], r["feedback_part_mean"],
             r["feedback_part_se"], r["drift_part_mean"], r["drift_part_se"]])
    for r in sel:
        for sat, up in r["scatter"]:
            rows["fig8_scatter.csv"].append([r["lambda"], sat, up])
    if sweep.linear:
        # every (lambda, lr) pair, not just the selected ones: the point is the lack of spread
        for r in sorted(sweep.rows, key=lambda r: (r["lambda"], r["lr"])):
            rows["fig9_linear.csv"].append(
                [r["lambda"], r["lr"], r["provider_accumulated_reward_mean"],
                 r["provider_accumulated_reward_se"], r["user_accumulated_reward_mean"],
                 r["user_accumulated_reward_se"]])
    if len(sweep.group_names) > 1:
        for label, r in _labelled(sweep):
            rows["fig11_subgroup.csv"].append(
                [label, "all", r["viable_providers_mean"], r["viable_providers_se"]])
            for g, name in enumerate(sweep.group_names):
                rows["fig11_subgroup.csv"].append(
                    [label, name, r["group_viable_mean"][g], r["group_viable_se"][g]])
                rows["fig12_rec_counts.csv"].append(
                    [label, name, r["group_recommendations_mean"][g],
                     r["group_recommendations_se"][g]])
    return {name: _csv_text(CSV_COLUMNS[name], rows[name]) for name in CSV_COLUMNS}


# ---------------------------------------------------------------------------
# Plots
# ---------------------------------------------------------------------------


def _svg_bytes(fig) -> bytes:
    buf = io.BytesIO()
    with matplotlib.rc_context({"svg.hashsalt": "ecosim", "svg.fonttype": "path"}):
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return buf.getvalue()


def _se(v):
    return 0.0 if v is None else v


def _line(ax, xs, ys, errs, label=None, **kw):
    ax.errorbar(xs, ys, yerr=[_se(e) for e in errs], marker="o", capsize=3, label=label, **kw)


def figure_plots(sweep: SweepResult) -> dict:
    """File name -> SVG bytes; only figures with data are drawn."""
    sel = sweep.selected_rows()
    if not sel:
        return {}
    lam = [r["lambda"] for r in sel]
    out = {}

    fig, ax = plt.subplots(figsize=(5, 3.5))
    _line(ax, lam, [r["provider_accumulated_reward_mean"] for r in sel],
          [r["provider_accumulated_reward_se"] for r in sel], "EcoAgent")
    if sweep.random is not None:
        ax.axhline(sweep.random["provider_accumulated_reward_mean"], ls="--", c="gray",
                   label="random")
    ax.set_xlabel("provider constant lambda")
    ax.set_ylabel("provider accumulated reward")
    ax.legend()
    fig.tight_layout()
    out["fig4_provider_reward.svg"] = _svg_bytes(fig)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar([r["user_accumulated_reward_mean"] for r in sel],
                [r["provider_accumulated_reward_mean"] for r in sel],
                xerr=[_se(r["user_accumulated_reward_se"]) for r in sel],
                yerr=[_se(r["provider_accumulated_reward_se"]) for r in sel],
                marker="o", capsize=3, label="EcoAgent")
    for r in sel:
        ax.annotate(fmt(r["lambda"]), (r["user_accumulated_reward_mean"],
                                       r["provider_accumulated_reward_mean"]), fontsize=7)
    if sweep.random is not None:
        ax.plot([sweep.random["user_accumulated_reward_mean"]],
                [sweep.random["provider_accumulated_reward_mean"]], "s", c="gray", label="random")
    ax.set_xlabel("user accumulated reward")
    ax.set_ylabel("provider accumulated reward")
    ax.legend()
    fig.tight_layout()
    out["fig5_pareto.svg"] = _svg_bytes(fig)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for part in ("rec_part", "feedback_part", "drift_part"):
        _line(ax, lam, [r[f"{part}_mean"] for r in sel], [r[f"{part}_se"] for r in sel], part)
    ax.set_xlabel("provider constant lambda")
    ax.set_ylabel("provider reward share")
    ax.legend()
    fig.tight_layout()
    out["fig6_decomposition.svg"] = _svg_bytes(fig)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for r in sel:
        if r["scatter"]:
            xs, ys = zip(*r["scatter"])
            ax.scatter(xs, ys, s=3, alpha=0.4, label=f"lambda={fmt(r['lambda'])}")
    ax.set_xlabel("provider satisfaction")
    ax.set_ylabel("predicted utility uplift")
    if any(r["scatter"] for r in sel):
        ax.legend(markerscale=3, fontsize=7)
    fig.tight_layout()
    out["fig8_scatter.svg"] = _svg_bytes(fig)

    if sweep.linear:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for lr in sorted({r["lr"] for r in sweep.rows}):
            rs = sorted((r for r in sweep.rows if r["lr"] == lr), key=lambda r: r["lambda"])
            _line(ax, [r["lambda"] for r in rs], [r["provider_accumulated_reward_mean"] for r in rs],
                  [r["provider_accumulated_reward_se"] for r in rs], f"lr={fmt(lr)}")
        ax.set_xlabel("provider constant lambda")
        ax.set_ylabel("provider accumulated reward")
        ax.legend()
        fig.tight_layout()
        out["fig9_linear.svg"] = _svg_bytes(fig)

    if len(sweep.group_names) > 1:
        for key, fname, ylabel in (("group_viable", "fig11_subgroup.svg", "viable providers"),
                                   ("group_recommendations", "fig12_rec_counts.svg",
                                    "accumulated recommendations")):
            fig, ax = plt.subplots(figsize=(5, 3.5))
            for g, name in enumerate(sweep.group_names):
                _line(ax, lam, [r[f"{key}_mean"][g] for r in sel],
                      [r[f"{key}_se"][g] for r in sel], f"group {name}")
            ax.set_xlabel("provider constant lambda")
            ax.set_ylabel(ylabel)
            ax.legend()
            fig.tight_layout()
            out[fname] = _svg_bytes(fig)
    return out


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------


def sweep_summary(sweep: SweepResult) -> dict:
    """Compact machine-readable digest: selection and correlations per lambda."""
    return {
        "scenario": sweep.scenario,
        "selected": [{"lambda": r["lambda"], "lr": r["lr"], "objective": r["objective"],
                      "epochs_run": r["epochs_run"], "correlation": r["correlation"]}
                     for r in sweep.selected_rows()],
        "random": None if sweep.random is None else {
            "user_accumulated_reward_mean": sweep.random["user_accumulated_reward_mean"],
            "provider_accumulated_reward_mean": sweep.random["provider_accumulated_reward_mean"],
            "viable_providers_mean": sweep.random["viable_providers_mean"]},
    }


def _dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")


def emit_report(sweep: SweepResult, out_dir, *, plots: bool = True,
                extra: dict | None = None) -> dict:
    """Write figure CSVs, SVG plots, a summary and ``manifest.json``; returns the manifest.

    Output is a pure function of ``sweep`` so repeated calls are byte-identical.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {name: text.encode("utf-8") for name, text in figure_tables(sweep).items()}
    if plots:
        files.update(figure_plots(sweep))
    files["summary.json"] = _dump_json(sweep_summary(sweep))
    for name, data in (extra or {}).items():
        files[name] = data
    for name, data in files.items():
        (out / name).write_bytes(data)
    manifest = {"files": {name: {"sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)}
                          for name, data in sorted(files.items())}}
    (out / "manifest.json").write_bytes(_dump_json(manifest))
    return manifest
