"""Tables, SVG plots, and conversion grids rendered from a run directory.

Numbers in tables are copied from persisted RunRecords (and the ablation
summary built from them); nothing is recomputed at render time.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .clustering import elbow_from_curve, read_elbow_csv  # noqa: E402
from .entropy import read_records_csv  # noqa: E402
from .errors import PrerequisiteError  # noqa: E402
from .pipeline import ABLATION_ROWS, RunStore, load_ablation  # noqa: E402
from .trainer import RunRecord  # noqa: E402

ROW_LABELS = {
    "same_image": "EncodeNet, same-image targets",
    "baseline": "Baseline",
    "representative_unclustered": "EncodeNet, one representative per class",
    "representative_clustered": "EncodeNet, representative per class and cluster",
}
_SVG_RC = {"svg.hashsalt": "encodenet", "svg.fonttype": "path", "figure.max_open_warning": 0}


def _save_svg(fig, path):
    # Fixed hash salt and no date stamp make repeated renders byte-identical.
    with matplotlib.rc_context(_SVG_RC):
        buf = io.BytesIO()
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": "encodenet"})
    plt.close(fig)
    Path(path).write_bytes(buf.getvalue())
    return Path(path)


def _stage_entries(run_dir, stage):
    store = RunStore(run_dir)
    entries = [e for e in store.read_manifest()["stages"].values() if e["stage"] == stage]
    return sorted(entries, key=lambda e: (e["seed"], e["key"]))


def _require(path, what):
    path = Path(path)
    if not path.exists():
        raise PrerequisiteError(f"missing {what}: {path}")
    return path


# -- plots ---------------------------------------------------------------------------------


def plot_elbow(csv_path, out_path, title="Elbow curve"):
    ks, sse = read_elbow_csv(_require(csv_path, "elbow CSV"))
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    (curve,) = ax.plot(ks, sse, "o-", color="tab:blue")
    curve.set_gid("elbow-curve")
    if len(ks) >= 3:
        chosen = elbow_from_curve(ks, sse)
        (marker,) = ax.plot([chosen.k], [sse[ks.index(chosen.k)]], "s", ms=11, mfc="none", mec="tab:red",
                            label=f"chosen k={chosen.k}" + (" (degenerate)" if chosen.degenerate else ""))
        marker.set_gid("elbow-choice")
        ax.legend()
    ax.set_xlabel("k")
    ax.set_ylabel("sum of squared distances")
    ax.set_title(title)
    ax.set_xticks(ks)
    fig.tight_layout()
    return _save_svg(fig, out_path)


def plot_loss_curve(csv_path, out_path, title):
    rows = list(csv.reader(open(_require(csv_path, "metrics CSV"), newline="")))
    header, rows = rows[0], rows[1:]
    epochs = [int(r[0]) for r in rows]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(epochs, [float(r[1]) for r in rows], label="train loss", color="tab:blue")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss")
    ax2 = ax.twinx()
    ax2.plot(epochs, [float(r[2]) for r in rows], label=header[2], color="tab:orange")
    ax2.set_ylabel(header[2])
    ax.set_title(title)
    fig.tight_layout()
    return _save_svg(fig, out_path)


def plot_entropy_histograms(csv_path, out_dir, bins=20):
    """One SVG per class, with a histogram panel per cluster."""
    records = read_records_csv(_require(csv_path, "entropy CSV"))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    top = max((r.entropy for r in records), default=1.0) or 1.0
    for c in sorted({r.label for r in records}):
        clusters = sorted({r.cluster for r in records if r.label == c})
        fig, axes = plt.subplots(1, len(clusters), figsize=(3 * len(clusters), 2.6), squeeze=False)
        for ax, k in zip(axes[0], clusters):
            values = [r.entropy for r in records if r.label == c and r.cluster == k]
            ax.hist(values, bins=bins, range=(0, top), color="tab:green")
            ax.set_title(f"class {c}, cluster {k} (n={len(values)})", fontsize=9)
            ax.set_xlabel("entropy (nats)")
        fig.tight_layout()
        paths.append(_save_svg(fig, out_dir / f"entropy_class{c}.svg"))
    return paths


def render_plots(run_dir, out_dir=None):
    """Elbow curves, per-stage loss curves, and entropy histograms for a run directory."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir or run_dir / "report" / "plots")
    manifest = RunStore(run_dir).read_manifest() if run_dir.exists() else {"stages": {}}
    if not manifest["stages"]:
        raise PrerequisiteError(f"no stage CSVs in {run_dir}; run a pipeline stage first")
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for e in _stage_entries(run_dir, "cluster"):
        paths.append(plot_elbow(run_dir / e["artifacts"]["elbow"]["path"],
                                out_dir / f"elbow_seed{e['seed']}_{e['key'][:8]}.svg",
                                title=f"Elbow curve (seed {e['seed']})"))
    for stage in ("baseline", "cae", "head"):
        for e in _stage_entries(run_dir, stage):
            mode = e["info"].get("target_mode", "")
            title = f"{stage} seed {e['seed']}" + (f" ({mode})" if mode else "")
            paths.append(plot_loss_curve(run_dir / e["artifacts"]["metrics"]["path"],
                                         out_dir / f"loss_{stage}_seed{e['seed']}_{e['key'][:8]}.svg", title))
    for e in _stage_entries(run_dir, "rank"):
        paths += plot_entropy_histograms(run_dir / e["artifacts"]["entropy"]["path"],
                                         out_dir / f"entropy_seed{e['seed']}_{e['key'][:8]}")
    return paths


# -- conversion grid -----------------------------------------------------------------------


def to_uint8(images):
    """Clamp to [0, 1] and quantize to 8 bits."""
    return np.rint(np.clip(np.asarray(images, dtype=np.float64), 0.0, 1.0) * 255).astype(np.uint8)


def conversion_grid(cae, inputs, targets, scale=4, pad=2):
    """uint8 image with one row per sample: input, CAE output, target."""
    inputs = np.asarray(inputs, dtype=np.float32)
    outputs = cae.predict_batches(inputs)
    n, c, h, w = inputs.shape
    cell_h, cell_w = h * scale + pad, w * scale + pad
    grid = np.full((n * cell_h + pad, 3 * cell_w + pad, c), 255, dtype=np.uint8)
    for i in range(n):
        for j, img in enumerate((inputs[i], outputs[i], targets[i])):
            tile = to_uint8(img).transpose(1, 2, 0).repeat(scale, 0).repeat(scale, 1)
            y, x = pad + i * cell_h, pad + j * cell_w
            grid[y : y + h * scale, x : x + w * scale] = tile
    return grid[..., 0] if c == 1 else grid, outputs


def render_conversion_grid(cae, inputs, targets, path, scale=4):
    grid, outputs = conversion_grid(cae, inputs, targets, scale)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid).save(path, format="PNG")
    per_row = ((outputs.astype(np.float64) - targets) ** 2).reshape(len(inputs), -1).mean(axis=1)
    return Path(path), per_row


# -- tables --------------------------------------------------------------------------------


def _fmt(x, digits=4):
    return "n/a" if x is None else f"{x:.{digits}f}"


def _markdown(header, rows):
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(str(v) for v in r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _record_value(path):
    return RunRecord.load(path).final_metric


def render_tables(run_dir, out_dir=None):
    """Ablation, accuracy, and reconstruction tables (markdown + CSV)."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir or run_dir / "report")
    out_dir.mkdir(parents=True, exist_ok=True)
    table = load_ablation(run_dir)
    seeds = [str(s) for s in table.seeds]
    outputs = {}

    # Ablation: four rows, per-seed values read back from each RunRecord.
    header = ["row", "median_accuracy"] + [f"seed_{s}" for s in seeds]
    rows = []
    for row in ABLATION_ROWS:
        if row not in table.rows:
            continue
        per_seed = [table.sources[row].get(s) for s in seeds]
        values = [_record_value(p) if p else None for p in per_seed]
        rows.append([row, table.rows[row]["median_accuracy"]] + values)
    _write_csv(out_dir / "ablation.csv", header, rows)
    md = _markdown(["Configuration", "Median accuracy (%)"] + [f"seed {s}" for s in seeds],
                   [[ROW_LABELS[r[0]]] + [_fmt(None if v is None else 100 * v, 2) for v in r[1:]] for r in rows])
    status = "holds" if table.ordering_ok else "VIOLATED"
    md += f"\nExpected ordering same_image < baseline < unclustered < clustered: **{status}**.\n"
    if table.failures:
        md += "\nFailed runs:\n" + "".join(f"- seed {f['seed']} {f['row']}: {f['error']}\n" for f in table.failures)
    (out_dir / "ablation.md").write_text(md)
    outputs["ablation"] = out_dir / "ablation.md"

    # Reconstruction loss with and without intraclass clustering.
    rec_rows = []
    for mode, label in (("representative_unclustered", "without clustering (k=1)"),
                        ("representative_clustered", "with clustering")):
        if mode in table.reconstruction:
            r = table.reconstruction[mode]
            rec_rows.append([label, r["median_mse"]] + [r["per_seed"].get(s) for s in seeds])
    _write_csv(out_dir / "reconstruction.csv", ["targets", "median_mse"] + [f"seed_{s}" for s in seeds], rec_rows)
    md = _markdown(["Targets", "Median held-out MSE"] + [f"seed {s}" for s in seeds],
                   [[r[0]] + [_fmt(v, 5) for v in r[1:]] for r in rec_rows])
    if len(rec_rows) == 2 and rec_rows[0][1] and rec_rows[1][1] is not None:
        drop = 1 - rec_rows[1][1] / rec_rows[0][1]
        md += f"\nRelative drop with clustering: {100 * drop:.1f}%.\n"
    (out_dir / "reconstruction.md").write_text(md)
    outputs["reconstruction"] = out_dir / "reconstruction.md"

    # Baseline vs EncodeNet accuracy.
    acc_rows = [[ROW_LABELS[r], table.rows[r]["median_accuracy"]] for r in ("baseline", "representative_clustered")
                if r in table.rows]
    _write_csv(out_dir / "accuracy.csv", ["model", "median_accuracy"], acc_rows)
    (out_dir / "accuracy.md").write_text(_markdown(["Model", "Median accuracy (%)"],
                                                   [[m, _fmt(None if v is None else 100 * v, 2)] for m, v in acc_rows]))
    outputs["accuracy"] = out_dir / "accuracy.md"
    return outputs


def write_report(run_dir, grid=None):
    """Tables, plots, and an index ``report.md``; returns its path."""
    run_dir = Path(run_dir)
    out = run_dir / "report"
    tables = render_tables(run_dir, out)
    plots = render_plots(run_dir, out / "plots")
    lines = ["# Run report", ""]
    for name in ("ablation", "reconstruction", "accuracy"):
        lines += [f"## {name.capitalize()}", "", tables[name].read_text(), ""]
    if grid is not None:
        lines += ["## Conversion grid", "", f"![conversion grid]({Path(grid).relative_to(out)})", ""]
    lines += ["## Plots", ""] + [f"- [{p.name}]({p.relative_to(out)})" for p in plots]
    (out / "report.md").write_text("\n".join(lines) + "\n")
    (out / "index.json").write_text(json.dumps({"tables": {k: str(v.relative_to(out)) for k, v in tables.items()},
                                                "plots": [str(p.relative_to(out)) for p in plots]}, indent=2) + "\n")
    return out / "report.md"
