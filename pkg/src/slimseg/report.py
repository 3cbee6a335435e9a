"""Publication-style figures and tables from run artifacts: every plotted number is
also emitted to a CSV, and the SVG is generated from those CSV values only."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

from .distribution import ComplexityIndex, load_index, maxwell_cdf, maxwell_pdf


class ArtifactError(IOError):
    pass


@dataclass
class RunArtifact:
    run_id: str
    config_path: str
    metrics_path: str
    ledger_path: str
    prune_report_path: str

    @classmethod
    def from_dir(cls, run_dir):
        run_id = os.path.basename(os.path.normpath(run_dir))
        art = cls(run_id=run_id,
                  config_path=os.path.join(run_dir, "config.json"),
                  metrics_path=os.path.join(run_dir, "metrics.csv"),
                  ledger_path=os.path.join(run_dir, "ledger.csv"),
                  prune_report_path=os.path.join(run_dir, "prune_report.csv"))
        for p in (art.metrics_path, art.ledger_path):
            if not os.path.exists(p):
                raise ArtifactError(f"run {run_id}: missing artifact {p}")
        return art

    def summary(self) -> dict:
        miou = None
        with open(self.metrics_path) as fh:
            for row in csv.reader(fh):
                if row and row[0] == "miou":
                    miou = float(row[1])
        train_energy = infer_energy = train_flops = infer_flops = None
        with open(self.ledger_path) as fh:
            for row in csv.reader(fh):
                if row and row[0] == "total_train":
                    train_flops, train_energy = float(row[4]), float(row[5])
                if row and row[0] == "infer_per_image":
                    infer_flops, infer_energy = float(row[4]), float(row[5])
        if miou is None or train_energy is None:
            raise ArtifactError(f"run {self.run_id}: unparseable artifacts")
        return {"run": self.run_id, "miou": miou,
                "train_flops": train_flops, "train_energy_j": train_energy,
                "infer_flops": infer_flops, "infer_energy_j": infer_energy}


def improvement(baseline: float, value: float) -> float:
    """Relative change (b - a) / b of `value` versus `baseline`."""
    return (baseline - value) / baseline


# -- minimal svg helpers --------------------------------------------------

def _svg(width, height, body):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}">\n'
            f'<rect width="{width}" height="{height}" fill="white"/>\n'
            + body + "\n</svg>\n")


def _scale(vals, lo_px, hi_px):
    vmin, vmax = min(vals), max(vals)
    span = (vmax - vmin) or 1.0
    return lambda v: lo_px + (v - vmin) / span * (hi_px - lo_px)


def render_tradeoff(run_dirs, out_prefix):
    """Scatter of (energy, mIoU) for train and inference; CSV alongside."""
    artifacts = sorted((RunArtifact.from_dir(d) for d in run_dirs),
                       key=lambda a: a.run_id)
    if not artifacts:
        raise ArtifactError("no runs given")
    rows = [a.summary() for a in artifacts]
    csv_path = out_prefix + ".csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)

    body = []
    xs = [r["train_energy_j"] for r in rows] + [r["infer_energy_j"] for r in rows]
    ys = [r["miou"] for r in rows]
    sx = _scale(xs, 50, 430)
    sy = _scale(ys + [0.0, 1.0], 440, 20)
    for r in rows:
        for key, color in (("train_energy_j", "#1f77b4"), ("infer_energy_j", "#d62728")):
            x, y = sx(r[key]), sy(r["miou"])
            body.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="4" fill="{color}"/>')
            body.append(f'<text x="{x + 6:.1f}" y="{y:.1f}" font-size="9">'
                        f'{r["run"]}</text>')
    body.append('<text x="180" y="470" font-size="11">energy (J), blue=train red=infer</text>')
    body.append('<text x="10" y="12" font-size="11">mIoU vs proxy energy</text>')
    with open(out_prefix + ".svg", "w") as fh:
        fh.write(_svg(480, 480, "\n".join(body)))
    return csv_path


def render_prune_sweep(report_rows, out_prefix):
    """Grouped pruned-fraction bars per (ratio, group, configuration)."""
    rows = sorted(report_rows, key=lambda r: (float(r["ratio"]), str(r["group"]),
                                              str(r.get("configuration", ""))))
    csv_path = out_prefix + ".csv"
    fields = ["ratio", "group", "configuration", "total", "pruned", "fraction"]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow({**{"configuration": ""}, **r})
    body = []
    bar_w = max(4, 400 // max(1, len(rows)))
    for i, r in enumerate(rows):
        frac = float(r["fraction"])
        h = 380 * frac
        x = 40 + i * (bar_w + 2)
        body.append(f'<rect x="{x}" y="{420 - h:.1f}" width="{bar_w}" '
                    f'height="{h:.1f}" fill="#2ca02c"/>')
        body.append(f'<text x="{x}" y="435" font-size="7">{r["group"]}@{r["ratio"]}</text>')
    body.append('<text x="10" y="12" font-size="11">pruned channel fraction per group</text>')
    with open(out_prefix + ".svg", "w") as fh:
        fh.write(_svg(480, 450, "\n".join(body)))
    return csv_path


def render_distribution(index: ComplexityIndex, out_prefix, bins=20):
    """Histogram of sc_mean with the fitted CDF/PDF sampled alongside."""
    if not index.entries:
        raise ArtifactError("empty complexity index")
    values = [e.sc_mean for e in index.entries]
    vmax = max(values) or 1.0
    edges = [vmax * i / bins for i in range(bins + 1)]
    counts = [0] * bins
    for v in values:
        b = min(bins - 1, int(v / vmax * bins))
        counts[b] += 1
    a = index.fit.scale_a
    csv_path = out_prefix + ".csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count", "fitted_cdf_at_hi",
                         "fitted_pdf_at_mid"])
        for i in range(bins):
            mid = (edges[i] + edges[i + 1]) / 2
            writer.writerow([f"{edges[i]:.17g}", f"{edges[i + 1]:.17g}",
                             counts[i], f"{maxwell_cdf(edges[i + 1], a):.17g}",
                             f"{maxwell_pdf(mid, a):.17g}"])
    body = []
    peak = max(counts) or 1
    bw = 400 / bins
    for i, c in enumerate(counts):
        h = 380 * c / peak
        body.append(f'<rect x="{40 + i * bw:.1f}" y="{420 - h:.1f}" '
                    f'width="{bw - 1:.1f}" height="{h:.1f}" fill="#9467bd"/>')
    pts = []
    for i in range(bins + 1):
        x = 40 + i * bw
        y = 420 - 380 * maxwell_cdf(edges[i], a)
        pts.append(f"{x:.1f},{y:.1f}")
    body.append(f'<polyline points="{" ".join(pts)}" fill="none" stroke="black"/>')
    body.append('<text x="10" y="12" font-size="11">complexity histogram + fitted CDF</text>')
    with open(out_prefix + ".svg", "w") as fh:
        fh.write(_svg(480, 450, "\n".join(body)))
    return csv_path


def render_all(runs_dir, out_dir):
    """Figures + tables for every run directory under runs_dir."""
    fig_dir = os.path.join(out_dir, "figures")
    tab_dir = os.path.join(out_dir, "tables")
    os.makedirs(fig_dir, exist_ok=True)
    os.makedirs(tab_dir, exist_ok=True)
    run_dirs = sorted(
        os.path.join(runs_dir, d) for d in os.listdir(runs_dir)
        if os.path.isdir(os.path.join(runs_dir, d))
        and os.path.exists(os.path.join(runs_dir, d, "metrics.csv")))
    outputs = []
    if run_dirs:
        outputs.append(render_tradeoff(run_dirs, os.path.join(fig_dir, "tradeoff")))
        sweep_rows = []
        for d in run_dirs:
            path = os.path.join(d, "prune_report.csv")
            if os.path.exists(path):
                with open(path) as fh:
                    for row in csv.DictReader(fh):
                        row["configuration"] = os.path.basename(d)
                        sweep_rows.append(row)
        if sweep_rows:
            outputs.append(render_prune_sweep(
                sweep_rows, os.path.join(fig_dir, "prune_sweep")))
        outputs.append(_improvement_table(run_dirs, tab_dir))
    index_path = os.path.join(runs_dir, "index.jsonl")
    if os.path.exists(index_path):
        outputs.append(render_distribution(load_index(index_path),
                                           os.path.join(fig_dir, "distribution")))
    return outputs


def _improvement_table(run_dirs, tab_dir):
    """Tables-style layout: absolute first row, percentage rows vs first run."""
    rows = [RunArtifact.from_dir(d).summary() for d in run_dirs]
    base = rows[0]
    path = os.path.join(tab_dir, "improvements.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "train_flops", "train_energy_j", "infer_flops",
                         "infer_energy_j", "miou", "train_energy_improv",
                         "infer_energy_improv", "miou_delta"])
        for r in rows:
            writer.writerow([
                r["run"], r["train_flops"], f'{r["train_energy_j"]:.17g}',
                r["infer_flops"], f'{r["infer_energy_j"]:.17g}',
                f'{r["miou"]:.17g}',
                f'{improvement(base["train_energy_j"], r["train_energy_j"]):.6f}',
                f'{improvement(base["infer_energy_j"], r["infer_energy_j"]):.6f}',
                f'{r["miou"] - base["miou"]:.6f}'])
    return path
