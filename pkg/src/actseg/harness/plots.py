"""Static SVG diagnostics drawn from saved reports and sweep tables."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..act import ActConfig, emd_lambda  # noqa: E402
from .reports import load_report, read_csv  # noqa: E402

# fixed ids and no timestamp keep the SVG bytes reproducible
_RC = {"svg.hashsalt": "actseg", "svg.fonttype": "none"}
_SVG_META = {"Date": None, "Creator": None}


def _save(fig, path):
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def _report_files(directory):
    return sorted(Path(directory).glob("report_*.jsonl"), key=lambda p: p.name)


def lambda_curve(config_dict):
    cfg = ActConfig.from_dict(config_dict)
    it = np.arange(cfg.total_iterations + 1)
    return it, np.array([emd_lambda(int(i), cfg) for i in it])


def consensus_curve(report):
    pts = [(c["I"], c["consensus"]) for c in report.checkpoints if c.get("consensus") is not None]
    if not pts:
        return None, None
    its = np.array([p[0] for p in pts])
    fr = np.array([p[1] for p in pts], dtype=float)
    return its, fr


def _sweep_plot(rows, axis, label, path):
    pts = sorted(
        (r["value"], r["mean"], r["std"])
        for r in rows
        if r["metric"] == "dsc" and r["class"] == "whole"
    )
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    x, m, s = (np.array(v) for v in zip(*pts))
    ax.errorbar(x, m, yerr=s, marker="o", capsize=3)
    ax.set_xlabel(label)
    ax.set_ylabel("whole-foreground DSC")
    ax.set_title(f"DSC vs {label}")
    fig.tight_layout()
    return _save(fig, path)


def emit_plots(report_dir, out_dir=None):
    """Write the λ schedule, consensus and sweep charts found under ``report_dir``.

    The λ and consensus charts need ``report_<seed>.jsonl`` files in the
    directory; sweep charts are drawn when ``sweep_<axis>.csv`` is present.
    """
    report_dir = Path(report_dir)
    out = Path(out_dir) if out_dir is not None else report_dir
    files = _report_files(report_dir)
    sweeps = {a: report_dir / f"sweep_{a}.csv" for a in ("n_lt", "pair_fraction")}
    sweeps = {a: p for a, p in sweeps.items() if p.is_file()}
    if not files and not sweeps:
        raise FileNotFoundError(
            f"no reports in {report_dir}: expected report_<seed>.jsonl or sweep_<axis>.csv files"
        )
    out.mkdir(parents=True, exist_ok=True)
    written = []
    with plt.rc_context(_RC):
        if files:
            reports = [load_report(f) for f in files]
            first = reports[0]
            act_cfg = first.config.get("act") if isinstance(first.config, dict) else None
            if act_cfg is not None and first.mode in ("act", "act_no_emd"):
                it, lam = lambda_curve(act_cfg)
                fig, ax = plt.subplots(figsize=(4.5, 3.2))
                ax.plot(it, lam)
                ax.set_xlabel("iteration I")
                ax.set_ylabel("λ")
                ax.set_title("MixUp weight schedule")
                fig.tight_layout()
                written.append(_save(fig, out / "lambda.svg"))

            curves = [consensus_curve(r) for r in reports]
            curves = [c for c in curves if c[0] is not None]
            if curves:
                its = curves[0][0]
                same = all(np.array_equal(c[0], its) for c in curves)
                fr = np.mean([c[1] for c in curves], axis=0) if same else curves[0][1]
                fig, ax = plt.subplots(figsize=(4.5, 3.2))
                for k, name in enumerate(("both", "only one", "none")):
                    ax.plot(its, fr[:, k], marker="o", label=name)
                ax.set_xlabel("iteration I")
                ax.set_ylabel("fraction of test pixels")
                ax.set_title("Segmentor confidence consensus")
                ax.legend()
                fig.tight_layout()
                written.append(_save(fig, out / "consensus.svg"))
        if "n_lt" in sweeps:
            written.append(_sweep_plot(read_csv(sweeps["n_lt"]), "n_lt", "labeled target scenes", out / "dsc_vs_n_lt.svg"))
        if "pair_fraction" in sweeps:
            written.append(
                _sweep_plot(read_csv(sweeps["pair_fraction"]), "pair_fraction", "pair fraction", out / "dsc_vs_pair_fraction.svg")
            )
    return written
