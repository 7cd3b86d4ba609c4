"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line.  Criteria 5-7
train the default synthetic task for every mode over five seeds, which takes
the better part of an hour on one CPU core.  Set ``ACT_ACCEPTANCE_OUT`` to
keep the run directories (reports, summaries, plots).
"""

import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from actseg import segmentor as seg
from actseg.act import ActConfig, _pseudo_set_from_probs, emd_lambda, mixup_pair
from actseg.act import PseudoLabelMap
from actseg.harness.config import load_config
from actseg.harness.experiment import run_experiment, sweep
from actseg.harness.plots import emit_plots
from actseg.harness.reports import load_report
from actseg.metrics import dsc, hausdorff
from actseg.tensor import SoftLabelMap
from oracles import central_difference, dsc_bruteforce, hausdorff_pairwise, select_bruteforce

SEEDS = 5


def announce(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} {detail}")


@pytest.fixture(scope="module")
def out_root(tmp_path_factory):
    keep = os.environ.get("ACT_ACCEPTANCE_OUT")
    if keep:
        root = Path(keep)
        root.mkdir(parents=True, exist_ok=True)
        return root
    return tmp_path_factory.mktemp("acceptance")


# ---------------------------------------------------------------------------
# 1. gradient oracle


def test_criterion_1_gradient_oracle(capsys):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst, cases = 0.0, 20
    for _ in range(cases):
        base = seg.init_params(int(rng.integers(1 << 31)), 3, 3, np.float64)
        params = seg.SegmentorParams(*(a + 0.3 * rng.standard_normal(a.shape) for a in base.arrays()))
        img = rng.random((8, 8))
        target = SoftLabelMap(rng.dirichlet(np.ones(3), size=(8, 8)), rng.uniform(0.1, 1.0, (8, 8)))
        _, grad = seg.loss_and_grad(params, img, target)

        def f(vec):
            q = seg.SegmentorParams.from_flat(vec, params.n_features, params.num_classes)
            return seg.loss_and_grad(q, img, target)[0]

        numeric = central_difference(f, params.flat(), 1e-4)
        analytic = grad.flat()
        # relative error per coordinate; the 1e-6 floor keeps coordinates whose
        # true gradient is ~0 from dividing rounding noise by nothing
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
        worst = max(worst, float((np.abs(analytic - numeric) / denom).max()))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-3 and elapsed < 30
    announce(capsys, 1, ok, f"{cases} cases, worst relative error {worst:.2e}, {elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------------------
# 2. pseudo-label oracle


def test_criterion_2_pseudo_label_oracle(capsys):
    rng = np.random.default_rng(7)
    mismatches, boundary_pixels = 0, 0
    n_maps = 10_000
    for _ in range(n_maps):
        h, w = (int(v) for v in rng.integers(1, 33, 2))
        c = int(rng.integers(2, 6))
        eps = float(rng.uniform(0.05, 0.95)) if rng.random() < 0.5 else 0.5
        p = rng.dirichlet(np.ones(c) * rng.uniform(0.2, 3.0), size=(h, w))
        rest = (1.0 - eps) / (c - 1)
        if rest < eps:
            # plant pixels whose confidence is exactly epsilon
            k = rng.random((h, w)) < 0.1
            row = np.full(c, rest)
            row[int(rng.integers(c))] = eps
            p[k] = row
            boundary_pixels += int(k.sum())
        img = np.zeros((h, w))
        ps = _pseudo_set_from_probs(p[None], [img], eps, "phi")
        labels, selected = select_bruteforce(p, eps)
        if selected.any():
            e = ps.entries[0] if len(ps) == 1 else None
            ok = e is not None and np.array_equal(e.pmap.labels, labels) and np.array_equal(e.pmap.selected, selected)
        else:
            ok = len(ps) == 0
        mismatches += not ok
    ok = mismatches == 0 and boundary_pixels > 0
    announce(capsys, 2, ok, f"{n_maps} maps, {mismatches} mismatches, {boundary_pixels} pixels at confidence = eps")
    assert ok


# ---------------------------------------------------------------------------
# 3. schedule and mixing invariants


def test_criterion_3_emd_schedule_and_mixing(capsys):
    failures = []
    for lambda0, decay_k, i_max in [(1.0, 5.0, 2000), (0.7, 2.0, 100), (3.0, 1.0, 50), (1.0, 10.0, 10)]:
        cfg = ActConfig(lambda0=lambda0, decay_k=decay_k, total_iterations=i_max)
        lam = np.array([emd_lambda(i, cfg) for i in range(i_max + 1)])
        if lam[0] != min(lambda0, 1.0):
            failures.append(f"lambda(0)={lam[0]} for lambda0={lambda0}")
        end = min(lambda0 * math.exp(-decay_k), 1.0)
        if abs(lam[-1] - end) > 1e-9:
            failures.append(f"lambda(I_max)={lam[-1]} != {end}")
        # with lambda0 > 1 the clamp holds lambda at 1 until the decay crosses it
        unclamped = lambda0 * np.exp(-decay_k * np.arange(i_max + 1) / i_max) < 1.0
        diffs = np.diff(lam)[unclamped[:-1]]
        if not np.all(diffs < 0):
            failures.append(f"not strictly decreasing for {(lambda0, decay_k, i_max)}")

    rng = np.random.default_rng(3)
    for _ in range(1000):
        h, w = (int(v) for v in rng.integers(1, 17, 2))
        C = int(rng.integers(2, 6))
        x_l, x_u = rng.random((h, w)), rng.random((h, w))
        y, y_hat = rng.integers(0, C, (h, w)), rng.integers(0, C, (h, w))
        sel = rng.random((h, w)) < rng.random()
        lam = float(rng.random())
        m = mixup_pair((x_l, y), (x_u, PseudoLabelMap(y_hat, sel, np.ones((h, w)))), lam, C)
        lo, hi = np.minimum(x_l, x_u), np.maximum(x_l, x_u)
        t, wt = m.target.targets, m.target.pixel_weights
        if not (np.all(m.image >= lo - 1e-12) and np.all(m.image <= hi + 1e-12)):
            failures.append("convexity")
        if not np.allclose(t[wt == 1].sum(-1), 1.0, atol=1e-12) or np.any(t < 0):
            failures.append("target normalisation")
        if not (np.all(wt[sel] == 1.0) and np.allclose(wt[~sel], lam)):
            failures.append("pixel weights")
    ok = not failures
    announce(capsys, 3, ok, "schedule endpoints, monotonicity, 1000 mixed pairs" + ("" if ok else f": {failures[:3]}"))
    assert ok


# ---------------------------------------------------------------------------
# 4. metric oracles


def test_criterion_4_metric_oracles(capsys):
    rng = np.random.default_rng(11)
    mismatches, n = 0, 10_000
    for _ in range(n):
        h, w = (int(v) for v in rng.integers(1, 17, 2))
        C = int(rng.integers(2, 5))
        density = rng.uniform(0.0, 1.0)
        a = np.where(rng.random((h, w)) < density, rng.integers(1, C, (h, w)), 0)
        b = np.where(rng.random((h, w)) < density, rng.integers(1, C, (h, w)), 0)
        cs = set(range(1, C)) if rng.random() < 0.5 else {int(rng.integers(1, C))}
        if dsc(a, b, cs) != dsc_bruteforce(a, b, cs) or hausdorff(a, b, cs) != hausdorff_pairwise(a, b, cs):
            mismatches += 1
    a = np.zeros((6, 6), int)
    b = np.zeros((6, 6), int)
    a[0, 0] = 1
    b[3, 4] = 1
    example = hausdorff(a, b, {1})
    ok = mismatches == 0 and example == 5.0
    announce(capsys, 4, ok, f"{n} mask pairs, {mismatches} mismatches, HD((0,0),(3,4)) = {example}")
    assert ok


# ---------------------------------------------------------------------------
# 5-7. the default synthetic task


def _whole(rows, metric="dsc"):
    row = next(r for r in rows if r["metric"] == metric and r["class"] == "whole")
    return row["mean"], row["std"]


@pytest.fixture(scope="module")
def mode_table(out_root):
    """Criterion 5: the four ordering modes, five seeds each, timed together."""
    base = load_config(None, [f"runs={SEEDS}"])
    results, start = {}, time.perf_counter()
    for mode in ("source_only", "uda_branch", "act", "joint"):
        results[mode] = run_experiment(base.replace(mode=mode), out_root / mode)
    elapsed = time.perf_counter() - start
    emit_plots(out_root / "act")
    return base, results, elapsed


def test_criterion_5_mode_ordering(capsys, mode_table):
    _, results, elapsed = mode_table
    m = {mode: _whole(rows)[0] for mode, rows in results.items()}
    ordering = m["source_only"] < m["uda_branch"] < m["act"] <= m["joint"]
    gain = m["act"] - m["source_only"]
    gap = m["joint"] - m["act"]
    fast = elapsed < 600
    ok = ordering and gain >= 0.10 and gap <= 0.10 and fast
    detail = ", ".join(f"{k} {v:.4f}" for k, v in m.items())
    announce(
        capsys,
        5,
        ok,
        f"{detail}; act-source {gain:+.4f}, joint-act {gap:+.4f}; "
        f"ordering {'holds' if ordering else 'violated'}; {elapsed:.0f} s for {SEEDS} seeds x 4 modes",
    )
    assert ok


@pytest.fixture(scope="module")
def ablations(out_root, mode_table):
    base, results, _ = mode_table
    no_emd = run_experiment(base.replace(mode="act_no_emd"), out_root / "act_no_emd")
    n_lt = sweep(base, "n_lt", [1, 5], out_root / "sweep_n_lt")
    pf = sweep(base, "pair_fraction", [0.25, 0.5], out_root / "sweep_pair_fraction")
    # pair_fraction = 1.0 is the default act configuration already run above
    pf += [{"axis": "pair_fraction", "value": 1.0, **r} for r in results["act"]]
    emit_plots(out_root / "sweep_n_lt")
    return results["act"], no_emd, n_lt, pf


def _by_value(rows):
    out = {}
    for r in rows:
        if r["metric"] == "dsc" and r["class"] == "whole":
            out[r["value"]] = r["mean"]
    return out


def test_criterion_6_ablation_and_sweeps(capsys, ablations):
    act_rows, no_emd_rows, n_lt_rows, pf_rows = ablations
    act, no_emd = _whole(act_rows)[0], _whole(no_emd_rows)[0]
    n_lt = _by_value(n_lt_rows)
    pf = _by_value(pf_rows)
    pf_curve = [pf[v] for v in (0.25, 0.5, 1.0)]
    checks = {
        "act>=act_no_emd": act >= no_emd,
        "ssda5>=ssda1": n_lt[5] >= n_lt[1],
        "pair_fraction non-decreasing": all(a <= b for a, b in zip(pf_curve, pf_curve[1:])),
    }
    ok = all(checks.values())
    detail = (
        f"act {act:.4f} vs act_no_emd {no_emd:.4f}; SSDA:1 {n_lt[1]:.4f}, SSDA:5 {n_lt[5]:.4f}; "
        f"pair_fraction 0.25/0.5/1.0 -> {' / '.join(f'{v:.4f}' for v in pf_curve)}; "
        + ", ".join(f"{k} {'ok' if v else 'violated'}" for k, v in checks.items())
    )
    announce(capsys, 6, ok, detail)
    assert ok


def test_criterion_7_consensus_grows(capsys, out_root, mode_table):
    base = mode_table[0]
    i_max = base.act.total_iterations
    early, late = [], []
    for r in range(SEEDS):
        report = load_report(out_root / "act" / f"report_{base.master_seed + r}.jsonl")
        both = {c["I"]: c["consensus"][0] for c in report.checkpoints}
        early.append(both[i_max // 10])
        late.append(both[i_max])
    ok = float(np.mean(late)) > float(np.mean(early))
    per_seed = sum(b > a for a, b in zip(early, late))
    announce(
        capsys,
        7,
        ok,
        f"'both confident' fraction at I={i_max // 10}: {np.mean(early):.4f}, at I={i_max}: {np.mean(late):.4f} "
        f"(5-seed mean; grew in {per_seed}/{SEEDS} seeds)",
    )
    assert ok


# ---------------------------------------------------------------------------
# 8. determinism across processes


def test_criterion_8_determinism(capsys, tmp_path):
    args = ["--set", "runs=2", "--set", "act.total_iterations=100", "--seed", "17"]
    for sub in ("a", "b"):
        proc = subprocess.run(
            [sys.executable, "-m", "actseg.harness.cli", "run", "--mode", "act", "--out", str(tmp_path / sub), *args],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0, proc.stderr
    names = ["report_17.jsonl", "report_18.jsonl", "summary.csv"]
    same = [(tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names]
    ok = all(same)
    announce(capsys, 8, ok, "two processes, " + ", ".join(f"{n} {'identical' if s else 'differs'}" for n, s in zip(names, same)))
    assert ok
