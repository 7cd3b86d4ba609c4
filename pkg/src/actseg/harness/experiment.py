"""Seeded multi-run experiments for each baseline mode, plus the two sweeps."""

import dataclasses
import logging
from pathlib import Path

import yaml

from .. import segmentor as seg
from ..act import train, train_single
from ..datagen import load_dataset, make_splits
from ..metrics import aggregate
from .config import ConfigError
from .reports import report_path, save_report, write_csv

log = logging.getLogger(__name__)

SWEEP_AXES = ("n_lt", "pair_fraction")
SWEEP_COLUMNS = ("axis", "value", "mode", "metric", "class", "mean", "std")


def run_mode(mode, splits, act_config, seed):
    """Train one seeded run of ``mode``.

    Returns ``(params, report)`` where ``params`` maps segmentor names to
    their final parameters.  Each mode touches only the data it is allowed
    to see: source_only never reads target labels, target_only_ssl never
    reads source data, and only joint reads the unlabeled-target labels.
    """
    C = splits.num_classes
    if mode in ("act", "act_no_emd"):
        cfg = dataclasses.replace(act_config, use_emd=(mode == "act"))
        state, report = train(splits, cfg, seed=seed)
        return {"phi": state.phi, "theta": state.theta}, report

    test = splits.target_test
    if mode == "source_only":
        labeled, unlabeled, name = splits.source_labeled, None, "theta"
    elif mode == "target_only_ssl":
        labeled, unlabeled, name = splits.target_labeled, splits.target_unlabeled, "theta"
    elif mode == "uda_branch":
        labeled, unlabeled, name = splits.source_labeled, splits.target_unlabeled, "phi"
    elif mode == "joint":
        revealed = splits.target_unlabeled_labels
        if revealed is None:
            raise ConfigError("joint mode needs labels for the unlabeled target images")
        labeled = (
            list(splits.source_labeled)
            + list(splits.target_labeled)
            + list(zip(splits.target_unlabeled, revealed))
        )
        unlabeled, name = None, "theta"
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    params, report = train_single(labeled, unlabeled, act_config, seed, C, test, mode)
    return {name: params}, report


def build_splits(config, seed):
    if config.manifest:
        return load_dataset(config.manifest, config.data.num_classes)
    return make_splits(config.data, seed)


def run_experiment(config, output_dir=None, splits_factory=None):
    """Run ``config.runs`` seeded runs and write reports, snapshots and summary.csv.

    Run ``r`` uses seed ``master_seed + r`` for both data generation and
    training.  Returns the aggregate rows.
    """
    out = Path(output_dir if output_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits_factory = splits_factory or build_splits
    base = config.to_dict()
    base.pop("output_dir")
    (out / "config.yaml").write_text(yaml.safe_dump(base, sort_keys=True), encoding="utf-8")

    reports = []
    for r in range(config.runs):
        seed = config.master_seed + r
        splits = splits_factory(config, seed)
        if not splits.target_test:
            raise ConfigError("the target test set is empty")
        log.info("mode %s seed %d: training", config.mode, seed)
        params, report = run_mode(config.mode, splits, config.act, seed)
        report.config = {**base, "seed": seed}
        save_report(report, report_path(out, seed))
        for name, p in params.items():
            seg.save_params(p, out / f"params_{seed}_{name}.bin")
        reports.append(report)
        log.info("mode %s seed %d: whole DSC %.4f", config.mode, seed, report.metric())
    rows = aggregate(reports)
    write_csv(rows, out / "summary.csv")
    return rows


def _sweep_config(config, axis, value, values):
    if axis == "n_lt":
        if not float(value).is_integer() or value < 1:
            raise ConfigError(f"invalid n_lt value {value!r}: must be an integer >= 1")
        if config.manifest:
            raise ConfigError("the n_lt sweep needs generated data, not a manifest")
        # every point shares one source pool large enough for the largest N^lt
        n_source = max(config.data.n_source, 10 * int(max(values)))
        data = dataclasses.replace(config.data, n_target_labeled=int(value), n_source=n_source)
        return config.replace(data=data)
    if axis == "pair_fraction":
        if not 0.0 < value <= 1.0:
            raise ConfigError(f"invalid pair_fraction value {value!r}: must lie in (0, 1]")
        return config.replace(act=dataclasses.replace(config.act, pair_fraction=float(value)))
    raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {', '.join(SWEEP_AXES)}")


def parse_values(axis, text):
    items = [v.strip() for v in str(text).split(",") if v.strip()]
    if not items:
        raise ConfigError("sweep needs at least one value")
    out = []
    for v in items:
        try:
            out.append(int(v) if axis == "n_lt" else float(v))
        except ValueError:
            raise ConfigError(f"invalid {axis} value {v!r}") from None
    return out


def sweep(config, axis, values, output_dir=None, splits_factory=None):
    """Run the experiment once per axis value and write ``sweep_<axis>.csv``."""
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    configs = [_sweep_config(config, axis, v, values) for v in values]
    out = Path(output_dir if output_dir is not None else config.output_dir)
    rows = []
    for value, cfg in zip(values, configs):
        sub = out / f"{axis}_{value}"
        for row in run_experiment(cfg, sub, splits_factory):
            rows.append({"axis": axis, "value": value, **row})
    write_csv(rows, out / f"sweep_{axis}.csv", SWEEP_COLUMNS)
    return rows
