"""Ablation variants, paired base-vs-variant comparison and parameter sweeps."""

import logging
import os

import pandas as pd

from fedrg.artifacts import execute_run
from fedrg.errors import ManifestError
from fedrg.metrics_report import records_frame
from manifest import override, write_manifest
from utils import calculate_percent_change, calculate_statistics, ensure_dir

logger = logging.getLogger(__name__)

# Each variant is a list of dotted-field rewrites applied to the base manifest
ABLATIONS = {
    "no_absorption": [("loss.lambda_n", 0.0)],
    "no_stage1": [("rounds.stage1_rounds", 0)],
    "ce_instead_of_sce": [("loss.sce_alpha", 1.0), ("loss.sce_beta", 0.0)],
    "aggregate_T": [("rounds.aggregate_absorption", True)],
    "loss_based_detector": [("rounds.detector", "small_loss")],
    "fedavg_ce": [
        ("rounds.detector", "none"),
        ("loss.lambda_n", 0.0),
        ("loss.sce_alpha", 1.0),
        ("loss.sce_beta", 0.0),
    ],
}

COMPARED_METRICS = ["accuracy", "macro_precision", "macro_fscore", "cra", "cra_small_loss"]


def apply_ablation(manifest, variant):
    if variant not in ABLATIONS:
        raise ManifestError("variant", f"must be one of {sorted(ABLATIONS)} (got {variant!r})")
    for dotted, value in ABLATIONS[variant]:
        manifest = override(manifest, dotted, value)
    return manifest


def paired_comparison(base_records, variant_records, variant):
    """
    Round-by-round comparison of two runs made under the same seeds.

    Parameters:
    - base_records: MetricsRecord list of the base run
    - variant_records: MetricsRecord list of the ablated run
    - variant: ablation name written into every row
    """
    base = records_frame(base_records).set_index("round")
    other = records_frame(variant_records).set_index("round")
    rounds = base.index.intersection(other.index)
    comparison = pd.DataFrame({"round": rounds, "variant": variant, "stage": base.loc[rounds, "stage"].to_numpy()})
    for metric in COMPARED_METRICS:
        base_values = pd.to_numeric(base.loc[rounds, metric], errors="coerce").to_numpy()
        other_values = pd.to_numeric(other.loc[rounds, metric], errors="coerce").to_numpy()
        comparison[f"base_{metric}"] = base_values
        comparison[f"variant_{metric}"] = other_values
        comparison[f"{metric}_delta"] = other_values - base_values
    comparison["accuracy_pct_change"] = [
        calculate_percent_change(v, b) for v, b in zip(comparison["variant_accuracy"], comparison["base_accuracy"])
    ]
    return comparison


def run_ablation(manifest, variant, output_dir):
    """Run base and variant into output_dir/base and output_dir/<variant>; write comparison.csv."""
    ablated = apply_ablation(manifest, variant)
    base_dir = os.path.join(output_dir, "base")
    variant_dir = os.path.join(output_dir, variant)
    logger.info(f"Running base configuration into {base_dir}")
    base_records, _ = execute_run(override(manifest, "output_dir", base_dir), write_manifest_copy=write_manifest)
    logger.info(f"Running variant {variant} into {variant_dir}")
    variant_records, _ = execute_run(override(ablated, "output_dir", variant_dir), write_manifest_copy=write_manifest)
    comparison = paired_comparison(base_records, variant_records, variant)
    comparison.to_csv(os.path.join(output_dir, "comparison.csv"), index=False, float_format="%.8f")
    return comparison


def run_sweep(manifest, param, values, output_dir):
    """One run per value of a dotted manifest field; final metrics land in sweep.csv."""
    rows = []
    for value in values:
        run_dir = os.path.join(output_dir, f"{param}={value}")
        swept = override(override(manifest, param, value), "output_dir", run_dir)
        records, summary = execute_run(swept, write_manifest_copy=write_manifest)
        frame = records_frame(records)
        final = records[-1]
        rows.append({
            "param": param,
            "value": value,
            "final_accuracy": final.accuracy,
            "final_macro_fscore": final.macro_fscore,
            "best_accuracy": summary.get("best_accuracy"),
            "mean_cra": calculate_statistics(frame, "cra")["mean"],
            "mean_cra_small_loss": calculate_statistics(frame, "cra_small_loss")["mean"],
        })
    sweep = pd.DataFrame(rows)
    sweep.to_csv(os.path.join(ensure_dir(output_dir), "sweep.csv"), index=False, float_format="%.8f")
    return sweep
