"""Run directory layout and the observer that fills it."""

import json
import logging
import os

import pandas as pd

from data_loader import shards_frame
from fedrg.federation import RunObserver, run_experiment
from fedrg.metrics_report import append_metrics_row, summarize_run
from utils import ensure_dir

logger = logging.getLogger(__name__)


def _write_json(payload, path):
    with open(path, 'w') as file:
        json.dump(payload, file, indent=2, sort_keys=True)


class RunWriter(RunObserver):
    """
    Writes every export of one run under `output_dir`:

    metrics.csv, summary.json, shards.csv, kernels/, corruption/,
    partitions/, absorption/ and checkpoints/.
    """

    def __init__(self, output_dir, checkpoint_every=0):
        self.output_dir = ensure_dir(output_dir)
        self.checkpoint_every = checkpoint_every
        self.records = []

    def path(self, *parts):
        if len(parts) > 1:
            ensure_dir(os.path.join(self.output_dir, *parts[:-1]))
        return os.path.join(self.output_dir, *parts)

    def on_setup(self, federation):
        shards_frame([client.shard for client in federation.clients]).to_csv(self.path("shards.csv"), index=False, float_format="%.8f")
        for client in federation.clients:
            cid = client.client_id
            _write_json(federation.kernels[cid].to_dict(), self.path("kernels", f"client_{cid:02d}.json"))
            record = federation.records[cid]
            record.to_frame(client.shard.sample_ids).to_csv(self.path("corruption", f"client_{cid:02d}.csv"), index=False)

    def on_round(self, round_number, stage, results, federation, global_model, record):
        self.records.append(record)
        append_metrics_row(record, self.path("metrics.csv"), start=len(self.records) == 1)
        by_id = {client.client_id: client for client in federation.clients}
        for result in results:
            cid = result.payload.client_id
            client = by_id[cid]
            if result.partition is not None and result.payload.num_samples > 0:
                frame = pd.DataFrame({
                    "sample_id": client.shard.sample_ids,
                    "p_clean": result.partition.clean_posterior,
                    "is_clean_pred": result.partition.clean_mask.astype(int),
                    "is_clean_true": (~federation.records[cid].is_noisy_true).astype(int),
                })
                frame.to_csv(self.path("partitions", f"round_{round_number:03d}_client_{cid:02d}.csv"), index=False, float_format="%.8f")
            if stage == "stage2":
                frame = pd.DataFrame(client.absorption.effective, columns=[f"obs_{c}" for c in range(federation.num_classes)])
                frame.insert(0, "true_class", range(federation.num_classes))
                frame.to_csv(self.path("absorption", f"round_{round_number:03d}_client_{cid:02d}.csv"), index=False, float_format="%.8f")
        if self.checkpoint_every and round_number > 0 and round_number % self.checkpoint_every == 0:
            self.write_checkpoint(round_number, federation, global_model)

    def write_checkpoint(self, round_number, federation, global_model):
        payload = {
            "round": round_number,
            "global": global_model.params.to_dict(),
            "clients": {
                str(client.client_id): {
                    "vmf": client.vmf.to_dict() if client.vmf is not None else None,
                    "geometry": client.geometry.to_dict() if client.geometry is not None else None,
                    "absorption": client.absorption.to_dict(),
                    "partition": client.last_partition.to_dict() if client.last_partition is not None else None,
                }
                for client in federation.clients
            },
        }
        _write_json(payload, self.path("checkpoints", f"round_{round_number:03d}.json"))
        logger.debug(f"Checkpoint written for round {round_number}")

    def finish(self):
        summary = summarize_run(self.records)
        _write_json(summary, self.path("summary.json"))
        return summary


def execute_run(manifest, output_dir=None, write_manifest_copy=None):
    """
    Run one experiment and write its run directory.

    Parameters:
    - manifest: validated RunManifest
    - output_dir: overrides manifest.output_dir
    - write_manifest_copy: callable(manifest, path) storing the resolved manifest
    """
    output_dir = output_dir or manifest.output_dir
    writer = RunWriter(output_dir, manifest.rounds.checkpoint_every)
    if write_manifest_copy is not None:
        write_manifest_copy(manifest, writer.path("manifest.resolved.json"))
    for _ in run_experiment(manifest, writer):
        pass
    summary = writer.finish()
    return writer.records, summary
