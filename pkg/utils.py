import hashlib
import os

import numpy as np
import pandas as pd


# Derive an independent sub-seed for one component of a run
def derive_seed(master_seed, component, client_id=None, round_index=None):
    """
    Split the master seed into a reproducible sub-seed.

    Parameters:
    - master_seed: RunManifest.master_seed
    - component: stream name, e.g. "noise", "stage2", "gmm"
    - client_id: client the stream belongs to (None for server-side streams)
    - round_index: communication round (None when not round-specific)
    """
    key = "|".join(str(part) for part in (master_seed, component, client_id, round_index))
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


# Format metric values for logs and CLI output
def format_metric(value):
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return "n/a"
    return f"{value:.4f}"


# Calculate percentage change
def calculate_percent_change(current, previous):
    if previous == 0:
        return float('inf') if current != 0 else 0.0
    return ((current - previous) / abs(previous)) * 100


# Calculate statistics for a numeric column
def calculate_statistics(df, column):
    values = pd.to_numeric(df[column], errors='coerce').dropna() if not df.empty else pd.Series(dtype=float)
    if values.empty:
        return {
            'mean': None,
            'median': None,
            'min': None,
            'max': None,
            'count': 0
        }

    return {
        'mean': float(values.mean()),
        'median': float(values.median()),
        'min': float(values.min()),
        'max': float(values.max()),
        'count': int(len(values))
    }


# Create a directory (and parents) if missing, return it
def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
