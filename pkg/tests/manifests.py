import copy
import json

from manifest import manifest_from_dict

SMALL_RUN = {
    "data": {
        "num_classes": 3,
        "n_per_class": 30,
        "test_per_class": 10,
        "input_dim": 4,
        "class_separation": 5.0,
        "num_clients": 4,
        "dirichlet_alpha": 1.0,
    },
    "model": {"hidden_dim": 8, "embed_dim": 4},
    "noise": {"flavor": "symmetric", "pattern": "globalized", "rate": 0.3},
    "rounds": {
        "total_rounds": 4,
        "stage1_rounds": 2,
        "local_epochs": 1,
        "clients_per_round": 3,
        "num_clusters": 3,
        "batch_size": 16,
        "lr": 0.05,
    },
    "vmf": {"max_iters": 10},
    "master_seed": 7,
}


def small_payload(**sections):
    """SMALL_RUN with per-section field updates, e.g. rounds={"total_rounds": 0}."""
    payload = copy.deepcopy(SMALL_RUN)
    for name, values in sections.items():
        if isinstance(values, dict):
            payload.setdefault(name, {}).update(values)
        else:
            payload[name] = values
    return payload


def small_manifest(**sections):
    return manifest_from_dict(small_payload(**sections))


def write_payload(path, payload):
    path.write_text(json.dumps(payload))
    return str(path)
