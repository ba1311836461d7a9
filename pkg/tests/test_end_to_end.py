import numpy as np
import pytest

from fedrg.comparing import apply_ablation
from fedrg.federation import run_experiment
from manifest import manifest_from_dict

SEEDS = (0, 1, 2)


def desk_manifest(seed):
    return manifest_from_dict({
        "data": {"num_classes": 4, "input_dim": 16, "num_clients": 5, "dirichlet_alpha": 0.1},
        "noise": {"flavor": "symmetric", "pattern": "globalized", "rate": 0.4},
        "rounds": {"total_rounds": 60, "stage1_rounds": 15, "clients_per_round": 5},
        "master_seed": seed,
    })


@pytest.fixture(scope="module")
def desk_runs():
    results = {}
    for seed in SEEDS:
        manifest = desk_manifest(seed)
        results[seed] = {
            "full": list(run_experiment(manifest)),
            "fedavg_ce": list(run_experiment(apply_ablation(manifest, "fedavg_ce"))),
        }
    return results


@pytest.mark.slow
class TestDeskScaleComparison:
    """Full pipeline against its ablations on the synthetic benchmark."""

    def test_beats_plain_fedavg_on_every_seed(self, desk_runs):
        for seed in SEEDS:
            full, plain = desk_runs[seed]["full"][-1].accuracy, desk_runs[seed]["fedavg_ce"][-1].accuracy
            assert full > plain, (seed, full, plain)

    def test_geometry_detector_beats_small_loss(self, desk_runs):
        geometry, small_loss = [], []
        for seed in SEEDS:
            stage2 = [r for r in desk_runs[seed]["full"] if r.stage == "stage2"]
            geometry.extend(r.cra for r in stage2)
            small_loss.extend(r.cra_small_loss for r in stage2)
        assert np.mean(geometry) > np.mean(small_loss), (np.mean(geometry), np.mean(small_loss))
