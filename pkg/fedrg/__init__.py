"""FedRG: federated learning under noisy labels with spherical geometry evidence."""
