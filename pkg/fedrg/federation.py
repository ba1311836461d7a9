"""
Round orchestration: client sampling, Stage I contrastive pretraining,
Stage II detection plus robust training, and weighted aggregation.

Client-side geometric state (vMF mixture, class-to-geometry matrix B and
the noise absorption matrix T) lives in ClientState and never enters an
AggregationPayload.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from data_loader import augment_two_views, dirichlet_partition, generate_synthetic, load_csv_dataset, split_holdout
from fedrg.errors import ManifestError, RoundError, ValidationError
from fedrg.geometry_evidence import all_clean_partition, gmm_partition, run_detection, small_loss_scores
from fedrg.learner import (
    ALL_KEYS,
    ENCODER_KEYS,
    ModelParams,
    NoiseAbsorptionMatrix,
    contrastive_loss,
    encode,
    init_params,
    predict,
    predict_proba,
    sgd_step,
    total_loss,
)
from fedrg.metrics_report import MetricsRecord, classification_metrics, cra, detection_confusion
from fedrg.noise_model import corrupt_shards
from utils import derive_seed

logger = logging.getLogger(__name__)

DETECTORS = ("geometry", "small_loss", "none")


@dataclass(frozen=True)
class RoundConfig:
    total_rounds: int = 60
    stage1_rounds: int = 15
    local_epochs: int = 2
    clients_per_round: int = 10
    num_clusters: int = 10
    batch_size: int = 32
    lr: float = 0.05
    aggregate_absorption: bool = False
    detector: str = "geometry"
    shadow_small_loss: bool = True
    checkpoint_every: int = 0
    max_workers: int = 1

    def validate(self, num_clients=None, prefix="rounds"):
        if self.total_rounds < 0:
            raise ManifestError(f"{prefix}.total_rounds", f"must be >= 0 (got {self.total_rounds})")
        if not 0 <= self.stage1_rounds <= self.total_rounds:
            raise ManifestError(f"{prefix}.stage1_rounds", f"must be in [0, total_rounds={self.total_rounds}] (got {self.stage1_rounds})")
        if self.local_epochs < 0:
            raise ManifestError(f"{prefix}.local_epochs", f"must be >= 0 (got {self.local_epochs})")
        if self.clients_per_round < 1 or (num_clients is not None and self.clients_per_round > num_clients):
            raise ManifestError(f"{prefix}.clients_per_round", f"must be in [1, num_clients={num_clients}] (got {self.clients_per_round})")
        if self.num_clusters < 1:
            raise ManifestError(f"{prefix}.num_clusters", f"must be >= 1 (got {self.num_clusters})")
        if self.batch_size < 1:
            raise ManifestError(f"{prefix}.batch_size", f"must be >= 1 (got {self.batch_size})")
        if self.lr < 0:
            raise ManifestError(f"{prefix}.lr", f"must be >= 0 (got {self.lr})")
        if self.detector not in DETECTORS:
            raise ManifestError(f"{prefix}.detector", f"must be one of {list(DETECTORS)} (got {self.detector!r})")
        if self.checkpoint_every < 0:
            raise ManifestError(f"{prefix}.checkpoint_every", f"must be >= 0 (got {self.checkpoint_every})")
        if self.max_workers < 1:
            raise ManifestError(f"{prefix}.max_workers", f"must be >= 1 (got {self.max_workers})")


@dataclass
class ClientState:
    client_id: int
    shard: object
    absorption: NoiseAbsorptionMatrix
    vmf: Optional[object] = None
    geometry: Optional[object] = None
    last_partition: Optional[object] = None


@dataclass(frozen=True)
class GlobalModel:
    params: ModelParams
    round_index: int


@dataclass(frozen=True)
class AggregationPayload:
    """Everything a client sends to the server."""

    client_id: int
    num_samples: int
    params: ModelParams
    absorption: Optional[NoiseAbsorptionMatrix] = None


@dataclass(frozen=True)
class ClientResult:
    payload: AggregationPayload
    partition: Optional[object] = None
    small_loss_partition: Optional[object] = None
    em_iterations: int = 0
    vmf_fallback: bool = False


@dataclass(frozen=True, eq=False)
class Federation:
    """Prepared run: client states, ground truth and the held-out test set."""

    clients: list
    kernels: dict
    records: dict
    test_set: object
    num_classes: int
    initial: GlobalModel = field(repr=False, default=None)


class RunObserver:
    """Hooks called by run_experiment; the default does nothing."""

    def on_setup(self, federation):
        pass

    def on_aggregate(self, round_number, payloads, aggregated):
        pass

    def on_round(self, round_number, stage, results, federation, global_model, record):
        pass


def sample_clients(K, m, round_index, rng_seed):
    """Uniform sample of m client ids without replacement, sorted."""
    if not 1 <= m <= K:
        raise ValidationError(f"cannot sample {m} of {K} clients")
    rng = np.random.default_rng([int(rng_seed), int(round_index)])
    return sorted(int(k) for k in rng.choice(K, size=m, replace=False))


def aggregate(models, weights, keys=ALL_KEYS, base=None):
    """
    Weighted coordinate-wise mean of the given parameter groups.

    Parameters:
    - models: list of ModelParams
    - weights: non-negative weights, normalized internally
    - keys: parameter names to average
    - base: supplies the parameters outside `keys` (defaults to models[0])
    """
    models = list(models)
    weights = np.asarray(weights, dtype=float).reshape(-1)
    if not models or weights.shape[0] != len(models):
        raise ValidationError(f"{weights.shape[0]} weights for {len(models)} models")
    if np.any(weights < 0) or not weights.sum() > 0:
        raise ValidationError("aggregation weights must be non-negative with a positive sum")
    weights = weights / weights.sum()
    averaged = {}
    for key in keys:
        stack = [getattr(model, key) for model in models]
        if any(array.shape != stack[0].shape for array in stack):
            raise ValidationError(f"shape mismatch in parameter {key}: {[array.shape for array in stack]}")
        averaged[key] = sum(w * array for w, array in zip(weights, stack))
    return (base if base is not None else models[0]).with_values(**averaged)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[start:start + batch_size] for start in range(0, n, batch_size)]


def stage1_client_round(client, global_params, manifest, round_number):
    """Local contrastive epochs on unlabeled views; only encoder weights change."""
    view = client.shard.unlabeled_view()
    n = view.features.shape[0]
    if n == 0:
        logger.warning(f"Client {client.client_id} has an empty shard; skipping")
        return global_params
    rounds = manifest.rounds
    rng = np.random.default_rng(derive_seed(manifest.master_seed, "stage1", client.client_id, round_number))
    params = global_params
    for _ in range(rounds.local_epochs):
        for batch in _batches(n, rounds.batch_size, rng):
            view1, view2 = augment_two_views(view.features[batch], manifest.augmentation, int(rng.integers(2**63)))
            _, grads = contrastive_loss(view1, view2, params, manifest.loss)
            params, _ = sgd_step(params, client.absorption, grads, rounds.lr)
    return params


def _small_loss_partition(view, params, manifest, seed):
    scores = small_loss_scores(predict_proba(view.features, params, manifest.loss.epsilon_guard), view.labels)
    return gmm_partition(scores, manifest.gmm, seed)


def stage2_client_round(client, global_params, manifest, round_number, num_classes):
    """
    Detection then robust training on one client.

    Embeds the shard with the received model, refreshes the retained vMF
    mixture and B, splits the shard into clean/noisy, and runs local epochs
    of the combined SCE + forward-corrected objective.
    """
    view = client.shard.labeled_view()
    n = view.labels.size
    if n == 0:
        logger.warning(f"Client {client.client_id} has an empty shard; skipping")
        return global_params, ClientResult(AggregationPayload(client.client_id, 0, global_params), all_clean_partition(0))
    rounds = manifest.rounds
    loss_cfg = manifest.loss
    seed = manifest.master_seed
    cid = client.client_id
    rng = np.random.default_rng(derive_seed(seed, "stage2", cid, round_number))
    gmm_seed = derive_seed(seed, "gmm", cid, round_number)

    em_iterations, fallback, shadow = 0, False, None
    if rounds.detector == "geometry":
        z = encode(view.features, global_params, loss_cfg.epsilon_guard)
        view1, view2 = augment_two_views(view.features, manifest.augmentation, int(rng.integers(2**63)))
        views = (encode(view1, global_params, loss_cfg.epsilon_guard), encode(view2, global_params, loss_cfg.epsilon_guard))
        outcome = run_detection(
            z,
            views,
            view.labels,
            num_classes,
            rounds.num_clusters,
            previous_mixture=client.vmf,
            previous_geometry=client.geometry,
            vmf_cfg=manifest.vmf,
            tempering_cfg=manifest.tempering,
            evidence_cfg=manifest.evidence,
            gmm_cfg=manifest.gmm,
            em_seed=derive_seed(seed, "em", cid, round_number),
            gmm_seed=gmm_seed,
        )
        client.vmf, client.geometry = outcome.mixture, outcome.geometry
        partition, em_iterations, fallback = outcome.partition, outcome.em_iterations, outcome.vmf_fallback
        if rounds.shadow_small_loss:
            shadow = _small_loss_partition(view, global_params, manifest, gmm_seed)
    elif rounds.detector == "small_loss":
        partition = _small_loss_partition(view, global_params, manifest, gmm_seed)
        shadow = partition
    else:
        partition = all_clean_partition(n, manifest.gmm)
    client.last_partition = partition
    logger.debug(
        f"Client {cid} round {round_number}: noisy fraction {partition.noisy_fraction:.3f}, "
        f"degenerate={partition.degenerate}, vMF iterations={em_iterations}"
    )

    params, absorption = global_params, client.absorption
    noisy = partition.noisy_mask
    train_absorption = loss_cfg.lambda_n > 0
    for _ in range(rounds.local_epochs):
        for batch in _batches(n, rounds.batch_size, rng):
            _, grads, grad_T = total_loss(view.features[batch], view.labels[batch], noisy[batch], params, absorption, loss_cfg)
            params, absorption = sgd_step(params, absorption, grads, rounds.lr, grad_T if train_absorption else None)
    client.absorption = absorption

    payload = AggregationPayload(cid, n, params, absorption if rounds.aggregate_absorption else None)
    return params, ClientResult(payload, partition, shadow, em_iterations, fallback)


def prepare_federation(manifest):
    """Generate (or load) data, hold out the test set, partition and corrupt the shards."""
    data = manifest.data
    seed = manifest.master_seed
    if data.csv_path:
        dataset = load_csv_dataset(data.csv_path, data.label_column)
    else:
        dataset = generate_synthetic(
            data.num_classes,
            data.n_per_class + data.test_per_class,
            data.input_dim,
            data.class_separation,
            derive_seed(seed, "data"),
            sigma=data.class_sigma,
        )
    train, test = split_holdout(dataset, data.test_per_class, derive_seed(seed, "holdout"))
    shards = dirichlet_partition(train, data.num_clients, data.dirichlet_alpha, derive_seed(seed, "partition"))
    num_classes = dataset.num_classes
    corrupted = corrupt_shards(shards, manifest.noise, num_classes, lambda cid: derive_seed(seed, "noise", cid))

    clients = []
    kernels, records = {}, {}
    for shard in shards:
        kernel, record = corrupted[shard.client_id]
        kernels[shard.client_id] = kernel
        records[shard.client_id] = record
        clients.append(ClientState(shard.client_id, shard.with_observed(record.observed_labels), NoiseAbsorptionMatrix.initial(num_classes)))
    params = init_params(manifest.model, train.features.shape[1], num_classes, derive_seed(seed, "init"))
    return Federation(clients, kernels, records, test, num_classes, GlobalModel(params, 0))


def _evaluate(round_number, stage, params, federation, results, detector):
    test = federation.test_set
    accuracy, precision, fscore = classification_metrics(predict(test.features, params), test.labels, federation.num_classes)
    record = MetricsRecord(round_number, stage, accuracy, precision, fscore)
    if stage != "stage2" or detector == "none":
        return record

    # ground truth enters only here, through the corruption records
    truth = {cid: ~federation.records[cid].is_noisy_true for cid in federation.records}
    scored = [result for result in results if result.payload.num_samples > 0]
    if not scored:
        return record
    pred = np.concatenate([result.partition.clean_mask for result in scored])
    true = np.concatenate([truth[result.payload.client_id] for result in scored])
    confusion = detection_confusion(pred, true)
    record.cra = confusion.cra
    record.clean_recall = confusion.clean_recall
    record.noisy_recall = confusion.noisy_recall
    record.per_client_cra = {
        result.payload.client_id: cra(result.partition.clean_mask, truth[result.payload.client_id]) for result in scored
    }
    shadows = [result for result in scored if result.small_loss_partition is not None]
    if shadows:
        record.cra_small_loss = cra(
            np.concatenate([result.small_loss_partition.clean_mask for result in shadows]),
            np.concatenate([truth[result.payload.client_id] for result in shadows]),
        )
    return record


def run_experiment(manifest, observer=None):
    """
    Execute the configured rounds and yield one MetricsRecord per round.

    Record 0 evaluates the initial global model; record t follows round t.
    Rounds 1..stage1_rounds are Stage I, the remaining ones Stage II.
    """
    observer = observer or RunObserver()
    rounds = manifest.rounds
    federation = prepare_federation(manifest)
    observer.on_setup(federation)
    global_model = federation.initial
    initial = _evaluate(0, "init", global_model.params, federation, [], rounds.detector)
    observer.on_round(0, "init", [], federation, global_model, initial)
    yield initial

    by_id = {client.client_id: client for client in federation.clients}
    sampling_seed = derive_seed(manifest.master_seed, "sampling")
    for round_number in range(1, rounds.total_rounds + 1):
        stage = "stage1" if round_number <= rounds.stage1_rounds else "stage2"
        participants = sample_clients(len(federation.clients), rounds.clients_per_round, round_number, sampling_seed)
        logger.info(f"Round {round_number}/{rounds.total_rounds} ({stage}) with {len(participants)} clients")

        def work(cid, params=global_model.params, stage=stage, round_number=round_number):
            client = by_id[cid]
            try:
                if stage == "stage1":
                    updated = stage1_client_round(client, params, manifest, round_number)
                    return ClientResult(AggregationPayload(cid, client.shard.num_samples, updated))
                return stage2_client_round(client, params, manifest, round_number, federation.num_classes)[1]
            except Exception as exc:
                raise RoundError(round_number, cid, exc) from exc

        if rounds.max_workers > 1:
            with ThreadPoolExecutor(max_workers=rounds.max_workers) as pool:
                results = list(pool.map(work, participants))
        else:
            results = [work(cid) for cid in participants]

        payloads = [result.payload for result in results]
        try:
            keys = ENCODER_KEYS if stage == "stage1" else ALL_KEYS
            aggregated = aggregate(
                [payload.params for payload in payloads],
                [payload.num_samples for payload in payloads],
                keys=keys,
                base=global_model.params,
            )
        except Exception as exc:
            raise RoundError(round_number, None, exc) from exc
        observer.on_aggregate(round_number, payloads, aggregated)

        shared = [payload for payload in payloads if payload.absorption is not None]
        if shared:
            logits = sum(p.num_samples * p.absorption.logits for p in shared) / sum(p.num_samples for p in shared)
            for client in federation.clients:
                client.absorption = NoiseAbsorptionMatrix(logits.copy())

        global_model = GlobalModel(aggregated, round_number)
        record = _evaluate(round_number, stage, aggregated, federation, results, rounds.detector)
        observer.on_round(round_number, stage, results, federation, global_model, record)
        yield record
