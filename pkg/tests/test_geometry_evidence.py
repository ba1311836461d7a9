import numpy as np
import pytest

from fedrg.directional_stats import EmConfig, normalize_rows
from fedrg.errors import ManifestError, ValidationError
from fedrg.geometry_evidence import (
    ClassGeometryMatrix,
    EvidenceConfig,
    GmmConfig,
    cleanliness_scores,
    gmm_partition,
    run_detection,
    small_loss_scores,
    update_class_geometry,
)
from fedrg.metrics_report import cra
from fedrg.noise_model import build_symmetric_kernel, inject_noise


def oracle_embeddings(rng, num_classes=4, n_per_class=100, d=16, sigma=0.05):
    labels = np.repeat(np.arange(num_classes), n_per_class)
    anchors = np.eye(d)[:num_classes]
    base = anchors[labels]
    z = normalize_rows(base + sigma * rng.standard_normal(base.shape))
    views = (
        normalize_rows(z + sigma * rng.standard_normal(z.shape)),
        normalize_rows(z + sigma * rng.standard_normal(z.shape)),
    )
    return z, views, labels


def detect_rounds(z, views, observed, num_classes, rounds, seed):
    mixture, geometry, outcome = None, None, None
    for t in range(rounds):
        outcome = run_detection(
            z,
            views,
            observed,
            num_classes,
            num_classes,
            previous_mixture=mixture,
            previous_geometry=geometry,
            em_seed=seed * 100 + t,
            gmm_seed=seed * 100 + t,
        )
        mixture, geometry = outcome.mixture, outcome.geometry
    return outcome


class TestClassGeometry:
    """Dirichlet-smoothed class-to-cluster matrix."""

    def test_single_sample_puts_mass_on_its_cluster(self):
        B = update_class_geometry(np.array([[0.0, 1.0, 0.0]]), [0], 2, 1e-9)
        np.testing.assert_allclose(B.rows[0], [1.0, 0.0], atol=1e-8)

    def test_empty_class_row_is_uniform(self):
        B = update_class_geometry(np.array([[0.1, 0.6, 0.3]]), [0], 3, 0.5)
        np.testing.assert_allclose(B.rows[1], [0.5, 0.5])
        np.testing.assert_allclose(B.rows[2], [0.5, 0.5])

    def test_hand_arithmetic(self):
        resp = np.array([[0.2, 0.6, 0.2], [0.2, 0.2, 0.6]])
        B = update_class_geometry(resp, [0, 0], 1, 0.1)
        np.testing.assert_allclose(B.rows[0], [0.5, 0.5])

    def test_rejects_non_positive_eta(self):
        with pytest.raises(ValidationError):
            update_class_geometry(np.array([[0.0, 1.0]]), [0], 1, 0.0)

    def test_property_rows_are_distributions(self):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            n = int(rng.integers(0, 30))
            C = int(rng.integers(1, 6))
            G = int(rng.integers(1, 8))
            resp = rng.dirichlet(np.ones(G + 1), size=n) if n else np.zeros((0, G + 1))
            labels = rng.integers(0, C, size=n)
            B = update_class_geometry(resp, labels, C, float(rng.uniform(1e-4, 1.0)))
            assert B.rows.shape == (C, G)
            assert np.all(B.rows > 0)
            np.testing.assert_allclose(B.rows.sum(axis=1), 1.0, atol=1e-9)

    def test_uniform_start(self):
        B = ClassGeometryMatrix.uniform(3, 4, 1e-2)
        np.testing.assert_allclose(B.rows, 0.25)

    def test_config_validation(self):
        with pytest.raises(ManifestError):
            EvidenceConfig(eta=0.0).validate()


class TestCleanlinessScores:
    """Inner product of B rows with semantic responsibilities."""

    def test_examples(self):
        B = ClassGeometryMatrix(np.array([[1.0, 0.0], [0.7, 0.3]]), 1e-2)
        resp = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.25, 0.5, 0.25]])
        np.testing.assert_allclose(cleanliness_scores(resp, [0, 0, 1], B), [1.0, 0.0, 0.425])

    def test_background_mass_lowers_the_score(self):
        B = ClassGeometryMatrix(np.array([[0.6, 0.4]]), 1e-2)
        before = cleanliness_scores(np.array([[0.2, 0.5, 0.3]]), [0], B)[0]
        after = cleanliness_scores(np.array([[0.6, 0.25, 0.15]]), [0], B)[0]
        assert after < before
        assert after == pytest.approx(before / 2)

    def test_shape_mismatch(self):
        B = ClassGeometryMatrix.uniform(2, 3, 1e-2)
        with pytest.raises(ValidationError):
            cleanliness_scores(np.array([[0.5, 0.5]]), [0], B)

    def test_small_loss_scores(self):
        probs = np.array([[1.0, 0.0], [0.5, 0.5], [0.1, 0.9]])
        scores = small_loss_scores(probs, [0, 0, 0])
        assert scores[0] == pytest.approx(1.0)
        assert scores[2] == pytest.approx(0.0)
        assert 0.0 < scores[1] < 1.0


class TestGmmPartition:
    """Two-component split of 1 - score."""

    def planted(self, rng):
        x = np.concatenate([rng.normal(0.1, 0.02, 60), rng.normal(0.9, 0.02, 40)])
        return 1.0 - x

    def test_recovers_planted_components(self):
        rng = np.random.default_rng(0)
        result = gmm_partition(self.planted(rng), GmmConfig(), rng_seed=0)
        assert result.gmm_means[0] == pytest.approx(0.1, abs=0.05)
        assert result.gmm_means[1] == pytest.approx(0.9, abs=0.05)
        assert np.array_equal(result.clean_mask, np.arange(100) < 60)
        assert sum(result.gmm_weights) == pytest.approx(1.0, abs=1e-9)
        assert not result.degenerate

    def test_labeling_does_not_depend_on_initialization(self):
        scores = self.planted(np.random.default_rng(1))
        masks = [gmm_partition(scores, GmmConfig(), rng_seed=seed).clean_mask for seed in range(5)]
        for mask in masks[1:]:
            assert np.array_equal(mask, masks[0])

    def test_identical_scores_are_degenerate(self):
        result = gmm_partition(np.ones(10))
        assert result.degenerate
        assert result.clean_mask.all()

    def test_two_samples(self):
        result = gmm_partition(np.array([1.0, 0.0]))
        assert result.clean_mask.tolist() == [True, False]

    def test_close_components_are_degenerate(self):
        rng = np.random.default_rng(2)
        result = gmm_partition(1.0 - rng.normal(0.05, 0.01, 200))
        assert result.degenerate
        assert result.clean_mask.all()

    def test_empty_input(self):
        with pytest.raises(ValidationError):
            gmm_partition(np.array([]))

    def test_config_validation(self):
        with pytest.raises(ManifestError):
            GmmConfig(threshold=1.0).validate()


class TestDetectionWithOracleGeometry:
    """Geometry pipeline on class-pure embeddings."""

    @pytest.mark.parametrize("seed", range(5))
    def test_symmetric_noise_is_found(self, seed):
        rng = np.random.default_rng(seed)
        z, views, labels = oracle_embeddings(rng)
        record = inject_noise(labels, build_symmetric_kernel(range(4), 0.4), rng_seed=seed)
        outcome = detect_rounds(z, views, record.observed_labels, 4, rounds=3, seed=seed)
        score = cra(outcome.partition.clean_mask, ~record.is_noisy_true)
        assert score > 0.9

    @pytest.mark.parametrize("seed", range(5))
    def test_no_noise_keeps_nearly_everything(self, seed):
        rng = np.random.default_rng(seed)
        z, views, labels = oracle_embeddings(rng)
        outcome = detect_rounds(z, views, labels, 4, rounds=3, seed=seed)
        assert outcome.partition.noisy_fraction < 0.1

    def test_first_pass_starts_from_uniform_geometry(self):
        rng = np.random.default_rng(9)
        z, views, labels = oracle_embeddings(rng)
        outcome = run_detection(z, views, labels, 4, 4)
        assert outcome.partition.clean_mask.all()
        assert outcome.geometry.rows.shape == (4, 4)
        assert not outcome.vmf_fallback

    def test_fit_failure_falls_back(self):
        rng = np.random.default_rng(4)
        z, views, labels = oracle_embeddings(rng, n_per_class=2)
        outcome = run_detection(z, views, labels, 4, 20, vmf_cfg=EmConfig())
        assert outcome.vmf_fallback
        assert outcome.mixture is None
        assert outcome.partition.clean_mask.all()
