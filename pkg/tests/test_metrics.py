"""Evaluation metrics: accuracy, retrieval, collapse, noise, comm cost."""

import math
from fractions import Fraction

import numpy as np
import pytest

from fedss.data import Dataset
from fedss.errors import (
    ConfigurationError,
    ContractViolationError,
    DegenerateInputError,
)
from fedss.federation import ClientDataset, init_rng
from fedss.metrics import (
    NoiseCurvePoint,
    RetrievalIndex,
    average_precision_at_r,
    client_confusion_matrix,
    collapse_score,
    column_concentration,
    comm_cost_report,
    diagonal_fraction,
    embed,
    gradient_noise,
    map_at_r,
    noise_curve,
    predict_logits,
    top1_accuracy,
    write_noise_csv,
)
from fedss.model import ModelConfig, ModelParams, identity_extractor, init_model


def center_model(centers):
    """Identity extractor with one classifier column per class center."""
    centers = np.asarray(centers, dtype=np.float64)
    return ModelParams(phi=identity_extractor(centers.shape[1]), classifier=centers.T)


@pytest.fixture
def blob_data():
    """3 tight blobs around orthogonal unit centers in 4-D."""
    rng = np.random.default_rng(8)
    centers = np.eye(4)[:3]
    X = np.repeat(centers, 10, axis=0) + 0.02 * rng.normal(size=(30, 4))
    y = np.repeat(np.arange(3), 10)
    return Dataset(X=X, y=y, n_classes=3), centers


# --- accuracy -------------------------------------------------------------------


def test_top1_perfect_on_separable_blobs(blob_data):
    data, centers = blob_data
    assert top1_accuracy(center_model(centers), data) == 1.0


def test_top1_empty_dataset_rejected(blob_data):
    _, centers = blob_data
    empty = Dataset(X=np.zeros((0, 4)), y=np.zeros(0, dtype=int), n_classes=3)
    with pytest.raises(DegenerateInputError):
        top1_accuracy(center_model(centers), empty)


def test_top1_ties_resolve_to_lowest_class_id():
    centers = np.array([[1.0, 0.0], [1.0, 0.0]])  # identical columns
    data = Dataset(X=np.array([[1.0, 0.0]]), y=np.array([1]), n_classes=2)
    assert top1_accuracy(center_model(centers), data) == 0.0


def test_predict_logits_shape(blob_data):
    data, centers = blob_data
    logits = predict_logits(center_model(centers), data.X)
    assert logits.shape == (30, 3)


def test_embed_rows_unit_norm(blob_data):
    data, centers = blob_data
    E = embed(center_model(centers), data.X)
    np.testing.assert_allclose(np.linalg.norm(E, axis=1), 1.0, atol=1e-12)


# --- retrieval ---------------------------------------------------------------------


def test_average_precision_hand_case_five_ninths():
    got = average_precision_at_r([True, False, True])
    assert got == pytest.approx(5.0 / 9.0, abs=1e-15)


def test_average_precision_extremes():
    assert average_precision_at_r([True, True, True]) == 1.0
    assert average_precision_at_r([False, False]) == 0.0
    with pytest.raises(ContractViolationError):
        average_precision_at_r([])


def test_retrieval_index_requires_unit_norm():
    with pytest.raises(ContractViolationError):
        RetrievalIndex(embeddings=np.ones((2, 2)), labels=np.array([0, 1]))


def test_map_at_r_all_neighbors_same_class():
    base = np.eye(3)
    E = np.repeat(base, 4, axis=0)
    labels = np.repeat(np.arange(3), 4)
    index = RetrievalIndex(embeddings=E, labels=labels)
    assert map_at_r(index, R=3) == 1.0


def test_map_at_r_no_neighbor_same_class():
    E = np.eye(4)
    index = RetrievalIndex(embeddings=E, labels=np.arange(4))
    assert map_at_r(index, R=3) == 0.0


def test_map_at_r_validation():
    E = np.eye(3)
    index = RetrievalIndex(embeddings=E, labels=np.arange(3))
    with pytest.raises(ContractViolationError):
        map_at_r(index, R=0)
    with pytest.raises(ContractViolationError):
        map_at_r(index, R=3)  # needs more than R items


def brute_force_map_at_r(E, labels, R):
    """Independent enumeration with exact rational per-query precision."""
    n = len(labels)
    scores = []
    for i in range(n):
        sims = [(float(E[i] @ E[j]), j) for j in range(n) if j != i]
        sims.sort(key=lambda t: (-t[0], t[1]))
        total = Fraction(0)
        hits = 0
        for rank, (_, j) in enumerate(sims[:R], start=1):
            if labels[j] == labels[i]:
                hits += 1
                total += Fraction(hits, rank)
        scores.append(float(total / R))
    return math.fsum(scores) / n


def test_map_at_r_matches_brute_force(rng):
    E = rng.normal(size=(40, 6))
    E /= np.linalg.norm(E, axis=1, keepdims=True)
    labels = rng.integers(0, 5, size=40)
    index = RetrievalIndex(embeddings=E, labels=labels)
    for R in (1, 3, 7):
        got = map_at_r(index, R)
        want = brute_force_map_at_r(E, labels, R)
        assert got == pytest.approx(want, abs=1e-12)


# --- confusion and collapse -----------------------------------------------------------


def test_confusion_matrix_diagonal_for_perfect_model(blob_data):
    data, centers = blob_data
    client = ClientDataset(X=data.X, y=data.y, client_id=0)
    matrix = client_confusion_matrix(center_model(centers), client)
    np.testing.assert_array_equal(matrix, np.diag([10, 10, 10]))
    assert diagonal_fraction(matrix) == 1.0


def test_confusion_matrix_restricted_to_client_columns(blob_data):
    """Predictions use only the client's own columns even when another
    class vector fits better."""
    data, centers = blob_data
    wide = np.vstack([centers, [0.0, 0.0, 0.0, 1.0]])
    only_two = data.y < 2
    client = ClientDataset(X=data.X[only_two], y=data.y[only_two], client_id=0)
    matrix = client_confusion_matrix(center_model(wide), client)
    assert matrix.shape == (2, 2)
    assert matrix.sum() == 20


def test_column_concentration_extremes():
    assert column_concentration(np.array([[5, 0], [5, 0]])) == 1.0
    assert column_concentration(np.diag([5, 5])) == 0.5
    with pytest.raises(DegenerateInputError):
        column_concentration(np.zeros((2, 2)))


def test_collapse_score_identical_columns():
    W = np.tile(np.array([[1.0], [2.0]]), (1, 3))
    assert collapse_score(W, [0, 1, 2]) == pytest.approx(1.0, abs=1e-12)


def test_collapse_score_orthogonal_columns():
    assert collapse_score(np.eye(3), [0, 1, 2]) == pytest.approx(0.0, abs=1e-12)


def test_collapse_score_validation():
    with pytest.raises(DegenerateInputError):
        collapse_score(np.eye(3), [1])
    with pytest.raises(ContractViolationError):
        collapse_score(np.eye(3), [1, 1])


# --- gradient noise --------------------------------------------------------------------


@pytest.fixture
def noise_setup(rng):
    config = ModelConfig(input_dim=5, hidden_dims=(8,), embedding_dim=6, n_classes=10)
    model = init_model(config, init_rng(3))
    X = rng.normal(size=(12, 5))
    y = rng.integers(0, 3, size=12)  # positives {0,1,2}, pool size 7
    return model, Dataset(X=X, y=y, n_classes=10)


def test_noise_zero_at_full_pool(noise_setup):
    model, batch = noise_setup
    point = gradient_noise(model, batch, m=7, clients=2, replicates=30, seed=0)
    assert point.noise == 0.0
    assert point.std == 0.0
    assert point.l2 == 0.0


def test_noise_positive_for_small_m(noise_setup):
    model, batch = noise_setup
    point = gradient_noise(model, batch, m=2, clients=2, replicates=30, seed=0)
    assert point.noise > 0.0
    assert point.replicates == 30


def test_noise_curve_orders_points(noise_setup):
    model, batch = noise_setup
    points = noise_curve(model, batch, ms=[2, 7], clients=2, replicates=30, seed=0)
    assert [p.m for p in points] == [2, 7]
    assert points[1].noise == 0.0


def test_noise_validation(noise_setup):
    model, batch = noise_setup
    with pytest.raises(ConfigurationError):
        gradient_noise(model, batch, m=8, clients=2, replicates=30)  # m > pool
    with pytest.raises(ConfigurationError):
        gradient_noise(model, batch, m=2, clients=2, replicates=10)
    with pytest.raises(ConfigurationError):
        gradient_noise(model, batch, m=2, clients=0, replicates=30)


def test_noise_point_validation():
    with pytest.raises(ContractViolationError):
        NoiseCurvePoint(m=-1, noise=0.0, replicates=30)
    with pytest.raises(ContractViolationError):
        NoiseCurvePoint(m=1, noise=-0.5, replicates=30)
    with pytest.raises(ContractViolationError):
        NoiseCurvePoint(m=1, noise=0.0, replicates=5)


def test_write_noise_csv_layout(tmp_path):
    points = [
        NoiseCurvePoint(m=2, noise=0.5, replicates=30, std=0.1),
        NoiseCurvePoint(m=4, noise=0.25, replicates=30, std=0.05),
    ]
    path = tmp_path / "noise.csv"
    write_noise_csv(path, points)
    assert path.read_text() == (
        "m,mean,std,replicates\n2,0.5,0.1,30\n4,0.25,0.05,30\n"
    )


# --- communication cost ------------------------------------------------------------------


def test_cost_report_download_is_phi_plus_sliced_columns():
    report = comm_cost_report(
        phi_params=10_000, embedding_dim=64, n_classes=10_000, s_size=100
    )
    assert report["download_params_per_client_round"] == 10_000 + 64 * 100
    assert report["full_model_params"] == 650_000
    assert report["transmitted_fraction"] == pytest.approx(16_400 / 650_000)
    assert report["download_bytes_per_client_round"] == 8 * 16_400
    assert report["upload_bytes_per_client_round"] == 8 * 16_400 + 4 * 100
    assert report["total_upload_bytes"] == report["upload_bytes_per_client_round"]


def test_cost_report_desk_scale_16pct_classifier():
    """Classifier at 16% of the model, |S|/n = 100/11,318: the round moves
    about 84% of the parameters."""
    d, n = 64, 11_318
    classifier = d * n
    phi = round(classifier * 0.84 / 0.16)
    report = comm_cost_report(phi_params=phi, embedding_dim=d, n_classes=n, s_size=100)
    assert report["classifier_fraction"] == pytest.approx(0.16, abs=1e-3)
    assert abs(report["transmitted_fraction"] - 0.84) < 0.005


def test_cost_report_full_label_set_is_whole_model():
    report = comm_cost_report(phi_params=50, embedding_dim=4, n_classes=20, s_size=20)
    assert report["transmitted_fraction"] == 1.0
    assert report["download_params_per_client_round"] == report["full_model_params"]


def test_cost_report_fraction_curve_monotone():
    report = comm_cost_report(
        phi_params=10_000, embedding_dim=64, n_classes=10_000, s_size=100
    )
    curve = report["fraction_curve"]
    by_d = {}
    for point in curve:
        by_d.setdefault(point["d"], []).append((point["n"], point["classifier_fraction"]))
    for d, pairs in by_d.items():
        fracs = [f for _, f in sorted(pairs)]
        assert fracs == sorted(fracs)  # growing label space -> larger share
    by_n = {}
    for point in curve:
        by_n.setdefault(point["n"], []).append((point["d"], point["classifier_fraction"]))
    for n, pairs in by_n.items():
        fracs = [f for _, f in sorted(pairs)]
        assert fracs == sorted(fracs)  # wider embeddings -> larger share


def test_cost_report_scales_with_rounds_and_clients():
    single = comm_cost_report(
        phi_params=100, embedding_dim=8, n_classes=50, s_size=10
    )
    many = comm_cost_report(
        phi_params=100,
        embedding_dim=8,
        n_classes=50,
        s_size=10,
        rounds=7,
        clients_per_round=3,
    )
    assert many["total_download_bytes"] == 21 * single["download_bytes_per_client_round"]
    assert many["total_upload_bytes"] == 21 * single["upload_bytes_per_client_round"]


def test_cost_report_validation():
    with pytest.raises(ConfigurationError):
        comm_cost_report(phi_params=0, embedding_dim=8, n_classes=50, s_size=10)
    with pytest.raises(ConfigurationError):
        comm_cost_report(phi_params=10, embedding_dim=8, n_classes=50, s_size=60)
