"""
Conventional classifiers on frozen CLS features: PCA + k-means, k-NN, and
linear / two-layer probes trained with the shared optimizer.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from sklearn.cluster import KMeans, kmeans_plusplus
from sklearn.decomposition import PCA
from sklearn.metrics import pairwise_distances

import numerics
from errors import ConfigurationError, ContractError, DataError, DegenerateDataError, DivergenceError
from heads import ClassifierHead
from metrics import ScoreSet
from numerics import OptimizerState, Tensor

logger = logging.getLogger(__name__)

PROBE_KINDS = ("pca_kmeans", "knn", "linear", "mlp2")
PROBE_PREFIX = "probe/"


@dataclass
class FeatureMatrix:
    """One row of features per sample, with its 0/1 label and tags."""

    features: np.ndarray
    labels: np.ndarray
    methods: list = None
    sources: list = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ContractError(f"features must be a matrix, got shape {self.features.shape}")
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.size != self.features.shape[0]:
            raise ContractError(f"{self.features.shape[0]} rows but {self.labels.size} labels")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features contain non-finite values")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise DataError("labels must be 0 or 1")

    @property
    def rows(self):
        return self.features.shape[0]

    @property
    def cols(self):
        return self.features.shape[1]

    def score_set(self, scores):
        return ScoreSet(scores, self.labels, self.methods, self.sources)


@dataclass
class ProbeConfig:
    k_neighbors: int = 5
    n_components: int = 32
    kmeans_iterations: int = 100
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-2
    weight_decay: float = 0.0
    hidden_dim: int = 0


# ---------------------------------------------------------------------------
# PCA + k-means
# ---------------------------------------------------------------------------

class PcaKMeansProbe:
    """Two centroids in a PCA subspace, each mapped to its majority training label."""

    def __init__(self, mean, components, centroids, cluster_labels, inertia_trace=()):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.components = np.asarray(components, dtype=np.float64)
        self.centroids = np.asarray(centroids, dtype=np.float64)
        self.cluster_labels = np.asarray(cluster_labels, dtype=np.int64)
        self.inertia_trace = list(inertia_trace)

    @classmethod
    def fit(cls, train, n_components=None, seed=0, max_iter=100):
        if train.rows == 0:
            raise ContractError("cannot fit a probe on an empty feature matrix")
        if len(set(train.labels.tolist())) < 2:
            raise DataError("PCA + k-means probe needs samples of both classes")
        n_components = n_components or min(32, train.cols)
        if not 1 <= n_components <= min(train.rows, train.cols):
            raise ConfigurationError(
                f"n_components={n_components} must lie in 1..{min(train.rows, train.cols)}"
            )
        if np.ptp(train.features, axis=0).max() == 0.0:
            raise DegenerateDataError("all feature rows are identical; covariance is zero")
        pca = PCA(n_components=n_components, svd_solver="covariance_eigh")
        projected = pca.fit_transform(train.features)
        centers, _ = kmeans_plusplus(projected, n_clusters=2, random_state=seed)
        trace = []
        for _ in range(max_iter):
            km = KMeans(n_clusters=2, init=centers, n_init=1, max_iter=1).fit(projected)
            trace.append(float(km.inertia_))
            converged = np.array_equal(km.cluster_centers_, centers)
            centers = km.cluster_centers_
            if converged:
                break
        assignment = pairwise_distances(projected, centers).argmin(axis=1)
        cluster_labels = []
        for cluster in range(2):
            members = train.labels[assignment == cluster]
            cluster_labels.append(int(members.sum() * 2 > members.size) if members.size else 0)
        logger.info(
            "pca_kmeans: %d components, %d Lloyd steps, cluster labels %s",
            n_components, len(trace), cluster_labels,
        )
        return cls(pca.mean_, pca.components_, centers, cluster_labels, trace)

    def project(self, features):
        return (np.asarray(features, dtype=np.float64) - self.mean) @ self.components.T

    def predict(self, features):
        nearest = pairwise_distances(self.project(features), self.centroids).argmin(axis=1)
        return self.cluster_labels[nearest]

    def state(self):
        return {
            f"{PROBE_PREFIX}pca_mean": self.mean,
            f"{PROBE_PREFIX}pca_components": self.components,
            f"{PROBE_PREFIX}centroids": self.centroids,
            f"{PROBE_PREFIX}cluster_labels": self.cluster_labels.astype(np.float32),
        }

    @classmethod
    def from_state(cls, state):
        return cls(
            state[f"{PROBE_PREFIX}pca_mean"],
            state[f"{PROBE_PREFIX}pca_components"],
            state[f"{PROBE_PREFIX}centroids"],
            np.rint(state[f"{PROBE_PREFIX}cluster_labels"]).astype(np.int64),
        )


# ---------------------------------------------------------------------------
# k-NN
# ---------------------------------------------------------------------------

def knn_classify(train, query, k_neighbors=5):
    """Majority vote of the k nearest training rows (Euclidean).

    A split vote goes to the class whose nearest neighbour is closer, then to 0.
    Accepts one query vector (returns an int) or a matrix (returns an array).
    """
    if train.rows == 0:
        raise ContractError("k-NN needs a non-empty training set")
    if not 1 <= k_neighbors <= train.rows:
        raise ContractError(f"k_neighbors={k_neighbors} must lie in 1..{train.rows}")
    query = np.asarray(query, dtype=np.float64)
    single = query.ndim == 1
    distances = pairwise_distances(np.atleast_2d(query), train.features)
    predictions = np.empty(distances.shape[0], dtype=np.int64)
    for row, dist in enumerate(distances):
        nearest = np.lexsort((train.labels, dist))[:k_neighbors]
        labels, near = train.labels[nearest], dist[nearest]
        fakes = int(labels.sum())
        reals = k_neighbors - fakes
        if fakes != reals:
            predictions[row] = int(fakes > reals)
        else:
            predictions[row] = int(near[labels == 1].min() < near[labels == 0].min())
    return int(predictions[0]) if single else predictions


# ---------------------------------------------------------------------------
# Trained probes
# ---------------------------------------------------------------------------

def _train_head(head, train, config, rng):
    if train.rows == 0:
        raise ContractError("cannot train a probe on an empty feature matrix")
    state = OptimizerState(learning_rate=config.learning_rate, weight_decay=config.weight_decay)
    head.train()
    for epoch in range(config.epochs):
        order = rng.split(f"epoch{epoch}").permutation(train.rows)
        for start in range(0, train.rows, config.batch_size):
            rows = order[start:start + config.batch_size]
            loss = numerics.bce_with_logits(head(Tensor(train.features[rows])), train.labels[rows])
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"probe loss became non-finite in epoch {epoch}")
            head.zero_grad()
            numerics.backward(loss)
            numerics.optimizer_step(head.named_parameters(), state)
        logger.debug("probe epoch %d: last loss %.4f", epoch, loss.item())
    return head.eval()


def linear_probe_train(train, config, rng):
    head = ClassifierHead(train.cols, rng.split("linear_probe"), "linear")
    return _train_head(head, train, config, rng)


def mlp_probe_train(train, config, rng):
    head = ClassifierHead(train.cols, rng.split("mlp_probe"), "mlp2", config.hidden_dim)
    return _train_head(head, train, config, rng)


def head_scores(head, features):
    with numerics.inference():
        logits = head(Tensor(np.asarray(features))).data
    return expit(logits.astype(np.float64))


def probe_state(head):
    return {f"{PROBE_PREFIX}{name}": value for name, value in head.state_dict().items()}


def run_probe(kind, train, test, config, rng):
    """Fit one probe on ``train`` and score ``test``; hard-label probes give 0/1 scores."""
    if kind == "pca_kmeans":
        n_components = min(config.n_components, train.rows, train.cols)
        seed = int(rng.split("kmeans").integers(2**31))
        probe = PcaKMeansProbe.fit(train, n_components, seed, config.kmeans_iterations)
        scores, state = probe.predict(test.features).astype(np.float64), probe.state()
    elif kind == "knn":
        scores = knn_classify(train, test.features, config.k_neighbors).astype(np.float64)
        state = {}
    elif kind == "linear":
        head = linear_probe_train(train, config, rng)
        scores, state = head_scores(head, test.features), probe_state(head)
    elif kind == "mlp2":
        head = mlp_probe_train(train, config, rng)
        scores, state = head_scores(head, test.features), probe_state(head)
    else:
        raise ConfigurationError(f"unknown probe '{kind}'; choose from {', '.join(PROBE_KINDS)}")
    return test.score_set(scores), state
