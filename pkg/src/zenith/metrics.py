"""Ranking metrics, the token-similarity probe and baseline models."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import tensor as tn
from .errors import InputError, UndefinedMetricError
from .features import embed_batch, glorot, init_embeddings
from .model import ForwardOutput, ModelConfig, read_checkpoint, write_checkpoint
from .tensor import Tensor

CLAMP = 1e-7


def auc(scores, labels):
    """Probability that a random positive outranks a random negative (ties count 1/2).

    Computed from the rank sum of the positives (Mann-Whitney U).
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative example")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def uauc_details(scores, labels, user_ids):
    """Return ``(uauc, n_users_scored, n_users_skipped)``.

    Users whose examples are all one class are skipped.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    users = np.asarray(user_ids).ravel()
    order = np.argsort(users, kind="stable")
    users_sorted = users[order]
    bounds = np.flatnonzero(np.diff(users_sorted)) + 1
    values = []
    skipped = 0
    for idx in np.split(order, bounds):
        y = labels[idx]
        if y.min() == y.max():
            skipped += 1
            continue
        values.append(auc(scores[idx], y))
    if not values:
        raise UndefinedMetricError("no user has both positive and negative examples")
    return math.fsum(values) / len(values), len(values), skipped


def uauc(scores, labels, user_ids):
    """Unweighted mean of per-user AUC over users having both classes."""
    return uauc_details(scores, labels, user_ids)[0]


def logloss(probs, labels):
    p = np.clip(np.asarray(probs, dtype=np.float64).ravel(), CLAMP, 1.0 - CLAMP)
    y = np.asarray(labels, dtype=np.float64).ravel()
    losses = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    return math.fsum(losses) / losses.size


@dataclass
class EvalReport:
    auc: float
    uauc: float
    logloss: float
    n_examples: int
    n_users_scored: int
    token_similarity: list = field(default_factory=list)

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def predict(model, dataset, batch_size=4096):
    out = []
    for start in range(0, len(dataset), batch_size):
        out.append(model.predict(dataset.batch(slice(start, start + batch_size))))
    return np.concatenate(out)


def evaluate(model, dataset, probe_batch=None):
    """Score ``dataset`` and compute AUC, UAUC and LogLoss.

    When ``probe_batch`` is given (a model with layers is required), the
    mean off-diagonal token similarity of every layer is attached.
    """
    p = predict(model, dataset)
    try:
        u, scored, _ = uauc_details(p, dataset.labels, dataset.user_id)
    except UndefinedMetricError:
        u, scored = float("nan"), 0
    sims = []
    if probe_batch is not None and hasattr(model, "layers"):
        sims = [token_similarity_probe(model, probe_batch, l).mean_off_diagonal
                for l in range(1, len(model.layers) + 1)]
    return EvalReport(auc(p, dataset.labels), u, logloss(p, dataset.labels), len(dataset), scored, sims)


# ---------------------------------------------------------------------------
# token similarity


@dataclass
class SimilarityMatrix:
    layer: int
    matrix: np.ndarray
    zero_norm: bool = False

    @property
    def mean_off_diagonal(self):
        t = self.matrix.shape[0]
        if t < 2:
            return 0.0
        off = ~np.eye(t, dtype=bool)
        return float(self.matrix[off].mean())

    def to_csv(self, path):
        t = self.matrix.shape[0]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["token"] + [f"t{j}" for j in range(t)])
            for i in range(t):
                w.writerow([f"t{i}"] + [repr(float(v)) for v in self.matrix[i]])


def abs_cosine_matrix(tokens):
    """Mean over the batch of |cos| between token pairs; ``tokens`` is (B, T, D) or (T, D).

    Pairs involving a zero-norm token are 0; the second return value flags them.
    """
    x = np.asarray(tokens, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    norms = np.linalg.norm(x, axis=-1)
    zero = norms == 0
    unit = x / np.where(zero, 1.0, norms)[..., None]
    cos = np.abs(unit @ unit.transpose(0, 2, 1))
    return cos.mean(axis=0), bool(zero.any())


def token_similarity_probe(model, batch, layer):
    """|cos| similarity of the output tokens of ``layer`` (1-based), batch-averaged."""
    if not 1 <= layer <= len(model.layers):
        raise InputError(f"layer must lie in [1, {len(model.layers)}], got {layer}")
    with tn.no_grad():
        out = model.forward(batch)
    m, flag = abs_cosine_matrix(out.layer_outputs[layer - 1].data)
    return SimilarityMatrix(layer, m, flag)


# ---------------------------------------------------------------------------
# baselines


class LogisticModel:
    """Logistic regression on one-hot sparse features plus raw dense values."""

    kind = "logistic"

    def __init__(self, schema, seed=0):
        self.schema = schema
        self.weights = [Tensor(np.zeros((f.vocab, 1)) if f.sparse else np.zeros(1), True,
                               name=f"lr.{f.name}") for f in schema.features]
        self.bias = Tensor(np.zeros(1), True, name="lr.bias")

    def named_parameters(self):
        for w in self.weights:
            yield w.name, w, "linear"
        yield "lr.bias", self.bias, "linear"

    def parameters(self):
        return [t for _, t, _ in self.named_parameters()]

    def forward(self, batch):
        logit = self.bias
        for j, f in enumerate(self.schema.features):
            col = batch.values[:, j]
            if f.sparse:
                logit = logit + tn.take(self.weights[j], col.astype(np.int64)).reshape(batch.B)
            else:
                logit = logit + Tensor(col) * self.weights[j]
        return ForwardOutput(logit)

    def predict(self, batch):
        with tn.no_grad():
            return self.forward(batch).probs

    def save(self, path):
        write_checkpoint(path, {"kind": self.kind, "schema": self.schema.to_dict()}, self.named_parameters())


class MLPModel:
    """Concatenated feature embeddings -> Swish hidden layer -> logit."""

    kind = "mlp"

    def __init__(self, schema, hidden=64, seed=0):
        self.schema = schema
        rng = np.random.default_rng(seed)
        self.embeddings = init_embeddings(schema, rng)
        width = sum(f.embed_dim for f in schema.features)
        self.w1 = glorot(rng, width, hidden, (width, hidden))
        self.b1 = Tensor(np.zeros(hidden), True)
        self.w2 = glorot(rng, hidden, 1, (hidden, 1))
        self.b2 = Tensor(np.zeros(1), True)

    def named_parameters(self):
        for name, t in self.embeddings.tensors(self.schema):
            yield name, t, "embedding"
        for name in ("w1", "b1", "w2", "b2"):
            yield f"mlp.{name}", getattr(self, name), "mlp"

    def parameters(self):
        return [t for _, t, _ in self.named_parameters()]

    def forward(self, batch):
        x = tn.concat(embed_batch(batch, self.embeddings, self.schema), axis=1)
        h = tn.swish(x @ self.w1 + self.b1)
        return ForwardOutput((h @ self.w2 + self.b2).reshape(batch.B))

    def predict(self, batch):
        with tn.no_grad():
            return self.forward(batch).probs

    def save(self, path):
        write_checkpoint(path, {"kind": self.kind, "schema": self.schema.to_dict()}, self.named_parameters())


def shared_weight_config(cfg):
    """The non-tokenwise Token Boost counterpart of ``cfg`` (plain SwiGLU / SMoE)."""
    return dataclasses.replace(cfg, tokenwise_boost=False)


def baseline_models(train_set, test_set, train_cfg, mlp_hidden=64, seed=0):
    """Train logistic and MLP baselines under the same trainer; return reports by name."""
    from .train import train

    reports = {}
    for name, model in (("logistic", LogisticModel(train_set.schema, seed)),
                        ("mlp", MLPModel(train_set.schema, mlp_hidden, seed))):
        train(model, train_set, train_cfg)
        reports[name] = evaluate(model, test_set)
    return reports
