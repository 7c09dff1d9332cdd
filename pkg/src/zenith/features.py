"""Feature schemas, synthetic CTR data, embeddings and Prime Tokenization.

A :class:`FeatureSchema` describes K raw features. A :class:`TokenPlan`
partitions them into T Prime Tokens following three grouping rules:

1. every id-kind feature is the sole member of its token;
2. each feature belongs to exactly one token (embeddings are never split);
3. non-id tokens draw from a single semantic group, and the token sizes
   within a group differ by at most one.

Labels of the synthetic data come from a factorization-machine style
ground truth so that planted pairwise interactions are invisible to a
purely additive model.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import tensor as tn
from .errors import ConfigError, InputError
from .tensor import Tensor

ID, CATEGORICAL, DENSE = "id", "categorical", "dense"
KINDS = (ID, CATEGORICAL, DENSE)


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str
    group: str
    embed_dim: int
    vocab: int = 0

    @property
    def sparse(self):
        return self.kind != DENSE


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[FeatureSpec, ...]

    def __post_init__(self):
        problems = []
        if not self.features:
            problems.append("schema needs at least one feature")
        for f in self.features:
            if f.kind not in KINDS:
                problems.append(f"feature {f.name}: unknown kind {f.kind!r}")
            if f.sparse and f.vocab < 2:
                problems.append(f"feature {f.name}: sparse vocabulary must be >= 2")
            if f.embed_dim < 1:
                problems.append(f"feature {f.name}: embed_dim must be positive")
            if not f.group:
                problems.append(f"feature {f.name}: missing semantic group")
        if problems:
            raise ConfigError("; ".join(problems), problems)

    @property
    def K(self):
        return len(self.features)

    @property
    def user_feature(self):
        """Index of the first id feature, used as the user id column."""
        for i, f in enumerate(self.features):
            if f.kind == ID:
                return i
        return None

    def to_dict(self):
        return {"features": [asdict(f) for f in self.features]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(FeatureSpec(**f) for f in d["features"]))


def default_schema():
    """24-feature desk schema: 2 id, 18 categorical in 5 groups, 4 dense."""
    feats = [
        FeatureSpec("user_id", ID, "user_id", 8, 10_000),
        FeatureSpec("item_id", ID, "item_id", 8, 5_000),
    ]
    groups = [
        ("user_profile", [6, 8, 10, 12]),
        ("item_profile", [6, 8, 10, 12]),
        ("context", [4, 6, 8, 10]),
        ("user_history", [8, 10, 12]),
        ("item_history", [8, 10, 12]),
    ]
    for group, vocabs in groups:
        for j, v in enumerate(vocabs):
            feats.append(FeatureSpec(f"{group}_{j}", CATEGORICAL, group, 4, v))
    for j in range(4):
        feats.append(FeatureSpec(f"dense_{j}", DENSE, "dense", 4))
    return FeatureSchema(tuple(feats))


# ---------------------------------------------------------------------------
# token plans


@dataclass(frozen=True)
class TokenPlan:
    D: int
    tokens: tuple[tuple[int, ...], ...]

    @property
    def T(self):
        return len(self.tokens)

    def input_dims(self, schema):
        return [sum(schema.features[j].embed_dim for j in tok) for tok in self.tokens]

    def to_dict(self):
        return {"D": self.D, "tokens": [list(t) for t in self.tokens]}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["D"]), tuple(tuple(int(j) for j in t) for t in d["tokens"]))


@dataclass(frozen=True)
class Violation:
    rule: int
    message: str
    feature: int | None = None
    token: int | None = None


def validate_token_plan(schema, plan):
    """Return every grouping-rule violation of ``plan`` (empty list means ok)."""
    out = []
    owner: dict[int, list[int]] = {}
    for ti, tok in enumerate(plan.tokens):
        if not tok:
            out.append(Violation(2, f"token {ti} is empty", token=ti))
        for j in tok:
            if not 0 <= j < schema.K:
                out.append(Violation(2, f"token {ti} references unknown feature {j}", j, ti))
                continue
            owner.setdefault(j, []).append(ti)
    for j, f in enumerate(schema.features):
        tokens = owner.get(j, [])
        if not tokens:
            out.append(Violation(2, f"feature {f.name} is not assigned to any token", j))
        elif len(tokens) > 1:
            out.append(Violation(2, f"feature {f.name} is split across tokens {tokens}", j, tokens[1]))

    sizes_by_group: dict[str, list[tuple[int, int]]] = {}
    for ti, tok in enumerate(plan.tokens):
        members = [j for j in tok if 0 <= j < schema.K]
        ids = [j for j in members if schema.features[j].kind == ID]
        for j in ids:
            if len(tok) > 1:
                out.append(Violation(1, f"id feature {schema.features[j].name} shares token {ti}", j, ti))
        if ids or not members:
            continue
        groups = {schema.features[j].group for j in members}
        if len(groups) > 1:
            out.append(Violation(3, f"token {ti} mixes semantic groups {sorted(groups)}", token=ti))
            continue
        sizes_by_group.setdefault(groups.pop(), []).append((ti, len(members)))
    for group, sizes in sizes_by_group.items():
        lo, hi = min(s for _, s in sizes), max(s for _, s in sizes)
        if hi - lo > 1:
            worst = max(sizes, key=lambda x: x[1])[0]
            out.append(Violation(3, f"group {group} token sizes {[s for _, s in sizes]} are unbalanced",
                                 token=worst))
    return out


def plan_from_schema(schema, D, max_token_size=None):
    """Build a rule-abiding plan: one token per id feature, balanced group chunks."""
    tokens = []
    groups: dict[str, list[int]] = {}
    for j, f in enumerate(schema.features):
        if f.kind == ID:
            tokens.append((j,))
        else:
            groups.setdefault(f.group, []).append(j)
    for members in groups.values():
        n = len(members)
        chunks = 1 if not max_token_size else math.ceil(n / max_token_size)
        for part in np.array_split(np.array(members), chunks):
            tokens.append(tuple(int(j) for j in part))
    plan = TokenPlan(D, tuple(tokens))
    assert not validate_token_plan(schema, plan)
    return plan


# ---------------------------------------------------------------------------
# batches and datasets


@dataclass
class ExampleBatch:
    """``values`` holds sparse indices (as exact floats) and dense values, shape (B, K)."""

    values: np.ndarray
    user_id: np.ndarray
    labels: np.ndarray

    @property
    def B(self):
        return self.values.shape[0]

    def validate(self, schema):
        if self.values.ndim != 2 or self.values.shape[1] != schema.K:
            raise InputError(f"batch has {self.values.shape} values, schema expects (B, {schema.K})")
        if self.B < 1:
            raise InputError("empty batch")
        if not np.isin(self.labels, (0, 1)).all():
            raise InputError("labels must be 0 or 1")
        for j, f in enumerate(schema.features):
            if f.sparse:
                col = self.values[:, j]
                if (col < 0).any() or (col >= f.vocab).any() or (col != np.floor(col)).any():
                    raise InputError(f"feature {f.name}: index outside vocabulary [0, {f.vocab})")


@dataclass
class Dataset:
    schema: FeatureSchema
    values: np.ndarray
    user_id: np.ndarray
    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def batch(self, idx):
        return ExampleBatch(self.values[idx], self.user_id[idx], self.labels[idx])

    def all(self):
        return ExampleBatch(self.values, self.user_id, self.labels)

    def subset(self, idx):
        return Dataset(self.schema, self.values[idx], self.user_id[idx], self.labels[idx], dict(self.meta))

    def header(self):
        return ["user_id"] + [f"f_{j}" for j in range(self.schema.K)] + ["label"]

    def to_csv(self, path):
        """Write the dataset CSV (and nothing else). Output bytes depend only on content."""
        path = Path(path)
        fmts = ["%d"] + ["%d" if f.sparse else "%.17g" for f in self.schema.features] + ["%d"]
        table = np.column_stack([self.user_id, self.values, self.labels]).astype(np.float64)
        with open(path, "w", newline="\n") as fh:
            fh.write(",".join(self.header()) + "\n")
            np.savetxt(fh, table, fmt=fmts, delimiter=",")

    @classmethod
    def from_csv(cls, path, schema=None):
        """Read a dataset CSV; the schema comes from the ``.json`` sidecar if not given."""
        path = Path(path)
        meta = {}
        sidecar = path.with_suffix(".json")
        if sidecar.exists():
            meta = json.loads(sidecar.read_text())
            if schema is None:
                schema = FeatureSchema.from_dict(meta["schema"])
        if schema is None:
            raise InputError(f"{path}: no schema given and no sidecar {sidecar.name}")
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        expected = ["user_id"] + [f"f_{j}" for j in range(schema.K)] + ["label"]
        if header != expected:
            raise InputError(f"{path}: header does not match schema with K={schema.K}")
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        ds = cls(schema, table[:, 1:-1].copy(), table[:, 0].astype(np.int64),
                 table[:, -1].astype(np.int64), meta)
        ds.all().validate(schema)
        return ds


# ---------------------------------------------------------------------------
# ground truth and generation


@dataclass
class GroundTruthSpec:
    """Planted FM-style labelling rule.

    logit(x) = bias + sum_j w_j(x_j) + sum_{j<l} C[j, l] <v_j(x_j), v_l(x_l)> + noise * N(0, 1)

    ``interactions`` is the symmetric zero-diagonal matrix C. Latent vectors
    v_j and first-order weights w_j are drawn from ``seed``; ``linear_scale``
    is the standard deviation of the first-order weights (0 disables them).
    Id features get no first-order effect.
    """

    latent_dim: int
    interactions: np.ndarray
    bias: float = 0.0
    noise: float = 0.0
    seed: int = 0
    linear_scale: float = 0.0

    def __post_init__(self):
        c = np.asarray(self.interactions, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ConfigError("interaction matrix must be square")
        if not np.array_equal(c, c.T) or np.any(np.diag(c) != 0):
            raise ConfigError("interaction matrix must be symmetric with zero diagonal")
        self.interactions = c

    def tables(self, schema):
        """Latent vectors and first-order weights per feature value (dense: per unit)."""
        rng = np.random.default_rng(self.seed)
        latent, linear = [], []
        for f in schema.features:
            rows = f.vocab if f.sparse else 1
            latent.append(rng.standard_normal((rows, self.latent_dim)) / math.sqrt(self.latent_dim))
            w = rng.standard_normal(rows) * self.linear_scale
            linear.append(w if f.kind != ID else np.zeros(rows))
        return latent, linear

    def logit(self, schema, values, tables=None):
        """Noise-free logit of each row of ``values`` (shape (n, K))."""
        latent, linear = tables or self.tables(schema)
        n = values.shape[0]
        out = np.full(n, float(self.bias))
        vecs = []
        for j, f in enumerate(schema.features):
            if f.sparse:
                idx = values[:, j].astype(np.int64)
                vecs.append(latent[j][idx])
                out += linear[j][idx]
            else:
                x = values[:, j]
                vecs.append(x[:, None] * latent[j][0])
                out += linear[j][0] * x
        c = self.interactions
        for j, l in zip(*np.nonzero(np.triu(c, 1))):
            out += c[j, l] * np.einsum("nd,nd->n", vecs[j], vecs[l])
        return out

    def to_dict(self):
        d = asdict(self)
        d["interactions"] = self.interactions.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def planted_ground_truth(schema, n_pairs=2, strength=2.0, latent_dim=1, bias=0.0,
                         linear_scale=0.3, noise=0.0, seed=0):
    """Plant ``n_pairs`` random interactions among non-id features (both signs).

    The defaults plant two rank-1 interactions: the logistic baseline trails
    the Bayes AUC by well over 0.05, yet one pass over 100k examples is
    enough for an interaction model to close most of that gap. Denser or
    higher-rank settings (e.g. 8 pairs with ``latent_dim=4``) widen the gap
    but are not learnable in one pass at that size.
    """
    rng = np.random.default_rng(seed)
    cand = [j for j, f in enumerate(schema.features) if f.kind != ID]
    pairs = [(a, b) for i, a in enumerate(cand) for b in cand[i + 1:]]
    chosen = rng.choice(len(pairs), size=min(n_pairs, len(pairs)), replace=False)
    c = np.zeros((schema.K, schema.K))
    for p in sorted(chosen):
        a, b = pairs[p]
        c[a, b] = c[b, a] = strength * rng.choice([-1.0, 1.0])
    return GroundTruthSpec(latent_dim, c, bias, noise, int(rng.integers(2**31)), linear_scale)


def zero_interaction_truth(schema, latent_dim=4, bias=0.0, linear_scale=0.3, seed=0):
    return GroundTruthSpec(latent_dim, np.zeros((schema.K, schema.K)), bias, 0.0, seed, linear_scale)


def _sample_values(schema, n, rng):
    cols = []
    for f in schema.features:
        if f.sparse:
            cols.append(rng.integers(0, f.vocab, size=n).astype(np.float64))
        else:
            cols.append(rng.standard_normal(n))
    return np.column_stack(cols)


def sample(schema, spec, n, seed, tables=None):
    """Draw ``n`` labelled examples; returns ``(values, labels, clean_logits)``."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    rng = np.random.default_rng(seed)
    values = _sample_values(schema, n, rng)
    clean = spec.logit(schema, values, tables)
    noisy = clean + spec.noise * rng.standard_normal(n) if spec.noise else clean
    labels = (rng.random(n) < expit(noisy)).astype(np.int64)
    return values, labels, clean


def bayes_auc(schema, spec, n=200_000, seed=0):
    """Monte-Carlo AUC of the true noise-free logit on a fresh sample."""
    from .metrics import auc

    values, labels, clean = sample(schema, spec, n, seed)
    return auc(clean, labels)


def generate_dataset(schema, spec, n, seed, path=None, bayes_samples=200_000):
    """Generate ``n`` examples; optionally write ``path`` (CSV) plus a JSON sidecar.

    The sidecar records schema, ground truth, seed and the Monte-Carlo Bayes
    AUC, estimated on ``bayes_samples`` fresh draws from an independent stream.
    """
    tables = spec.tables(schema)
    values, labels, _ = sample(schema, spec, n, seed, tables)
    uf = schema.user_feature
    user = values[:, uf].astype(np.int64) if uf is not None else np.zeros(n, dtype=np.int64)
    meta = {"schema": schema.to_dict(), "ground_truth": spec.to_dict(), "seed": int(seed), "n": int(n)}
    if bayes_samples:
        meta["bayes_auc"] = bayes_auc(schema, spec, bayes_samples, seed=seed + 7_919)
    ds = Dataset(schema, values, user, labels, meta)
    if path is not None:
        path = Path(path)
        try:
            ds.to_csv(path)
            path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        except OSError as e:
            raise OSError(f"cannot write dataset to {path}: {e}") from e
    return ds


# ---------------------------------------------------------------------------
# embeddings and prime tokens


@dataclass
class EmbeddingTables:
    """Per-feature parameters: a table for sparse kinds, ``(weight, bias)`` for dense."""

    tables: list

    def tensors(self, schema):
        for j, f in enumerate(schema.features):
            if f.sparse:
                yield f"embed.{f.name}", self.tables[j]
            else:
                w, b = self.tables[j]
                yield f"embed.{f.name}.weight", w
                yield f"embed.{f.name}.bias", b


def init_embeddings(schema, rng, scale=0.05):
    tables = []
    for f in schema.features:
        if f.sparse:
            tables.append(Tensor(rng.uniform(-scale, scale, (f.vocab, f.embed_dim)), True))
        else:
            a = math.sqrt(6.0 / (1 + f.embed_dim))
            tables.append((Tensor(rng.uniform(-a, a, f.embed_dim), True),
                           Tensor(np.zeros(f.embed_dim), True)))
    return EmbeddingTables(tables)


def embed_batch(batch, tables, schema):
    """Return one ``(B, embed_dim)`` tensor per feature."""
    if batch.values.ndim != 2 or batch.values.shape[1] != schema.K:
        raise InputError(f"batch width {batch.values.shape[-1]} != schema K={schema.K}")
    return [_embed_one(batch.values[:, j], f, tables.tables[j]) for j, f in enumerate(schema.features)]


@dataclass
class TokenProjections:
    """Per-token MLP ``concat(members) -> [Linear -> Swish] -> Linear -> D``.

    With ``hidden`` unset the MLP is a single linear map and ``w_in`` maps
    straight to D. ``w_in`` is a list (input widths differ per token);
    ``w_out`` is one ``(T, hidden, D)`` tensor.
    """

    w_in: list
    b_in: Tensor
    w_out: Tensor | None = None
    b_out: Tensor | None = None

    def tensors(self):
        for i, w in enumerate(self.w_in):
            yield f"tokenize.w_in.{i}", w
        yield "tokenize.b_in", self.b_in
        if self.w_out is not None:
            yield "tokenize.w_out", self.w_out
            yield "tokenize.b_out", self.b_out


def glorot(rng, fan_in, fan_out, shape):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, shape), True)


def init_projections(schema, plan, rng, hidden=None):
    dims = plan.input_dims(schema)
    width = hidden or plan.D
    w_in = [glorot(rng, n, width, (n, width)) for n in dims]
    b_in = Tensor(np.zeros((plan.T, width)), True)
    if not hidden:
        return TokenProjections(w_in, b_in)
    w_out = glorot(rng, hidden, plan.D, (plan.T, hidden, plan.D))
    return TokenProjections(w_in, b_in, w_out, Tensor(np.zeros((plan.T, plan.D)), True))


def embed_tokens(batch, tables, schema, plan):
    """Per-token concatenated member embeddings, one graph node per token.

    Same values as concatenating :func:`embed_batch` outputs by token.
    """
    if batch.values.ndim != 2 or batch.values.shape[1] != schema.K:
        raise InputError(f"batch width {batch.values.shape[-1]} != schema K={schema.K}")
    groups = []
    for tok in plan.tokens:
        feats = [schema.features[j] for j in tok]
        if all(f.sparse for f in feats):
            idx = []
            for j, f in zip(tok, feats):
                col = batch.values[:, j]
                ij = col.astype(np.int64)
                if (ij < 0).any() or (ij >= f.vocab).any() or (ij != col).any():
                    raise InputError(f"feature {f.name}: index outside vocabulary [0, {f.vocab})")
                idx.append(ij)
            groups.append(tn.gather_concat([tables.tables[j] for j in tok], idx))
        else:
            parts = [_embed_one(batch.values[:, j], f, tables.tables[j]) for j, f in zip(tok, feats)]
            groups.append(parts[0] if len(parts) == 1 else tn.concat(parts, axis=1))
    return groups


def _embed_one(col, f, table):
    if f.sparse:
        idx = col.astype(np.int64)
        if (idx < 0).any() or (idx >= f.vocab).any() or (idx != col).any():
            raise InputError(f"feature {f.name}: index outside vocabulary [0, {f.vocab})")
        return tn.take(table, idx)
    w, b = table
    return Tensor(col[:, None]) * w + b


def project_tokens(groups, proj):
    """Map per-token input rows ``(B, n_i)`` to the ``(B, T, D)`` Prime Token matrix."""
    if len(groups) != len(proj.w_in):
        raise ConfigError(f"{len(groups)} token inputs but {len(proj.w_in)} projections")
    for ti, x in enumerate(groups):
        if x.shape[1] != proj.w_in[ti].shape[0]:
            raise ConfigError(f"token {ti}: concatenated width {x.shape[1]} != projection input "
                              f"{proj.w_in[ti].shape[0]}")
    outs = tn.grouped_matmul(groups, proj.w_in)
    b = groups[0].shape[0]
    h = tn.concat([o.reshape(b, 1, o.shape[1]) for o in outs], axis=1) + proj.b_in
    if proj.w_out is None:
        return h
    return tn.tokenwise_matmul(tn.swish(h), proj.w_out) + proj.b_out


def build_prime_tokens(embeddings, plan, proj):
    """Concatenate each token's member embeddings and project to D: ``(B, T, D)``."""
    if len(proj.w_in) != plan.T:
        raise ConfigError(f"plan has {plan.T} tokens but {len(proj.w_in)} projections")
    groups = []
    for tok in plan.tokens:
        parts = [embeddings[j] for j in tok]
        groups.append(parts[0] if len(parts) == 1 else tn.concat(parts, axis=1))
    return project_tokens(groups, proj)
