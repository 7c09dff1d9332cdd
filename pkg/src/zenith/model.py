"""Model assembly, parameter/FLOP accounting and checkpoints.

A model is Prime Tokenization, then ``layers`` stacked Token Fusion ->
Token Boost layers that each map a T x D token matrix to another T x D
matrix, then a flatten -> Swish MLP -> sigmoid prediction head.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .boost import (RegenParams, SwigluParams, TsmoeParams, init_regen, init_swiglu, init_tsmoe,
                    route_tokens, token_regeneration, tsmoe_forward, tswiglu_forward)
from .errors import ConfigError, InputError
from .features import (FeatureSchema, TokenPlan, default_schema, embed_tokens, glorot, init_embeddings,
                       init_projections, plan_from_schema, project_tokens)
from .fusion import RsaParams, TmhsaParams, init_rsa, init_tmhsa, rsa_forward, tmhsa_forward
from .tensor import Tensor

ZENITH, ZENITH_PP = "zenith", "zenith_pp"
MAGIC = b"ZNTH"
FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture description.

    ``t_hat`` defaults to T*k/D for the zenith variant. ``proj_hidden`` is
    the hidden width of each token's projection MLP (None means 2*D, 0
    means a single linear map). ``tokenwise_boost=False`` swaps Token Boost
    for its shared-weight counterpart (plain SwiGLU / SMoE with one router).
    """

    variant: str = ZENITH
    layers: int = 2
    T: int = 8
    D: int = 16
    k: int = 16
    t_hat: int | None = None
    r: int = 16
    heads: int = 2
    E_c: int = 1
    E_s: int = 4
    E_a: int = 2
    head_hidden: int = 256
    proj_hidden: int | None = None
    softmax_attention: bool = False
    unweighted_experts: bool = False
    tokenwise_boost: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.variant == ZENITH and self.t_hat is None and self.D > 0 and (self.T * self.k) % self.D == 0:
            self.t_hat = self.T * self.k // self.D

    @property
    def d_k(self):
        return self.D // self.heads

    @property
    def proj_width(self):
        return 2 * self.D if self.proj_hidden is None else self.proj_hidden

    def violations(self):
        out = []
        if self.variant not in (ZENITH, ZENITH_PP):
            return [f"variant must be '{ZENITH}' or '{ZENITH_PP}', got {self.variant!r}"]
        names = ["layers", "T", "D", "r", "head_hidden"]
        names += ["k"] if self.variant == ZENITH else ["heads", "E_s", "E_a"]
        for name in names:
            if getattr(self, name) < 1:
                out.append(f"{name} must be positive (got {getattr(self, name)})")
        if out:
            return out
        if self.variant == ZENITH:
            if self.t_hat is None or self.T * self.k != self.t_hat * self.D:
                out.append(f"T*k = {self.T * self.k} must equal T_hat*D "
                           f"(T_hat={self.t_hat}, D={self.D})")
            elif self.T % self.t_hat:
                out.append(f"T_hat = {self.t_hat} must divide T = {self.T}")
        else:
            if self.D % self.heads:
                out.append(f"heads H = {self.heads} must divide D = {self.D}")
            if self.E_a > self.E_s:
                out.append(f"E_a = {self.E_a} must not exceed E_s = {self.E_s}")
            if self.E_c < 0:
                out.append(f"E_c = {self.E_c} must be >= 0")
        return out

    def validate(self):
        v = self.violations()
        if v:
            raise ConfigError("invalid model config: " + "; ".join(v), v)
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {unknown}", [f"unknown key {k}" for k in unknown])
        return cls(**d)


@dataclass
class LayerParams:
    fusion: RsaParams | TmhsaParams
    boost: SwigluParams | TsmoeParams
    out: RegenParams

    def tensors(self):
        for name, t, cat in self.fusion.tensors():
            yield f"fusion.{name}", t, cat
        for name, t, cat in self.boost.tensors():
            yield f"boost.{name}", t, cat
        for name, t, cat in self.out.tensors():
            yield f"out.{name}", t, cat


def init_layer(cfg, rng):
    T, D, r = cfg.T, cfg.D, cfg.r
    if cfg.variant == ZENITH:
        fusion = init_rsa(T, D, cfg.k, rng)
        boost = init_swiglu(D, r, rng, tokens=cfg.t_hat if cfg.tokenwise_boost else None)
        return LayerParams(fusion, boost, init_regen(T, cfg.t_hat, D, rng))
    fusion = init_tmhsa(T, D, cfg.heads, rng)
    boost = init_tsmoe(T, D, r, cfg.E_c, cfg.E_s, cfg.E_a, rng, cfg.tokenwise_boost,
                       cfg.unweighted_experts)
    return LayerParams(fusion, boost, init_regen(T, T, D, rng))


def layer_forward(x, layer, cfg):
    """One Token Fusion -> Token Boost layer; returns ``(output, router_trace_or_None)``."""
    if cfg.variant == ZENITH:
        x_tb = rsa_forward(x, layer.fusion, cfg.softmax_attention)
        o_tb = tswiglu_forward(x_tb, layer.boost)
        return token_regeneration(x, o_tb, layer.out), None
    x_tb = tmhsa_forward(x, layer.fusion, cfg.softmax_attention)
    trace = route_tokens(x_tb, layer.boost)
    o_tb = tsmoe_forward(x_tb, layer.boost, trace)
    return token_regeneration(x, o_tb, layer.out), trace


@dataclass
class ForwardOutput:
    logits: Tensor
    traces: list = field(default_factory=list)
    layer_outputs: list = field(default_factory=list)

    @property
    def probs(self):
        from scipy.special import expit

        return expit(self.logits.data)


class ZenithModel:
    """Parameter bundle plus forward pass for one :class:`ModelConfig`."""

    kind = "zenith"

    def __init__(self, cfg, schema=None, plan=None):
        cfg.validate()
        schema = schema or default_schema()
        plan = plan or plan_from_schema(schema, cfg.D)
        if plan.T != cfg.T or plan.D != cfg.D:
            raise ConfigError(f"token plan is {plan.T}x{plan.D} but config says T={cfg.T}, D={cfg.D}")
        self.cfg, self.schema, self.plan = cfg, schema, plan
        rng = np.random.default_rng(cfg.seed)
        self.embeddings = init_embeddings(schema, rng)
        self.projections = init_projections(schema, plan, rng, cfg.proj_width or None)
        self.layers = [init_layer(cfg, rng) for _ in range(cfg.layers)]
        width = cfg.T * cfg.D
        self.head_w1 = glorot(rng, width, cfg.head_hidden, (width, cfg.head_hidden))
        self.head_b1 = Tensor(np.zeros(cfg.head_hidden), True)
        self.head_w2 = glorot(rng, cfg.head_hidden, 1, (cfg.head_hidden, 1))
        self.head_b2 = Tensor(np.zeros(1), True)
        for name, t, _ in self.named_parameters():
            t.name = name

    def named_parameters(self):
        """Yield ``(name, tensor, category)`` in declaration (checkpoint) order."""
        for name, t in self.embeddings.tensors(self.schema):
            yield name, t, "embedding"
        for name, t in self.projections.tensors():
            yield name, t, "tokenization"
        for i, layer in enumerate(self.layers):
            for name, t, cat in layer.tensors():
                yield f"layer{i}.{name}", t, cat
        yield "head.w1", self.head_w1, "head"
        yield "head.b1", self.head_b1, "head"
        yield "head.w2", self.head_w2, "head"
        yield "head.b2", self.head_b2, "head"

    def parameters(self):
        return [t for _, t, _ in self.named_parameters()]

    def tokens(self, batch):
        if batch.values.ndim != 2 or batch.values.shape[1] != self.schema.K:
            raise InputError(f"batch has width {batch.values.shape[-1]}, model schema has K={self.schema.K}")
        return project_tokens(embed_tokens(batch, self.embeddings, self.schema, self.plan),
                              self.projections)

    def head(self, x):
        b = x.shape[0]
        h = tn.swish(x.reshape(b, self.cfg.T * self.cfg.D) @ self.head_w1 + self.head_b1)
        return (h @ self.head_w2 + self.head_b2).reshape(b)

    def forward(self, batch):
        x = self.tokens(batch)
        traces, outputs = [], []
        for layer in self.layers:
            x, trace = layer_forward(x, layer, self.cfg)
            outputs.append(x)
            if trace is not None:
                traces.append(trace)
        return ForwardOutput(self.head(x), traces, outputs)

    def predict(self, batch):
        with tn.no_grad():
            return self.forward(batch).probs

    def header(self):
        return {"kind": self.kind, "model": self.cfg.to_dict(), "schema": self.schema.to_dict(),
                "plan": self.plan.to_dict()}

    def save(self, path):
        write_checkpoint(path, self.header(), self.named_parameters())

    @classmethod
    def load(cls, path):
        header, arrays = read_checkpoint(path)
        if header.get("kind") != cls.kind:
            raise ConfigError(f"{path} holds a {header.get('kind')!r} checkpoint, not {cls.kind!r}")
        model = cls(ModelConfig.from_dict(header["model"]), FeatureSchema.from_dict(header["schema"]),
                    TokenPlan.from_dict(header["plan"]))
        _assign(model, arrays)
        return model


def build_model(cfg, schema=None, plan=None):
    """Validate ``cfg`` and return a freshly initialised :class:`ZenithModel`."""
    return ZenithModel(cfg, schema, plan)


# ---------------------------------------------------------------------------
# checkpoints


def write_checkpoint(path, header, named):
    """``ZNTH`` | u32 version | u32 json length | json | raw little-endian f64 payloads."""
    named = list(named)
    header = dict(header)
    header["tensors"] = [[n, list(t.shape)] for n, t, *_ in named]
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for _, t, *_ in named:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def read_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise InputError(f"{path}: not a checkpoint (bad magic)")
    version, n = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[12:12 + n])
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise InputError(f"{path}: corrupt checkpoint header ({e})") from e
    offset = 12 + n
    arrays = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        if offset + 8 * count > len(raw):
            raise InputError(f"{path}: truncated payload for tensor {name}")
        arrays[name] = np.frombuffer(raw, "<f8", count, offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(raw):
        raise InputError(f"{path}: trailing or missing payload bytes")
    return header, arrays


def _assign(model, arrays):
    named = list(model.named_parameters())
    if [n for n, *_ in named] != list(arrays):
        raise InputError("checkpoint tensors do not match the model layout")
    for name, t, *_ in named:
        if arrays[name].shape != t.shape:
            raise InputError(f"checkpoint tensor {name} has shape {arrays[name].shape}, expected {t.shape}")
        t.data[...] = arrays[name]


# ---------------------------------------------------------------------------
# accounting


@dataclass
class CostReport:
    """Exact parameter and per-example FLOP counts.

    FLOP convention: a multiply-add counts 2, so an m x n by n x p product
    costs 2mnp; elementwise work (activations, Hadamard products, residual
    adds, normalisation) counts 1 per element and is reported separately.
    Sparse experts are counted only for the E_a activated per token.
    """

    variant: str
    layer_params: list = field(default_factory=list)
    appendix_params: int = 0
    interaction_params: int = 0
    activated_interaction_params: int = 0
    embedding_params: int = 0
    tokenization_params: int = 0
    head_params: int = 0
    total_params: int = 0
    activated_params: int = 0
    layer_flops: list = field(default_factory=list)
    tokenization_flops: int = 0
    head_flops: int = 0
    matmul_flops: int = 0
    elementwise_flops: int = 0

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def layer_param_items(cfg):
    """Closed-form parameter count of one layer, itemised by category."""
    T, D, r = cfg.T, cfg.D, cfg.r
    if cfg.variant == ZENITH:
        t_hat = cfg.t_hat
        regen = T > t_hat
        return {
            "rsa_projection": D * cfg.k,
            "residual_mlp": D * D,
            "token_boost": 3 * (t_hat if cfg.tokenwise_boost else 1) * D * r,
            "regeneration": D * D if regen else 0,
            "bias": D + (D if regen else 0),
            "norm": 4 * D,
        }
    return {
        "attention": 3 * T * D * D,
        "router": (T if cfg.tokenwise_boost else 1) * D * cfg.E_s,
        "shared_experts": 3 * D * r * cfg.E_c,
        "sparse_experts": 3 * D * r * cfg.E_s,
        "norm": 4 * D,
    }


def appendix_layer_params(cfg):
    """``Dk + D^2 + 3 T_hat D r`` (zenith) or ``3 T D^2 + T D E_s + 3 D r (E_c + E_s)``."""
    T, D, r = cfg.T, cfg.D, cfg.r
    if cfg.variant == ZENITH:
        return D * cfg.k + D * D + 3 * cfg.t_hat * D * r
    return 3 * T * D * D + T * D * cfg.E_s + 3 * D * r * (cfg.E_c + cfg.E_s)


def _head_counts(cfg):
    T, D, H1 = cfg.T, cfg.D, cfg.head_hidden
    return T * D * H1 + H1 + H1 + 1, 2 * T * D * H1 + 2 * H1


def _tokenization_counts(cfg, schema, plan):
    """``(embedding params, projection params, projection flops)``."""
    plan = plan or plan_from_schema(schema, cfg.D)
    if plan.T != cfg.T:
        raise ConfigError(f"token plan has {plan.T} tokens but config says T={cfg.T}")
    emb = sum(f.vocab * f.embed_dim if f.sparse else 2 * f.embed_dim for f in schema.features)
    dims = plan.input_dims(schema)
    h, T, D = cfg.proj_width, cfg.T, cfg.D
    if h:
        return (emb, sum(n * h for n in dims) + T * h + T * h * D + T * D,
                sum(2 * n * h for n in dims) + 2 * T * h * D)
    return emb, sum(n * D for n in dims) + T * D, sum(2 * n * D for n in dims)


def count_params(cfg, schema=None, plan=None):
    """Closed-form parameter counts.

    Interaction layers and head always; tokenization and embeddings only
    when ``schema`` is given. Embeddings are itemised but excluded from the
    totals, as shared lookup tables are not part of model size.
    """
    cfg.validate()
    items = layer_param_items(cfg)
    per_layer = sum(items.values())
    inactive = 3 * cfg.D * cfg.r * (cfg.E_s - cfg.E_a) if cfg.variant == ZENITH_PP else 0
    rep = CostReport(cfg.variant, [dict(items) for _ in range(cfg.layers)], appendix_layer_params(cfg))
    rep.interaction_params = per_layer * cfg.layers
    rep.activated_interaction_params = (per_layer - inactive) * cfg.layers
    rep.head_params = _head_counts(cfg)[0]
    if schema is not None:
        rep.embedding_params, rep.tokenization_params, _ = _tokenization_counts(cfg, schema, plan)
    rep.total_params = rep.interaction_params + rep.tokenization_params + rep.head_params
    rep.activated_params = rep.total_params - inactive * cfg.layers
    return rep


def layer_flop_items(cfg):
    """Per-example matmul FLOPs of one layer, itemised."""
    T, D, r = cfg.T, cfg.D, cfg.r
    if cfg.variant == ZENITH:
        t_hat = cfg.t_hat
        return {
            "attention": 4 * T * T * D,
            "rsa_projection": 2 * T * D * cfg.k,
            "residual_mlp": 2 * T * D * D,
            "token_boost": 6 * t_hat * D * r,
            "regeneration": 2 * (T - t_hat) * D * D,
        }
    return {
        "attention_projection": 6 * T * D * D,
        "attention": 4 * T * T * D,
        "router": 2 * T * D * cfg.E_s,
        "experts": 6 * T * (cfg.E_c + cfg.E_a) * D * r,
    }


def layer_elementwise(cfg):
    T, D, r = cfg.T, cfg.D, cfg.r
    if cfg.variant == ZENITH:
        t_hat = cfg.t_hat
        # swish + hadamard, two residual adds, two norms
        return 2 * t_hat * r + t_hat * D + T * D + t_hat * D + T * D
    # swish + hadamard per evaluated expert, expert weighting/sum, residuals, norms, softmax
    return (2 * T * (cfg.E_c + cfg.E_a) * r + T * (cfg.E_c + cfg.E_a) * D
            + 2 * T * D + 2 * T * D + T * cfg.E_s)


def count_flops(cfg, schema=None, plan=None):
    """Per-example forward FLOPs (see :class:`CostReport` for the convention)."""
    cfg.validate()
    items = layer_flop_items(cfg)
    rep = CostReport(cfg.variant, layer_flops=[dict(items) for _ in range(cfg.layers)])
    rep.head_flops = _head_counts(cfg)[1]
    if schema is not None:
        rep.tokenization_flops = _tokenization_counts(cfg, schema, plan)[2]
    rep.matmul_flops = sum(items.values()) * cfg.layers + rep.tokenization_flops + rep.head_flops
    rep.elementwise_flops = layer_elementwise(cfg) * cfg.layers
    return rep


def cost_report(cfg, schema=None, plan=None):
    """Parameters and FLOPs in one report."""
    rep = count_params(cfg, schema, plan)
    fl = count_flops(cfg, schema, plan)
    for name in ("layer_flops", "tokenization_flops", "head_flops", "matmul_flops", "elementwise_flops"):
        setattr(rep, name, getattr(fl, name))
    return rep


def enumerate_params(model):
    """Count built tensors by category (the oracle for :func:`count_params`)."""
    per_layer = []
    for layer in model.layers:
        counts: dict[str, int] = {}
        for _, t, cat in layer.tensors():
            counts[cat] = counts.get(cat, 0) + t.size
        per_layer.append(counts)
    other: dict[str, int] = {}
    for _, t, cat in model.named_parameters():
        if cat in ("embedding", "tokenization", "head"):
            other[cat] = other.get(cat, 0) + t.size
    return per_layer, other
