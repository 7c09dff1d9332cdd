"""Single-pass streaming training with linear LR warm-up and RMSProp.

The optimizer keeps an exponential moving average of squared gradients
``v <- decay * v + (1 - decay) * g^2`` started from ``accum_init`` and
steps ``theta <- theta - lr * g / (sqrt(v) + eps)``. An Adam variant is
available for sanity comparisons.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .boost import load_balance_loss, z_loss
from .errors import ConfigError
from .tensor import Tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "lr", "task_loss", "load_loss", "z_loss", "max_expert_load"]


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    decay: float = 0.99999
    accum_init: float = 0.015625
    eps: float = 1e-8
    warmup_steps: int = 1000
    total_steps: int = 5000
    batch_size: int = 64
    alpha: float = 1e-2
    beta: float = 1e-3
    optimizer: str = "rmsprop"
    check_router: bool = True
    seed: int = 0

    def violations(self):
        out = []
        if not 0 < self.decay < 1:
            out.append(f"decay must lie in (0, 1), got {self.decay}")
        if self.base_lr <= 0:
            out.append("base_lr must be positive")
        if self.accum_init <= 0:
            out.append("accum_init must be positive")
        if self.warmup_steps < 0 or self.warmup_steps > self.total_steps:
            out.append(f"warmup_steps = {self.warmup_steps} must lie in [0, total_steps = {self.total_steps}]")
        if self.batch_size < 1:
            out.append("batch_size must be positive")
        if self.alpha < 0 or self.beta < 0:
            out.append("alpha and beta must be non-negative")
        if self.optimizer not in ("rmsprop", "adam"):
            out.append(f"optimizer must be 'rmsprop' or 'adam', got {self.optimizer!r}")
        return out

    def validate(self):
        v = self.violations()
        if v:
            raise ConfigError("invalid train config: " + "; ".join(v), v)
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown train config keys: {unknown}", [f"unknown key {k}" for k in unknown])
        return cls(**d)


def warmup_lr(step, cfg):
    """Linear ramp from 0.1% of ``base_lr`` at step 0 to ``base_lr`` at ``warmup_steps``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    base = cfg.base_lr
    if cfg.warmup_steps == 0 or step >= cfg.warmup_steps:
        return base
    start = 1e-3 * base
    return start + (base - start) * step / cfg.warmup_steps


@dataclass
class OptimizerState:
    """Optimizer slots over one flat copy of all parameters.

    Each parameter's ``data`` is rebound to a view of ``flat`` so the update
    is a single vectorised expression.
    """

    flat: np.ndarray
    views: list
    offsets: list
    accum: np.ndarray
    step: int = 0
    moment: np.ndarray | None = None

    def attach(self, params):
        """Re-point parameters whose ``data`` was replaced (e.g. by loading)."""
        for p, v, (lo, hi) in zip(params, self.views, self.offsets):
            if p.data is not v:
                self.flat[lo:hi] = np.asarray(p.data, dtype=np.float64).ravel()
                p.data = v


def init_optimizer(params, cfg):
    sizes = [p.data.size for p in params]
    ends = np.cumsum([0] + sizes)
    offsets = [(int(a), int(b)) for a, b in zip(ends[:-1], ends[1:])]
    flat = np.concatenate([p.data.ravel() for p in params]) if params else np.zeros(0)
    views = []
    for p, (lo, hi) in zip(params, offsets):
        v = flat[lo:hi].reshape(p.data.shape)
        p.data = v
        views.append(v)
    accum = np.full(flat.size, cfg.accum_init)
    moment = np.zeros(flat.size) if cfg.optimizer == "adam" else None
    return OptimizerState(flat, views, offsets, accum, 0, moment)


def optimizer_step(params, grads, state, lr, cfg):
    """Update ``params`` in place; returns False (and changes nothing) on a non-finite gradient.

    Parameters without a gradient see ``g = 0``: their accumulator decays
    and they do not move.
    """
    state.attach(params)
    parts = []
    for p in params:
        g = grads.get(p)
        parts.append(np.zeros(p.data.size) if g is None else g.ravel())
    g = np.concatenate(parts) if parts else np.zeros(0)
    if not np.isfinite(g).all():
        return False
    state.step += 1
    d = cfg.decay
    v, tmp = state.accum, np.empty_like(g)
    v *= d
    np.multiply(g, g, out=tmp)
    tmp *= 1.0 - d
    v += tmp
    if state.moment is None:
        np.sqrt(v, out=tmp)
        tmp += cfg.eps
        np.divide(g, tmp, out=tmp)
    else:
        m = state.moment
        m *= 0.9
        m += 0.1 * g
        np.sqrt(v / (1.0 - d ** state.step), out=tmp)
        tmp += cfg.eps
        np.divide(m / (1.0 - 0.9 ** state.step), tmp, out=tmp)
    tmp *= lr
    state.flat -= tmp
    return True


@dataclass
class TrainResult:
    rows: list = field(default_factory=list)
    expert_loads: list = field(default_factory=list)
    router_probs: list = field(default_factory=list)
    steps: int = 0
    early_stop: bool = False
    skipped_steps: int = 0

    def write_log(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for row in self.rows:
                w.writerow([row["step"]] + [repr(row[c]) for c in LOG_COLUMNS[1:]])

    def mean_task_loss(self, lo, hi):
        vals = [r["task_loss"] for r in self.rows[lo:hi]]
        return float(np.mean(vals))


def loss_terms(model, batch, cfg):
    """Forward pass plus ``(task, load, z)`` losses and the router traces."""
    out = model.forward(batch)
    task = tn.bce_with_logits(out.logits, batch.labels)
    load, z = Tensor(0.0), Tensor(0.0)
    for trace in out.traces:
        if cfg.check_router:
            trace.check()
        load = load + load_balance_loss(trace, cfg.alpha)
        z = z + z_loss(trace, cfg.beta)
    return task, load, z, out


def train(model, dataset, cfg, log_path=None, checkpoint_path=None, on_step=None):
    """Train ``model`` on one shuffled pass over ``dataset``.

    Stops after ``cfg.total_steps`` steps or when the data runs out
    (recorded as ``early_stop``). Steps with a non-finite gradient are
    skipped and logged. With a fixed seed, results are bit-reproducible.
    """
    cfg.validate()
    params = model.parameters()
    state = init_optimizer(params, cfg)
    order = np.random.default_rng(cfg.seed).permutation(len(dataset))
    available = len(dataset) // cfg.batch_size
    steps = min(cfg.total_steps, available)
    result = TrainResult(early_stop=available < cfg.total_steps)
    if result.early_stop:
        log.info("dataset holds %d batches; stopping before total_steps=%d", available, cfg.total_steps)

    for step in range(steps):
        batch = dataset.batch(order[step * cfg.batch_size:(step + 1) * cfg.batch_size])
        task, load, z, out = loss_terms(model, batch, cfg)
        grads = tn.backward(task + load + z)
        lr = warmup_lr(step, cfg)
        if not optimizer_step(params, grads, state, lr, cfg):
            result.skipped_steps += 1
            log.warning("step %d: non-finite gradient, update skipped", step)
        loads = [t.loads for t in out.traces]
        result.expert_loads.append(loads)
        result.router_probs.append([t.mean_probs.data.copy() for t in out.traces])
        result.rows.append({
            "step": step,
            "lr": lr,
            "task_loss": float(task.item()),
            "load_loss": float(load.item()),
            "z_loss": float(z.item()),
            "max_expert_load": float(max(l.max() for l in loads)) if loads else 0.0,
        })
        if not np.isfinite(state.flat).all():
            bad = next(p for p in params if not np.isfinite(p.data).all())
            raise FloatingPointError(f"parameter {bad.name} became non-finite at step {step}")
        if on_step is not None:
            on_step(step, result.rows[-1], out)
    result.steps = steps
    if log_path is not None:
        result.write_log(log_path)
    if checkpoint_path is not None:
        model.save(checkpoint_path)
    return result
