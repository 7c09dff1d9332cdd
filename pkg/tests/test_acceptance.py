"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` (about 35 minutes on
one core; criteria 7-9 train many small models). The lines are repeated in
the terminal summary.
"""

import math
import time

import numpy as np
import pytest

from conftest import random_batch, tiny_schema
from zenith import tensor as tn
from zenith.boost import (RouterTrace, compensated_alpha, init_tsmoe, load_balance_loss, route_tokens,
                          top_k_mask, tsmoe_forward, z_loss)
from zenith.cli import dispatch
from zenith.features import default_schema, generate_dataset, plan_from_schema, planted_ground_truth
from zenith.fusion import inverse_retokenize, retokenize
from zenith.metrics import LogisticModel, auc, evaluate, logloss, token_similarity_probe, uauc
from zenith.model import ModelConfig, build_model, count_params, enumerate_params, layer_param_items
from zenith.tensor import Tensor, gradcheck
from zenith.train import TrainConfig, loss_terms, train

RESULTS = {}


def report(n, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}  {title}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def seeds_passing(flags):
    return sum(bool(f) for f in flags)


# 1 -----------------------------------------------------------------------------

TINY = {
    "zenith": dict(variant="zenith", layers=2, T=4, D=8, k=8, t_hat=4, r=8, head_hidden=4, proj_hidden=4),
    "zenith_pp": dict(variant="zenith_pp", layers=2, T=4, D=8, heads=2, E_c=1, E_s=4, E_a=2, r=8,
                      head_hidden=4, proj_hidden=4),
}


def test_1_gradient_soundness():
    t0 = time.process_time()
    rng = np.random.default_rng(1)
    schema = tiny_schema()
    worst, failed, checked = 0.0, [], 0
    for variant, kw in TINY.items():
        model = build_model(ModelConfig(seed=3, **kw), schema)
        batch = random_batch(schema, 6, rng)
        cfg = TrainConfig(alpha=0.5, beta=0.1)

        def loss():
            task, load, z, _ = loss_terms(model, batch, cfg)
            return task + load + z

        params = model.parameters()
        ok, errors = gradcheck(loss, params, step=1e-5, rtol=1e-4)
        checked += sum(p.size for p in params)
        worst = max(worst, max(errors.values()))
        failed += [f"{variant}:{k}" for k, e in errors.items() if e > 1e-4]
    elapsed = time.process_time() - t0
    report(1, "gradient soundness", not failed and elapsed < 60,
           f"{checked} scalars, worst rel err {worst:.1e}, {elapsed:.1f}s CPU"
           + (f", failing {failed}" if failed else ""))


# 2 -----------------------------------------------------------------------------

def random_config(variant, rng):
    D = int(rng.choice([4, 8, 12, 16]))
    plan = plan_from_schema(default_schema(), D, max_token_size=int(rng.choice([2, 3, 6])))
    T = plan.T
    common = dict(variant=variant, layers=int(rng.integers(1, 4)), T=T, D=D, r=int(rng.integers(1, 9)),
                  head_hidden=int(rng.integers(1, 9)), proj_hidden=int(rng.choice([0, 5])),
                  tokenwise_boost=bool(rng.integers(2)), seed=int(rng.integers(100)))
    if variant == "zenith":
        hats = [h for h in range(1, T + 1) if T % h == 0 and (h * D) % T == 0]
        t_hat = int(rng.choice(hats))
        return ModelConfig(k=t_hat * D // T, t_hat=t_hat, **common), plan
    heads = int(rng.choice([h for h in (1, 2, 4) if D % h == 0]))
    e_s = int(rng.integers(1, 6))
    return ModelConfig(heads=heads, E_c=int(rng.integers(0, 3)), E_s=e_s, E_a=int(rng.integers(1, e_s + 1)),
                       **common), plan


def test_2_closed_form_parity():
    rng = np.random.default_rng(2)
    schema = default_schema()
    mismatches, n = [], 0
    for variant in ("zenith", "zenith_pp"):
        for _ in range(5):
            cfg, plan = random_config(variant, rng)
            model = build_model(cfg, schema, plan)
            per_layer, other = enumerate_params(model)
            rep = count_params(cfg, schema, plan)
            built = sum(t.size for _, t, c in model.named_parameters() if c != "embedding")
            same = (per_layer == [{k: v for k, v in d.items() if v} for d in rep.layer_params]
                    and built == rep.total_params and other["embedding"] == rep.embedding_params)
            n += 1
            if not same:
                mismatches.append(cfg)
            if variant == "zenith_pp":
                items = layer_param_items(cfg)
                if items["attention"] != 3 * cfg.T * cfg.D ** 2:
                    mismatches.append(("3TD^2", cfg))
                if cfg.tokenwise_boost and items["router"] != cfg.T * cfg.D * cfg.E_s:
                    mismatches.append(("TDE_s", cfg))
    worked = [
        count_params(ModelConfig(variant="zenith", layers=1, T=4, D=512, k=512, r=512)).appendix_params,
        layer_param_items(ModelConfig(variant="zenith_pp", layers=1, T=2, D=512, r=8, heads=8))["attention"],
        layer_param_items(ModelConfig(variant="zenith_pp", layers=1, T=8, D=512, r=8, heads=8, E_s=4))["router"],
    ]
    ok = not mismatches and worked == [3_670_016, 1_572_864, 16_384]
    report(2, "closed-form parity", ok, f"{n} random configs exact, worked examples {worked}")


# 3 -----------------------------------------------------------------------------

def test_3_grouped_matmul_equivalence():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        g = int(rng.integers(1, 12))
        lhs, rhs = [], []
        for _ in range(g):
            m, n, p = rng.integers(1, 20, size=3)
            lhs.append(Tensor(rng.standard_normal((m, n))))
            rhs.append(Tensor(rng.standard_normal((n, p))))
        for out, a, b in zip(tn.grouped_matmul(lhs, rhs), lhs, rhs):
            worst = max(worst, float(np.abs(out.data - (a @ b).data).max()))

    lhs = [Tensor(rng.standard_normal((64, 64))) for _ in range(8)]
    rhs = [Tensor(rng.standard_normal((64, 64))) for _ in range(8)]

    def best(fn, reps=200):
        times = []
        for _ in range(reps):
            t = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t)
        return min(times)

    t_loop = best(lambda: [a @ b for a, b in zip(lhs, rhs)])
    t_group = best(lambda: tn.grouped_matmul(lhs, rhs))
    report(3, "grouped matmul equivalence", worst <= 1e-12,
           f"max abs diff {worst:.1e} over 100 groupings; 8x(64x64): loop {t_loop * 1e6:.0f}us, "
           f"grouped {t_group * 1e6:.0f}us (informational)")


# 4 -----------------------------------------------------------------------------

def test_4_retokenization():
    rng = np.random.default_rng(4)
    bad = []
    for i in range(50):
        D = int(rng.integers(1, 33))
        T = int(rng.integers(1, 17))
        # smallest k with T*k divisible by D, times a random factor
        k = D // math.gcd(T, D) * int(rng.integers(1, 4))
        t_hat = T * k // D
        o1 = Tensor(rng.standard_normal((3, T, k)), True)
        o = retokenize(o1, D)
        shared = np.shares_memory(o.data, o1.data)
        back = inverse_retokenize(o, k)
        flat_ok = np.array_equal(o.data.reshape(3, -1), o1.data.reshape(3, -1))
        g = tn.backward(o.sum())[o1]
        if not (o.shape == (3, t_hat, D) and shared and flat_ok and np.array_equal(back.data, o1.data)
                and np.array_equal(g, np.ones_like(o1.data))):
            bad.append((T, k, t_hat, D))
    report(4, "retokenization", not bad, f"50 tuples bijective, views of the input, unit gradient"
           + (f"; failing {bad}" if bad else ""))


# 5 -----------------------------------------------------------------------------

def dense_mixture(x, p):
    """Every expert evaluated, weighted by softmax over all E_s (valid when E_a = E_s)."""
    def sw(v, e):
        a = v @ e.w1.data
        return ((a / (1 + np.exp(-a))) * (v @ e.w2.data)) @ e.w3.data

    logits = np.einsum("btd,tde->bte", x, p.router.data)
    probs = np.exp(logits - logits.max(-1, keepdims=True))
    probs /= probs.sum(-1, keepdims=True)
    out = sum(sw(x, e) for e in p.shared)
    return out + sum(probs[..., i:i + 1] * sw(x, e) for i, e in enumerate(p.sparse))


def test_5_tsmoe_sparsity_and_limits():
    rng = np.random.default_rng(5)
    # (a) perturbing an expert leaves every position that did not route to it unchanged
    changed, routed_moved = 0, 0
    for _ in range(20):
        p = init_tsmoe(4, 6, 5, 1, 5, 2, rng)
        x = Tensor(rng.standard_normal((3, 4, 6)))
        trace = route_tokens(x, p)
        before = tsmoe_forward(x, p, trace).data.copy()
        i = int(rng.integers(5))
        for w in (p.sparse[i].w1, p.sparse[i].w2, p.sparse[i].w3):
            w.data += rng.standard_normal(w.shape)
        after = tsmoe_forward(x, p, route_tokens(x, p)).data
        idle = trace.mask[..., i] == 0
        changed += not np.array_equal(before[idle], after[idle])
        # the perturbation is real: positions that did route to expert i move
        routed_moved += (~idle).any() and not np.allclose(before[~idle], after[~idle])

    # (b) all experts active is the dense softmax mixture
    p = init_tsmoe(4, 6, 5, 2, 4, 4, rng)
    x = rng.standard_normal((7, 4, 6))
    xt = Tensor(x)
    dense_err = float(np.abs(tsmoe_forward(xt, p, route_tokens(xt, p)).data - dense_mixture(x, p)).max())

    # (c) routing invariants at every step of a 500-step run
    schema = default_schema()
    data = generate_dataset(schema, planted_ground_truth(schema, seed=5), 500 * 16, seed=5, bayes_samples=0)
    model = build_model(ModelConfig(variant="zenith_pp", layers=2, T=8, D=8, r=8, heads=2, E_c=1, E_s=4,
                                    E_a=2, head_hidden=16, proj_hidden=0, seed=5), schema)
    violations = []

    def check(step, row, out):
        for t in out.traces:
            if not (np.allclose(t.probs.data.sum(-1), 1.0, atol=1e-12) and (t.mask.sum(-1) == t.active).all()
                    and abs(t.loads.sum() - t.active) <= 1e-12):
                violations.append(step)

    res = train(model, data, TrainConfig(total_steps=500, batch_size=16, warmup_steps=50, seed=5,
                                         check_router=False), on_step=check)
    ok = changed == 0 and routed_moved > 0 and dense_err <= 1e-12 and not violations and res.steps == 500
    report(5, "TSMoE sparsity and limits", ok,
           f"(a) {changed}/20 perturbations moved a non-routed output ({routed_moved} moved routed ones), "
           f"(b) dense err {dense_err:.1e}, "
           f"(c) {len(violations)} violations in {res.steps} steps")


# 6 -----------------------------------------------------------------------------

def make_trace(logits, active, mask=None):
    z = Tensor(np.asarray(logits, dtype=float), True)
    b, t, e = z.shape
    probs = tn.softmax(z)
    mask = top_k_mask(z.data, active) if mask is None else mask
    return RouterTrace(z, probs, mask, mask.reshape(-1, e).mean(0), probs.reshape(b * t, e).mean(axis=0),
                       b, t, active)


def test_6_auxiliary_loss_values():
    uniform_mask = np.tile([[1, 1, 0, 0], [0, 0, 1, 1]], (4, 1)).reshape(2, 4, 4).astype(float)
    uniform = make_trace(np.zeros((2, 4, 4)), 2, uniform_mask)
    val = load_balance_loss(uniform, 1.0).item()
    expect = 1.0 / (2 * 4 * 4 ** 2)
    collapsed = load_balance_loss(make_trace(np.tile([9.0, 9.0, -9.0, -9.0], (2, 4, 1)), 2), 1.0).item()
    zs = []
    for e_s, beta in ((4, 1.0), (3, 0.3), (8, 1e-3)):
        zs.append(abs(z_loss(make_trace(np.zeros((2, 4, e_s)), 1), beta).item() - beta * math.log(e_s) ** 2))
    ok = abs(val - expect) <= 1e-15 and val == 0.0078125 and collapsed > val and max(zs) <= 1e-12
    report(6, "auxiliary loss values", ok,
           f"L_load uniform {val!r} (expected {expect!r}), collapsed {collapsed:.6f}, "
           f"max |L_z - beta ln^2 E_s| {max(zs):.1e}")


# 7 -----------------------------------------------------------------------------

DESK_PP = dict(variant="zenith_pp", layers=2, T=8, D=8, r=8, heads=2, E_c=1, E_s=4, E_a=2,
               head_hidden=32, proj_hidden=0)


def load_cv(expert_loads, last=500):
    """Coefficient of variation of f_i averaged over the last steps, mean over layers."""
    f = np.mean(np.asarray(expert_loads[-last:]), axis=0)
    return float(np.mean(f.std(axis=-1) / f.mean(axis=-1)))


@pytest.mark.slow
def test_7_router_balance():
    t0 = time.process_time()
    schema = default_schema()
    B, steps = 32, 5000
    alpha = compensated_alpha(1e-2, B, DESK_PP["T"], DESK_PP["E_s"])
    rows = []
    for seed in range(5):
        data = generate_dataset(schema, planted_ground_truth(schema, seed=seed), B * steps, seed=seed,
                                bayes_samples=0)
        cvs = {}
        for name, (warmup, a, b) in {"off": (0, 0.0, 0.0), "on": (1000, alpha, 1e-3)}.items():
            model = build_model(ModelConfig(seed=seed, **DESK_PP), schema)
            res = train(model, data, TrainConfig(total_steps=steps, batch_size=B, warmup_steps=warmup,
                                                 alpha=a, beta=b, seed=seed))
            cvs[name] = load_cv(res.expert_loads)
        rows.append(cvs)
    elapsed = time.process_time() - t0
    wins = seeds_passing(r["on"] < r["off"] for r in rows)
    detail = ", ".join(f"{r['on']:.3f}<{r['off']:.3f}" for r in rows)
    report(7, "router balance", wins >= 4 and elapsed < 600,
           f"CV on<off in {wins}/5 seeds ({detail}), alpha {alpha:g}, {elapsed:.0f}s CPU")


# 8 -----------------------------------------------------------------------------

@pytest.mark.slow
def test_8_token_heterogeneity():
    schema = default_schema()
    B, steps = 32, 5000
    wins, details = {}, {}
    for variant in ("zenith", "zenith_pp"):
        flags, parts = [], []
        for seed in range(5):
            truth = planted_ground_truth(schema, seed=seed)
            data = generate_dataset(schema, truth, B * steps, seed=seed, bayes_samples=0)
            probe = generate_dataset(schema, truth, 512, seed=seed + 1, bayes_samples=0).all()
            sims = {}
            for tokenwise in (True, False):
                cfg = ModelConfig(tokenwise_boost=tokenwise, seed=seed,
                                  **{**DESK_PP, "variant": variant, "layers": 3, "k": 8})
                model = build_model(cfg, schema)
                train(model, data, TrainConfig(total_steps=steps, batch_size=B, warmup_steps=1000, seed=seed))
                sims[tokenwise] = token_similarity_probe(model, probe, 3).mean_off_diagonal
            flags.append(sims[True] < sims[False])
            parts.append(f"{sims[True]:.3f}<{sims[False]:.3f}")
        wins[variant], details[variant] = seeds_passing(flags), ", ".join(parts)
    ok = all(w >= 4 for w in wins.values())
    report(8, "token heterogeneity", ok,
           "; ".join(f"{v} tokenwise<shared in {wins[v]}/5 ({details[v]})" for v in wins))


# 9 -----------------------------------------------------------------------------

GAP_MODEL = dict(layers=2, D=16, k=16, r=16, heads=2, head_hidden=64, proj_hidden=0)
GAP_TRAIN = dict(batch_size=32, warmup_steps=100)


@pytest.mark.slow
def test_9_end_to_end_learning_gap():
    schema = default_schema()
    n_train, n_test = 100_000, 20_000
    cpu = {"zenith": 0.0, "zenith_pp": 0.0}
    flags = {"zenith": [], "zenith_pp": []}
    parts = []
    for seed in range(5):
        truth = planted_ground_truth(schema, seed=seed)
        tr = generate_dataset(schema, truth, n_train, seed=seed, bayes_samples=200_000)
        te = generate_dataset(schema, truth, n_test, seed=seed + 1000, bayes_samples=0)
        bayes = tr.meta["bayes_auc"]
        tcfg = TrainConfig(total_steps=n_train // GAP_TRAIN["batch_size"], seed=seed, **GAP_TRAIN)
        base = LogisticModel(schema, seed)
        train(base, tr, tcfg)
        logistic = evaluate(base, te).auc
        part = f"seed {seed}: bayes {bayes:.3f} logistic {logistic:.3f}"
        for variant in flags:
            t0 = time.process_time()
            model = build_model(ModelConfig(variant=variant, seed=seed, **GAP_MODEL), schema)
            train(model, tr, tcfg)
            a = evaluate(model, te).auc
            cpu[variant] += time.process_time() - t0
            flags[variant].append(a >= logistic + 0.03 and a >= bayes - 0.02)
            part += f" {variant} {a:.3f}"
        parts.append(part)
    wins = {v: seeds_passing(f) for v, f in flags.items()}
    ok = all(w >= 4 for w in wins.values()) and all(c < 900 for c in cpu.values())
    report(9, "end-to-end learning gap", ok,
           ", ".join(f"{v} {wins[v]}/5 in {cpu[v]:.0f}s CPU" for v in wins) + " | " + "; ".join(parts))


# 10 ----------------------------------------------------------------------------

def pair_auc(scores, labels):
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def loop_uauc(scores, labels, users):
    vals = []
    for u in sorted(set(users.tolist())):
        sel = users == u
        if 0 < labels[sel].sum() < sel.sum():
            vals.append(pair_auc(scores[sel], labels[sel]))
    return math.fsum(vals) / len(vals)


def loop_logloss(probs, labels):
    total = []
    for p, y in zip(probs, labels):
        p = min(max(p, 1e-7), 1 - 1e-7)
        total.append(-(y * math.log(p) + (1 - y) * math.log(1 - p)))
    return math.fsum(total) / len(total)


def test_10_metric_oracles():
    rng = np.random.default_rng(10)
    bad = 0
    for _ in range(100):
        n = int(rng.integers(4, 40))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        users = rng.integers(0, 4, n)
        users[:2] = 0
        # coarse scores so ties occur
        probs = np.round(rng.uniform(0, 1, n), 1)
        probs[rng.random(n) < 0.1] = 0.0
        same = (auc(probs, labels) == pair_auc(probs, labels)
                and uauc(probs, labels, users) == loop_uauc(probs, labels, users)
                and logloss(probs, labels) == loop_logloss(probs, labels))
        bad += not same
    report(10, "metric oracles", bad == 0, f"{100 - bad}/100 batches exactly equal to the loop oracles")


# 11 ----------------------------------------------------------------------------

def test_11_determinism(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text('{"model": {"variant": "zenith_pp", "layers": 2, "T": 8, "D": 8, "r": 8, "heads": 2,'
                   ' "E_c": 1, "E_s": 4, "E_a": 2, "head_hidden": 16, "proj_hidden": 0},'
                   ' "train": {"total_steps": 60, "warmup_steps": 10, "batch_size": 32},'
                   ' "data": {"n_train": 3000, "n_test": 600, "seed": 4, "truth_seed": 4,'
                   ' "bayes_samples": 1000}}')
    runs = []
    for i in range(2):
        out = tmp_path / f"run{i}"
        codes = [dispatch(["gen-data", "--config", str(cfg), "--out", str(out / "data"), "--seed", "11"]),
                 dispatch(["train", "--config", str(cfg), "--out", str(out), "--seed", "11"]),
                 dispatch(["probe-sim", "--config", str(cfg), "--out", str(out / "probe"), "--seed", "11",
                           "--checkpoint", str(out / "model.znth")])]
        files = sorted(p for p in out.rglob("*") if p.suffix in (".csv", ".znth"))
        runs.append((codes, {p.relative_to(out): p.read_bytes() for p in files}))
    (codes0, files0), (codes1, files1) = runs
    differ = [str(k) for k in files0 if files0[k] != files1.get(k)]
    ok = codes0 == codes1 == [0, 0, 0] and files0.keys() == files1.keys() and not differ and len(files0) >= 5
    report(11, "determinism", ok, f"{len(files0)} checkpoint/CSV files byte-identical across two runs"
           + (f"; differing {differ}" if differ else ""))
