"""Acceptance suite: one test per criterion, one printed pass/fail line each.

Run with `pytest -s tests/test_acceptance.py` to see every line. Everything
is seeded, so results are identical on every run.
"""

import itertools
import time

import numpy as np
import pytest
from gradcases import random_case

from condcomp import tensor as T
from condcomp.datasets import generate
from condcomp.exits import (
    EENN,
    EENNConfig,
    PooledClassifier,
    PooledGate,
    branch_output,
    gamma_vector,
)
from condcomp.flops import dynamic_cost, static_cost, tradeoff_sweep, write_curve_csv
from condcomp.gradcheck import gradient_check, param_gradient_check
from condcomp.moe import MoELayer
from condcomp.nn import Linear
from condcomp.routing import RouterConfig
from condcomp.sampling import (
    GateScores,
    SamplerConfig,
    gumbel_noise,
    sample_hard,
    sample_soft,
    sample_ste,
    selection_frequencies,
)
from condcomp.tensor import MacMeter, Tensor, backward, op_ids
from condcomp.tokens import gather_forward, masked_forward
from condcomp.training import TrainSettings, evaluate_model, train_model
from condcomp.transformer import BlockSpec, ModelSpec, assemble


def report(criterion: int, ok: bool, detail: str) -> None:
    print(f"[criterion {criterion:2d}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


# -- criterion 1: gradient correctness ---------------------------------------


def _mechanism_grad_cases():
    """(name, runner) pairs; each runner performs one random gradient check
    of a mechanism's differentiable path and returns the max relative error."""

    def soft_gs(rng):
        m = int(rng.integers(2, 8))
        tau = float(rng.choice([0.1, 1.0, 10.0]))
        g = gumbel_noise(m, rng)
        c = Tensor(rng.normal(size=m))
        cfg = SamplerConfig(mode="soft", temperature=tau)

        def f(p):
            return T.tsum(T.mul(sample_soft(GateScores(p), cfg, noise=g).soft, c))

        return gradient_check(f, Tensor(rng.normal(size=m)))

    def moe_sparse(rng):
        router = RouterConfig(n_experts=2, k=1)
        layer = MoELayer(2, 3, 3, 3, router, rng, variant="sparse")
        while True:
            tokens = rng.normal(size=(2, 3))
            aff = tokens @ layer.embeddings.vectors.data.T
            gaps = np.abs(aff[:, 0] - aff[:, 1])
            if gaps.min() > 1e-2:   # selection stable under the fd step
                break
        target = Tensor(rng.normal(size=(2, 3)))

        def loss():
            out, _ = layer.forward_sparse(Tensor(tokens))
            diff = T.add(out, T.scalar_mul(target, -1.0))
            return T.tsum(T.mul(diff, diff))

        return param_gradient_check(loss, layer.embeddings.vectors)

    def moe_soft_dispatch(rng):
        router = RouterConfig(n_experts=2, k=1)
        layer = MoELayer(2, 3, 3, 3, router, rng, variant="soft-dispatch")
        c = Tensor(rng.normal(size=(2, 3)))

        def f(tokens):
            out, _ = layer.forward_soft_dispatch(tokens)
            return T.tsum(T.mul(out, c))

        return gradient_check(f, Tensor(rng.normal(size=(2, 3))))

    def moe_soft_weights(rng):
        router = RouterConfig(n_experts=2, k=1)
        layer = MoELayer(2, 3, 3, 3, router, rng, variant="soft-weights")
        c = Tensor(rng.normal(size=(2, 3)))

        def f(tokens):
            return T.tsum(T.mul(layer.forward_soft_weights(tokens), c))

        return gradient_check(f, Tensor(rng.normal(size=(2, 3))))

    def branching(rng):
        blocks = [Linear(4, 4, rng) for _ in range(3)]
        exits = [PooledClassifier(4, 2, rng) for _ in range(2)]
        gates = [PooledGate(4, rng) for _ in range(2)]
        net = EENN(blocks, exits, PooledClassifier(4, 2, rng), gate_heads=gates)
        x = Tensor(rng.normal(size=(3, 4)))

        def loss():
            out, _ = branch_output(net, x, sampler="soft")
            return T.cross_entropy_from_logits(out, 1)

        return param_gradient_check(loss, gates[0].fc.W)

    def token_score_masked(rng):
        # smooth relaxation of the straight-through keep path, frozen noise;
        # the STE backward equals this path's backward by construction
        spec = ModelSpec(d_in=4, n_tokens=4, d_model=4, n_heads=1, d_ff=6,
                         n_classes=2, score_hidden=3,
                         blocks=[BlockSpec(mechanism="token-select",
                                           keep_tokens=2), BlockSpec()])
        model = assemble(spec, np.random.default_rng(int(rng.integers(2 ** 31))))
        x = Tensor(rng.normal(size=(4, 4)))
        g = gumbel_noise(4, rng)
        cfg = SamplerConfig(mode="soft", temperature=1.0, k=2)

        def loss():
            scores = model.score_heads[0](model.input_proj(x))
            weights = sample_soft(GateScores(scores), cfg, noise=g).soft
            h = T.mul(model.input_proj(x),
                      T.broadcast_to(T.reshape(weights, (4, 1)), (4, 4)))
            h = model.blocks[0](h)
            h = model.blocks[1](h)
            return T.cross_entropy_from_logits(model.final_head(h), 1)

        return param_gradient_check(loss, model.score_heads[0].net.layers[0].W)

    return [("soft-gumbel-softmax", soft_gs), ("sparse-moe", moe_sparse),
            ("soft-dispatch-moe", moe_soft_dispatch),
            ("soft-weights-moe", moe_soft_weights),
            ("differentiable-branching", branching),
            ("token-score-masked", token_score_masked)]


def test_criterion_1_gradient_correctness():
    t0 = time.time()
    worst = 0.0
    for op in op_ids():
        rng = np.random.default_rng(hash(op) % (2 ** 32))
        for _ in range(100):
            f, x = random_case(op, rng)
            res = gradient_check(f, x, h=1e-6, tol=1e-4)
            worst = max(worst, res.max_rel_error)
            assert res.passed, f"{op}: rel err {res.max_rel_error}"
    for name, runner in _mechanism_grad_cases():
        rng = np.random.default_rng(abs(hash(name)) % (2 ** 32))
        for _ in range(100):
            res = runner(rng)
            worst = max(worst, res.max_rel_error)
            assert res.passed, f"{name}: rel err {res.max_rel_error}"
    elapsed = time.time() - t0
    report(1, worst < 1e-4 and elapsed < 60.0,
           f"max rel err {worst:.2e} over {len(op_ids())} ops and 6 mechanisms "
           f"x 100 cases in {elapsed:.1f}s")


# -- criterion 2: sampler fidelity --------------------------------------------


def test_criterion_2_sampler_fidelity():
    t0 = time.time()
    rng = np.random.default_rng(1234)
    worst = 0.0
    for dims in (2, 4, 8, 12, 16):
        logits = rng.normal(size=dims)
        freq = selection_frequencies(logits, 200000, rng)
        probs = np.exp(logits - logits.max())
        probs /= probs.sum()
        worst = max(worst, float(np.abs(freq - probs).max()))
    elapsed = time.time() - t0
    report(2, worst < 0.01 and elapsed < 10.0,
           f"max |freq - softmax| {worst:.4f} over 5 logit vectors, "
           f"2e5 draws each, in {elapsed:.1f}s")


# -- criterion 3: straight-through contract -----------------------------------


def test_criterion_3_ste_contract():
    rng = np.random.default_rng(99)
    worst_fwd = 0.0
    worst_bwd = 0.0
    for _ in range(100):
        m = int(rng.integers(2, 12))
        k = int(rng.integers(1, m + 1))
        cfg = SamplerConfig(mode="straight-through", k=k,
                            temperature=float(rng.uniform(0.1, 5.0)))
        p = rng.normal(size=m)
        g = gumbel_noise(m, rng)
        c = Tensor(rng.normal(size=m))

        ps = Tensor(p, requires_grad=True)
        ste = sample_ste(GateScores(ps), cfg, noise=g)
        hard = sample_hard(GateScores(Tensor(p)), cfg, noise=g)
        worst_fwd = max(worst_fwd, float(
            np.abs(ste.onehot.data - hard.onehot.data).max()))
        backward(T.tsum(T.mul(ste.onehot, c)))

        ps2 = Tensor(p, requires_grad=True)
        soft = sample_soft(GateScores(ps2), cfg, noise=g)
        backward(T.tsum(T.mul(soft.soft, c)))
        worst_bwd = max(worst_bwd, float(np.abs(ps.grad - ps2.grad).max()))
    report(3, worst_fwd <= 1e-12 and worst_bwd <= 1e-12,
           f"forward gap {worst_fwd:.1e}, backward gap {worst_bwd:.1e} "
           f"over 100 cases")


# -- criterion 4: stick-breaking ----------------------------------------------


def test_criterion_4_stick_breaking():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(10000):
        b = int(rng.integers(2, 9))
        g, res = gamma_vector(rng.random(b - 1))
        worst = max(worst, abs(g.sum() + res - 1.0))
    one_hot_ok = True
    for b in (2, 3, 4):
        for bits in itertools.product([0.0, 1.0], repeat=b - 1):
            g, res = gamma_vector(bits)
            full = np.append(g, res)
            one_hot_ok &= (np.count_nonzero(full) == 1 and full.max() == 1.0)
    report(4, worst < 1e-12 and one_hot_ok,
           f"max |sum - 1| {worst:.2e} over 1e4 vectors; binary gates "
           f"one-hot for every pattern up to b=4")


# -- criterion 5: oracle equivalences ------------------------------------------


def test_criterion_5_oracle_equivalences():
    rng = np.random.default_rng(5)
    worst_top1 = 0.0
    worst_merge = 0.0
    for trial in range(20):
        router = RouterConfig(n_experts=3, k=1)
        layer = MoELayer(3, 4, 5, 4, router, rng, variant="sparse")
        tokens = Tensor(rng.normal(size=(1, 4)))
        out, assign = layer.forward_sparse(tokens)
        selected = assign.per_token[0][0][0]
        direct = layer.experts[selected](tokens)
        worst_top1 = max(worst_top1, float(np.abs(out.data - direct.data).max()))

        wlayer = MoELayer(3, 4, 5, 4, RouterConfig(n_experts=3, k=1), rng,
                          variant="soft-weights")
        e = int(rng.integers(0, 3))
        cond_vec = wlayer.embeddings.vectors.data[e] * 1e4
        # the huge scale underflows the softmax to an exact one-hot gate
        winner = int(np.argmax(wlayer.embeddings.vectors.data @ cond_vec))
        tok = Tensor(rng.normal(size=(1, 4)))
        merged = wlayer.forward_soft_weights(tok, cond=Tensor(cond_vec.reshape(1, 4)))
        direct = wlayer.experts[winner](tok)
        worst_merge = max(worst_merge, float(np.abs(merged.data - direct.data).max()))

    spec = ModelSpec(d_in=5, n_tokens=8, d_model=8, n_heads=2, d_ff=12,
                     n_classes=3,
                     blocks=[BlockSpec(mechanism="token-select", keep_tokens=5),
                             BlockSpec(mechanism="token-select", keep_tokens=3)])
    model = assemble(spec, np.random.default_rng(50))
    worst_dual = 0.0
    for _ in range(50):
        x = Tensor(rng.normal(size=(8, 5)))
        first = np.sort(rng.choice(8, size=5, replace=False))
        second = np.sort(rng.choice(first, size=3, replace=False))
        masked = masked_forward(model, x, [first, second])
        gathered = gather_forward(model, x, [first, second])
        worst_dual = max(worst_dual, float(np.abs(masked.data - gathered.data).max()))
    report(5, worst_top1 <= 1e-12 and worst_merge <= 1e-12 and worst_dual <= 1e-8,
           f"top-1 gap {worst_top1:.1e}, one-hot-merge gap {worst_merge:.1e}, "
           f"masked-vs-gather gap {worst_dual:.1e} over 50 patterns")


# -- criterion 6: cost-model consistency ---------------------------------------


def _random_spec(rng):
    depth = int(rng.integers(1, 4))
    n_heads = int(rng.choice([1, 2]))
    d_model = int(n_heads * rng.integers(2, 5))
    n_tokens = int(rng.integers(4, 9))
    blocks = []
    alive = n_tokens
    for i in range(depth):
        mech = str(rng.choice(["none", "moe", "skip", "token-select"]))
        keep = None
        if mech == "token-select":
            keep = int(rng.integers(1, alive + 1))
            alive = keep
        blocks.append(BlockSpec(mechanism=mech, keep_tokens=keep,
                                exit_head=bool(rng.integers(0, 2)) and i < depth - 1))
    n_experts = int(rng.integers(2, 4))
    return ModelSpec(d_in=int(rng.integers(2, 6)), n_tokens=n_tokens,
                     d_model=d_model, n_heads=n_heads,
                     d_ff=int(rng.integers(4, 10)),
                     n_classes=int(rng.integers(2, 4)), n_experts=n_experts,
                     router_k=int(rng.integers(1, n_experts + 1)),
                     expert_hidden=int(rng.integers(3, 8)),
                     positional=bool(rng.integers(0, 2)), blocks=blocks)


def test_criterion_6_cost_model_consistency():
    rng = np.random.default_rng(6)
    for case in range(20):
        spec = _random_spec(rng)
        model = assemble(spec, np.random.default_rng(600 + case))
        x = Tensor(rng.normal(size=(spec.n_tokens, spec.d_in)))
        exit_cfg = None
        if any(b.exit_head for b in spec.blocks):
            exit_cfg = EENNConfig(
                alpha=1.0, betas=(1.0,) * sum(b.exit_head for b in spec.blocks),
                threshold=float(rng.uniform(0.3, 1.1)))
        with MacMeter() as meter:
            _, trace = model.infer(x, exit_cfg=exit_cfg,
                                   rng=np.random.default_rng(case))
        analytic = dynamic_cost(spec, trace).total_macs
        assert meter.macs == analytic, f"case {case}"
        assert analytic <= static_cost(spec).total_macs
    report(6, True, "measured == analytic on 20 random specs; dynamic <= static")


# -- criteria 7-10: trained demonstrations -------------------------------------


def test_criterion_7_tradeoff_curve(tmp_path):
    t0 = time.time()
    ds = generate("difficulty-tiers",
                  {"n_samples": 1200, "n_tokens": 8, "dim": 16,
                   "margins": (0.3, 1.0, 3.0), "noise": 1.0}, 300)
    train, test = ds.split(0.5)
    spec = ModelSpec(d_in=16, n_tokens=8, d_model=16, n_heads=2, d_ff=32,
                     n_classes=2,
                     blocks=[BlockSpec(exit_head=True), BlockSpec(exit_head=True),
                             BlockSpec()])
    model = assemble(spec, np.random.default_rng(0))
    settings = TrainSettings(epochs=10, batch_size=16, lr=0.01, stochastic=False,
                             exit_alpha=1.0, exit_betas=(1.0, 1.0))
    train_model(model, train, settings, seed=42)
    values = [float(v) for v in np.linspace(0.55, 0.999, 10)]
    rows = tradeoff_sweep(model, test.X, test.y, "ee-threshold", values, seed=7)
    path = tmp_path / "tradeoff.csv"
    write_curve_csv(path, rows)
    macs = [r["mean_macs"] for r in rows]
    accs = [r["accuracy"] for r in rows]
    elapsed = time.time() - t0
    increasing = all(a < b for a, b in zip(macs, macs[1:]))
    endpoint = accs[-1] >= accs[0] - 0.02
    report(7, increasing and endpoint and path.exists() and elapsed < 300,
           f"MACs {macs[0]:.0f}->{macs[-1]:.0f} strictly increasing over 10 "
           f"thresholds; accuracy {accs[0]:.3f}->{accs[-1]:.3f}; CSV written; "
           f"{elapsed:.0f}s")


CLUSTER_PARAMS = {"n_samples": 600, "n_tokens": 4, "dim": 8, "n_clusters": 4,
                  "center_scale": 4.0, "noise": 0.2}


def _cluster_run(seed, balance_weight, strategy="token-choice"):
    ds = generate("cluster-experts", CLUSTER_PARAMS, 100)
    train, test = ds.split(0.75)
    spec = ModelSpec(d_in=8, n_tokens=4, d_model=16, n_heads=2, d_ff=32,
                     n_classes=2, n_experts=4, router_k=1, expert_hidden=16,
                     router_temperature=0.3, router_gate_values="full",
                     router_strategy=strategy,
                     blocks=[BlockSpec(mechanism="moe")])
    model = assemble(spec, np.random.default_rng(seed))
    settings = TrainSettings(epochs=12, batch_size=16, lr=0.02, lr_end=0.002,
                             balance_weight=balance_weight, stochastic=True)
    train_model(model, train, settings, seed=seed + 1000)
    record, _ = evaluate_model(model, test)
    return record


@pytest.fixture(scope="module")
def cluster_runs():
    t0 = time.time()
    runs = {"balanced": [], "unbalanced": [], "random": []}
    for seed in range(5):
        runs["balanced"].append(_cluster_run(seed, 0.05))
        runs["unbalanced"].append(_cluster_run(seed, 0.0))
        runs["random"].append(_cluster_run(seed, 0.05, strategy="random"))
    runs["elapsed"] = time.time() - t0
    return runs


def test_criterion_8_specialization(cluster_runs):
    nmi = np.median([r.routing_nmi for r in cluster_runs["balanced"]])
    nmi_rand = np.median([r.routing_nmi for r in cluster_runs["random"]])
    elapsed = cluster_runs["elapsed"]
    report(8, nmi >= 0.5 and nmi_rand <= 0.1 and elapsed < 600,
           f"median NMI {nmi:.3f} (token-choice, lambda=0.05) vs "
           f"{nmi_rand:.3f} (random control) over 5 seeds; {elapsed:.0f}s total")


def test_criterion_9_balancing_effect(cluster_runs):
    cv_bal = np.median([r.load_cv for r in cluster_runs["balanced"]])
    cv_unbal = np.median([r.load_cv for r in cluster_runs["unbalanced"]])
    report(9, cv_bal < cv_unbal,
           f"median load CV {cv_bal:.3f} (lambda=0.05) < {cv_unbal:.3f} "
           f"(lambda=0) over 5 seed-paired runs")


def test_criterion_10_token_selection_utility():
    recalls, ratios = [], []
    for seed in range(5):
        ds = generate("needle-tokens",
                      {"n_samples": 800, "n_tokens": 16, "dim": 8,
                       "n_informative": 2, "margin": 3.0, "noise": 1.0}, 200)
        train, test = ds.split(0.75)
        spec = ModelSpec(d_in=8, n_tokens=16, d_model=16, n_heads=2, d_ff=32,
                         n_classes=2, score_hidden=16,
                         blocks=[BlockSpec(mechanism="token-select", keep_tokens=4),
                                 BlockSpec()])
        model = assemble(spec, np.random.default_rng(seed))
        settings = TrainSettings(epochs=14, batch_size=16, lr=0.01,
                                 stochastic=True, tau_start=5.0, tau_end=0.5)
        train_model(model, train, settings, seed=seed + 2000)
        record, _ = evaluate_model(model, test)
        recalls.append(record.kept_recall)
        ratios.append(record.mean_macs / static_cost(spec).total_macs)
    recall = float(np.median(recalls))
    ratio = float(max(ratios))
    report(10, recall >= 0.9 and ratio <= 0.5,
           f"median informative-token recall {recall:.3f} keeping 4/16 tokens; "
           f"dynamic/static MACs <= {ratio:.3f}")


# -- criterion 11: determinism --------------------------------------------------


ACCEPT_CONFIG = """
seed = 11
out_dir = "{out}"
train_fraction = 0.75

[dataset]
id = "difficulty-tiers"
n_samples = 80
n_tokens = 4
dim = 8

[model]
d_model = 8
n_heads = 2
d_ff = 12
blocks = [
  {{ exit_head = true }},
  {{ mechanism = "moe" }},
]
n_experts = 2
router_k = 1

[train]
epochs = 2
batch_size = 8
lr = 0.01
balance_weight = 0.05

[eval]
exit_rule = "threshold"
threshold = 0.9
"""


def test_criterion_11_cli_determinism(tmp_path):
    from click.testing import CliRunner

    from condcomp.cli import main

    runner = CliRunner()
    outputs = {}
    for tag in ("a", "b"):
        out_dir = tmp_path / tag
        cfg = tmp_path / f"{tag}.toml"
        cfg.write_text(ACCEPT_CONFIG.format(out=str(out_dir).replace("\\", "/")))
        assert runner.invoke(main, ["train", "--config", str(cfg)]).exit_code == 0
        assert runner.invoke(main, ["eval", "--config", str(cfg)]).exit_code == 0
        assert runner.invoke(
            main, ["sweep", "--config", str(cfg), "--knob", "ee-threshold",
                   "--values", "0.5:0.99:5"]).exit_code == 0
        outputs[tag] = {p.name: p.read_bytes()
                        for p in sorted(out_dir.iterdir())}
    same = outputs["a"].keys() == outputs["b"].keys() and all(
        outputs["a"][k] == outputs["b"][k] for k in outputs["a"])
    report(11, same,
           f"train+eval+sweep reproduced {len(outputs['a'])} output files "
           f"byte-for-byte ({', '.join(sorted(outputs['a']))})")
