"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The desk-scale runs (criteria 6 to 9) share one module fixture that trains
DQMQ and the fixed-4-bit baseline for three seeds; expect roughly a quarter
of an hour on one CPU.
"""

import hashlib
import json
import time

import numpy as np
import pytest

from dqmq import dataquality as dq
from dqmq import deploysim as D
from dqmq import report as R
from dqmq import tensor as T
from dqmq.checkpoint import from_bytes, to_bytes
from dqmq.cli import main as cli_main
from dqmq.errors import FormatError
from dqmq.model import build_backbone, forward
from dqmq.policy import HARD, SOFT, Decider, Policy, expected_reward
from dqmq.quant import AFFINE, SYMMETRIC, calibrate, dequantize, exact_mode, frozen_rounding, quantize
from dqmq.sensitivity import POOL_HIGH, POOL_LOW, POOL_MID, LinearSurface, QuadraticSurface, hutchinson, \
    perturbation_direction
from dqmq.tensor import Tensor
from dqmq.trainer import TrainConfig, Trainer, fit, fixed_precision_baseline, make_policy, train_plain

import toys
from conftest import TINY_MODEL, numeric_grad

RESULTS = []
SEEDS = (0, 1, 2)


def report(number, ok, detail, elapsed, limit):
    ok = bool(ok) and elapsed < limit
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}  ({elapsed:.1f}s, limit {limit:.0f}s)"
    RESULTS.append(line)
    print(line)
    assert ok, line


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


# -- 1 ------------------------------------------------------------------------------


def test_criterion_1_quantization_algebra():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    # 1-bit symmetric is sign binarization, so the half-step bound is checked on the affine grid
    cases = [(b, AFFINE) for b in (1, 2, 4, 8, 16)] + [(b, SYMMETRIC) for b in (2, 4, 8, 16)]
    for bits, mode in cases:
        x = rng.normal(size=100_000) * 3.0 + 0.5
        p = calibrate(x, bits, mode)
        lo, hi = p.representable()
        inside = (x >= lo) & (x <= hi)
        err = np.abs(dequantize(quantize(x, p), p).data - x)[inside]
        worst = max(worst, float(err.max() / (p.scale / 2)))
    exact = 0.0
    for bits in (1, 2, 4, 8, 16):
        x = rng.normal(size=100_000)
        out = exact_mode(Tensor(x), calibrate(x, bits, SYMMETRIC)).data
        exact = max(exact, float(np.max(np.abs(out - x) / np.maximum(np.abs(x), 1e-30))))
    ok = worst <= 1 + 1e-9 and exact <= 1e-6
    report(1, ok, f"max err/(s/2)={worst:.6f}, exact-mode rel={exact:.1e}", time.perf_counter() - t0, 5)


# -- 2 ------------------------------------------------------------------------------


def test_criterion_2_unbiased_pipeline():
    t0 = time.perf_counter()
    base = dq.synth_dataset({"samples": 200}, seed=0)
    data = dq.build_mixed(base, 20, seed=0)
    cfg_q = TrainConfig(rounding=False, warmup_epochs=0)
    cfg_p = TrainConfig(warmup_epochs=0)
    mq, mp = build_backbone(cfg_q.model, seed=0), build_backbone(cfg_p.model, seed=0)
    tq = Trainer(mq, make_policy(mq, cfg_q), cfg_q)
    tp = Trainer(mp, None, cfg_p, mode="plain")
    worst = 0.0
    for k in range(20):
        idx = np.arange(5 * k, 5 * k + 32) % len(data)
        x, y = data.images[idx], data.labels[idx]
        tq.step(x, y, SOFT if k < 10 else HARD, lr=0.05)
        tp.step(x, y, SOFT, lr=0.05)
        for name, arr in mp.state().items():
            worst = max(worst, rel_err(mq.state()[name], arr))

    cfg = TrainConfig(optimizer="none", warmup_epochs=0)
    model = build_backbone(cfg.model, seed=3)
    before = {k: v.tobytes() for k, v in model.state().items()}
    tr = Trainer(model, make_policy(model, cfg), cfg)
    for k, stage in enumerate((SOFT, HARD) * 5):
        tr.step(data.images[k * 8:k * 8 + 8], data.labels[k * 8:k * 8 + 8], stage)
    untouched = all(model.state()[k].tobytes() == v for k, v in before.items())
    report(2, worst <= 1e-5 and untouched, f"max rel weight diff={worst:.1e}, masters untouched={untouched}",
           time.perf_counter() - t0, 30)


# -- 3 ------------------------------------------------------------------------------


def _op_cases(rng):
    labels = np.array([0, 3, 1])
    return [
        ("add", T.add, [(3, 4), (3, 4)]), ("sub", T.sub, [(3, 4), (1,)]), ("mul", T.mul, [(2, 5), (2, 5)]),
        ("div_scalar", lambda a: T.div_scalar(a, 1.7), [(4,)]), ("neg", T.neg, [(3,)]),
        ("relu", T.relu, [(4, 5)]), ("exp", T.exp, [(3, 3)]), ("log", lambda a: T.log(T.add(T.mul(a, a), 0.5)), [(4,)]),
        ("sum", lambda a: T.sum(a, axis=1), [(3, 4)]), ("mean", lambda a: T.mean(a, axis=(0, 2)), [(2, 3, 4)]),
        ("softmax", T.softmax, [(3, 5)]), ("log_softmax", T.log_softmax, [(3, 5)]),
        ("cross_entropy", lambda a: T.cross_entropy(a, labels), [(3, 5)]),
        ("reshape", lambda a: T.reshape(a, (6, 2)), [(3, 4)]), ("take", lambda a: T.take(a, np.array([2, 0, 2])), [(4,)]),
        ("concat", lambda a, b: T.concat([a, b], axis=1), [(2, 3), (2, 2)]),
        ("matmul", T.matmul, [(3, 4), (4, 2)]), ("linear", T.linear, [(5, 4), (3, 4), (3,)]),
        ("conv2d", lambda x, w, b: T.conv2d(x, w, b, stride=2, pad=1), [(2, 3, 6, 6), (4, 3, 3, 3), (4,)]),
    ]


def _op_error(fn, shapes, rng):
    xs = [rng.normal(size=s) for s in shapes]
    w = rng.normal(size=fn(*[Tensor(x, dtype=np.float64) for x in xs]).shape)

    def scalar(*arrs):
        with T.no_grad():
            return float(np.sum(fn(*[Tensor(a, dtype=np.float64) for a in arrs]).data * w))

    leaves = [Tensor(x, requires_grad=True, dtype=np.float64) for x in xs]
    T.backward(T.sum(T.mul(fn(*leaves), Tensor(w, dtype=np.float64))))
    return max(rel_err(l.grad, n) for l, n in zip(leaves, numeric_grad(scalar, xs)))


class _StateReplay(Decider):
    """Feeds each agent the features it saw first: agents observe activations as detached state."""

    def __init__(self, policy, kind, features):
        super().__init__(policy, kind)
        self.features = features

    def __call__(self, index, spec, x):
        if index not in self.features:
            self.features[index] = x.data.copy()
        return super().__call__(index, spec, self.features[index])


def _soft_objective_error(seed=0):
    rng = np.random.default_rng(seed)
    m = build_backbone(TINY_MODEL, seed=seed)
    pools = [POOL_HIGH, POOL_MID, POOL_LOW, POOL_MID, POOL_HIGH, POOL_MID, POOL_LOW, POOL_MID, POOL_HIGH]
    pol = Policy(m.quantizable, pools, [0.5] * 9, seed=seed)
    for t in pol.parameters():
        t.data = t.data.astype(np.float64) + rng.normal(scale=0.3, size=t.shape)
    for d in (m.weights, m.biases):
        for k in d:
            d[k] = Tensor(d[k].data.astype(np.float64), requires_grad=True)
    x, y = rng.uniform(size=(4, 3, 8, 8)), np.array([0, 3, 5, 9])
    features, masks, rounding = {}, [], []

    def J():
        rec = not rounding
        # frozen ReLU patterns and rounding residuals give the smooth surrogate whose gradient STE reports
        with T.frozen_relu(masks, record=rec), frozen_rounding(rounding, record=rec):
            d = _StateReplay(pol, "soft", features)
            logits = forward(m, x, d)
            er = expected_reward(m.param_counts, [pol.pool_for(i) for i in range(9)], [d.probs[i] for i in range(9)])
            return T.sub(T.cross_entropy(logits, y), T.mul(er, 0.5))

    leaves = [a.params[k] for a in pol.agents for k in ("f2.weight", "f2.bias", "c1.bias")]
    leaves += [m.weights["conv1"], m.weights["conv4"], m.weights["fc"], m.biases["conv6"]]
    T.backward(J())
    analytic = [t.grad.copy() for t in leaves]

    def f(*arrs):
        old = [t.data for t in leaves]
        for t, a in zip(leaves, arrs):
            t.data = a
        with T.no_grad():
            v = J().item()
        for t, o in zip(leaves, old):
            t.data = o
        return v

    numeric = numeric_grad(f, [t.data.copy() for t in leaves])
    return max(rel_err(a, n) for a, n in zip(analytic, numeric))


def test_criterion_3_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    op_worst = {name: _op_error(fn, shapes, rng) for name, fn, shapes in _op_cases(rng)}
    name = max(op_worst, key=op_worst.get)
    e2e = _soft_objective_error()
    ok = op_worst[name] <= 1e-3 and e2e <= 1e-3
    report(3, ok, f"ops worst {name}={op_worst[name]:.1e}, soft objective={e2e:.1e}", time.perf_counter() - t0, 60)


# -- 4 ------------------------------------------------------------------------------


def test_criterion_4_hutchinson_oracle():
    t0 = time.perf_counter()
    quad, _ = hutchinson(QuadraticSurface([1, 2, 3]), 1000, seed=0)["all"]
    lin, _ = hutchinson(LinearSurface([1.0, -2.0, 0.5]), 1000, seed=0)["all"]
    ok = abs(quad - 6.0) <= 0.05 * 6.0 and abs(lin) <= 1e-3
    report(4, ok, f"quadratic trace={quad:.3f}, linear trace={lin:.1e}", time.perf_counter() - t0, 10)


# -- 5 ------------------------------------------------------------------------------


def test_criterion_5_policy_gradient():
    t0 = time.perf_counter()
    est = toys.monte_carlo_gradient(samples=100_000, seed=0)
    exact = toys.exact_gradient()
    worst = max(float(np.max(np.abs(e - x) / np.abs(x))) for e, x in zip(est, exact))
    report(5, worst <= 0.05, f"max per-coordinate rel err={worst:.3f}", time.perf_counter() - t0, 60)


# -- desk-scale runs ----------------------------------------------------------------


@pytest.fixture(scope="module")
def desk():
    runs = []
    t0 = time.perf_counter()
    for seed in SEEDS:
        base = dq.synth_dataset({"samples": 5000}, seed=seed)
        train = dq.build_mixed(base, 1000, seed=seed)
        test = dq.build_mixed(dq.synth_dataset({"samples": 1000}, seed=1000 + seed), 200, seed=seed + 1)
        cfg = TrainConfig(seed=seed, epochs=30, alpha=0.5)
        q = fit(None, None, train, cfg, eval_set=test)
        b = fixed_precision_baseline(None, 4, train, cfg, eval_set=test)
        runs.append({"seed": seed, "train": train, "test": test, "dqmq": q, "fixed4": b})
    return {"runs": runs, "seconds": time.perf_counter() - t0}


@pytest.mark.slow
def test_criterion_6_mixed_quality_table(desk):
    runs = desk["runs"]
    acc_q = [r["dqmq"].history[-1]["eval"]["overall"] for r in runs]
    acc_b = [r["fixed4"].history[-1]["eval"]["overall"] for r in runs]
    comp = [r["dqmq"].history[-1]["eval"]["compression"] for r in runs]
    ok = np.mean(acc_q) >= np.mean(acc_b) + 2.0 and np.mean(comp) >= 4.0
    detail = (f"DQMQ {np.mean(acc_q):.2f}% ({', '.join(f'{a:.1f}' for a in acc_q)}) vs fixed-4 "
              f"{np.mean(acc_b):.2f}% ({', '.join(f'{a:.1f}' for a in acc_b)}), compression "
              f"{np.mean(comp):.2f}x (min {min(comp):.2f}x)")
    report(6, ok, detail, desk["seconds"], 900)


@pytest.mark.slow
def test_criterion_7_perturbation_sweep():
    t0 = time.perf_counter()
    amps = np.round(np.linspace(-0.2, 0.2, 41), 6)
    step = float(amps[1] - amps[0])
    hits, notes = 0, []
    for seed in SEEDS:
        base = dq.synth_dataset({"samples": 2000}, seed=seed)
        # the model only ever sees raw images, so raw is its matched quality
        cfg = TrainConfig(seed=seed, epochs=8, warmup_epochs=0)
        model = train_plain(None, base, cfg).model
        probe = base.head(256)
        direction = perturbation_direction(model, kind="top", seed=seed, batch=(probe.images, probe.labels))
        # the same training samples rendered raw and heavily blurred
        curves = R.perturbation_curves(model, base, (dq.RAW, 5), amps, direction, batch_size=500)["curves"]
        matched, blurred = R.argmin_amplitude(curves[dq.RAW]), R.argmin_amplitude(curves[5])
        hit = abs(matched) <= step + 1e-9 and abs(blurred) > 0
        hits += hit
        notes.append(f"seed {seed}: raw {matched:+.2f}, blur5 {blurred:+.2f}")
    report(7, hits >= 2, f"{hits}/3 seeds ({'; '.join(notes)})", time.perf_counter() - t0, 300)


@pytest.mark.slow
def test_criterion_8_sensitivity_vs_quality(desk):
    t0 = time.perf_counter()
    hits, notes = 0, []
    for r in desk["runs"]:
        a = R.sensitivity_vs_quality(r["dqmq"].model, r["test"], levels=(2, 3, 5), probes=4, seed=r["seed"],
                                     batch_size=256)
        rho25, rho23 = a["spearman"][2][5], a["spearman"][2][3]
        hits += bool(rho25 < rho23)
        notes.append(f"seed {r['seed']}: rho(2,5)={rho25:.2f} rho(2,3)={rho23:.2f}")
    report(8, hits >= 2, f"{hits}/3 seeds ({'; '.join(notes)})", time.perf_counter() - t0, 300)


@pytest.mark.slow
def test_criterion_9_detector_and_protocol(desk):
    t0 = time.perf_counter()
    corpus = dq.synth_dataset({"samples": 500}, seed=0).images
    scores = [dq.batch_quality(dq.apply_level(corpus, lvl)) for lvl in (dq.RAW, 3, 4, 5)]
    ordered = all(a > b for a, b in zip(scores, scores[1:]))

    run = desk["runs"][0]
    server = D.Server(run["dqmq"].model, run["dqmq"].policy, run["test"])
    sched = [{"level": dq.RAW, "batches": 12}, {"level": 5, "batches": 12}, {"level": dq.RAW, "batches": 12}]
    log = D.simulate_session("skeleton", sched, 0, server, run["test"], batch_size=64)
    swaps = D.count_swaps(log)
    segs = [e for e in log if e["event"] == "segment" and e["swapped"]]
    gains = [e["post_swap_accuracy"] - e["pre_swap_accuracy"] for e in segs]
    ok = ordered and swaps == 2 and all(g >= 0 for g in gains)
    detail = (f"scores {' > '.join(f'{s:.4f}' for s in scores)}, swaps={swaps}, "
              f"post-pre accuracy {', '.join(f'{g:+.1f}' for g in gains)}")
    report(9, ok, detail, time.perf_counter() - t0, 120)


# -- 10 -----------------------------------------------------------------------------


def test_criterion_10_determinism_and_formats(tmp_path):
    t0 = time.perf_counter()
    small = {"epochs": 2, "batch_size": 25, "warmup_epochs": 0, "trace_batch": 20, "model": {"widths": [2, 3, 4, 4]}}
    (tmp_path / "cfg.json").write_text(json.dumps(small))
    digests = []
    for run in ("a", "b"):
        d = tmp_path / run
        assert cli_main(["prepare-data", "--base", "synth", "--per-level", "20", "--seed", "0",
                         "--out", str(d / "data")]) == 0
        assert cli_main(["train", "--config", str(tmp_path / "cfg.json"), "--data", str(d / "data"),
                         "--out", str(d / "run")]) == 0
        assert cli_main(["sensitivity", "--model", str(d / "run" / "model.ckpt"), "--data", str(d / "data"),
                         "--probes", "2", "--levels", "2,5", "--batch", "16", "--out", str(d / "sens.csv")]) == 0
        assert cli_main(["evaluate", "--model", str(d / "run" / "model.ckpt"), "--data", str(d / "data"),
                         "--out", str(d / "eval.json")]) == 0
        files = ["data/manifest.json", "run/model.ckpt", "run/history.jsonl", "run/decisions.csv", "sens.csv",
                 "eval.json"]
        digests.append({f: hashlib.sha256((d / f).read_bytes()).hexdigest() for f in files})
    identical = digests[0] == digests[1]

    blob = (tmp_path / "a" / "run" / "model.ckpt").read_bytes()
    model, policy, manifest = from_bytes(blob)
    roundtrip = to_bytes(model, manifest.get("bits"), policy, manifest.get("metadata")) == blob

    rejected = False
    try:
        dq.parse_cifar_binary(bytes(3073 * 2 + 5))
    except FormatError as e:
        rejected = e.offset == 3073 * 2
    ok = identical and roundtrip and rejected
    report(10, ok, f"byte-identical outputs={identical}, checkpoint round-trip={roundtrip}, "
                   f"malformed CIFAR rejected={rejected}", time.perf_counter() - t0, 60)
