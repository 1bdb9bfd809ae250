"""Acceptance gate: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py`` (lines appear in the terminal
summary) or ``python3 tests/test_acceptance.py``. Tolerances, seeds and
runtime budgets are pinned below.
"""

import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ZERO_GRAD, numeric_grad, rel_error
from richcount.alignment import (
    ContrastiveConfig,
    PairBatch,
    alignment_data_from_samples,
    contrastive_loss,
    make_separable_benchmark,
    separation_report,
    stage1_adapter_loss,
    stage1_ffn_loss,
    train_adapter_phase,
    train_ffn_phase,
    visual_anchors,
)
from richcount.cli import main as cli_main
from richcount.counter import (
    LOSS_TERMS,
    CounterConfig,
    batched_total_loss,
    density_loss,
    model_inputs,
    stage2_loss,
    text_embedding,
    total_loss,
    train_counter,
)
from richcount.data import (
    SynthConfig,
    generate_synthetic,
    gt_density_from_dots,
    resize_sample,
    to_counter_samples,
)
from richcount.domain import ImageSample, PromptSet, count_of
from richcount.encoders import AdapterHead, FfnHead, load_embedding_dump, write_embedding_dump
from richcount.evaluation import baseline_mean_count, evaluate, prompt_gap
from richcount.io import load_checkpoint, save_checkpoint
from richcount.model import init_state, toy_config

ORACLE_TOL = 1e-9
GRAD_TOL = 1e-4
GRAD_SEEDS = range(20)
CONSERVATION_TOL = 1e-4
CONSERVATION_SAMPLES = 500
CHANCE, CHANCE_BAND = 0.5, 0.1
ALIGNED_ACCURACY = 0.95
ALIGN_SEEDS = (0, 1, 2)
ALIGN_EPOCHS, ALIGN_LR = 100, 0.05
E2E_SEEDS = (0, 1, 2)
E2E_IMAGES, E2E_EPOCHS = 200, 200

BUDGET_S = {1: 1, 2: 120, 3: 60, 4: 30, 5: 300, 6: 900, 8: 120}

RESULTS = {}


def record(criterion, ok, detail, elapsed=None):
    budget = BUDGET_S.get(criterion)
    if elapsed is not None and budget is not None:
        detail = f"{detail}; {elapsed:.1f}s (budget {budget}s)"
        ok = ok and elapsed < budget
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    RESULTS[criterion] = line
    print(line)
    assert ok, line


# --- 1: loss oracles ---------------------------------------------------------

def test_criterion_1_loss_oracles():
    t0 = time.perf_counter()
    one = lambda a, t, y: PairBatch(np.atleast_2d(a), np.atleast_2d(t), np.array([0]), np.array([0]), np.array([y]))
    checks = {
        "contrastive positive coincident": (contrastive_loss(one([0.6, 0.8], [0.6, 0.8], 1), 1.0)[0], 0.0),
        "contrastive negative at 0.4, m=1": (contrastive_loss(one([1.0, 0.0], [0.6, 0.0], 0), 1.0)[0], 0.18),
        "contrastive negative at 1.5, m=1": (contrastive_loss(one([1.0, 0.0], [-0.5, 0.0], 0), 1.0)[0], 0.0),
        "density identical": (density_loss(np.eye(2), np.eye(2)), 0.0),
        "density eye vs zeros": (density_loss(np.eye(2), np.zeros((2, 2))), 0.5),
        "total all equal": (total_loss(*[np.eye(2)] * 4)[0], 0.0),
        "total one-cell example": (total_loss(np.zeros((2, 2)), np.array([[1.0, 0], [0, 0]]),
                                              np.array([[1.0, 0], [0, 0]]), np.zeros((2, 2)))[0], 1.0),
    }
    worst = max(abs(got - want) for got, want in checks.values())
    bad = [k for k, (got, want) in checks.items() if abs(got - want) > ORACLE_TOL]
    record(1, not bad, f"{len(checks)} oracles, max abs error {worst:.2e} (tol {ORACLE_TOL:g})"
           + (f", failing {bad}" if bad else ""), time.perf_counter() - t0)


# --- 2: gradients ------------------------------------------------------------

def sampled_grad_error(f, x, analytic, rng, max_entries=24):
    """Relative error on a random subset of entries (all entries for small tensors)."""
    flat = x.reshape(-1)
    picks = np.arange(flat.size) if flat.size <= max_entries else rng.choice(flat.size, max_entries, replace=False)
    num = np.zeros(len(picks))
    for j, k in enumerate(picks):
        orig = flat[k]
        flat[k] = orig + 1e-6
        fp = f()
        flat[k] = orig - 1e-6
        fm = f()
        flat[k] = orig
        num[j] = (fp - fm) / 2e-6
    return rel_error(analytic.reshape(-1)[picks], num)


def random_toy(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.choice([8, 12, 16]))
    heads = int(rng.choice([h for h in (1, 2, 4) if d % h == 0]))
    cfg = toy_config(d=d, patch_size=4, image_size=8, text_buckets=64, fusion_heads=heads,
                     ffn_depth=int(rng.integers(2, 4)), adapter_depth=int(rng.integers(1, 3)),
                     fusion_layers=int(rng.integers(1, 3)), decoder_hidden=int(rng.integers(6, 13)),
                     decoder_depth=int(rng.integers(2, 4)))
    state = init_state(cfg, seed)
    cats = ["red disc", "blue square", "green triangle"]
    samples, prompts = [], {}
    for k in range(6):
        cat = cats[k % 3]
        dots = [tuple(p) for p in rng.uniform(0, 8, size=(int(rng.integers(1, 4)), 2))]
        s = ImageSample(f"{k}.png", rng.uniform(size=(8, 8, 3)), cat, dots, "train")
        samples.append(s)
        prompts[s.id] = PromptSet(cat, f"a photo of {cat}s", "a photo of objects")
    return rng, state, samples, prompts


def loss_gradient_errors(rng):
    errs = {}
    d = 8
    a = rng.normal(size=(5, d))
    t = rng.normal(size=(4, d))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    batch = PairBatch(a, t, rng.integers(5, size=12), rng.integers(4, size=12), rng.integers(2, size=12))
    _, ga, gt = contrastive_loss(batch, 1.0)
    f = lambda: contrastive_loss(batch, 1.0)[0]
    errs["contrastive"] = max(rel_error(ga, numeric_grad(f, a)), rel_error(gt, numeric_grad(f, t)))

    preds = np.abs(rng.normal(size=(3, 2, 8, 8)))
    gt_maps = np.abs(rng.normal(size=(2, 8, 8)))
    only_tg = {k: float(k == "t_g") for k in LOSS_TERMS}
    _, _, g = batched_total_loss(preds, gt_maps, only_tg)
    f = lambda: np.mean([density_loss(preds[0, b], gt_maps[b]) for b in range(2)])
    errs["density"] = rel_error(g, numeric_grad(f, preds))

    weights = {k: float(w) for k, w in zip(LOSS_TERMS, rng.uniform(0.5, 2.0, size=6))}
    _, _, g = batched_total_loss(preds, gt_maps, weights)
    f = lambda: np.mean([total_loss(preds[0, b], preds[1, b], preds[2, b], gt_maps[b], weights)[0]
                         for b in range(2)])
    errs["total"] = rel_error(g, numeric_grad(f, preds))
    return errs


def stage1_gradient_error(rng, state, samples, prompts):
    data = alignment_data_from_samples(state, samples, prompts)
    idx = np.arange(len(data))
    cfg = ContrastiveConfig()
    ffn = FfnHead.from_state(state)
    buffers = {k: v.copy() for k, v in ffn.params.items() if "running_" in k}

    def f_ffn():
        for k, v in buffers.items():
            ffn.params[k][:] = v
        return stage1_ffn_loss(ffn, data, idx, cfg)[0]

    _, grads = stage1_ffn_loss(ffn, data, idx, cfg)
    f_ffn()
    worst = max(sampled_grad_error(f_ffn, ffn.params[k], g, rng) for k, g in grads.items())

    for k, v in state.params["adapter"].items():
        state.params["adapter"][k] = rng.normal(size=v.shape) * 0.5
    anchors = visual_anchors(state, data.visual)
    adapter = AdapterHead.from_state(state)
    f_ad = lambda: stage1_adapter_loss(adapter, anchors, data, idx, cfg)[0]
    _, grads = stage1_adapter_loss(adapter, anchors, data, idx, cfg)
    worst = max([worst] + [sampled_grad_error(f_ad, adapter.params[k], g, rng) for k, g in grads.items()])
    return worst


def stage2_gradient_error(rng, state, samples, prompts):
    tokens, grid = zip(*(model_inputs(state, s.pixels) for s in samples[:3]))
    tokens, grid = np.stack(tokens), grid[0]
    texts = np.stack([[text_embedding(state, prompts[s.id].variant(v)) for s in samples[:3]]
                      for v in ("category", "description", "generalized")])
    gt = np.stack([gt_density_from_dots(s.dots, 8, 8).grid for s in samples[:3]])
    weights = {k: 1.0 for k in LOSS_TERMS}
    f = lambda: stage2_loss(state, tokens, texts, gt, grid, weights)[0]
    _, _, grads = stage2_loss(state, tokens, texts, gt, grid, weights)
    return max(sampled_grad_error(f, state.params[group][k], g, rng)
               for group in ("fusion", "decoder") for k, g in grads[group].items())


def test_criterion_2_gradients():
    t0 = time.perf_counter()
    worst = {"contrastive": 0.0, "density": 0.0, "total": 0.0, "stage1": 0.0, "stage2": 0.0}
    for seed in GRAD_SEEDS:
        rng, state, samples, prompts = random_toy(seed)
        for k, v in loss_gradient_errors(rng).items():
            worst[k] = max(worst[k], v)
        worst["stage2"] = max(worst["stage2"], stage2_gradient_error(rng, state, samples, prompts))
        worst["stage1"] = max(worst["stage1"], stage1_gradient_error(rng, state, samples, prompts))
    ok = all(v < GRAD_TOL for v in worst.values())
    summary = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(2, ok, f"{len(GRAD_SEEDS)} seeds, worst relative error {summary} (tol {GRAD_TOL:g}, "
           f"zero floor {ZERO_GRAD:g})", time.perf_counter() - t0)


# --- 3: freezing -------------------------------------------------------------

def test_criterion_3_freezing(tmp_path):
    t0 = time.perf_counter()
    ds, al, tr = tmp_path / "ds", tmp_path / "align", tmp_path / "train"
    codes = [
        cli_main(["gen-synth", "--n", "60", "--seed", "3", "--out", str(ds)]),
        cli_main(["align", "--data", str(ds), "--out", str(al), "--epochs", "10", "--seed", "3"]),
        cli_main(["train", "--data", str(ds), "--ckpt", str(al / "checkpoint.ckpt"), "--out", str(tr),
                  "--epochs", "10", "--seed", "3"]),
    ]
    init = init_state(toy_config(), 3).group_hashes()
    aligned = load_checkpoint(al / "checkpoint.ckpt")[0].group_hashes()
    trained = load_checkpoint(tr / "checkpoint.ckpt")[0].group_hashes()
    align_changed = sorted(g for g in init if init[g] != aligned[g])
    train_changed = sorted(g for g in init if aligned[g] != trained[g])
    ok = codes == [0, 0, 0] and align_changed == ["adapter", "ffn"] and train_changed == ["decoder", "fusion"]
    record(3, ok, f"align changed {align_changed}, train changed {train_changed}", time.perf_counter() - t0)


# --- 4: count conservation ---------------------------------------------------

def test_criterion_4_count_conservation():
    t0 = time.perf_counter()
    ds = generate_synthetic(SynthConfig(seed=11), CONSERVATION_SAMPLES)
    worst = 0.0
    for k, s in enumerate(ds.samples):
        worst = max(worst, abs(count_of(gt_density_from_dots(s.dots, s.height, s.width)) - s.count))
        size = (224, 37, 96)[k % 3]
        worst = max(worst, abs(count_of(resize_sample(s, size)[2]) - s.count))
    record(4, worst < CONSERVATION_TOL, f"{len(ds.samples)} samples at native and resized resolution, "
           f"max |sum - dots| {worst:.1e} (tol {CONSERVATION_TOL:g})", time.perf_counter() - t0)


# --- 5: alignment effect -----------------------------------------------------

def test_criterion_5_alignment_effect():
    t0 = time.perf_counter()
    rows = []
    for seed in ALIGN_SEEDS:
        train, heldout = make_separable_benchmark(seed=seed)
        state = init_state(toy_config(d=train.d), seed=seed)
        untrained = separation_report(heldout, state)["pair_accuracy"]
        acc = {}
        for margin in (1.0, 0.2):
            cfg = ContrastiveConfig(margin=margin, epochs=ALIGN_EPOCHS, lr=ALIGN_LR, seed=seed)
            acc[margin] = separation_report(heldout, train_adapter_phase(train_ffn_phase(state, train, cfg),
                                                                          train, cfg))["pair_accuracy"]
        rows.append((seed, untrained, acc[1.0], acc[0.2]))
    ok = all(abs(u - CHANCE) <= CHANCE_BAND and a1 >= ALIGNED_ACCURACY and a1 >= a02 for _, u, a1, a02 in rows)
    detail = "; ".join(f"seed {s}: untrained {u:.3f}, m=1.0 {a1:.3f}, m=0.2 {a02:.3f}" for s, u, a1, a02 in rows)
    record(5, ok, f"held-out pair accuracy, {ALIGN_EPOCHS} epochs per phase: {detail}", time.perf_counter() - t0)


# --- 6 and 7: end-to-end and consistency -------------------------------------

def e2e_run(seed):
    ds = generate_synthetic(SynthConfig(seed=seed), E2E_IMAGES)
    train, val, test = ds.split("train"), ds.split("val"), ds.split("test")
    state = init_state(toy_config(), seed=seed)
    data = alignment_data_from_samples(state, train, ds.prompts)
    cfg = ContrastiveConfig(epochs=30, lr=ALIGN_LR, seed=seed)
    state = train_adapter_phase(train_ffn_phase(state, data, cfg), data, cfg)
    samples = to_counter_samples(train, ds.prompts, state.config.image_size)
    baseline = evaluate(test, baseline_mean_count(train), ds.prompts, "category").splits["test"]["MAE"]
    out = {"baseline": baseline}
    for consistency in (True, False):
        trained = train_counter(state, samples, CounterConfig(consistency=consistency, epochs=E2E_EPOCHS, seed=seed))
        out[consistency] = {
            "mae": evaluate(test, trained, ds.prompts, "category").splits["test"]["MAE"],
            "gap": prompt_gap(val, trained, ds.prompts, "category", "description"),
        }
    return out


@pytest.fixture(scope="module")
def e2e():
    t0 = time.perf_counter()
    runs = {seed: e2e_run(seed) for seed in E2E_SEEDS}
    return runs, time.perf_counter() - t0


def test_criterion_6_end_to_end(e2e):
    runs, elapsed = e2e
    ok = all(r[True]["mae"] < r["baseline"] for r in runs.values())
    detail = "; ".join(f"seed {s}: test MAE {r[True]['mae']:.3f} vs baseline {r['baseline']:.3f}"
                       for s, r in runs.items())
    record(6, ok, f"{E2E_IMAGES} images, {E2E_EPOCHS} epochs: {detail}", elapsed)


def test_criterion_7_consistency_effect(e2e):
    runs, _ = e2e
    ok = all(r[True]["gap"] < r[False]["gap"] for r in runs.values())
    detail = "; ".join(f"seed {s}: on {r[True]['gap']:.3f}, off {r[False]['gap']:.3f}" for s, r in runs.items())
    record(7, ok, f"val mean |count(category) - count(description)|: {detail}")


# --- 8: determinism and round-trips ------------------------------------------

PIPELINE = [
    ["gen-synth", "--n", "40", "--seed", "5", "--out", "{root}/ds"],
    ["align", "--data", "{root}/ds", "--out", "{root}/align", "--epochs", "5", "--seed", "5"],
    ["train", "--data", "{root}/ds", "--ckpt", "{root}/align/checkpoint.ckpt", "--out", "{root}/train",
     "--epochs", "5", "--seed", "5"],
    ["eval", "--data", "{root}/ds", "--ckpt", "{root}/train/checkpoint.ckpt", "--split", "val",
     "--variant", "description", "--out", "{root}/eval"],
    ["count", "--image", "{root}/ds/images/00000.png", "--prompt", "red disc",
     "--ckpt", "{root}/train/checkpoint.ckpt", "--density", "{root}/count/map.dmap"],
]


def run_pipeline(root):
    codes = [cli_main([a.format(root=root) for a in step]) for step in PIPELINE]
    files = {str(p.relative_to(root)): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}
    return codes, files


def test_criterion_8_determinism_and_round_trips(tmp_path, capsys):
    t0 = time.perf_counter()
    root = tmp_path / "run"
    codes_a, first = run_pipeline(root)
    shutil.rmtree(root)
    codes_b, second = run_pipeline(root)
    capsys.readouterr()
    artifacts = [k for k in first if k.endswith((".ckpt", ".json", ".dmap", ".csv"))]
    differing = sorted(k for k in set(first) | set(second) if first.get(k) != second.get(k))
    kinds = {"checkpoint": any(k.endswith(".ckpt") for k in artifacts),
             "report": any(k.startswith("eval/") and k.endswith(".json") for k in artifacts),
             "density map": any(k.endswith(".dmap") for k in artifacts)}

    rng = np.random.default_rng(8)
    recs = {f"img{k}": {"visual": rng.normal(size=16), "tokens": rng.normal(size=(4, 16)),
                        "t_p": rng.normal(size=16), "t_d": rng.normal(size=16), "t_d_prime": rng.normal(size=16)}
            for k in range(5)}
    write_embedding_dump(tmp_path / "e.bin", recs, 16)
    back = load_embedding_dump(tmp_path / "e.bin")
    dump_ok = all(
        np.array_equal(back[i].visual.vectors[0], r["visual"].astype(np.float32))
        and np.array_equal(back[i].tokens.vectors, r["tokens"].astype(np.float32))
        and all(np.array_equal(back[i].texts[v].vectors[0], r[v].astype(np.float32)) for v in ("t_p", "t_d", "t_d_prime"))
        for i, r in recs.items())
    rewritten = {i: {"visual": back[i].visual.vectors[0], "tokens": back[i].tokens.vectors,
                     **{v: back[i].texts[v].vectors[0] for v in ("t_p", "t_d", "t_d_prime")}} for i in recs}
    write_embedding_dump(tmp_path / "e2.bin", rewritten, 16)
    dump_ok = dump_ok and (tmp_path / "e.bin").read_bytes() == (tmp_path / "e2.bin").read_bytes()

    state, header = load_checkpoint(root / "train" / "checkpoint.ckpt")
    save_checkpoint(tmp_path / "again.ckpt", state, phase=header["phase"], extra=header["extra"])
    ckpt_ok = (tmp_path / "again.ckpt").read_bytes() == (root / "train" / "checkpoint.ckpt").read_bytes()

    ok = (codes_a == codes_b == [0] * len(PIPELINE) and not differing and all(kinds.values())
          and dump_ok and ckpt_ok)
    record(8, ok, f"{len(first)} files byte-identical across reruns (differing: {differing or 'none'}), "
           f"artifact kinds {kinds}, dump round-trip {dump_ok}, checkpoint round-trip {ckpt_ok}",
           time.perf_counter() - t0)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
