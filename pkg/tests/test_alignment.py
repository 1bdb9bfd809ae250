import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import numeric_grad, rel_error
from richcount.alignment import (
    AlignmentData,
    ContrastiveConfig,
    PairBatch,
    build_pairs,
    contrastive_loss,
    make_separable_benchmark,
    separation_from_embeddings,
    separation_report,
    stage1_adapter_loss,
    stage1_ffn_loss,
    train_adapter_phase,
    train_ffn_phase,
    visual_anchors,
)
from richcount.domain import ConfigurationError
from richcount.encoders import AdapterHead, FfnHead
from richcount.model import init_state, toy_config


def single_pair(anchor, text, label):
    return PairBatch(np.atleast_2d(anchor), np.atleast_2d(text), np.array([0]), np.array([0]), np.array([label]))


def at_distance(dist):
    return np.array([1.0, 0.0]), np.array([1.0 - dist, 0.0])


def test_coincident_positive_has_zero_loss():
    loss, _, _ = contrastive_loss(single_pair([0.6, 0.8], [0.6, 0.8], 1), 1.0)
    assert loss == 0.0


def test_negative_inside_margin():
    a, t = at_distance(0.4)
    loss, _, _ = contrastive_loss(single_pair(a, t, 0), 1.0)
    assert abs(loss - 0.6 ** 2 / 2) < 1e-9


def test_negative_beyond_margin():
    a, t = at_distance(1.5)
    loss, ga, gt = contrastive_loss(single_pair(a, t, 0), 1.0)
    assert loss == 0.0 and not ga.any() and not gt.any()


def test_empty_batch_and_bad_margin():
    empty = PairBatch(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0, int), np.zeros(0, int), np.zeros(0, int))
    with pytest.raises(ValueError, match="empty batch"):
        contrastive_loss(empty, 1.0)
    with pytest.raises(ConfigurationError):
        contrastive_loss(single_pair([1, 0], [0, 1], 1), 0.0)
    with pytest.raises(ConfigurationError):
        ContrastiveConfig(margin=-1.0)


def random_batch(rng, d, n_anchor=5, n_text=4, n_pairs=12):
    a = rng.normal(size=(n_anchor, d))
    t = rng.normal(size=(n_text, d))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    return PairBatch(a, t, rng.integers(n_anchor, size=n_pairs), rng.integers(n_text, size=n_pairs),
                     rng.integers(2, size=n_pairs))


@given(st.integers(0, 2 ** 31 - 1), st.integers(2, 16), st.floats(0.05, 2.5))
@settings(max_examples=50)
def test_loss_is_nonnegative(seed, d, m):
    loss, _, _ = contrastive_loss(random_batch(np.random.default_rng(seed), d), m)
    assert loss >= 0.0


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=30)
def test_loss_zero_iff_positives_coincide_and_negatives_clear_margin(seed):
    rng = np.random.default_rng(seed)
    b = random_batch(rng, 6)
    loss, _, _ = contrastive_loss(b, 1.0)
    diff = b.anchors[b.anchor_index] - b.texts[b.text_index]
    dist = np.linalg.norm(diff, axis=1)
    ok = np.all(np.where(b.labels == 1, dist == 0, dist >= 1.0))
    assert (loss == 0.0) == bool(ok)
    # constructed zero case
    b.texts[:] = b.anchors[:4]
    b.text_index = b.anchor_index % 4
    b.anchor_index = b.text_index.copy()
    b.labels = np.ones_like(b.labels)
    assert contrastive_loss(b, 1.0)[0] == 0.0


@given(st.floats(0.0, 0.9), st.floats(0.01, 0.5))
def test_margin_monotonicity(dist, bump):
    a, t = at_distance(dist)
    m = dist + 0.05
    l1 = contrastive_loss(single_pair(a, t, 0), m)[0]
    l2 = contrastive_loss(single_pair(a, t, 0), m + bump)[0]
    assert l2 > l1


@pytest.mark.parametrize("seed", range(5))
def test_contrastive_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    b = random_batch(rng, 8)
    _, ga, gt = contrastive_loss(b, 1.0)
    f = lambda: contrastive_loss(b, 1.0)[0]
    assert rel_error(ga, numeric_grad(f, b.anchors, h=1e-4)) < 1e-4
    assert rel_error(gt, numeric_grad(f, b.texts, h=1e-4)) < 1e-4


# --- pair building -----------------------------------------------------------

def test_two_categories_one_image_each():
    rng = np.random.default_rng(0)
    samples = [(rng.normal(size=3), "a"), (rng.normal(size=3), "b")]
    texts = {"a": rng.normal(size=3), "b": rng.normal(size=3)}
    pb = build_pairs(samples, texts)
    assert (pb.labels == 1).sum() == 2 and (pb.labels == 0).sum() == 2
    for k in range(len(pb)):
        same = samples[pb.anchor_index[k]][1] == ["a", "b"][pb.text_index[k]]
        assert same == bool(pb.labels[k])


def test_subsampled_negatives_and_determinism():
    rng = np.random.default_rng(0)
    samples = [(rng.normal(size=3), c) for c in "abc"]
    texts = {c: rng.normal(size=3) for c in "abc"}
    cfg = ContrastiveConfig(negatives_per_anchor=1, seed=4)
    pb = build_pairs(samples, texts, cfg)
    assert (pb.labels == 1).sum() == 3 and (pb.labels == 0).sum() == 3
    pb2 = build_pairs(samples, texts, cfg)
    np.testing.assert_array_equal(pb.text_index, pb2.text_index)
    assert len(pb.positives) == 3 and len(pb.negatives) == 3


def test_single_category_batch_is_rejected():
    with pytest.raises(ValueError, match="2 distinct categories"):
        build_pairs([(np.ones(3), "a"), (np.zeros(3), "a")], {"a": np.ones(3)})


def test_identical_negative_text_is_dropped():
    samples = [(np.ones(2), "a"), (np.ones(2), "b"), (np.ones(2), "c")]
    texts = {"a": np.array([1.0, 0.0]), "b": np.array([1.0, 0.0]), "c": np.array([0.0, 1.0])}
    pb = build_pairs(samples, texts)
    # a and b share a text, so neither is used as the other's negative
    assert (pb.labels == 0).sum() == 4


# --- trainers ----------------------------------------------------------------

@pytest.fixture(scope="module")
def bench():
    return make_separable_benchmark(n_categories=8, per_category=12, d=16, seed=1)


@pytest.fixture(scope="module")
def bench_state():
    return init_state(toy_config(d=16, ffn_depth=3, adapter_depth=3), seed=1)


def test_zero_epochs_leave_state_unchanged(bench, bench_state):
    cfg = ContrastiveConfig(epochs=0)
    for phase in (train_ffn_phase, train_adapter_phase):
        out = phase(bench_state, bench[0], cfg)
        assert out.group_hashes() == bench_state.group_hashes()
        assert out.optimizer_state == {} and out.epoch == bench_state.epoch


def test_ffn_phase_reduces_loss_and_touches_only_ffn(bench, bench_state):
    out = train_ffn_phase(bench_state, bench[0], ContrastiveConfig(epochs=50, lr=0.05, seed=1))
    hist = out.history["align_ffn"]
    assert len(hist) == 50 and hist[-1] < hist[0]
    before, after = bench_state.group_hashes(), out.group_hashes()
    assert [g for g in before if before[g] != after[g]] == ["ffn"]
    assert "ffn" not in out.frozen and "adapter" in out.frozen


def test_adapter_phase_separates_heldout_and_keeps_ffn(bench, bench_state):
    cfg = ContrastiveConfig(epochs=40, lr=0.05, seed=1)
    a = train_ffn_phase(bench_state, bench[0], cfg)
    b = train_adapter_phase(a, bench[0], cfg)
    assert a.group_hash("ffn") == b.group_hash("ffn")
    changed = [g for g in a.params if a.group_hash(g) != b.group_hash(g)]
    assert changed == ["adapter"]
    rep = separation_report(bench[1], b)
    assert rep["mean_pos_dist"] < rep["mean_neg_dist"]


def test_single_category_data_is_rejected(bench_state):
    data = AlignmentData(np.ones((4, 16)), ["a"] * 4, {"category": np.ones((4, 16))})
    with pytest.raises(ValueError, match="no negatives"):
        train_ffn_phase(bench_state, data, ContrastiveConfig(epochs=1))


def test_ffn_phase_gradient_matches_finite_differences():
    state = init_state(toy_config(d=8, fusion_heads=2, ffn_depth=3), seed=2)
    data, _ = make_separable_benchmark(n_categories=3, per_category=2, d=8, seed=2)
    idx = np.arange(len(data))
    cfg = ContrastiveConfig()
    ffn = FfnHead.from_state(state)
    snapshot = {k: v.copy() for k, v in ffn.params.items()}

    def f():
        # restore running stats so every evaluation sees the same buffers
        for k in ffn.params:
            if "running_" in k:
                ffn.params[k][:] = snapshot[k]
        return stage1_ffn_loss(ffn, data, idx, cfg)[0]

    _, grads = stage1_ffn_loss(ffn, data, idx, cfg)
    for name in ffn.trainable():
        assert rel_error(grads[name], numeric_grad(f, ffn.params[name])) < 1e-4, name


def test_adapter_phase_gradient_matches_finite_differences():
    state = init_state(toy_config(d=8, fusion_heads=2, adapter_depth=2), seed=3)
    rng = np.random.default_rng(3)
    for k, v in state.params["adapter"].items():
        state.params["adapter"][k] = rng.normal(size=v.shape) * 0.5
    data, _ = make_separable_benchmark(n_categories=3, per_category=2, d=8, seed=3)
    idx = np.arange(len(data))
    anchors = visual_anchors(state, data.visual)
    adapter = AdapterHead.from_state(state)
    cfg = ContrastiveConfig()
    f = lambda: stage1_adapter_loss(adapter, anchors, data, idx, cfg)[0]
    _, grads = stage1_adapter_loss(adapter, anchors, data, idx, cfg)
    for name, g in grads.items():
        assert rel_error(g, numeric_grad(f, adapter.params[name])) < 1e-4, name


# --- separation report -------------------------------------------------------

def test_random_embeddings_have_chance_pair_accuracy():
    rng = np.random.default_rng(11)
    accs = []
    for _ in range(20):
        n, d = 40, 16
        a = rng.normal(size=(n, d))
        t = rng.normal(size=(n, d))
        a /= np.linalg.norm(a, axis=1, keepdims=True)
        t /= np.linalg.norm(t, axis=1, keepdims=True)
        cats = [f"c{i % 8}" for i in range(n)]
        accs.append(separation_from_embeddings(a, cats, {"category": t})["pair_accuracy"])
    assert abs(np.mean(accs) - 0.5) < 0.1


def test_coincident_positives_have_zero_distance():
    rng = np.random.default_rng(0)
    t = rng.normal(size=(6, 4))
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    rep = separation_from_embeddings(t, list("aabbcc"), {"category": t})
    assert rep["mean_pos_dist"] == 0.0
    assert np.isfinite(rep["mean_neg_dist"]) and 0 <= rep["pair_accuracy"] <= 1


def test_empty_data_is_rejected(bench_state):
    with pytest.raises(ValueError):
        separation_from_embeddings(np.zeros((0, 4)), [], {"category": np.zeros((0, 4))})
    empty = AlignmentData(np.zeros((0, 16)), [], {"category": np.zeros((0, 16))})
    with pytest.raises(ValueError):
        separation_report(empty, bench_state)
