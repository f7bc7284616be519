import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from lila.grids import GridError, raster_write
from lila.probes import (
    IGNORE_ID, KnnConfig, Partition, VosScore, ZS_DIAGNOSTICS, f_boundary, fit_vos_linear,
    harmonic, jaccard, knn_propagate, load_text_embeddings, normal_metrics, probe_normals,
    probe_seg_attention, prototype_logits, random_text_embeddings, seg_metrics, vos_score,
    zero_shot_logits, zero_shot_loss,
)


def square(h, w, top, left, size):
    m = np.zeros((h, w), bool)
    m[top:top + size, left:left + size] = True
    return m


def boundary_f_oracle(pred, gt, r):
    """Chebyshev-distance matching of boundary pixels by brute force."""
    def bnd(m):
        out = np.zeros_like(m)
        h, w = m.shape
        for y in range(h):
            for x in range(w):
                if m[y, x]:
                    nb = [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)]
                    out[y, x] = any(not (0 <= a < h and 0 <= b < w) or not m[a, b] for a, b in nb)
        return np.argwhere(out)

    bp, bg = bnd(pred), bnd(gt)
    hit = lambda a, b: np.mean([np.abs(b - p).max(1).min() <= r for p in a])
    p, rc = hit(bp, bg), hit(bg, bp)
    return 0.0 if p + rc == 0 else 2 * p * rc / (p + rc)


# -- metrics --------------------------------------------------------------------

def test_identical_and_disjoint_masks():
    m = square(20, 20, 4, 4, 8)
    assert jaccard(m, m) == 1.0 and f_boundary(m, m) == 1.0
    assert VosScore(1.0, 1.0).jf == 1.0
    other = square(20, 20, 12, 12, 8)
    assert jaccard(m, other) == 0.0
    assert jaccard(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


def test_jaccard_hand_value():
    a = square(10, 10, 0, 0, 4)     # 16 px
    b = square(10, 10, 2, 2, 4)     # overlap 4 px
    assert jaccard(a, b) == pytest.approx(4 / 28)


@pytest.mark.parametrize("shift", [1, 2, 3, 5])
def test_boundary_f_matches_bruteforce(shift):
    gt = square(30, 30, 8, 8, 12)
    pred = square(30, 30, 8 + shift, 8, 12)
    r = math.ceil(0.008 * math.hypot(30, 30))
    assert f_boundary(pred, gt) == pytest.approx(boundary_f_oracle(pred, gt, r), abs=1e-12)


def test_vos_score_jf_is_mean():
    gt = [square(20, 20, 4, 4, 6).astype(int)] * 3
    pred = [gt[0], square(20, 20, 5, 4, 6).astype(int), square(20, 20, 9, 9, 6).astype(int)]
    s = vos_score(pred, gt)
    assert 0 <= s.j <= 1 and 0 <= s.f <= 1
    assert s.jf == 0.5 * (s.j + s.f)


def test_harmonic_reproduces_reported_row():
    assert abs(harmonic(30.1, 17.0) - 21.8) <= 0.1
    assert harmonic(0, 0) == 0.0


@given(st.floats(0, 100), st.floats(0, 100))
def test_harmonic_below_arithmetic(s, u):
    assert harmonic(s, u) <= 0.5 * (s + u) + 1e-9


def test_normal_metrics_examples():
    rng = np.random.default_rng(0)
    n = rng.normal(size=(6, 6, 3))
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    m = normal_metrics(n, n)
    assert m["rmse"] == pytest.approx(0.0, abs=1e-5)
    assert m["delta1"] == m["delta2"] == m["delta3"] == 1.0
    gt = np.broadcast_to([0.0, 0.0, 1.0], (4, 4, 3))
    a = math.radians(11.0)
    pred = np.broadcast_to([math.sin(a), 0.0, math.cos(a)], (4, 4, 3))
    m = normal_metrics(pred, gt)
    assert m["rmse"] == pytest.approx(11.0, abs=1e-9)
    assert m["delta1"] == 1.0
    with pytest.raises(GridError):
        normal_metrics(pred, gt, np.zeros((4, 4), bool))


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_delta_ratios_monotone(seed):
    rng = np.random.default_rng(seed)
    m = normal_metrics(rng.normal(size=(5, 5, 3)), rng.normal(size=(5, 5, 3)) + [0, 0, 2])
    assert m["delta1"] <= m["delta2"] <= m["delta3"]


def test_seg_metrics_perfect_and_hand():
    gt = np.array([[0, 0, 1], [1, 2, 2]])
    assert seg_metrics(gt, gt, 3) == {"miou": 1.0, "pacc": 1.0}
    pred = np.array([[0, 1, 1], [1, 2, 0]])
    m = seg_metrics(pred, gt, 3)
    # IoU: class0 1/3, class1 2/3, class2 1/2
    assert m["miou"] == pytest.approx((1 / 3 + 2 / 3 + 1 / 2) / 3)
    assert m["pacc"] == pytest.approx(4 / 6)
    gt_ign = gt.copy()
    gt_ign[0, 0] = IGNORE_ID
    assert seg_metrics(pred, gt_ign, 3)["pacc"] == pytest.approx(3 / 5)


def test_random_two_class_pacc_is_half():
    rng = np.random.default_rng(1)
    accs = [seg_metrics(rng.integers(0, 2, 400), rng.integers(0, 2, 400), 2)["pacc"]
            for _ in range(200)]
    assert abs(np.mean(accs) - 0.5) < 0.01


# -- VOS probes -------------------------------------------------------------------

def test_vos_linear_separable_and_constant():
    rng = np.random.default_rng(2)
    mask = (rng.random((8, 8)) > 0.5).astype(int)
    feats = np.stack([mask * 2.0 - 1.0, rng.normal(size=(8, 8)) * 0.1], -1)
    probe = fit_vos_linear(feats, mask)
    assert np.array_equal(probe.predict(feats), mask)
    mask = np.zeros((6, 6), int)
    mask[:2] = 1                                       # majority class 0
    probe = fit_vos_linear(np.ones((6, 6, 3)), mask)
    assert np.all(probe.predict(np.ones((6, 6, 3))) == 0)


def test_vos_linear_single_class_warns():
    with pytest.warns(RuntimeWarning, match="degenerate"):
        probe = fit_vos_linear(np.random.default_rng(0).normal(size=(4, 4, 2)), np.ones((4, 4), int))
    assert np.all(probe.predict(np.zeros((4, 4, 2))) == 1)


def test_vos_linear_constructed_sequence_has_unit_j():
    rng = np.random.default_rng(3)
    codes = rng.normal(size=(3, 6))
    seq_masks = [np.roll(square(16, 16, 3, 3, 6).astype(int) + 2 * square(16, 16, 9, 9, 5), t, 1)
                 for t in range(4)]
    feats = [codes[m] + 0.01 * rng.normal(size=(16, 16, 6)) for m in seq_masks]
    probe = fit_vos_linear(feats[0], seq_masks[0])
    preds = [probe.predict(f) for f in feats]
    assert vos_score(preds, seq_masks).j == 1.0


def test_knn_static_sequence_reproduces_mask():
    rng = np.random.default_rng(4)
    f = rng.normal(size=(12, 12, 8))
    mask = square(12, 12, 2, 2, 5).astype(int)
    for k in (1, 3, 5):
        out = knn_propagate([f] * 5, mask, KnnConfig(k=k, radius=3))
        assert all(np.array_equal(m, mask) for m in out)


def test_knn_follows_rigid_translation():
    rng = np.random.default_rng(5)
    world = rng.normal(size=(20, 40, 8))
    world_mask = np.zeros((20, 40), int)
    world_mask[6:13, 6:13] = 1
    frames = [world[:, t:t + 20] for t in range(6)]
    masks = [world_mask[:, t:t + 20] for t in range(6)]
    out = knn_propagate(frames, masks[0], KnnConfig(k=3, radius=4))
    # pixels entering on the right have no exact match; keep the object out of their window
    assert vos_score(out, masks).j == 1.0


def test_knn_k1_matches_bruteforce_nearest_neighbour():
    rng = np.random.default_rng(6)
    f0, f1 = rng.normal(size=(16, 16, 5)), rng.normal(size=(16, 16, 5))
    mask = rng.integers(0, 3, (16, 16))
    r = 3
    out = knn_propagate([f0, f1], mask, KnnConfig(k=1, context_frames=1, radius=r))[1]
    n0 = f0 / np.linalg.norm(f0, axis=-1, keepdims=True)
    n1 = f1 / np.linalg.norm(f1, axis=-1, keepdims=True)
    ref = np.zeros_like(mask)
    for y in range(16):
        for x in range(16):
            best, lab = -np.inf, None
            for yy in range(max(0, y - r), min(16, y + r + 1)):
                for xx in range(max(0, x - r), min(16, x + r + 1)):
                    s = n1[y, x] @ n0[yy, xx]
                    if s > best:
                        best, lab = s, mask[yy, xx]
            ref[y, x] = lab
    assert np.array_equal(out, ref)


def test_knn_rejects_zero_radius():
    with pytest.raises(ValueError):
        knn_propagate([np.ones((4, 4, 2))] * 2, np.zeros((4, 4), int), KnnConfig(radius=0))


# -- normal and segmentation probes --------------------------------------------------

def test_normal_probe_learns_linear_ground_truth():
    rng = np.random.default_rng(7)
    b, h, w = 4, 16, 16
    n = rng.normal(size=(b, h, w, 3)) * [0.3, 0.3, 0.0] + [0, 0, 1]
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    mix = rng.normal(size=(3, 8))
    feats = torch.from_numpy(n @ mix).permute(0, 3, 1, 2)
    target = torch.from_numpy(n).permute(0, 3, 1, 2)
    _, m = probe_normals(feats, None, target, steps=300, lr=2e-2)
    assert m["delta1"] > 0.95


def test_orthonormal_prototypes_give_perfect_accuracy():
    labels = torch.from_numpy(np.random.default_rng(8).integers(0, 4, (2, 6, 6)))
    protos = torch.eye(4, dtype=torch.float64)[None]
    feats = torch.eye(4, dtype=torch.float64)[labels].permute(0, 3, 1, 2)
    pred = prototype_logits(feats, protos).argmax(1)
    assert seg_metrics(pred.numpy(), labels.numpy(), 4)["pacc"] == 1.0


def test_seg_probe_trains_on_separable_features():
    rng = np.random.default_rng(9)
    labels = torch.from_numpy(rng.integers(0, 3, (2, 16, 16)))
    codes = torch.from_numpy(rng.normal(size=(3, 6)))
    feats = codes[labels].permute(0, 3, 1, 2).contiguous()
    _, m = probe_seg_attention(feats, labels, 3, steps=200, lr=5e-2)
    assert m["pacc"] > 0.95
    with pytest.raises(ValueError):
        probe_seg_attention(feats, labels, 2, steps=1)


# -- zero-shot -------------------------------------------------------------------------

def test_zero_shot_logit_examples():
    text = random_text_embeddings(4, 6, seed=1)
    f = text[2].repeat(3, 1)
    out = zero_shot_logits(f, torch.zeros_like(f) + 1, text, 1.0, 0.0, 0.0)
    assert torch.allclose(out[:, 2], torch.ones(3, dtype=torch.float64), atol=1e-15)
    torch.testing.assert_close(out[0], text @ text[2])
    z = zero_shot_logits(f, f, text, 0.0, 0.0, 1.3)
    assert torch.all(z == 0)


def test_zero_shot_logits_match_naive_cosine_and_scale_invariance():
    rng = np.random.default_rng(10)
    text = random_text_embeddings(5, 7, seed=2)
    fe = torch.from_numpy(rng.normal(size=(3, 4, 7)))
    fd = torch.from_numpy(rng.normal(size=(3, 4, 7)))
    out = zero_shot_logits(fe, fd, text, 0.7, 0.4, 0.5)
    ref = np.zeros((3, 4, 5))
    t = text.numpy()
    for i in range(3):
        for j in range(4):
            e, d = fe[i, j].numpy(), fd[i, j].numpy()
            for c in range(5):
                ce = e @ t[c] / np.linalg.norm(e)
                cd = d @ t[c] / np.linalg.norm(d)
                ref[i, j, c] = math.exp(0.5) * (0.7 * ce + 0.4 * cd)
    np.testing.assert_allclose(out.numpy(), ref, atol=1e-6)
    scaled = zero_shot_logits(fe * 3.5, fd * 0.01, text, 0.7, 0.4, 0.5)
    torch.testing.assert_close(scaled, out)


def test_zero_feature_is_guarded_and_flagged():
    before = ZS_DIAGNOSTICS.guarded_pixels
    text = random_text_embeddings(3, 4)
    out = zero_shot_logits(torch.zeros(2, 4), torch.ones(2, 4), text, 1.0, 1.0, 0.0)
    assert torch.all(torch.isfinite(out))
    assert ZS_DIAGNOSTICS.guarded_pixels == before + 2


def test_zero_shot_loss_hand_two_pixels():
    p = torch.tensor([[0.5, 0.3, 0.2], [0.1, 0.2, 0.7]], dtype=torch.float64)
    logits = torch.log(p)
    labels = torch.tensor([0, 2])
    loss = zero_shot_loss(logits, labels, Partition(seen=(0, 1), unseen=(2,)))
    assert abs(loss.item() - (0.1 * math.log(2.0) + 0.3 ** 2)) < 1e-12


def test_zero_shot_loss_without_ignored_pixels_is_ce():
    logits = torch.from_numpy(np.random.default_rng(11).normal(size=(6, 3)))
    labels = torch.tensor([0, 1, 0, 1, 1, 0])
    loss = zero_shot_loss(logits, labels, Partition((0, 1), (2,)))
    assert loss.item() == torch.nn.functional.cross_entropy(logits, labels).item()


def test_zero_shot_neg_term_zero_iff_no_seen_mass():
    labels = torch.tensor([0, 2, 2])
    logits = torch.tensor([[0.0, 0.0, -1.0], [-1e4, -1e4, 0.0], [-1e4, -1e4, 0.0]],
                          dtype=torch.float64)
    part = Partition((0, 1), (2,))
    ce = torch.nn.functional.cross_entropy(logits[:1], labels[:1])
    assert zero_shot_loss(logits, labels, part).item() == pytest.approx(0.1 * ce.item(), abs=1e-15)
    logits[1, 0] = 0.0
    assert zero_shot_loss(logits, labels, part).item() > 0.1 * ce.item()


def test_zero_shot_partition_errors():
    with pytest.raises(ValueError):
        zero_shot_loss(torch.zeros(2, 3), torch.tensor([2, 2]), Partition((0, 1), (2,)))
    with pytest.raises(ValueError):
        zero_shot_loss(torch.zeros(2, 3), torch.tensor([0, 2]), Partition((0, 1), (1, 2)))


def test_text_embedding_import(tmp_path):
    emb = np.random.default_rng(12).normal(size=(1, 5, 4)).astype(np.float32)
    raster_write(emb, tmp_path / "text.lgrd")
    t = load_text_embeddings(tmp_path / "text.lgrd")
    assert t.shape == (5, 4)
    torch.testing.assert_close(t.norm(dim=1), torch.ones(5, dtype=torch.float64))
