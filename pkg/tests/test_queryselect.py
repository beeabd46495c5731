import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from swindocseg.queryselect import (ConfigurationError, EncoderHeads, LowProjection,
                                    PrototypeBank, TAU_PRESETS, init_anchors_from_masks,
                                    loss_high, loss_low, select_topk)
from swindocseg.synthdoc import rasterize_instance
from swindocseg.transformer import TokenSequence


def unit(v):
    return v / v.norm(dim=-1, keepdim=True)


# ---------------------------------------------------------------------------
# top-k selection


def test_topk_single_largest():
    logits = torch.zeros(5, 3)
    logits[3, 1] = 5.0
    assert select_topk(logits, 1).tolist() == [3]


def test_topk_tie_break_low_index():
    logits = torch.zeros(6, 4)
    assert select_topk(logits, 3).tolist() == [0, 1, 2]


def test_topk_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        logits = torch.tensor(rng.normal(size=(30, 5)))
        got = select_topk(logits, 5).tolist()
        scores = torch.sigmoid(logits).max(dim=-1).values.numpy()
        expect = sorted(range(30), key=lambda i: (-scores[i], i))[:5]
        assert got == expect


@given(st.integers(2, 20), st.integers(1, 5), st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_topk_oracle_property(n, c, seed):
    rng = np.random.default_rng(seed)
    logits = torch.tensor(rng.normal(size=(n, c)))
    k = rng.integers(1, n + 1)
    got = select_topk(logits, int(k)).tolist()
    scores = torch.sigmoid(logits).max(dim=-1).values.numpy()
    expect = sorted(range(n), key=lambda i: (-scores[i], i))[: int(k)]
    assert got == expect


def test_topk_k_too_large():
    with pytest.raises(ConfigurationError):
        select_topk(torch.zeros(3, 2), 4)


# ---------------------------------------------------------------------------
# projections


def test_projection_unit_norm():
    torch.manual_seed(0)
    low = LowProjection(8, 4)
    out = low(torch.rand(10, 8))
    assert torch.allclose(out.norm(dim=-1), torch.ones(10), atol=1e-6)


def test_projection_scale_invariance_single_layer():
    # normalize(linear(x)) with zero bias is invariant to positive scaling
    lin = torch.nn.Linear(6, 4, bias=False).double()
    x = torch.rand(3, 6, dtype=torch.float64)
    a = torch.nn.functional.normalize(lin(x), dim=-1)
    b = torch.nn.functional.normalize(lin(2 * x), dim=-1)
    assert torch.allclose(a, b, atol=1e-12)


def test_projection_gradcheck():
    torch.manual_seed(1)
    low = LowProjection(6, 4).double()
    x = torch.rand(4, 6, dtype=torch.float64)
    w = torch.rand(4, 4, dtype=torch.float64)

    def loss():
        return (low(x) * w).sum()

    total = loss()
    low.zero_grad()
    total.backward()
    p = low.mlp.layers[0].weight
    eps = 1e-6
    flat = p.detach().view(-1)
    orig = float(flat[3])
    with torch.no_grad():
        flat[3] = orig + eps
    lp = float(loss().detach())
    with torch.no_grad():
        flat[3] = orig - eps
    lm = float(loss().detach())
    with torch.no_grad():
        flat[3] = orig
    numeric = (lp - lm) / (2 * eps)
    analytic = float(p.grad.view(-1)[3])
    assert abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8) < 1e-4


# ---------------------------------------------------------------------------
# low-level contrastive loss


def test_loss_low_hand_value():
    # n = n' = 1, k = 2, tau = 1, f1 . f1' = 1, f2 . f1' = 0
    f_det = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    f_seg = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    f_cand = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    val = loss_low(f_det, f_seg, f_cand, tau=1.0)
    expected = -math.log(math.e / (math.e + 1))
    assert abs(float(val) - expected) < 1e-9


def test_loss_low_self_candidate_zero():
    f = unit(torch.rand(1, 4, dtype=torch.float64))
    assert float(loss_low(f, f.clone(), f.clone(), tau=0.5)) == pytest.approx(0.0, abs=1e-12)


def test_loss_low_tau_presets():
    assert TAU_PRESETS == {"publaynet": 0.02, "prima": 0.6, "hj": 0.1, "tablebank": 0.2}


def test_loss_low_invalid_tau():
    f = unit(torch.rand(2, 4))
    with pytest.raises(ConfigurationError):
        loss_low(f, f, f, tau=0.0)


def loss_low_oracle(f_det, f_seg, f_cand, tau):
    total = 0.0
    n, npr, k = f_det.shape[0], f_seg.shape[0], f_cand.shape[0]
    for i in range(n):
        for j in range(npr):
            num = math.exp(float(f_det[i] @ f_seg[j]) / tau)
            den = sum(math.exp(float(f_cand[c] @ f_seg[j]) / tau) for c in range(k))
            total += -math.log(num / den)
    return total / (n * npr)


def test_loss_low_matches_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n, npr, k = rng.integers(1, 5, size=3)
        f_det = unit(torch.tensor(rng.normal(size=(n, 6))))
        f_seg = unit(torch.tensor(rng.normal(size=(npr, 6))))
        f_cand = unit(torch.tensor(rng.normal(size=(k, 6))))
        tau = float(rng.uniform(0.1, 1.0))
        got = float(loss_low(f_det, f_seg, f_cand, tau))
        assert got == pytest.approx(loss_low_oracle(f_det, f_seg, f_cand, tau), rel=1e-6)


def test_loss_low_candidate_permutation_invariance():
    rng = np.random.default_rng(3)
    f_det = unit(torch.tensor(rng.normal(size=(3, 5))))
    f_seg = unit(torch.tensor(rng.normal(size=(2, 5))))
    f_cand = unit(torch.tensor(rng.normal(size=(4, 5))))
    a = float(loss_low(f_det, f_seg, f_cand, 0.3))
    b = float(loss_low(f_det, f_seg, f_cand[[2, 0, 3, 1]], 0.3))
    assert a == pytest.approx(b, rel=1e-12)


def test_loss_low_nonnegative_when_candidates_contain_positives():
    rng = np.random.default_rng(4)
    for tau in (1e-3, 0.1, 1.0):
        f_det = unit(torch.tensor(rng.normal(size=(3, 5))))
        f_seg = unit(torch.tensor(rng.normal(size=(3, 5))))
        f_cand = torch.cat([f_det, unit(torch.tensor(rng.normal(size=(2, 5))))])
        val = float(loss_low(f_det, f_seg, f_cand, tau))
        assert math.isfinite(val) and val >= 0


def test_loss_low_tau_monotonicity():
    # positive dot strictly dominating all candidates: lower tau, lower loss
    f_det = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    f_seg = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    f_cand = torch.tensor([[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]], dtype=torch.float64)
    vals = [float(loss_low(f_det, f_seg, f_cand, t)) for t in (1.0, 0.5, 0.1)]
    assert vals[0] > vals[1] > vals[2]


# ---------------------------------------------------------------------------
# high-level contrastive loss and prototypes


def test_loss_high_self_normalization_zero():
    f = unit(torch.rand(1, 4, dtype=torch.float64))
    p = unit(torch.rand(1, 4, dtype=torch.float64))
    phi = torch.tensor([0.7], dtype=torch.float64)
    assert float(loss_high(f, p, phi, torch.tensor([0]))) == 0.0


def test_loss_high_large_phi_limit():
    rng = np.random.default_rng(5)
    f = unit(torch.tensor(rng.normal(size=(6, 4))))
    p = unit(torch.tensor(rng.normal(size=(2, 4))))
    phi = torch.full((2,), 1e9, dtype=torch.float64)
    val = float(loss_high(f, p, phi, torch.tensor([0, 1, 0, 1, 0, 1])))
    assert val == pytest.approx(math.log(6), abs=1e-6)


def loss_high_oracle(f, p, phi, assignment):
    total = 0.0
    for i in range(f.shape[0]):
        j = int(assignment[i])
        num = math.exp(float(f[i] @ p[j]) / float(phi[j]))
        den = sum(math.exp(float(f[c] @ p[j]) / float(phi[j])) for c in range(f.shape[0]))
        total += -math.log(num / den)
    return total / f.shape[0]


def test_loss_high_matches_oracle():
    rng = np.random.default_rng(6)
    for _ in range(100):
        n = int(rng.integers(1, 6))
        m = int(rng.integers(1, 4))
        f = unit(torch.tensor(rng.normal(size=(n, 5))))
        p = unit(torch.tensor(rng.normal(size=(m, 5))))
        phi = torch.tensor(rng.uniform(0.2, 2.0, size=m))
        assignment = torch.tensor(rng.integers(0, m, size=n))
        got = float(loss_high(f, p, phi, assignment))
        assert got == pytest.approx(loss_high_oracle(f, p, phi, assignment), rel=1e-6)


def test_loss_high_empty_bank():
    f = unit(torch.rand(2, 4))
    with pytest.raises(ConfigurationError):
        loss_high(f, torch.zeros(0, 4), torch.zeros(0), torch.zeros(2, dtype=torch.long))


def test_concentration_zero_distance_floor():
    bank = PrototypeBank(2, 4)
    f = bank.prototypes[0].repeat(5, 1)
    phi = bank.estimate_concentration(f, torch.zeros(5, dtype=torch.long))
    assert float(phi[0]) == pytest.approx(bank.phi_floor)


def test_concentration_linearity_and_oracle():
    torch.manual_seed(2)
    bank = PrototypeBank(1, 4, phi_floor=1e-6, phi_ceil=1e6)
    f = bank.prototypes[0] + 0.05 * torch.randn(10, 4)
    assign = torch.zeros(10, dtype=torch.long)
    phi1 = float(bank.estimate_concentration(f, assign)[0])
    dists = (f - bank.prototypes[0]).norm(dim=-1).sum()
    expected = float(dists) / (10 * math.log(10 + bank.alpha))
    assert phi1 == pytest.approx(expected, rel=1e-6)
    f2 = bank.prototypes[0] + 2 * (f - bank.prototypes[0])
    phi2 = float(bank.estimate_concentration(f2, assign)[0])
    assert phi2 == pytest.approx(2 * phi1, rel=1e-6)


def test_concentration_empty_cluster_keeps_previous():
    bank = PrototypeBank(2, 4)
    before = float(bank.phi[1])
    f = torch.rand(3, 4)
    phi = bank.estimate_concentration(f, torch.zeros(3, dtype=torch.long))
    assert float(phi[1]) == before


# ---------------------------------------------------------------------------
# anchors from masks


def test_anchor_full_mask():
    box = init_anchors_from_masks(torch.ones(1, 8, 8), 0.5)
    assert torch.allclose(box[0], torch.tensor([0.5, 0.5, 1.0, 1.0]))


def test_anchor_block():
    m = torch.zeros(1, 64, 64)
    m[0, 16:32, 32:64] = 1.0
    box = init_anchors_from_masks(m, 0.5)[0]
    expected = torch.tensor([(32 + 64) / 128, (16 + 32) / 128, 0.5, 0.25])
    assert torch.allclose(box, expected, atol=1 / 64)


def test_anchor_empty_mask_fallback():
    box = init_anchors_from_masks(torch.zeros(1, 8, 8), 0.5)
    assert torch.allclose(box[0], torch.tensor([0.5, 0.5, 1.0, 1.0]))


def test_anchor_invalid_threshold():
    with pytest.raises(ConfigurationError):
        init_anchors_from_masks(torch.ones(1, 4, 4), 1.5)


def test_anchor_rasterize_roundtrip():
    rng = np.random.default_rng(7)
    H = W = 64
    for _ in range(100):
        w = rng.uniform(0.1, 0.6)
        h = rng.uniform(0.1, 0.6)
        cx = rng.uniform(w / 2 + 0.01, 1 - w / 2 - 0.01)
        cy = rng.uniform(h / 2 + 0.01, 1 - h / 2 - 0.01)
        m = rasterize_instance((cx, cy, w, h), (H, W), "solid")
        box = init_anchors_from_masks(torch.tensor(m, dtype=torch.float32)[None], 0.5)[0]
        assert np.all(np.abs(box.numpy() - np.array([cx, cy, w, h])) <= 1.0 / H + 1e-7)


# ---------------------------------------------------------------------------
# encoder heads


def make_memory(dim=8, n=16):
    tokens = torch.rand(1, dim, 4, 4)
    seq = TokenSequence(tokens.flatten(2).transpose(1, 2), [(4, 4)], [0])
    return seq


def test_encoder_heads_shapes():
    heads = EncoderHeads(8, 5, 6)
    out = heads(make_memory())
    assert out.class_logits.shape == (1, 16, 5)
    assert out.boxes.shape == (1, 16, 4)
    assert out.mask_embed.shape == (1, 16, 6)
    assert torch.all((out.boxes > 0) & (out.boxes < 1))


def test_encoder_heads_zero_weights_grid_prior():
    heads = EncoderHeads(8, 5, 6)
    with torch.no_grad():
        for p in heads.parameters():
            p.zero_()
    out = heads(make_memory())
    # uniform class logits
    assert torch.all(out.class_logits == 0)
    # boxes equal sigmoid of grid priors: centers at grid cells, wh = 0.1
    assert torch.allclose(out.boxes[0, 0, :2], torch.tensor([0.125, 0.125]), atol=1e-6)
    assert torch.allclose(out.boxes[0, :, 2:], torch.full((16, 2), 0.1), atol=1e-6)
