import itertools
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from msp_reid.errors import NumericError
from msp_reid.losses import (LossWeights, attention_loss, attention_target, cal_loss, clothes_adversarial_ce,
                             id_loss, pairwise_euclidean, positive_clothes_mask, total_loss, triplet_loss)

D = torch.float64


def test_target_examples():
    face = torch.zeros(3, 3, dtype=D)
    face[0, :2] = 1
    limbs = torch.zeros(3, 3, dtype=D)
    limbs[2, 0] = limbs[2, 2] = 1
    t = attention_target(face, limbs, 1e-12)
    assert torch.allclose(t.t_plus[face + limbs > 0], torch.full((4,), 0.25, dtype=D))
    z = attention_target(torch.zeros(2, 2), torch.zeros(2, 2))
    assert bool(z.absent) and not z.t_plus.any()


def test_target_random_oracle(rng):
    for _ in range(100):
        f, l = rng.random((4, 2)), rng.random((4, 2))
        t = attention_target(torch.tensor(f), torch.tensor(l), 1e-6).t_plus.numpy()
        np.testing.assert_allclose(t, (f + l) / ((f + l).sum() + 1e-6), rtol=1e-7)
        assert abs(t.sum() - 1) < 1e-5


def test_attention_loss_uniform_point():
    A = torch.full((2, 2), 0.25, dtype=D)
    face = torch.tensor([[1.0, 0], [0, 0]], dtype=D)
    limbs = torch.tensor([[0, 0], [0, 1.0]], dtype=D)
    hair = torch.tensor([[0, 1.0], [1.0, 0]], dtype=D)
    w = LossWeights(lambda_neg=1.0, epsilon=1e-12)
    loss = attention_loss(A, attention_target(face, limbs, 1e-12, hair_ds=hair), w)
    assert float(loss) == pytest.approx(math.log(4) + 0.25, abs=1e-9)
    assert float(loss) == pytest.approx(1.63629, abs=1e-5)


def test_attention_loss_entropy_and_empty_hair(rng):
    f = torch.tensor(rng.random((3, 3)) + 0.1)
    t = attention_target(f, torch.zeros_like(f), 1e-12)
    ent = -(t.t_plus * t.t_plus.log()).sum()
    loss = attention_loss(t.t_plus.clone(), t, LossWeights(lambda_neg=0.0, epsilon=1e-12))
    assert float(loss) == pytest.approx(float(ent), rel=1e-9)
    # hair_ds all zero: negative term is exactly 0
    with_neg = attention_loss(t.t_plus.clone(), t, LossWeights(lambda_neg=3.0, epsilon=1e-12))
    assert float(with_neg) == pytest.approx(float(ent), rel=1e-9)


def test_attention_loss_random_oracle(rng):
    for _ in range(100):
        S = rng.normal(size=(2, 4, 2))
        A = np.exp(S) / np.exp(S).sum(axis=(1, 2), keepdims=True)
        f, l, h = rng.random((3, 2, 4, 2))
        lam, eps = rng.random() * 2, 1e-6
        t = attention_target(torch.tensor(f), torch.tensor(l), eps, hair_ds=torch.tensor(h))
        got = float(attention_loss(torch.tensor(A), t, LossWeights(lambda_neg=lam, epsilon=eps)))
        tp = (f + l) / ((f + l).sum(axis=(1, 2), keepdims=True) + eps)
        per = -(tp * np.log(A)).sum(axis=(1, 2)) + lam * (A * h).sum(axis=(1, 2)) / (h.sum(axis=(1, 2)) + eps)
        assert got == pytest.approx(per.mean(), rel=1e-6)


def test_attention_loss_absent_and_errors():
    t = attention_target(torch.zeros(2, 2, 2, dtype=D), torch.zeros(2, 2, 2, dtype=D))
    A = torch.full((2, 2, 2), 0.25, dtype=D, requires_grad=True)
    loss = attention_loss(A, t, LossWeights())
    assert loss.item() == 0.0
    loss.backward()
    with pytest.raises(NumericError):
        attention_loss(torch.zeros(2, 2, dtype=D), attention_target(torch.ones(2, 2), torch.zeros(2, 2)),
                       LossWeights())


def test_attention_loss_moves_mass_off_hair():
    face = torch.tensor([[1.0, 0], [0, 0]], dtype=D)
    hair = torch.tensor([[0, 1.0], [0, 0]], dtype=D)
    t = attention_target(face, torch.zeros_like(face), hair_ds=hair)
    S = torch.zeros(2, 2, dtype=D, requires_grad=True)
    loss = attention_loss(torch.softmax(S.flatten(), 0).view(2, 2), t, LossWeights())
    loss.backward()
    direction = torch.tensor([[1.0, -1.0], [0, 0]], dtype=D)  # logit mass from hair to face
    assert float((S.grad * direction).sum()) < 0


def test_id_loss():
    logits = torch.zeros(4, 6, dtype=D)
    assert float(id_loss(logits, torch.tensor([0, 1, 2, 3]))) == pytest.approx(math.log(6))
    big = torch.full((2, 3), -1e4, dtype=D)
    big[0, 1] = big[1, 2] = 1e4
    assert float(id_loss(big, torch.tensor([1, 2]))) == pytest.approx(0.0, abs=1e-12)
    g = torch.Generator().manual_seed(0)
    x = torch.randn(5, 4, generator=g, dtype=D)
    y = torch.tensor([0, 3, 1, 1, 2])
    oracle = np.mean([-x[i, y[i]].item() + math.log(sum(math.exp(v) for v in x[i].tolist())) for i in range(5)])
    assert float(id_loss(x, y)) == pytest.approx(oracle, rel=1e-12)
    with pytest.raises(ValueError):
        id_loss(x, torch.tensor([0, 4, 1, 1, 2]))


def _triplet_oracle(x, y, margin):
    n = len(y)
    per = []
    for a in range(n):
        pos = [np.linalg.norm(x[a] - x[p]) for p in range(n) if p != a and y[p] == y[a]]
        neg = [np.linalg.norm(x[a] - x[q]) for q in range(n) if y[q] != y[a]]
        if pos and neg:
            # hardest mining picks the worst triple among all (pos, neg) combinations
            per.append(max(max(0.0, dp - dn + margin) for dp, dn in itertools.product(pos, neg)))
    return np.mean(per)


def test_triplet_examples_and_oracle(rng):
    x = torch.tensor([[0.0, 0], [0, 0], [10, 0], [10, 0]], dtype=D)
    y = torch.tensor([0, 0, 1, 1])
    assert float(triplet_loss(x, y, 0.3)) == pytest.approx(0.0, abs=1e-5)
    # unit square, each identity on one vertical edge: hardest d_pos = hardest d_neg = 1
    x = torch.tensor([[0.0, 0], [1, 0], [0, 1], [1, 1]], dtype=D)
    y = torch.tensor([0, 1, 0, 1])
    assert float(triplet_loss(x, y, 0.3)) == pytest.approx(0.3, abs=1e-9)
    for _ in range(100):
        pts = rng.normal(size=(4, 2))
        labels = np.array([0, 0, 1, 1])
        got = float(triplet_loss(torch.tensor(pts), torch.tensor(labels), 0.3))
        assert got == pytest.approx(_triplet_oracle(pts, labels, 0.3), rel=1e-9, abs=1e-12)


def test_triplet_degenerate_batch_warns(caplog):
    with caplog.at_level("WARNING"):
        out = triplet_loss(torch.randn(3, 2), torch.tensor([0, 1, 2]))
    assert float(out) == 0.0 and "triplet" in caplog.text


def test_pairwise_euclidean():
    x = torch.randn(5, 3, dtype=D)
    assert torch.allclose(pairwise_euclidean(x), torch.cdist(x, x), atol=1e-6)


class _Head(torch.nn.Module):
    def __init__(self, d, c):
        super().__init__()
        self.lin = torch.nn.Linear(d, c)

    def forward(self, x):
        return self.lin(x)


def test_cal_two_term_oracle():
    torch.manual_seed(0)
    pmap = {0: [0, 1], 1: [2, 3]}
    head = _Head(3, 4).double()
    feats = torch.randn(4, 3, dtype=D, requires_grad=True)
    clothes = torch.tensor([0, 1, 2, 3])
    ids = torch.tensor([0, 0, 1, 1])
    terms = cal_loss(feats, head, clothes, ids, positive_clothes_mask(pmap, 2, 4))
    logits = head(feats)
    assert float(terms.classifier.detach()) == pytest.approx(float(F.cross_entropy(logits, clothes).detach()), rel=1e-12)
    logp = F.log_softmax(logits, 1)
    other = {0: 1, 1: 0, 2: 3, 3: 2}
    oracle = -np.mean([logp[i, other[int(c)]].item() for i, c in enumerate(clothes)])
    assert terms.adversarial.item() == pytest.approx(oracle, rel=1e-12)
    # the adversarial term moves features only; the classifier term moves the head only
    terms.adversarial.backward(retain_graph=True)
    assert feats.grad.abs().sum() > 0 and head.lin.weight.grad is None
    feats.grad = None
    terms.classifier.backward()
    assert feats.grad is None and head.lin.weight.grad.abs().sum() > 0


def test_cal_single_clothes_and_uniform_target():
    logits = torch.randn(2, 3, dtype=D)
    zero = clothes_adversarial_ce(logits, torch.tensor([0, 0]), torch.tensor([0, 0]), {0: [0]})
    assert float(zero) == 0.0
    uniform = torch.log(torch.tensor([[1e-300, 0.5, 0.5]], dtype=D))
    ce = clothes_adversarial_ce(uniform, torch.tensor([0]), torch.tensor([0]), {0: [0, 1, 2]})
    assert float(ce) == pytest.approx(math.log(2), rel=1e-12)


def test_total_loss():
    comps = {k: torch.tensor(v, dtype=D) for k, v in zip(("L_id", "L_tri", "L_att", "L_cal"), (1, 2, 3, 4))}
    assert float(total_loss(comps, LossWeights(1, 1, 0.5))) == 8.0
    assert float(total_loss(comps, LossWeights(0, 0, 0))) == 1.0
    comps["L_att"] = torch.tensor(float("nan"))
    with pytest.raises(NumericError, match="L_att"):
        total_loss(comps, LossWeights())


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda_att=-1)
    with pytest.raises(ValueError):
        LossWeights(epsilon=0)
