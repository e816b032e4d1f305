import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mdseg.losses import (LossWeights, MultiScaleEmbedding, ae_objective, ce_multi, mjap_loss, msc_loss,
                          seg_objective, ssc_loss)
from mdseg.priornet import AEModel, PriorError
from mdseg.segnet import ArchConfig

from .oracles import (central_fd, ce_oracle, msc_oracle, random_embedding, random_onehot, random_probs,
                      relative_error, small_prior)


def test_worked_example():
    z = torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]], dtype=torch.float64)
    emb = MultiScaleEmbedding({1: z}, [0, 0, 1, 1])
    assert msc_loss(emb, 1.0).item() == pytest.approx(math.log((math.e + 2) / math.e), abs=1e-12)


@pytest.mark.parametrize("seed", range(50))
def test_msc_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    emb = random_embedding(rng)
    tau = [0.1, 1.0][seed % 2]
    expect = msc_oracle({s: z.numpy() for s, z in emb.scales.items()}, emb.domain_labels.tolist(), tau)
    assert abs(msc_loss(emb, tau).item() - expect) <= 1e-9
    one = next(iter(emb.scales))
    expect1 = msc_oracle({one: emb.scales[one].numpy()}, emb.domain_labels.tolist(), tau)
    assert abs(ssc_loss(emb, tau, scale=one).item() - expect1) <= 1e-9


def test_msc_per_scale_temperature():
    rng = np.random.default_rng(0)
    emb = random_embedding(rng, n_scales=3)
    taus = (0.1, 0.5, 1.0)
    labels = emb.domain_labels.tolist()
    expect = np.mean([msc_oracle({s: emb.scales[s].numpy()}, labels, taus[s - 1]) for s in sorted(emb.scales)])
    assert msc_loss(emb, taus).item() == pytest.approx(expect, abs=1e-9)


def test_msc_needs_positive_pairs():
    z = torch.eye(3, dtype=torch.float64)
    with pytest.raises(ValueError):
        msc_loss(MultiScaleEmbedding({1: z}, [0, 0, 1]), 0.1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_msc_is_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    emb = random_embedding(rng)
    perm = torch.as_tensor(rng.permutation(len(emb)))
    shuffled = MultiScaleEmbedding({s: z[perm] for s, z in emb.scales.items()}, emb.domain_labels[perm])
    assert msc_loss(shuffled, 0.1).item() == pytest.approx(msc_loss(emb, 0.1).item(), rel=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_ce_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    preds, targets = {}, {}
    for k, c in enumerate(rng.integers(2, 5, size=rng.integers(1, 4))):
        n = int(rng.integers(1, 4))
        logits = torch.as_tensor(rng.normal(size=(n, c, 4, 5)))
        preds[k] = torch.softmax(logits, 1)
        labels = rng.integers(0, c, size=(n, 4, 5))
        targets[k] = torch.as_tensor(np.moveaxis(np.eye(c)[labels], -1, 1))
    expect = ce_oracle({k: v.numpy() for k, v in preds.items()}, {k: v.numpy() for k, v in targets.items()})
    assert ce_multi(preds, targets).item() == pytest.approx(expect, abs=1e-12)


def test_ce_clipping_keeps_loss_finite():
    p = torch.zeros(1, 2, 2, 2, dtype=torch.float64)
    p[:, 0] = 1.0
    y = torch.zeros_like(p)
    y[:, 1] = 1.0
    assert ce_multi({0: p}, {0: y}).item() == pytest.approx(-math.log(1e-7) / 2)


def test_ce_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        ce_multi({0: torch.ones(1, 2, 4, 4)}, {0: torch.ones(1, 3, 4, 4)})


@pytest.fixture(scope="module")
def prior():
    return small_prior()


def test_mjap_identity(prior):
    rng = np.random.default_rng(1)
    y = {0: random_onehot(rng, 2, 3), 1: random_onehot(rng, 3, 2)}
    assert mjap_loss(y, y, prior).item() == 0.0
    p = {k: torch.softmax(torch.as_tensor(rng.normal(size=v.shape)), 1) for k, v in y.items()}
    assert mjap_loss(p, y, prior).item() > 0


def _linear_prior(rng, classes, width):
    ae = AEModel(ArchConfig(widths=(width,), blocks_per_stage=1, activation="linear"), classes).double()
    with torch.no_grad():
        for p in ae.parameters():
            p.copy_(torch.as_tensor(rng.normal(size=tuple(p.shape))))
        conv = ae.encoder[0].blocks[0].conv.weight
        centre = conv[:, :, 1, 1].clone()
        conv.zero_()
        conv[:, :, 1, 1] = centre
        bn = ae.encoder[0].blocks[0].bn
        for d in range(bn.n_domains):
            bn.gamma[d].fill_(1.0)
            bn.beta[d].fill_(0.0)
    ae.freeze()
    return ae


def _linear_code(ae, y, k):
    """Hand evaluation of the 1x1 encoder: W2 (W1 y + b1) / sqrt(1 + eps)."""
    d = ae.layout.slot(k)
    w1 = ae.inputs[d].weight[:, :, 0, 0].numpy()
    b1 = ae.inputs[d].bias.numpy()
    w2 = ae.encoder[0].blocks[0].conv.weight[:, :, 1, 1].numpy()
    h = np.einsum("oc,bchw->bohw", w1, y) + b1[None, :, None, None]
    return np.einsum("oc,bchw->bohw", w2, h) / math.sqrt(1.0 + 1e-5)


@pytest.mark.parametrize("reduction", ["sum", "mean"])
def test_mjap_linear_encoder_oracle(reduction):
    rng = np.random.default_rng(3)
    ae = _linear_prior(rng, {0: 3, 1: 2}, 5)
    y = {0: random_onehot(rng, 2, 3, 4), 1: random_onehot(rng, 3, 2, 4)}
    p = {0: random_probs(rng, 2, 3, 4), 1: random_probs(rng, 3, 2, 4)}
    per_domain = []
    for k in y:
        diff = _linear_code(ae, y[k].numpy(), k) - _linear_code(ae, p[k].numpy(), k)
        sq = (diff ** 2).reshape(len(diff), -1)
        per_domain.append((sq.mean(1) if reduction == "mean" else sq.sum(1)).mean())
    got = mjap_loss(p, y, ae, reduction=reduction).item()
    assert got == pytest.approx(float(np.mean(per_domain)), rel=1e-10)


def test_mjap_mean_is_sum_over_code_size(prior):
    rng = np.random.default_rng(4)
    y = {0: random_onehot(rng, 2, 3, 8)}
    p = {0: random_probs(rng, 2, 3, 8)}
    size = prior.encode(y[0], 0)[0][0].numel()
    total = mjap_loss(p, y, prior, reduction="sum").item()
    assert mjap_loss(p, y, prior).item() == pytest.approx(total / size, rel=1e-12)
    with pytest.raises(ValueError):
        mjap_loss(p, y, prior, reduction="max")


def test_mjap_requires_frozen_prior():
    ae = AEModel(ArchConfig(widths=(4, 4, 4, 4, 4), blocks_per_stage=1), {0: 2}).double()
    y = {0: torch.ones(1, 2, 16, 16, dtype=torch.float64)}
    with pytest.raises(PriorError):
        mjap_loss(y, y, ae)
    ae.freeze()
    with pytest.raises(PriorError):
        mjap_loss(y, y, ae, fingerprint="0" * 64)


# ------------------------------------------------------------ gradient checks

N_GRAD = 20
# the prior encoder max-pools; slopes differing by more than this flag a pooling switch
KINK = 1e-3


@pytest.mark.parametrize("seed", range(N_GRAD))
def test_ce_gradient(seed):
    rng = np.random.default_rng(seed)
    p = {0: random_probs(rng, 2, 3, 4), 1: random_probs(rng, 1, 2, 4)}
    y = {0: random_onehot(rng, 2, 3, 4), 1: random_onehot(rng, 1, 2, 4)}
    for k in p:
        fn = lambda t, k=k: ce_multi({**p, k: t}, y)
        assert relative_error(fn, p[k]) < 1e-4


@pytest.mark.parametrize("seed", range(N_GRAD))
def test_msc_gradient(seed):
    rng = np.random.default_rng(seed)
    emb = random_embedding(rng)
    tau = [0.1, 1.0][seed % 2]
    for s in emb.scales:
        fn = lambda t, s=s: msc_loss(MultiScaleEmbedding({**emb.scales, s: t}, emb.domain_labels), tau)
        assert relative_error(fn, emb.scales[s]) < 1e-4


@pytest.mark.parametrize("seed", range(N_GRAD))
def test_mjap_gradient(seed, prior):
    rng = np.random.default_rng(seed)
    y = {0: random_onehot(rng, 1, 3, 8), 1: random_onehot(rng, 2, 2, 8)}
    p = {0: random_probs(rng, 1, 3, 8), 1: random_probs(rng, 2, 2, 8)}
    k = seed % 2
    fn = lambda t: mjap_loss({**p, k: t}, y, prior)
    assert relative_error(fn, p[k], kink_tol=KINK) < 1e-4


@pytest.mark.parametrize("seed", range(N_GRAD))
def test_ae_objective_gradient(seed):
    rng = np.random.default_rng(seed)
    p = {0: random_probs(rng, 2, 3, 4), 1: random_probs(rng, 2, 2, 4)}
    y = {0: random_onehot(rng, 2, 3, 4), 1: random_onehot(rng, 2, 2, 4)}
    emb = random_embedding(rng, domains=2, per_domain=2)
    w = LossWeights()
    assert relative_error(lambda t: ae_objective({**p, 0: t}, y, emb, w), p[0]) < 1e-4
    fn = lambda t: ae_objective(p, y, MultiScaleEmbedding({**emb.scales, 1: t}, emb.domain_labels), w)
    assert relative_error(fn, emb.scales[1]) < 1e-4


@pytest.mark.parametrize("seed", range(N_GRAD))
def test_seg_objective_gradient(seed, prior):
    rng = np.random.default_rng(seed)
    p = {0: random_probs(rng, 1, 3, 8), 1: random_probs(rng, 2, 2, 8)}
    y = {0: random_onehot(rng, 1, 3, 8), 1: random_onehot(rng, 2, 2, 8)}
    emb = random_embedding(rng, domains=2, per_domain=2)
    w = LossWeights()
    assert relative_error(lambda t: seg_objective({**p, 1: t}, y, emb, prior, w), p[1], kink_tol=KINK) < 1e-4
    fn = lambda t: seg_objective(p, y, MultiScaleEmbedding({**emb.scales, 1: t}, emb.domain_labels), prior, w)
    assert relative_error(fn, emb.scales[1]) < 1e-4


def test_fd_helper_agrees_on_a_known_gradient():
    x = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)
    fd = central_fd(lambda t: (t ** 3).sum(), x)
    assert np.allclose(fd, 3 * x.numpy() ** 2, atol=1e-8)


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(tau=0)
    with pytest.raises(ValueError):
        LossWeights(lambda2=-1)
    with pytest.raises(ValueError):
        LossWeights(scales=())


def test_objective_terms_respect_zero_weights(prior):
    rng = np.random.default_rng(0)
    p = {0: random_probs(rng, 2, 3)}
    y = {0: random_onehot(rng, 2, 3)}
    w = LossWeights(lambda2=0.0, lambda3=0.0)
    assert seg_objective(p, y, None, None, w).item() == pytest.approx(ce_multi(p, y).item())
    with pytest.raises(ValueError):
        seg_objective(p, y, None, None, LossWeights())
