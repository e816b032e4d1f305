import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mdseg.segnet import (DSBN, MBConv, ArchConfig, AttentionGate, DomainLayout, SegModel, dsbn_forward,
                          segmentation_head)

TINY = ArchConfig(widths=(4, 8, 8, 8, 8), blocks_per_stage=1)


def _pre_affine_hook(store):
    def hook(module, args, out):
        x, d = args
        gamma, beta = module.gamma[d], module.beta[d]
        store.append(((out - beta[None, :, None, None]) / gamma[None, :, None, None]).detach())
    return hook


def test_dsbn_train_mode_normalizes_per_domain():
    torch.manual_seed(0)
    bn = DSBN(5, 3).double()
    with torch.no_grad():
        for g in bn.gamma:
            g.uniform_(0.5, 2.0)
        for b in bn.beta:
            b.normal_()
    bn.train()
    for d in range(3):
        x = torch.randn(7, 5, 6, 6, dtype=torch.float64) * (d + 1) + 3 * d
        y = bn(x, d)
        pre = (y - bn.beta[d][None, :, None, None]) / bn.gamma[d][None, :, None, None]
        assert pre.mean(dim=(0, 2, 3)).abs().max() < 1e-5
        assert (pre.var(dim=(0, 2, 3), unbiased=False) - 1).abs().max() < 1e-3


def test_dsbn_running_stats_update_only_their_slot():
    bn = DSBN(2, 2)
    x = torch.randn(4, 2, 3, 3) + 5
    bn.train()
    bn(x, 1)
    assert torch.equal(bn.running_mean_0, torch.zeros(2))
    n = 4 * 9
    expect = 0.1 * x.mean(dim=(0, 2, 3))
    assert torch.allclose(bn.running_mean_1, expect, atol=1e-6)
    unbiased = x.var(dim=(0, 2, 3), unbiased=False) * n / (n - 1)
    assert torch.allclose(bn.running_var_1, 0.9 + 0.1 * unbiased, atol=1e-5)


def test_dsbn_eval_uses_running_stats():
    bn = DSBN(3, 1).eval()
    x = torch.randn(1, 3, 2, 2)
    assert torch.allclose(bn(x, 0), x / torch.sqrt(torch.tensor(1 + 1e-5)))


def test_dsbn_rejects_single_value_and_bad_slot():
    bn = DSBN(2, 2).train()
    with pytest.raises(ValueError):
        bn(torch.randn(1, 2, 1, 1), 0)
    with pytest.raises(ValueError):
        bn(torch.randn(2, 2, 2, 2), 2)


def test_model_dsbn_layers_normalize_in_train_mode():
    torch.manual_seed(1)
    model = SegModel(TINY, {0: 3, 1: 2}).double().train()
    for m in model.modules():
        if isinstance(m, DSBN):
            with torch.no_grad():
                for g in m.gamma:
                    g.uniform_(0.5, 2.0)
    store = []
    hooks = [m.register_forward_hook(_pre_affine_hook(store)) for m in model.modules() if isinstance(m, DSBN)]
    for d in (0, 1):
        store.clear()
        model(torch.randn(4, 1, 32, 32, dtype=torch.float64) * (1 + d), d)
        for pre in store:
            if pre.shape[0] * pre.shape[2] * pre.shape[3] < 2:
                continue
            assert pre.mean(dim=(0, 2, 3)).abs().max() < 1e-5
            assert (pre.var(dim=(0, 2, 3), unbiased=False) - 1).abs().max() < 1e-3
    for h in hooks:
        h.remove()


def _perturb_domain(model, j):
    with torch.no_grad():
        for p in model.domain_parameters(j):
            p.add_(torch.randn_like(p))
        for m in model.modules():
            if isinstance(m, DSBN):
                slot = model.layout.slot(j)
                getattr(m, f"running_mean_{slot}").add_(1.0)
                getattr(m, f"running_var_{slot}").mul_(3.0)


@pytest.mark.parametrize("block", ["plain", "mbconv"])
@pytest.mark.parametrize("train", [True, False])
def test_domain_isolation(block, train):
    torch.manual_seed(2)
    arch = ArchConfig(widths=(4, 8, 8, 8, 8), blocks_per_stage=2, block=block)
    model = SegModel(arch, {0: 3, 1: 4, 2: 2}).double()
    model.train(train)
    x = torch.randn(2, 1, 32, 32, dtype=torch.float64)
    before = model(x, 0)
    _perturb_domain(model, 1)
    _perturb_domain(model, 2)
    after = model(x, 0)
    assert torch.equal(before.probs, after.probs)
    for a, b in zip(before.embeddings, after.embeddings):
        assert torch.equal(a, b)
    assert not torch.equal(model(x, 1).probs[:, :3], torch.zeros(1))


def test_default_architecture_shapes():
    model = SegModel(ArchConfig(), {0: 4, 1: 5, 2: 3})
    assert ArchConfig().embedding_dims() == (32, 64, 128, 256, 512, 256, 128, 64, 32)
    out = model.eval()(torch.randn(2, 1, 32, 32), 1)
    assert out.probs.shape == (2, 5, 32, 32)
    assert [e.shape[1] for e in out.embeddings] == [32, 64, 128, 256, 512, 256, 128, 64, 32]
    assert len(out.attention) == 4
    split = model.parameter_split()
    assert split["domain_specific_fraction"] < 0.03


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.sampled_from([16, 32, 48]))
def test_embeddings_unit_norm_and_probs_simplex(seed, hw):
    torch.manual_seed(seed)
    model = SegModel(TINY, {0: 3, 1: 2}).eval()
    out = model(torch.randn(3, 1, hw, hw), seed % 2)
    for e in out.embeddings:
        assert torch.allclose(e.norm(dim=1), torch.ones(3), atol=1e-6)
    assert torch.allclose(out.probs.sum(1), torch.ones(3, hw, hw), atol=1e-6)
    for a in out.attention:
        assert a.min() >= 0 and a.max() <= 1


def test_input_validation():
    model = SegModel(TINY, {0: 3})
    with pytest.raises(ValueError):
        model(torch.randn(1, 1, 20, 20), 0)
    with pytest.raises(ValueError):
        model(torch.randn(1, 2, 16, 16), 0)
    with pytest.raises(ValueError):
        model(torch.randn(2, 1, 16, 16), 5)


def test_eval_mode_is_deterministic():
    model = SegModel(TINY, {0: 3}).eval()
    x = torch.randn(2, 1, 16, 16)
    assert torch.equal(model(x, 0).probs, model(x, 0).probs)


def test_mbconv_residual_and_gate():
    blk = MBConv(8, 8, 2).eval()
    assert blk.residual
    assert not MBConv(8, 16, 2).residual
    h = torch.randn(2, 32, 4, 4)
    g = blk.se_gate(h)
    assert g.shape == (2, 32, 1, 1) and g.min() >= 0 and g.max() <= 1


def test_attention_gate_shapes():
    gate = AttentionGate(8, 16, 4, 2).eval()
    skip, g = torch.randn(2, 8, 16, 16), torch.randn(2, 16, 8, 8)
    gated, alpha = gate(skip, g, 1)
    assert gated.shape == skip.shape and alpha.shape == (2, 1, 16, 16)
    assert torch.allclose(gated, skip * alpha)
    with pytest.raises(ValueError):
        gate(torch.randn(2, 4, 16, 16), g, 0)


def test_shared_layout_label_mapping():
    lay = DomainLayout({0: 4, 1: 3}, "shared_bn")
    assert lay.union_classes == 6 and lay.n_slots == 1
    y = torch.zeros(1, 3, 2, 2)
    y[0, 2] = 1.0
    u = lay.to_model_target(1, y)
    assert u.shape[1] == 6 and u[0, 5].sum() == 4
    labels = np.array([0, 1, 3, 4, 5])
    assert lay.local_labels(1, labels).tolist() == [0, 0, 0, 1, 2]
    assert lay.local_labels(0, labels).tolist() == [0, 1, 3, 0, 0]
    p = np.full((1, 6, 1, 1), 1 / 6)
    lp = lay.local_probs(1, p)
    assert lp.shape[1] == 3 and np.isclose(lp[0, 0, 0, 0], 4 / 6)
    with pytest.raises(ValueError):
        DomainLayout({0: 3, 1: 2}, "individual")


def test_segmentation_head_matches_model_head():
    model = SegModel(TINY, {0: 3, 1: 2}).eval()
    u = torch.randn(2, 4, 8, 8)
    out = segmentation_head(u, 1, model)
    assert torch.allclose(out, torch.softmax(model.heads[1](u), 1))


def test_dsbn_forward_matches_torch_batch_norm():
    x = torch.randn(4, 3, 5, 5, dtype=torch.float64)
    g, b = torch.rand(3, dtype=torch.float64) + 0.5, torch.randn(3, dtype=torch.float64)
    rm, rv = torch.zeros(3, dtype=torch.float64), torch.ones(3, dtype=torch.float64)
    rm2, rv2 = rm.clone(), rv.clone()
    ours = dsbn_forward(x, g, b, rm, rv, True)
    ref = torch.nn.functional.batch_norm(x, rm2, rv2, g, b, True, 0.1, 1e-5)
    assert torch.allclose(ours, ref, atol=1e-12)
    assert torch.allclose(rm, rm2) and torch.allclose(rv, rv2)
