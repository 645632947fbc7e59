import numpy as np
import pytest
import torch

from conftest import assert_grad_matches_fd

from drive4d.errors import ShapeError
from drive4d.projector import (
    PatchCrossAttention,
    SpatialProjector,
    patchify,
    pool_patches,
    unpatchify,
)


def test_patchify_counts_full_scale():
    f = torch.zeros(200, 200, 2)
    patches = patchify(f, 10)
    assert patches.shape == (400, 100, 2)


def test_patchify_hand_case_and_oracle():
    f = torch.arange(4 * 4 * 1, dtype=torch.float64).reshape(4, 4, 1)
    patches = patchify(f, 2)
    assert patches.shape == (4, 4, 1)
    # Patch 0 holds cells (0,0), (0,1), (1,0), (1,1) in row-major order.
    assert patches[0, :, 0].tolist() == [f[0, 0, 0], f[0, 1, 0], f[1, 0, 0], f[1, 1, 0]]
    # Nested-loop oracle over every patch.
    k = 2
    for n in range(4):
        pr, pc = divmod(n, 2)
        for s in range(k * k):
            r, c = divmod(s, k)
            assert patches[n, s, 0] == f[pr * k + r, pc * k + c, 0]


def test_patchify_rejects_nondivisor():
    with pytest.raises(ShapeError):
        patchify(torch.zeros(5, 4, 1), 2)
    with pytest.raises(ShapeError):
        patchify(torch.zeros(4, 6, 1), 4)


def test_unpatchify_inverse():
    g = torch.Generator().manual_seed(0)
    for h, w, k, c in [(4, 4, 2, 3), (8, 12, 4, 2), (40, 40, 8, 5)]:
        f = torch.randn(h, w, c, generator=g)
        assert torch.equal(unpatchify(patchify(f, k), h, w, k), f)
    batched = torch.randn(3, 8, 8, 2, generator=g)
    assert torch.equal(unpatchify(patchify(batched, 4), 8, 8, 4), batched)


def test_pool_patches_values():
    patches = torch.tensor([[[1.0], [2.0], [3.0], [4.0]]])
    assert pool_patches(patches).squeeze().item() == pytest.approx(2.5)
    const = torch.full((2, 9, 3), 7.0)
    assert torch.allclose(pool_patches(const), torch.full((2, 1, 3), 7.0))
    # Mean is invariant to shuffling cells within the patch.
    g = torch.Generator().manual_seed(1)
    p = torch.randn(5, 16, 4, generator=g)
    perm = torch.randperm(16, generator=g)
    assert torch.allclose(pool_patches(p), pool_patches(p[:, perm]), atol=1e-6)


def test_cross_attention_uniform_equals_pooling():
    # A zero query makes every logit equal, so attention averages the
    # values; with an identity value map that is exactly the patch mean.
    attn = PatchCrossAttention(channels=4, heads=1).double()
    with torch.no_grad():
        attn.q.weight.zero_()
        attn.k.weight.copy_(torch.eye(4, dtype=torch.float64))
        attn.v.weight.copy_(torch.eye(4, dtype=torch.float64))
    g = torch.Generator().manual_seed(2)
    patches = torch.randn(6, 9, 4, generator=g, dtype=torch.float64)
    out = attn(pool_patches(patches), patches)
    assert torch.allclose(out, patches.mean(dim=1), atol=1e-12)


def test_cross_attention_identity_on_constant_patch():
    # Identity q/k/v with identical cells: keys are uniform, output equals
    # the shared cell value, which is also the patch mean.
    attn = PatchCrossAttention(channels=3, heads=1).double()
    with torch.no_grad():
        for lin in (attn.q, attn.k, attn.v):
            lin.weight.copy_(torch.eye(3, dtype=torch.float64))
    cell = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)
    patches = cell.expand(2, 4, 3).clone()
    out = attn(pool_patches(patches), patches)
    assert torch.allclose(out, cell.expand(2, 3), atol=1e-12)


def test_cross_attention_saturation():
    # One key aligned with the query at logit margin >= 20: softmax puts
    # all but ~2e-9 of the mass there, so the output matches that value row.
    c = 4
    attn = PatchCrossAttention(channels=c, heads=1).double()
    with torch.no_grad():
        attn.q.weight.copy_(torch.eye(c, dtype=torch.float64))
        attn.k.weight.copy_(torch.eye(c, dtype=torch.float64))
        attn.v.weight.copy_(torch.eye(c, dtype=torch.float64))
    patches = torch.zeros(1, 5, c, dtype=torch.float64)
    patches[0, 3, 0] = 50.0          # dominant key: logit 50*q0/sqrt(4)
    patches[0, 3, 1] = -7.0          # recognizable value payload
    pooled = torch.zeros(1, 1, c, dtype=torch.float64)
    pooled[0, 0, 0] = 2.0            # query aligned with the dominant key
    out, weights = attn(pooled, patches, return_weights=True)
    margin = (50.0 * 2.0 / 2.0) - 0.0
    assert margin >= 20.0
    assert torch.allclose(out[0], patches[0, 3], atol=1e-6)
    assert weights.sum(dim=-1).allclose(torch.ones_like(weights.sum(dim=-1)),
                                        atol=1e-6)


def test_attention_rows_sum_to_one():
    proj = SpatialProjector(patch_size=2, channels=6, lm_width=8, heads=2)
    g = torch.Generator().manual_seed(3)
    f = torch.randn(4, 4, 6, generator=g)
    w = proj.attention_weights(f)
    assert torch.allclose(w.sum(dim=-1), torch.ones_like(w.sum(dim=-1)), atol=1e-6)


def test_project_shapes_and_zero():
    proj = SpatialProjector(patch_size=8, channels=64, lm_width=128)
    f = torch.randn(40, 40, 64)
    tokens = proj(f)
    assert tokens.shape == (25, 128)
    assert proj.num_tokens(40, 40) == 25
    with torch.no_grad():
        proj.out.bias.zero_()
    zero_tokens = proj(torch.zeros(40, 40, 64))
    assert torch.allclose(zero_tokens, torch.zeros(25, 128))
    batched = proj(torch.randn(2, 40, 40, 64))
    assert batched.shape == (2, 25, 128)
    with pytest.raises(ShapeError):
        proj(torch.randn(41, 40, 64))
    with pytest.raises(ValueError):
        proj(torch.full((40, 40, 64), float("nan")))


def test_patch_locality():
    torch.manual_seed(4)
    proj = SpatialProjector(patch_size=4, channels=8, lm_width=16)
    f = torch.randn(16, 16, 8)
    base = proj(f)
    bumped = f.clone()
    bumped[4:8, 8:12, :] += 1.0      # exactly patch row 1, col 2 -> n = 6
    out = proj(bumped)
    changed = (out - base).abs().sum(dim=-1) > 1e-9
    assert changed.tolist() == [i == 6 for i in range(16)]


def test_cross_attention_gradient_matches_fd():
    attn = PatchCrossAttention(channels=3, heads=1).double()
    g = torch.Generator().manual_seed(5)
    patches = torch.randn(2, 4, 3, generator=g, dtype=torch.float64)
    probe = torch.randn(2, 3, generator=g, dtype=torch.float64)

    def fn(x):
        return (attn(pool_patches(x), x) * probe).sum()

    assert_grad_matches_fd(fn, patches, tol=1e-4)


def test_project_gradient_matches_fd():
    torch.manual_seed(6)
    proj = SpatialProjector(patch_size=2, channels=3, lm_width=4).double()
    f = torch.randn(4, 4, 3, dtype=torch.float64)
    probe = torch.randn(4, 4, dtype=torch.float64)

    def fn(x):
        return (proj(x) * probe).sum()

    assert_grad_matches_fd(fn, f, tol=1e-4)
