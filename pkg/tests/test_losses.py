import math

import numpy as np
import pytest
import torch

from vertsynth.losses import (
    AdversarialTerms,
    DiscriminatorSet,
    LossWeights,
    PatchDiscriminator,
    adversarial_losses,
    dice_loss,
    edge_loss,
    height_loss,
    l1_loss,
    slot_crop,
    sobel_edges,
    soft_dice_term,
    total_generator_loss,
)

torch.manual_seed(0)


def central_diff_grad(f, x, h=1e-6):
    """Finite-difference gradient oracle, independent of autograd."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        dn = f(x)
        flat[i] = orig
        gf[i] = (up - dn) / (2 * h)
    return g


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return np.abs(a - b).max() / denom


# -- l1 ---------------------------------------------------------------------

def test_l1_identity():
    x = torch.rand(1, 1, 8, 8, dtype=torch.float64)
    mask = torch.zeros(1, 1, 8, 8)
    mask[:, :, 2:6] = 1
    assert l1_loss(x, x, x, mask).item() == 0.0


def test_l1_direct_substitution():
    real = torch.rand(1, 1, 8, 8, dtype=torch.float64)
    mask = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
    mask[:, :, 2:6] = 1
    fine = real + 0.1 * mask
    assert l1_loss(real, real, fine, mask).item() == pytest.approx(0.05, abs=1e-9)


def test_l1_mask_normalisation():
    real = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
    small = torch.zeros_like(real)
    small[:, :, 3:5] = 1
    big = torch.zeros_like(real)
    big[:, :, 1:5] = 1
    fine_s = real + 0.2 * small
    fine_b = real + 0.2 * big
    v1 = l1_loss(real, real, fine_s, small).item()
    v2 = l1_loss(real, real, fine_b, big).item()
    assert v1 == pytest.approx(v2, abs=1e-12)


def test_l1_ignores_unmasked_pixels():
    real = torch.rand(1, 1, 8, 8, dtype=torch.float64)
    mask = torch.zeros_like(real)
    mask[:, :, 4:] = 1
    fine = real.clone()
    fine[:, :, :4] += 5.0  # outside the mask
    assert l1_loss(real, real, fine, mask).item() == 0.0


def test_l1_empty_mask():
    x = torch.rand(1, 1, 4, 4)
    with pytest.raises(ValueError, match="empty mask"):
        l1_loss(x, x, x, torch.zeros_like(x))


# -- adversarial ---------------------------------------------------------------

class ConstantD(torch.nn.Module):
    def __init__(self, p):
        super().__init__()
        self.p = p

    def forward(self, x):
        return torch.full((x.shape[0], 1, 2, 2), self.p, dtype=torch.float64)


def const_set(pg, pl=None, ps=None):
    return DiscriminatorSet(ConstantD(pg), ConstantD(pl or pg), ConstantD(ps or pg))


def test_adv_blind_discriminator():
    x = torch.rand(2, 1, 8, 8, dtype=torch.float64)
    terms = adversarial_losses(const_set(0.5), x, x, x, x, (2, 6))
    assert terms.d_global.item() == pytest.approx(2 * math.log(0.5), abs=1e-9)


def test_adv_perfect_discriminator_limit():
    x = torch.rand(1, 1, 8, 8, dtype=torch.float64)

    class PerfectD(torch.nn.Module):
        def __init__(self, eps):
            super().__init__()
            self.eps = eps
            self.flip = False

        def forward(self, inp):
            # first call sees real, second sees fake
            self.flip = not self.flip
            p = 1.0 - self.eps if self.flip else self.eps
            return torch.full((1, 1, 2, 2), p, dtype=torch.float64)

    vals = []
    for eps in (1e-3, 1e-5, 1e-7):
        d = DiscriminatorSet(PerfectD(eps), PerfectD(eps), PerfectD(eps))
        vals.append(adversarial_losses(d, x, x, x, x, (2, 6)).d_global.item())
    assert vals[0] < vals[1] < vals[2] < 0  # climbs towards 0 from below


def test_adv_equal_terms_combination():
    x = torch.rand(1, 1, 8, 8, dtype=torch.float64)
    terms = adversarial_losses(const_set(0.3), x, x, x, x, (2, 6))
    assert terms.d_total.item() == pytest.approx(terms.d_global.item(), abs=1e-9)
    assert terms.g_total.item() == pytest.approx(terms.g_global.item(), abs=1e-9)


def test_adv_local_uses_slot_crop():
    real = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
    crop = slot_crop(real, (2, 6))
    assert crop.shape == (1, 1, 4, 8)


def test_adv_real_patchgan_runs():
    torch.manual_seed(1)
    discs = DiscriminatorSet.build(base_width=8)
    real = torch.rand(2, 1, 32, 32)
    fake = torch.rand(2, 1, 32, 32)
    seg_r = torch.rand(2, 1, 32, 32)
    seg_f = torch.rand(2, 1, 32, 32)
    terms = adversarial_losses(discs, real, fake, seg_r, seg_f, (8, 24))
    for v in (terms.d_total, terms.g_total):
        assert torch.isfinite(v)


def test_patchgan_grid_smaller_and_bounded():
    d = PatchDiscriminator(1, 8)
    out = d(torch.rand(1, 1, 64, 64))
    assert out.shape[2] < 64 and out.shape[3] < 64
    assert out.min() > 0 and out.max() < 1


# -- dice -----------------------------------------------------------------------

def test_dice_identity():
    t = (torch.rand(1, 1, 16, 16) > 0.5).double()
    assert soft_dice_term(t, t).item() <= 1e-3


def test_dice_disjoint():
    p = torch.zeros(1, 1, 20, 20, dtype=torch.float64)
    q = torch.zeros_like(p)
    p[:, :, :5, :5] = 1  # area 25... use 100 below
    p = torch.zeros_like(p)
    q = torch.zeros_like(p)
    p[:, :, :10, :10] = 1  # area 100
    q[:, :, 10:, 10:] = 1  # area 100, disjoint
    expect = 1 - 1.0 / 201.0
    assert soft_dice_term(p, q).item() == pytest.approx(expect, abs=1e-9)


def test_dice_mean_of_pairs():
    perfect = torch.zeros(1, 1, 20, 20, dtype=torch.float64)
    perfect[:, :, 5:15, 5:15] = 1
    p = torch.zeros_like(perfect)
    q = torch.zeros_like(perfect)
    p[:, :, :10, :10] = 1
    q[:, :, 10:, 10:] = 1
    got = dice_loss(perfect, perfect, p, q).item()
    assert got == pytest.approx(0.5 * (1 - 1 / 201.0), abs=1e-6)
    assert got == pytest.approx(0.497, abs=5e-3)


# -- sobel / edge -----------------------------------------------------------------

def test_sobel_constant_zero():
    assert np.abs(sobel_edges(np.full((12, 12), 0.7))).max() <= 1e-6


def brute_force_sobel(img):
    kx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=float)
    ky = kx.T
    H, W = img.shape
    padded = np.pad(img, 1, mode="edge")
    out = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            win = padded[i : i + 3, j : j + 3]
            gx = (win * kx).sum()
            gy = (win * ky).sum()
            out[i, j] = np.hypot(gx, gy)
    return out


def test_sobel_vertical_step():
    img = np.zeros((10, 12))
    img[:, 6:] = 1.0
    got = sobel_edges(img)
    oracle = brute_force_sobel(img)
    assert np.allclose(got, oracle, atol=1e-7)
    nz = np.nonzero(got.max(axis=0) > 1e-7)[0]
    assert set(nz).issubset({5, 6, 7})
    assert got.max() == pytest.approx(4.0, abs=1e-6)


def test_sobel_rotation_equivariance():
    rng = np.random.default_rng(3)
    img = np.zeros((14, 14))
    img[3:9, 4:12] = 1.0
    img[5, 6] = 0.0
    rot = np.rot90(img)
    assert np.allclose(sobel_edges(rot), np.rot90(sobel_edges(img)), atol=1e-7)


def test_edge_loss_identity_and_symmetry():
    rng = np.random.default_rng(0)
    a = (rng.random((16, 16)) > 0.5).astype(float)
    b = (rng.random((16, 16)) > 0.5).astype(float)
    assert edge_loss(a, a) == 0.0
    assert edge_loss(a, b) == pytest.approx(edge_loss(b, a), abs=1e-12)


def test_edge_loss_shifted_square_oracle():
    a = np.zeros((20, 20))
    b = np.zeros((20, 20))
    a[5:10, 5:10] = 1
    b[6:11, 5:10] = 1  # shifted one row
    oracle = np.abs(brute_force_sobel(a) - brute_force_sobel(b)).mean()
    got = edge_loss(a, b)
    assert got > 0
    assert got == pytest.approx(oracle, abs=1e-7)


def test_edge_loss_mse_switch():
    a = np.zeros((10, 10))
    b = np.ones((10, 10)) * 0.5
    b[0, 0] = 1.0
    assert edge_loss(a, b, squared=True) >= 0


# -- height -----------------------------------------------------------------------

def test_height_identity():
    assert height_loss(30.0, 30.0, 30.0).item() == 0.0


def test_height_direct_substitution():
    assert height_loss(30.0, 24.0, 33.0).item() == pytest.approx(0.15, abs=1e-9)


def test_height_symmetric_weights():
    assert height_loss(30.0, 24.0, 33.0).item() == pytest.approx(
        height_loss(30.0, 33.0, 24.0).item(), abs=1e-12
    )


def test_height_rejects_nonpositive():
    with pytest.raises(ValueError):
        height_loss(0.0, 1.0, 1.0)


# -- total --------------------------------------------------------------------------

def test_total_zero():
    assert total_generator_loss(0.0, 0.0, 0.0, 0.0, 0.0) == 0.0


def test_total_direct_substitution():
    got = total_generator_loss(0.0, 0.1, 0.05, 0.0, 0.15)
    assert got == pytest.approx(16.0, abs=1e-9)


def test_total_linear_in_each_part():
    base = dict(adv=0.3, dice=0.2, l1=0.1, edge=0.05, height=0.4)
    v0 = total_generator_loss(**base)
    for key in base:
        scaled = dict(base)
        scaled[key] *= 2
        v1 = total_generator_loss(**scaled)
        w = {"adv": 1, "dice": 20, "l1": 40, "edge": 80, "height": 80}[key]
        assert v1 - v0 == pytest.approx(w * base[key], rel=1e-9)


def test_weights_validate():
    w = LossWeights()
    w.validate()
    with pytest.raises(ValueError):
        LossWeights(total_dice=-1).validate()


# -- gradient checks (loss-level, independent finite-difference oracle) ----------

def torch_grad(fn, x_np):
    x = torch.tensor(x_np, dtype=torch.float64, requires_grad=True)
    fn(x).backward()
    return x.grad.numpy()


@pytest.mark.parametrize("seed", range(5))
def test_gradcheck_l1(seed):
    rng = np.random.default_rng(seed)
    real = torch.tensor(rng.random((1, 1, 8, 8)))
    mask = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
    mask[:, :, 2:6] = 1
    coarse = rng.random((1, 1, 8, 8))
    fine_np = rng.random((1, 1, 8, 8))

    def f_np(x):
        return l1_loss(real, torch.tensor(coarse), torch.tensor(x), mask).item()

    analytic = torch_grad(lambda x: l1_loss(real, torch.tensor(coarse), x, mask), fine_np)
    numeric = central_diff_grad(f_np, fine_np.copy())
    assert rel_err(analytic, numeric) < 1e-3


@pytest.mark.parametrize("seed", range(5))
def test_gradcheck_dice(seed):
    rng = np.random.default_rng(10 + seed)
    target = (rng.random((1, 1, 8, 8)) > 0.5).astype(float)
    pred_np = rng.uniform(0.05, 0.95, (1, 1, 8, 8))

    def f_np(x):
        return soft_dice_term(torch.tensor(x), torch.tensor(target)).item()

    analytic = torch_grad(lambda x: soft_dice_term(x, torch.tensor(target)), pred_np)
    numeric = central_diff_grad(f_np, pred_np.copy())
    assert rel_err(analytic, numeric) < 1e-3


@pytest.mark.parametrize("seed", range(5))
def test_gradcheck_edge(seed):
    rng = np.random.default_rng(20 + seed)
    real = rng.random((8, 8))
    pred_np = rng.random((8, 8))

    def f_np(x):
        return edge_loss(torch.tensor(real), torch.tensor(x)).item()

    analytic = torch_grad(lambda x: edge_loss(torch.tensor(real), x), pred_np)
    numeric = central_diff_grad(f_np, pred_np.copy())
    assert rel_err(analytic, numeric) < 1e-3


@pytest.mark.parametrize("seed", range(5))
def test_gradcheck_height(seed):
    rng = np.random.default_rng(30 + seed)
    h_real = torch.tensor(rng.uniform(20, 35, (4,)))
    hc = rng.uniform(5, 39, (4,))
    hf_np = rng.uniform(5, 39, (4,))

    def f_np(x):
        return height_loss(h_real, torch.tensor(hc), torch.tensor(x)).item()

    analytic = torch_grad(lambda x: height_loss(h_real, torch.tensor(hc), x), hf_np)
    numeric = central_diff_grad(f_np, hf_np.copy())
    assert rel_err(analytic, numeric) < 1e-3


@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_generator_adversarial(seed):
    torch.manual_seed(40 + seed)
    rng = np.random.default_rng(40 + seed)
    discs = DiscriminatorSet(
        PatchDiscriminator(1, 4, n_layers=1).double(),
        PatchDiscriminator(1, 4, n_layers=1).double(),
        PatchDiscriminator(1, 4, n_layers=1).double(),
    )
    for d in discs.modules():
        d.eval()
    real = torch.tensor(rng.random((1, 1, 8, 8)))
    seg_r = torch.tensor(rng.random((1, 1, 8, 8)))
    seg_f = torch.tensor(rng.random((1, 1, 8, 8)))
    fake_np = rng.random((1, 1, 8, 8))

    def g_term(x):
        return adversarial_losses(discs, real, x, seg_r, seg_f, (2, 6)).g_total

    def f_np(x):
        return g_term(torch.tensor(x)).item()

    analytic = torch_grad(g_term, fake_np)
    numeric = central_diff_grad(f_np, fake_np.copy())
    assert rel_err(analytic, numeric) < 1e-3
