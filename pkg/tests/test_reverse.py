import pytest
import torch

from usblab.reverse import (
    EPS, NCConfig, ReverseConfig, ReverseDiverged, ReversedTrigger, factorize_uap,
    from_box, optimize_trigger, reverse_nc_baseline, to_box, usb_loss_terms,
)
from usblab.uap import targeted_error_rate


def _images(n=24, seed=0, size=12):
    return torch.rand(n, 1, size, size, generator=torch.Generator().manual_seed(seed))


def test_factorize_zero_is_degenerate():
    trig, mask, degenerate = factorize_uap(torch.zeros(1, 12, 12))
    assert degenerate
    assert torch.all(mask == EPS) and torch.all(trig == 0)


def test_factorize_single_pixel():
    v = torch.zeros(1, 12, 12)
    v[0, 4, 7] = 0.5
    trig, mask, degenerate = factorize_uap(v)
    assert not degenerate
    assert mask[4, 7].item() == pytest.approx(1 - EPS)
    assert trig[0, 4, 7].item() == pytest.approx(0.5 / (1 - EPS))
    others = torch.ones_like(mask, dtype=torch.bool)
    others[4, 7] = False
    assert torch.all(mask[others] == EPS) and torch.all(trig[0][others] == 0)


def test_factorize_reconstructs_positive_part():
    g = torch.Generator().manual_seed(5)
    v = (torch.rand(3, 12, 12, generator=g) - 0.5) * 0.4
    trig, mask, _ = factorize_uap(v)
    mag = v.abs().amax(0)
    assert torch.argmax(mask) == torch.argmax(mag)
    # reconstruction is exact wherever the mask is not clamped and v/mask stays below 1
    free = (mag / mag.max() > EPS) & (mag / mag.max() < 1 - EPS)
    rec = trig * mask
    assert torch.allclose(rec[:, free], v.clamp(min=0)[:, free], atol=1e-6)
    assert trig.min() >= 0 and trig.max() <= 1


def test_factorize_rejects_nan():
    v = torch.zeros(1, 12, 12)
    v[0, 0, 0] = float("nan")
    with pytest.raises(ValueError):
        factorize_uap(v)


def test_box_roundtrip():
    v = torch.linspace(0.01, 0.99, 50)
    assert torch.allclose(to_box(from_box(v)), v, atol=1e-6)


def test_single_iteration(tiny_model):
    x = _images()
    rt = optimize_trigger(tiny_model, x, 1, None, ReverseConfig(iterations=1))
    assert rt.iterations == 1 and len(rt.history) == 1
    assert torch.isfinite(rt.trigger).all() and torch.isfinite(rt.mask).all()
    assert rt.degenerate_init


def test_zero_iterations_disallowed():
    with pytest.raises(ValueError):
        ReverseConfig(iterations=0)


def test_box_constraints_and_recorded_l1(tiny_model):
    x = _images()
    v = (torch.rand(1, 12, 12, generator=torch.Generator().manual_seed(1)) - 0.3) * 0.5
    rt = optimize_trigger(tiny_model, x, 2, v, ReverseConfig(iterations=40, lr=0.5))
    for t in (rt.trigger, rt.mask):
        assert t.min() >= 0 and t.max() <= 1
    assert abs(rt.to_dict()["l1"] - (rt.trigger * rt.mask).abs().sum().item()) < 1e-6
    assert rt.mask.shape == (12, 12)


def test_loss_terms_recompose(tiny_model):
    x = _images()
    cfg = ReverseConfig(iterations=20)
    rt = optimize_trigger(tiny_model, x, 0, None, cfg)
    with torch.no_grad():
        again = usb_loss_terms(tiny_model, x, 0, rt.trigger, rt.mask, cfg)
    t = rt.loss_terms
    assert abs(again["total"].item() - t["total"]) < 1e-6
    recomposed = cfg.w_ce * t["ce"] - cfg.w_ssim * t["ssim"] + cfg.w_l1 * t["l1_mask"]
    assert abs(recomposed - t["total"]) < 1e-6


def test_mask_free_drops_l1_term(tiny_model):
    x = _images()
    trig, mask = torch.rand(1, 12, 12), torch.rand(12, 12)
    with torch.no_grad():
        free = usb_loss_terms(tiny_model, x, 1, trig, mask, ReverseConfig(mask_free=True))
    assert abs(free["total"].item() - (free["ce"] - free["ssim"]).item()) < 1e-6


def test_gradient_wrt_mask_params_matches_fd(tiny_model):
    x = _images(8).double()
    model = tiny_model.double()
    cfg = ReverseConfig()
    g = torch.Generator().manual_seed(3)
    p_trig = (torch.randn(1, 12, 12, generator=g) * 0.5).double()
    p_mask = (torch.randn(12, 12, generator=g) * 0.5).double().requires_grad_(True)

    def loss(pm):
        return usb_loss_terms(model, x, 1, to_box(p_trig), to_box(pm), cfg)["total"]

    loss(p_mask).backward()
    h = 1e-5
    for _ in range(10):
        i, j = torch.randint(0, 12, (2,), generator=g).tolist()
        up, dn = p_mask.detach().clone(), p_mask.detach().clone()
        up[i, j] += h
        dn[i, j] -= h
        fd = (loss(up) - loss(dn)).item() / (2 * h)
        an = p_mask.grad[i, j].item()
        assert abs(an - fd) <= 1e-2 * max(abs(fd), 1e-6)


def test_pure_targeted_optimization_improves_rate(tiny_model):
    x = _images(32, seed=7)
    preds = tiny_model(x).argmax(1)
    t = int(torch.bincount(preds, minlength=4).argmin())
    v = torch.full((1, 12, 12), 1.0)  # mask initialised near 1
    cfg = ReverseConfig(iterations=60, w_ssim=0, w_l1=0)
    init_trig, init_mask, _ = factorize_uap(v)
    with torch.no_grad():
        stamped = x * (1 - init_mask) + init_trig * init_mask
    before = targeted_error_rate(tiny_model, stamped, None, t)
    rt = optimize_trigger(tiny_model, x, t, v, cfg)
    after = targeted_error_rate(tiny_model, rt.stamp(x), None, t)
    assert after >= before
    assert after == 1.0


def test_nan_aborts(tiny_model):
    x = _images()
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(ReverseDiverged) as err:
        optimize_trigger(tiny_model, x, 0, None, ReverseConfig(iterations=3))
    assert err.value.iteration == 0


def test_model_state_restored(tiny_model):
    tiny_model.train()
    optimize_trigger(tiny_model, _images(), 0, None, ReverseConfig(iterations=2))
    assert tiny_model.training
    assert all(p.requires_grad for p in tiny_model.parameters())


def test_deterministic(tiny_model):
    x = _images()
    v = torch.rand(1, 12, 12, generator=torch.Generator().manual_seed(2)) * 0.3
    a = optimize_trigger(tiny_model, x, 3, v, ReverseConfig(iterations=15))
    b = optimize_trigger(tiny_model, x, 3, v, ReverseConfig(iterations=15))
    assert torch.equal(a.trigger, b.trigger) and torch.equal(a.mask, b.mask)


def test_nc_baseline_seeded_and_tagged(tiny_model):
    x = _images(100)
    cfg = NCConfig(batch_size=16, seed=4)
    a = reverse_nc_baseline(tiny_model, x, 1, cfg)
    b = reverse_nc_baseline(tiny_model, x, 1, cfg)
    assert a.method == "nc" and a.iterations == 7
    assert torch.equal(a.trigger, b.trigger) and torch.equal(a.mask, b.mask)
    c = reverse_nc_baseline(tiny_model, x, 1, NCConfig(batch_size=16, seed=5))
    assert not torch.equal(a.mask, c.mask)


def test_save_load_roundtrip(tmp_path, tiny_model):
    rt = optimize_trigger(tiny_model, _images(), 2, None, ReverseConfig(iterations=3))
    rt.save(tmp_path / "t2")
    rt.save_pngs(tmp_path / "t2")
    back = ReversedTrigger.load(tmp_path / "t2")
    assert torch.equal(back.trigger, rt.trigger) and back.l1 == rt.l1 and back.method == "usb"
    assert (tmp_path / "t2_mask.png").is_file()
