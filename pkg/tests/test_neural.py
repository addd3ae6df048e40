import numpy as np
import pytest
import torch

from tactforge import neural


# ---------------------------------------------------------------- specs

def test_tiny_spec_under_5k():
    for task in ("depth", "wrench"):
        spec = neural.tiny_spec(task, input_size=12)
        assert spec.param_count() <= 5000


def test_param_count_formula_exact():
    for task in ("depth", "wrench"):
        for spec in (neural.tiny_spec(task, input_size=12),
                     neural.ModelSpec(task=task, input_size=64)):
            model = neural.build_model(spec)
            assert spec.param_count() == neural.count_parameters(model)


def test_param_count_with_adapter():
    spec3 = neural.ModelSpec(task="wrench", input_size=32)
    spec6 = neural.ModelSpec(task="wrench", input_size=32, input_channels=6,
                             adapter=True)
    assert spec6.param_count() == spec3.param_count() + neural.adapter_param_count()
    model = neural.build_model(spec6)
    assert neural.count_parameters(model) == spec6.param_count()


def test_spec_json_roundtrip():
    spec = neural.ModelSpec(task="depth", input_size=64)
    assert neural.ModelSpec.from_json(spec.to_json()) == spec


# ---------------------------------------------------------------- forward

def test_depth_forward_shape_and_range():
    spec = neural.tiny_spec("depth", input_size=16)
    model = neural.build_model(spec, seed=0)
    with torch.no_grad():
        y = model(torch.rand(2, 3, 16, 16))
    assert y.shape == (2, 1, 16, 16)
    assert float(y.min()) > 0.0 and float(y.max()) < 1.0


def test_wrench_forward_six_outputs():
    spec = neural.tiny_spec("wrench", input_size=16)
    model = neural.build_model(spec, seed=0)
    y = model(torch.rand(3, 3, 16, 16))
    assert y.shape == (3, 6)


def test_zero_final_layer_gives_half():
    spec = neural.tiny_spec("depth", input_size=16)
    model = neural.build_model(spec, seed=0)
    with torch.no_grad():
        model.out_conv.weight.zero_()
        model.out_conv.bias.zero_()
    y = model(torch.rand(2, 3, 16, 16))
    assert torch.allclose(y, torch.full_like(y, 0.5))


def test_forward_shape_mismatch():
    spec = neural.tiny_spec("depth", input_size=16)
    model = neural.build_model(spec)
    with pytest.raises(ValueError):
        model(torch.rand(1, 4, 16, 16))


def test_forward_deterministic():
    spec = neural.tiny_spec("wrench", input_size=16)
    a = neural.build_model(spec, seed=3)
    b = neural.build_model(spec, seed=3)
    x = torch.rand(2, 3, 16, 16, generator=torch.Generator().manual_seed(0))
    assert torch.equal(a(x), b(x))


def test_forward_no_nan():
    spec = neural.tiny_spec("depth", input_size=16)
    model = neural.build_model(spec, seed=1)
    y = model(torch.rand(4, 3, 16, 16))
    assert torch.isfinite(y).all()


# ---------------------------------------------------------------- losses

def test_silog_zero_for_identical():
    gt = torch.rand(1, 1, 8, 8, dtype=torch.float64) + 0.1
    assert float(neural.silog_loss(gt, gt)) == pytest.approx(0.0, abs=1e-12)


def test_silog_e_scaling_closed_form():
    gt = torch.rand(1, 1, 16, 16, dtype=torch.float64) + 0.1
    loss = neural.silog_loss(float(np.e) * gt, gt, lam=0.85)
    assert abs(float(loss) - np.sqrt(0.15)) <= 1e-9


def test_silog_scale_invariance_at_lambda_one():
    gt = torch.rand(1, 1, 16, 16, dtype=torch.float64) + 0.1
    for c in (0.2, 3.7, 11.0):
        assert float(neural.silog_loss(c * gt, gt, lam=1.0)) <= 1e-12


def test_silog_constant_scaling_formula():
    gt = torch.rand(1, 1, 16, 16, dtype=torch.float64) + 0.1
    c = 2.5
    loss = neural.silog_loss(c * gt, gt, lam=0.85)
    assert float(loss) == pytest.approx(np.sqrt(0.15) * abs(np.log(c)), abs=1e-9)


def test_silog_rejects_nonpositive():
    gt = torch.ones(1, 1, 4, 4)
    bad = gt.clone()
    bad[0, 0, 0, 0] = 0.0
    with pytest.raises(ValueError):
        neural.silog_loss(bad, gt)


def test_recip_ssim_zero_for_identical():
    gt = torch.rand(1, 1, 16, 16) * 0.8 + 0.1
    assert float(neural.recip_ssim_loss(gt, gt)) == pytest.approx(0.0, abs=1e-6)


def test_recip_ssim_inverted_checkerboard():
    board = np.indices((16, 16)).sum(axis=0) % 2
    gt = torch.from_numpy(0.2 + 0.6 * board.astype(np.float32))[None, None]
    loss = neural.recip_ssim_loss(1.0 - gt, gt)
    assert float(loss) > 0.3


def test_recip_ssim_alpha_zero_excludes_l1():
    gt = torch.full((1, 1, 16, 16), 0.4)
    pred = torch.full((1, 1, 16, 16), 0.6)
    with_l1 = neural.recip_ssim_loss(pred, gt, alpha=0.1)
    without = neural.recip_ssim_loss(pred, gt, alpha=0.0)
    assert float(with_l1) == pytest.approx(float(without) + 0.1 * 0.2, abs=1e-6)


def test_recip_ssim_rejects_zeros():
    gt = torch.ones(1, 1, 12, 12)
    with pytest.raises(ValueError):
        neural.recip_ssim_loss(torch.zeros(1, 1, 12, 12), gt)


def test_wrench_loss_cases():
    z = torch.zeros(6)
    assert float(neural.wrench_loss(z, z)) == 0.0
    e = torch.zeros(6)
    e[0] = 1.0
    assert float(neural.wrench_loss(e, z)) == pytest.approx(1 / 6)
    h = torch.full((6,), 0.5)
    assert float(neural.wrench_loss(h, z)) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        neural.wrench_loss(torch.zeros(5), torch.zeros(5))


# ---------------------------------------------------------------- optimizer

def test_adam_zero_grad_no_move():
    lin = torch.nn.Linear(4, 4)
    before = [p.detach().clone() for p in lin.parameters()]
    opt = neural.make_optimizer(lin, lr=1e-2)
    for p in lin.parameters():
        p.grad = torch.zeros_like(p)
    opt.step()
    for p, b in zip(lin.parameters(), before):
        assert torch.equal(p, b)


def test_adam_scalar_quadratic_convergence():
    p = torch.nn.Parameter(torch.tensor([5.0]))
    opt = torch.optim.Adam([p], lr=1e-1, betas=(0.9, 0.999), eps=1e-8)
    target = 2.0
    for _ in range(500):
        opt.zero_grad()
        loss = (p - target) ** 2
        loss.backward()
        opt.step()
    assert abs(float(p.detach()) - target) < 1e-3


def test_training_determinism():
    def run():
        spec = neural.tiny_spec("wrench", input_size=12)
        model = neural.build_model(spec, seed=0)
        opt = neural.make_optimizer(model, 1e-3)
        gen = torch.Generator().manual_seed(1)
        x = torch.rand(4, 3, 12, 12, generator=gen)
        y = torch.rand(4, 6, generator=gen)
        for _ in range(5):
            opt.zero_grad()
            loss = neural.wrench_loss(model(x), y)
            loss.backward()
            opt.step()
        return [p.detach().clone() for p in model.parameters()]

    for a, b in zip(run(), run()):
        assert torch.equal(a, b)


# ---------------------------------------------------------------- gradients

def test_grad_check_tiny_depth():
    err = neural.grad_check(neural.tiny_spec("depth", input_size=12), "silog")
    assert err <= 1e-4


def test_grad_check_tiny_wrench():
    err = neural.grad_check(neural.tiny_spec("wrench", input_size=12))
    assert err <= 1e-4


def test_linear_model_analytic_gradient():
    # closed-form gradient of a linear map under MSE, checked to 1e-7
    torch.manual_seed(0)
    lin = torch.nn.Linear(5, 3).double()
    x = torch.rand(4, 5, dtype=torch.float64)
    y = torch.rand(4, 3, dtype=torch.float64)
    loss = ((lin(x) - y) ** 2).mean()
    loss.backward()
    resid = (lin(x) - y).detach()
    grad_w = 2.0 / (4 * 3) * resid.T @ x
    grad_b = 2.0 / (4 * 3) * resid.sum(dim=0)
    assert torch.allclose(lin.weight.grad, grad_w, atol=1e-7)
    assert torch.allclose(lin.bias.grad, grad_b, atol=1e-7)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip_identical_outputs(tmp_path):
    spec = neural.tiny_spec("wrench", input_size=12)
    model = neural.build_model(spec, seed=2)
    path = tmp_path / "m.tfck"
    neural.save_checkpoint(str(path), model, spec, extra={"note": 1})
    back, spec2, extra = neural.load_checkpoint(str(path))
    assert spec2 == spec
    assert extra == {"note": 1}
    x = torch.rand(2, 3, 12, 12, generator=torch.Generator().manual_seed(5))
    model.eval()
    back.eval()
    with torch.no_grad():
        assert torch.equal(model(x), back(x))


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.tfck"
    p.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError):
        neural.load_checkpoint(str(p))


def test_load_state_into_strict_flag(tmp_path):
    spec3 = neural.tiny_spec("wrench", input_size=12)
    model3 = neural.build_model(spec3, seed=0)
    path = tmp_path / "w.tfck"
    neural.save_checkpoint(str(path), model3, spec3)
    spec6 = neural.ModelSpec(task="wrench", input_channels=6,
                             input_size=12, stages=spec3.stages,
                             growth=spec3.growth, init_channels=spec3.init_channels,
                             head_widths=spec3.head_widths, adapter=True)
    model6 = neural.build_model(spec6, seed=1)
    report = neural.load_state_into(model6, str(path), strict=False)
    assert all(k.startswith("adapter.") for k in report["missing"])
