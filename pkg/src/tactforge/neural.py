"""Depth and wrench regression networks at desk scale.

Dense-connectivity convolutional encoder shared by both tasks; the depth
task adds a skip-connected upsampling decoder with a bounded (sigmoid)
output, the wrench task adds global pooling and fully-connected layers
narrowing to 6 outputs. Includes the training losses, a finite-difference
gradient checker, and a self-describing binary checkpoint container.

torch (CPU) provides the tensor/autograd substrate; everything above it is
defined here. Thread count is pinned so results do not depend on the
process-level parallelism cap.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

torch.set_num_threads(1)
torch.use_deterministic_algorithms(True)


def seed_all(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


# ---------------------------------------------------------------- model spec

@dataclass(frozen=True)
class ModelSpec:
    task: str = "depth"  # "depth" | "wrench"
    input_channels: int = 3  # 3, or 6 with the transfer adapter
    input_size: int = 64
    stages: tuple[int, ...] = (3, 3, 3, 3)  # dense layers per block
    growth: int = 12
    init_channels: int = 24
    head_widths: tuple[int, ...] = (1000, 500, 6)  # wrench head
    adapter: bool = False  # 6->4->3 channel adapter before the encoder
    adapter_kernel: int = 3

    def __post_init__(self):
        if self.task not in ("depth", "wrench"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.input_channels not in (3, 6):
            raise ValueError("input_channels must be 3 or 6")
        if self.adapter and self.input_channels != 6:
            raise ValueError("adapter requires 6 input channels")
        if self.head_widths[-1] != 6:
            raise ValueError("wrench head must end at 6 outputs")

    # channel bookkeeping shared by the builder and the closed-form count
    def _encoder_channels(self) -> tuple[list[int], int]:
        skips = []
        c = self.init_channels
        for i, layers in enumerate(self.stages):
            c += layers * self.growth
            skips.append(c)
            if i < len(self.stages) - 1:
                c = c // 2
        return skips, c

    def param_count(self) -> int:
        """Closed-form trainable parameter count; must match the built model."""
        k2 = 9
        n = 0
        enc_in = 3 if self.adapter else self.input_channels
        if self.adapter:
            ak = self.adapter_kernel**2
            n += 6 * 4 * ak + 4 + 2 * 4  # conv+bias, BN affine
            n += 4 * 3 * ak + 3 + 2 * 3
        # stem conv (no bias) + BN
        n += enc_in * self.init_channels * k2 + 2 * self.init_channels
        c = self.init_channels
        for i, layers in enumerate(self.stages):
            for _ in range(layers):
                n += c * self.growth * k2 + 2 * self.growth
                c += self.growth
            if i < len(self.stages) - 1:
                c_out = c // 2
                n += c * c_out + 2 * c_out  # 1x1 transition conv + BN
                c = c_out
        if self.task == "wrench":
            widths = [c, *self.head_widths]
            for a, b in zip(widths[:-1], widths[1:]):
                n += a * b + b
        else:
            skips, c_dec = self._encoder_channels()
            for i in range(len(self.stages) - 2, -1, -1):
                c_in = c_dec + skips[i]
                c_out = max(8, skips[i] // 2)
                n += c_in * c_out * k2 + 2 * c_out
                c_dec = c_out
            n += c_dec * 1 * k2 + 1  # output conv with bias
        return n

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(d: dict) -> "ModelSpec":
        d = dict(d)
        for key in ("stages", "head_widths"):
            if key in d:
                d[key] = tuple(d[key])
        return ModelSpec(**d)


def tiny_spec(task: str = "depth", input_size: int = 16) -> ModelSpec:
    """Sub-5k-parameter spec for gradient checking."""
    head = (8, 4, 6) if task == "wrench" else (1000, 500, 6)
    return ModelSpec(task=task, input_size=input_size, stages=(1, 1), growth=4,
                     init_channels=4, head_widths=head)


# ---------------------------------------------------------------- modules

class _DenseLayer(nn.Module):
    def __init__(self, c_in: int, growth: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, growth, 3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(growth)

    def forward(self, x):
        y = F.relu(self.bn(self.conv(x)))
        return torch.cat([x, y], dim=1)


class _Transition(nn.Module):
    def __init__(self, c_in: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_in // 2, 1, bias=False)
        self.bn = nn.BatchNorm2d(c_in // 2)

    def forward(self, x):
        return F.avg_pool2d(F.relu(self.bn(self.conv(x))), 2)


class _Adapter(nn.Module):
    """6->4->3 channel reduction: two conv + batchnorm + rectifier blocks."""

    def __init__(self, kernel: int = 3):
        super().__init__()
        pad = kernel // 2
        self.conv1 = nn.Conv2d(6, 4, kernel, padding=pad)
        self.bn1 = nn.BatchNorm2d(4)
        self.conv2 = nn.Conv2d(4, 3, kernel, padding=pad)
        self.bn2 = nn.BatchNorm2d(3)

    def forward(self, x):
        x = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(x)))


class _Encoder(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        c_in = 3 if spec.adapter else spec.input_channels
        self.stem_conv = nn.Conv2d(c_in, spec.init_channels, 3, padding=1, bias=False)
        self.stem_bn = nn.BatchNorm2d(spec.init_channels)
        self.blocks = nn.ModuleList()
        self.transitions = nn.ModuleList()
        c = spec.init_channels
        for i, layers in enumerate(spec.stages):
            block = nn.ModuleList()
            for _ in range(layers):
                block.append(_DenseLayer(c, spec.growth))
                c += spec.growth
            self.blocks.append(block)
            if i < len(spec.stages) - 1:
                self.transitions.append(_Transition(c))
                c = c // 2
        self.out_channels = c

    def forward(self, x):
        x = F.relu(self.stem_bn(self.stem_conv(x)))
        skips = []
        for i, block in enumerate(self.blocks):
            for layer in block:
                x = layer(x)
            skips.append(x)
            if i < len(self.transitions):
                x = self.transitions[i](x)
        return x, skips


class DepthModel(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.adapter = _Adapter(spec.adapter_kernel) if spec.adapter else None
        self.encoder = _Encoder(spec)
        skips, c = spec._encoder_channels()
        self.dec_convs = nn.ModuleList()
        self.dec_bns = nn.ModuleList()
        for i in range(len(spec.stages) - 2, -1, -1):
            c_out = max(8, skips[i] // 2)
            self.dec_convs.append(nn.Conv2d(c + skips[i], c_out, 3, padding=1, bias=False))
            self.dec_bns.append(nn.BatchNorm2d(c_out))
            c = c_out
        self.out_conv = nn.Conv2d(c, 1, 3, padding=1)

    def forward(self, x):
        _check_input(self.spec, x)
        if self.adapter is not None:
            x = self.adapter(x)
        x, skips = self.encoder(x)
        n_stages = len(self.spec.stages)
        for j, (conv, bn) in enumerate(zip(self.dec_convs, self.dec_bns)):
            i = n_stages - 2 - j
            x = F.interpolate(x, scale_factor=2.0, mode="bilinear", align_corners=False)
            x = torch.cat([x, skips[i]], dim=1)
            x = F.relu(bn(conv(x)))
        return torch.sigmoid(self.out_conv(x))


class WrenchModel(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.adapter = _Adapter(spec.adapter_kernel) if spec.adapter else None
        self.encoder = _Encoder(spec)
        widths = [self.encoder.out_channels, *spec.head_widths]
        self.head = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))

    def forward(self, x):
        _check_input(self.spec, x)
        if self.adapter is not None:
            x = self.adapter(x)
        x, _ = self.encoder(x)
        x = x.mean(dim=(2, 3))
        for i, fc in enumerate(self.head):
            x = fc(x)
            if i < len(self.head) - 1:
                x = F.relu(x)
        return x


def _check_input(spec: ModelSpec, x: torch.Tensor) -> None:
    if x.ndim != 4 or x.shape[1] != spec.input_channels:
        raise ValueError(f"expected (N, {spec.input_channels}, H, W) input, got {tuple(x.shape)}")
    if x.shape[2] != x.shape[3]:
        raise ValueError("input must be square")


def build_model(spec: ModelSpec, seed: int = 0,
                dtype: torch.dtype = torch.float32) -> nn.Module:
    seed_all(seed)
    model = DepthModel(spec) if spec.task == "depth" else WrenchModel(spec)
    return model.to(dtype)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def adapter_param_count(kernel: int = 3) -> int:
    """Closed-form parameter count of the 6->4->3 adapter alone."""
    k2 = kernel**2
    return (6 * 4 * k2 + 4 + 2 * 4) + (4 * 3 * k2 + 3 + 2 * 3)


# ---------------------------------------------------------------- losses

def silog_loss(pred: torch.Tensor, gt: torch.Tensor, lam: float = 0.85) -> torch.Tensor:
    """Scale-invariant logarithmic loss: sqrt(mean(d^2) - lam * mean(d)^2)
    with d = ln pred - ln gt."""
    if pred.shape != gt.shape:
        raise ValueError("shape mismatch")
    if (pred <= 0).any() or (gt <= 0).any():
        raise ValueError("silog_loss requires strictly positive inputs")
    d = torch.log(pred) - torch.log(gt)
    m = d.mean()
    # mean(d^2) - lam*mean(d)^2 rewritten to avoid catastrophic cancellation
    var = ((d - m) ** 2).mean() + (1.0 - lam) * m**2
    return torch.sqrt(torch.clamp(var, min=0.0))


def _gaussian_window(size: int = 11, sigma: float = 1.5,
                     dtype=torch.float32) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return (g[:, None] @ g[None, :]).reshape(1, 1, size, size)


def ssim_map(a: torch.Tensor, b: torch.Tensor, data_range: float,
             window: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """SSIM over an 11x11 Gaussian window, standard stabilizers."""
    w = _gaussian_window(window, sigma, dtype=a.dtype)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a = F.conv2d(a, w)
    mu_b = F.conv2d(b, w)
    var_a = F.conv2d(a * a, w) - mu_a**2
    var_b = F.conv2d(b * b, w) - mu_b**2
    cov = F.conv2d(a * b, w) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / \
        ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))


def recip_ssim_loss(pred: torch.Tensor, gt: torch.Tensor, alpha: float = 0.1,
                    eps: float = 1e-3) -> torch.Tensor:
    """Structural similarity on reciprocal depth plus a small L1 term.

    pred, gt in (0, 1]; the reciprocal emphasizes near-surface (small depth)
    structure. Stabilizers are scaled to the reciprocal dynamic range."""
    if pred.shape != gt.shape:
        raise ValueError("shape mismatch")
    if (pred <= 0).any() or (gt <= 0).any():
        raise ValueError("recip_ssim_loss requires strictly positive inputs")
    rp = 1.0 / torch.clamp(pred, min=eps, max=1.0)
    rg = 1.0 / torch.clamp(gt, min=eps, max=1.0)
    # stabilizers follow the reciprocal dynamic range actually present
    data_range = max(1.0, float(rg.max() - rg.min()))
    s = ssim_map(rp, rg, data_range).mean()
    loss = (1.0 - s) / 2.0
    if alpha > 0:
        loss = loss + alpha * (pred - gt).abs().mean()
    return loss


def wrench_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean squared error on normalized 6-vectors."""
    if pred.shape != gt.shape or pred.shape[-1] != 6:
        raise ValueError("expected matching (..., 6) tensors")
    return ((pred - gt) ** 2).mean()


# ---------------------------------------------------------------- optimizer

def make_optimizer(model: nn.Module, lr: float) -> torch.optim.Optimizer:
    """Adaptive-moment optimizer, standard coefficients."""
    return torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)


# ---------------------------------------------------------------- grad check

def grad_check(spec: ModelSpec, loss_name: str = "auto", seed: int = 0,
               eps: float = 1e-4) -> float:
    """Max relative error between backward gradients and central finite
    differences, over every parameter of a tiny double-precision model."""
    model = build_model(spec, seed=seed, dtype=torch.float64)
    model.eval()  # fixed batchnorm statistics so FD matches autograd
    # Check at a generic point: default zero biases leave rectifier inputs
    # exactly on their kink (dead pixels propagate exact zeros), where the
    # subgradient and the symmetric difference legitimately disagree.
    gen0 = torch.Generator().manual_seed(seed + 7)
    with torch.no_grad():
        for p in model.parameters():
            p += 0.05 * (torch.rand(p.shape, generator=gen0, dtype=p.dtype) - 0.5)
    n_params = count_parameters(model)
    if n_params > 5000:
        raise ValueError(f"grad_check expects a tiny model, got {n_params} params")
    gen = torch.Generator().manual_seed(seed + 1)
    x = torch.rand(2, spec.input_channels, spec.input_size, spec.input_size,
                   generator=gen, dtype=torch.float64) * 0.8 + 0.1
    if spec.task == "depth":
        gt = torch.rand(2, 1, spec.input_size, spec.input_size,
                        generator=gen, dtype=torch.float64) * 0.8 + 0.1
        loss_fn = {"auto": silog_loss, "silog": silog_loss,
                   "recip_ssim": recip_ssim_loss}[loss_name]
    else:
        gt = torch.rand(2, 6, generator=gen, dtype=torch.float64)
        loss_fn = wrench_loss

    def f():
        return loss_fn(model(x), gt)

    loss = f()
    model.zero_grad()
    loss.backward()
    max_rel = 0.0
    with torch.no_grad():
        for p in model.parameters():
            g = p.grad
            flat = p.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()

                def central(h: float) -> float:
                    flat[i] = orig + h
                    fp = f().item()
                    flat[i] = orig - h
                    fm = f().item()
                    flat[i] = orig
                    return (fp - fm) / (2 * h)

                # Adaptive step: a rectifier kink inside the window biases the
                # central difference, but the bias shrinks linearly with the
                # step, so refine until successive estimates stabilize. The
                # refinement never consults the autograd value.
                h = eps
                fd = central(h)
                for _ in range(3):
                    h /= 10.0
                    fd_new = central(h)
                    if abs(fd_new - fd) <= 1e-7 * max(1.0, abs(fd_new)):
                        fd = fd_new
                        break
                    fd = fd_new
                denom = max(abs(fd), abs(gflat[i].item()), 1e-6)
                max_rel = max(max_rel, abs(fd - gflat[i].item()) / denom)
    return max_rel


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"TFCK"
_VERSION = 1


def save_checkpoint(path, model: nn.Module, spec: ModelSpec,
                    extra: dict | None = None) -> None:
    """Versioned container: magic, version, JSON shape table, then raw
    little-endian IEEE-754 buffers."""
    state = model.state_dict()
    tensors = []
    offset = 0
    buffers = []
    for name, t in state.items():
        arr = t.detach().cpu().numpy()
        dt = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}[str(arr.dtype)]
        raw = arr.astype(dt).tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": dt,
                        "offset": offset, "nbytes": len(raw)})
        buffers.append(raw)
        offset += len(raw)
    header = json.dumps({"version": _VERSION, "spec": spec.to_json(),
                         "tensors": tensors, "extra": extra or {}},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", _VERSION, len(header)))
        fh.write(header)
        for raw in buffers:
            fh.write(raw)


def load_checkpoint(path, dtype: torch.dtype = torch.float32
                    ) -> tuple[nn.Module, ModelSpec, dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("not a tactforge checkpoint")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen))
        blob = fh.read()
    spec = ModelSpec.from_json(header["spec"])
    model = build_model(spec, dtype=dtype)
    state = {}
    for t in header["tensors"]:
        arr = np.frombuffer(blob, dtype=t["dtype"], count=int(np.prod(t["shape"]) or 1),
                            offset=t["offset"]).reshape(t["shape"]).copy()
        state[t["name"]] = torch.from_numpy(arr).to(dtype if arr.dtype.kind == "f" else None)
    model.load_state_dict(state)
    return model, spec, header.get("extra", {})


def load_state_into(model: nn.Module, path, strict: bool = True) -> dict:
    """Load checkpoint tensors into an existing model (transfer init);
    returns the names that were missing when strict is False."""
    src, _, _ = load_checkpoint(path, dtype=next(model.parameters()).dtype)
    missing = model.load_state_dict(src.state_dict(), strict=strict)
    return {"missing": list(missing.missing_keys), "unexpected": list(missing.unexpected_keys)}
