"""Training orchestration: depth and wrench regression loops, multi-sensor
pretraining, 3-channel / 6-channel transfer learning, and convergence
detection on validation-loss histories.
"""

from __future__ import annotations

import copy
import json
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from . import dataio, neural
from .wrench import WrenchRanges


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 10
    lr: float = 1e-4  # depth default; wrench transfer protocol uses 2e-5
    seed: int = 0
    loss: str = "default"  # depth: "recip_ssim" (default) | "silog"; wrench: mse
    eval_every: int = 50  # steps between validation passes
    freeze_encoder: bool = False
    convergence_window: int = 5  # validation samples
    convergence_epsilon: float = 0.02

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.lr <= 0:
            raise ValueError("batch_size, epochs and lr must be positive")


@dataclass
class RunHistory:
    steps: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_steps: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    wall_clock_s: float = 0.0
    convergence_step: int | None = None
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)
            f.write("\n")

    @staticmethod
    def load(path) -> "RunHistory":
        with open(path) as f:
            return RunHistory(**json.load(f))


# ---------------------------------------------------------------- data access

DEPTH_EPS = 1e-3  # keeps logs/reciprocals finite at codec value 0


class ManifestDataset:
    """In-memory tensors for a manifest; desk-scale sets fit comfortably."""

    def __init__(self, manifest: dataio.Manifest, task: str,
                 six_channel: bool = False):
        if not manifest.records:
            raise ValueError("empty manifest")
        self.task = task
        self.six_channel = six_channel
        images = []
        targets = []
        ref = None
        if six_channel:
            if not manifest.reference_image:
                raise ValueError("manifest lacks the undeflected reference frame")
            ref = dataio.load_image(manifest, manifest.reference_image)
            ref = torch.from_numpy(ref.astype(np.float32) / 255.0).permute(2, 0, 1)
        if task == "wrench":
            if manifest.wrench_ranges is None:
                raise ValueError("manifest lacks wrench ranges")
            ranges = WrenchRanges.from_json(manifest.wrench_ranges)
            lo, hi = ranges.as_arrays()
        for rec in manifest.records:
            img = dataio.load_image(manifest, rec.image).astype(np.float32) / 255.0
            x = torch.from_numpy(img).permute(2, 0, 1)
            if six_channel:
                x = torch.cat([ref, x], dim=0)
            images.append(x)
            if task == "depth":
                if rec.depth is None:
                    raise ValueError(f"record {rec.record_id} has no depth map")
                d = dataio.load_image(manifest, rec.depth).astype(np.float32) / 255.0
                targets.append(torch.from_numpy(d)[None, :, :])
            else:
                if rec.wrench is None:
                    raise ValueError(f"record {rec.record_id} has no wrench")
                w = (np.asarray(rec.wrench) - lo) / (hi - lo)
                targets.append(torch.from_numpy(np.clip(w, 0.0, 1.0).astype(np.float32)))
        self.x = torch.stack(images)
        self.y = torch.stack(targets)

    def __len__(self) -> int:
        return len(self.x)


def _loss_fn(task: str, choice: str):
    if task == "wrench":
        return neural.wrench_loss
    if choice in ("default", "recip_ssim"):
        return lambda p, g: neural.recip_ssim_loss(
            torch.clamp(p, min=DEPTH_EPS), torch.clamp(g, min=DEPTH_EPS))
    if choice == "silog":
        return lambda p, g: neural.silog_loss(p + DEPTH_EPS, g + DEPTH_EPS)
    raise ValueError(f"unknown loss {choice!r}")


def _validate(model, data: ManifestDataset, loss_fn, batch: int = 32) -> float:
    model.eval()
    total = 0.0
    with torch.no_grad():
        n = len(data)
        for lo in range(0, n, batch):
            x = data.x[lo:lo + batch]
            y = data.y[lo:lo + batch]
            total += float(loss_fn(model(x), y)) * len(x)
    model.train()
    return total / len(data)


def _fit(model, train_data: ManifestDataset, val_data: ManifestDataset | None,
         cfg: TrainConfig) -> RunHistory:
    neural.seed_all(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    loss_fn = _loss_fn(train_data.task, cfg.loss)
    if cfg.freeze_encoder:
        for p in model.encoder.parameters():
            p.requires_grad_(False)
    opt = neural.make_optimizer(model, cfg.lr)
    history = RunHistory(config={**asdict(cfg)})
    model.train()
    best_val = np.inf
    best_state = copy.deepcopy(model.state_dict())
    t0 = time.monotonic()
    step = 0

    def evaluate():
        nonlocal best_val, best_state
        if val_data is None:
            return
        v = _validate(model, val_data, loss_fn)
        history.val_steps.append(step)
        history.val_loss.append(v)
        if v < best_val:
            best_val = v
            best_state = copy.deepcopy(model.state_dict())

    evaluate()
    n = len(train_data)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            idx = torch.from_numpy(order[lo:lo + cfg.batch_size].copy())
            x = train_data.x[idx]
            y = train_data.y[idx]
            opt.zero_grad()
            loss = loss_fn(model(x), y)
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite training loss at step {step}")
            loss.backward()
            opt.step()
            step += 1
            history.steps.append(step)
            history.train_loss.append(loss.detach().item())
            if val_data is not None and step % cfg.eval_every == 0:
                evaluate()
    if val_data is not None and (not history.val_steps or history.val_steps[-1] != step):
        evaluate()
    history.wall_clock_s = time.monotonic() - t0
    if history.val_steps:
        history.convergence_step = detect_convergence(
            history.val_steps, history.val_loss,
            window=cfg.convergence_window, epsilon=cfg.convergence_epsilon)
        model.load_state_dict(best_state)
    return history


def train(spec: neural.ModelSpec, manifest_train: dataio.Manifest,
          manifest_val: dataio.Manifest | None, cfg: TrainConfig
          ) -> tuple[torch.nn.Module, RunHistory]:
    """Seeded training run; retains the best-validation parameters."""
    if not manifest_train.records:
        raise ValueError("empty training manifest")
    train_data = ManifestDataset(manifest_train, spec.task,
                                 six_channel=spec.input_channels == 6)
    val_data = None
    if manifest_val is not None and manifest_val.records:
        val_data = ManifestDataset(manifest_val, spec.task,
                                   six_channel=spec.input_channels == 6)
    model = neural.build_model(spec, seed=cfg.seed)
    history = _fit(model, train_data, val_data, cfg)
    return model, history


def _merge_manifests(manifests: list[dataio.Manifest]) -> dataio.Manifest:
    first = manifests[0]
    for m in manifests[1:]:
        if m.codec != first.codec:
            raise ValueError("codec mismatch between manifests")
        if (m.wrench_ranges is None) != (first.wrench_ranges is None):
            raise ValueError("wrench range mismatch between manifests")
    records = []
    for m in manifests:
        for r in m.records:
            r2 = copy.copy(r)
            # keep ids unique across sensors and paths resolvable
            r2.record_id = f"{m.sensor_id}/{r.record_id}"
            r2.image = os.path.join(m.root, r.image)
            if r2.depth:
                r2.depth = os.path.join(m.root, r.depth)
            records.append(r2)
    merged = dataio.Manifest(root="", records=records, codec=first.codec,
                             wrench_ranges=first.wrench_ranges, units=first.units,
                             split="combined",
                             sensor_id="+".join(m.sensor_id for m in manifests),
                             reference_image=None,
                             extra={"sensors": [m.sensor_id for m in manifests]})
    return merged


def pretrain_multi(spec: neural.ModelSpec, manifests: list[dataio.Manifest],
                   cfg: TrainConfig, val_manifests: list[dataio.Manifest] | None = None
                   ) -> tuple[torch.nn.Module, RunHistory]:
    """Concatenated shuffled training over several sensors' datasets."""
    if len(manifests) < 2:
        raise ValueError("pretrain_multi needs at least 2 manifests")
    merged = _merge_manifests(manifests)
    merged_val = _merge_manifests(val_manifests) if val_manifests else None
    return train(spec, merged, merged_val, cfg)


def transfer_3dim(pretrained_path, small_train: dataio.Manifest,
                  small_val: dataio.Manifest | None, cfg: TrainConfig
                  ) -> tuple[torch.nn.Module, RunHistory]:
    """Fine-tune the full pretrained network on a small new-sensor set."""
    model, spec, _ = neural.load_checkpoint(pretrained_path)
    if spec.input_channels != 3:
        raise ValueError("3-channel transfer expects a 3-channel pretrained model")
    train_data = ManifestDataset(small_train, spec.task)
    val_data = ManifestDataset(small_val, spec.task) if small_val and small_val.records else None
    neural.seed_all(cfg.seed)
    history = _fit(model, train_data, val_data, cfg)
    return model, history


def transfer_6dim(pretrained_path, small_train: dataio.Manifest,
                  small_val: dataio.Manifest | None, cfg: TrainConfig
                  ) -> tuple[torch.nn.Module, RunHistory]:
    """Fine-tune with concatenated undeflected + deflected input through a
    freshly initialized 6->4->3 adapter; encoder and head come pretrained."""
    if not small_train.reference_image:
        raise ValueError("manifest lacks the undeflected reference frame")
    _, spec3, _ = neural.load_checkpoint(pretrained_path)
    if spec3.input_channels != 3:
        raise ValueError("6-channel transfer expects a 3-channel pretrained model")
    spec6 = neural.ModelSpec(task=spec3.task, input_channels=6,
                             input_size=spec3.input_size, stages=spec3.stages,
                             growth=spec3.growth, init_channels=spec3.init_channels,
                             head_widths=spec3.head_widths, adapter=True,
                             adapter_kernel=spec3.adapter_kernel)
    model = neural.build_model(spec6, seed=cfg.seed)
    report = neural.load_state_into(model, pretrained_path, strict=False)
    missing = [k for k in report["missing"] if not k.startswith("adapter.")]
    if missing:
        raise ValueError(f"pretrained checkpoint missing weights: {missing}")
    train_data = ManifestDataset(small_train, spec6.task, six_channel=True)
    val_data = None
    if small_val and small_val.records:
        val_data = ManifestDataset(small_val, spec6.task, six_channel=True)
    history = _fit(model, train_data, val_data, cfg)
    return model, history


def detect_convergence(val_steps, val_losses, window: int = 5,
                       epsilon: float = 0.02) -> int | None:
    """Earliest step whose windowed moving average of validation loss is
    within epsilon (relative) of the run minimum and stays within it for one
    full window. Returns None when the run never settles."""
    losses = np.asarray(val_losses, dtype=np.float64)
    steps = list(val_steps)
    if len(losses) == 0:
        raise ValueError("empty history")
    if len(losses) < window:
        window = len(losses)
    run_min = losses.min()
    bound = run_min * (1.0 + epsilon) if run_min > 0 else run_min + epsilon
    n_windows = len(losses) - window + 1
    ma = np.convolve(losses, np.ones(window) / window, mode="valid")
    ok = ma <= bound
    for j in range(n_windows):
        if np.all(ok[j:min(j + window, n_windows)]):
            return int(steps[j])
    return None
