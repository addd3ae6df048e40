"""Acceptance gate: one test per criterion, one pass/fail line each.

The heavy end-to-end criteria (9-11) share a module-scoped synthetic dataset
and trained models; budgets are asserted against wall-clock time.
"""

import functools
import hashlib
import os
import sys
import time

import numpy as np
import pytest
import torch

from tactforge import (calib, cli, dataio, evalreport, gelsim, neural,
                       pattern, wrench)


def _line(n, ok, desc):
    print(f"[criterion {n:02d}] {'PASS' if ok else 'FAIL'}: {desc}",
          file=sys.__stderr__, flush=True)


def criterion(n, desc):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                _line(n, False, desc)
                raise
            _line(n, True, desc)
        return wrapper
    return deco


# ---------------------------------------------------------------- shared data

HELD_OUT_INDEX = 10  # middle radius held out as the unseen indenter


@pytest.fixture(scope="module")
def big_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("bigset")
    t0 = time.monotonic()
    plan = dataio.DatasetPlan.default(n_indenters=21, steps=96)  # ~2000 frames
    manifest = dataio.build_dataset(plan, str(out), seed=7)
    return manifest, time.monotonic() - t0


@pytest.fixture(scope="module")
def big_split(big_dataset):
    manifest, _ = big_dataset
    ids = sorted({r.indenter_id for r in manifest.records})
    return dataio.split(manifest, [ids[HELD_OUT_INDEX]])


def _predict(model, data):
    model.eval()
    preds = []
    with torch.no_grad():
        for lo in range(0, len(data), 32):
            preds.append(model(data.x[lo:lo + 32]))
    return torch.cat(preds).numpy()


@pytest.fixture(scope="module")
def depth_run(big_dataset, big_split):
    _, build_time = big_dataset
    train_m, test_m = big_split
    spec = neural.ModelSpec(task="depth", input_size=64)
    cfg = calib.TrainConfig(epochs=2, lr=1e-4, seed=0, eval_every=100)
    t0 = time.monotonic()
    model, history = calib.train(spec, train_m, test_m, cfg)
    return model, history, build_time + time.monotonic() - t0


@pytest.fixture(scope="module")
def wrench_run(big_dataset, big_split, tmp_path_factory):
    _, build_time = big_dataset
    train_m, test_m = big_split
    spec = neural.ModelSpec(task="wrench", input_size=64)
    cfg = calib.TrainConfig(epochs=3, lr=2e-5, seed=0, eval_every=100)
    t0 = time.monotonic()
    model, history = calib.train(spec, train_m, test_m, cfg)
    elapsed = build_time + time.monotonic() - t0
    ckpt = tmp_path_factory.mktemp("pretrained") / "wrench.tfck"
    neural.save_checkpoint(str(ckpt), model, spec)
    return model, history, elapsed, str(ckpt)


# ---------------------------------------------------------------- criteria

@criterion(1, "codec exactness: roundtrip identity, encode(15.5)=180, step")
def test_criterion_01_codec():
    t0 = time.monotonic()
    codec = gelsim.DepthCodec()
    px = np.arange(256, dtype=np.uint8)
    assert np.array_equal(codec.encode(codec.decode(px)), px)
    assert codec.encode(np.array([15.5]))[0] == 180
    assert abs(codec.step - 0.0182) < 5e-5
    assert time.monotonic() - t0 < 1.0


@criterion(2, "pattern validity: permutation, 2-opt dominance, coverage, "
              "autocorrelation")
def test_criterion_02_pattern():
    t0 = time.monotonic()
    ps = pattern.stipple(8192, 25.0, iterations=30, seed=0)
    assert len(ps) == 8192
    nn = pattern.nearest_neighbor_tour(ps, seed=0)
    tour = pattern.solve_tour(ps, seed=0)
    assert sorted(tour.order.tolist()) == list(range(8192))
    assert tour.length <= nn.length
    img = pattern.rasterize_tour(tour, ps, px_per_mm=20.0, stroke_width=0.15)
    cov = pattern.coverage_fraction(img)
    assert 0.2 <= cov <= 0.6
    assert pattern.autocorrelation_peak_ratio(img, min_shift=2) < 0.5
    assert time.monotonic() - t0 < 120


@criterion(3, "geometry oracle: mesh matches analytic ray-sphere within "
              "0.05 mm at subdivision 4, error halving per level")
def test_criterion_03_geometry():
    t0 = time.monotonic()
    geom = gelsim.SensorGeometry(resolution=64)
    center, radius = (1.5, -0.8, 18.0), 5.0
    ref = gelsim.analytic_sphere_indent(geom, center, radius)
    errs = []
    for sub in (2, 3, 4):
        mesh = gelsim.icosphere(radius, center, subdivisions=sub)
        dm = gelsim.raycast_indent(geom, mesh)
        errs.append(float(np.max(np.abs(dm.values - ref.values))))
    assert errs[-1] <= 0.05
    for a, b in zip(errs, errs[1:]):
        assert b <= 0.6 * a  # at least halving per refinement level
    assert time.monotonic() - t0 < 30


@criterion(4, "bulge conservation: |dV|/V <= 0.005 pre-clamp on 50 random "
              "indentations")
def test_criterion_04_bulge():
    t0 = time.monotonic()
    geom = gelsim.SensorGeometry(resolution=64)
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 50:
        radius = rng.uniform(3.0, 10.0)
        press = rng.uniform(0.5, 2.5)
        polar = rng.uniform(0.0, np.deg2rad(40.0))
        azim = rng.uniform(0.0, 2 * np.pi)
        d = np.array([np.sin(polar) * np.cos(azim),
                      np.sin(polar) * np.sin(azim), np.cos(polar)])
        center = d * (15.5 - press + radius)
        contact = gelsim.analytic_sphere_indent(geom, center, radius)
        if not np.any(contact.values < 15.5):
            continue
        out = gelsim.apply_bulge(contact, geom, sigma=20.0)
        assert not out.meta["conservation_impossible"]
        assert out.meta["bulge_volume_rel_error"] <= 0.005
        checked += 1
    assert time.monotonic() - t0 < 120


@criterion(5, "wrench symmetry: axisymmetric cross-terms <= 1e-9 |Fz|, "
              "mirror flips Fx, exact linearity in k")
def test_criterion_05_wrench():
    t0 = time.monotonic()
    geom = gelsim.SensorGeometry(resolution=64)
    params = wrench.FoundationParams()
    central = gelsim.analytic_sphere_indent(geom, (0, 0, 19.0), 5.0)
    w = wrench.compute_wrench(central, geom, params)
    fz = w.force[2]
    assert fz < 0
    for v in (w.force[0], w.force[1], *w.torque):
        assert abs(v) <= 1e-9 * abs(fz)
    a = gelsim.analytic_sphere_indent(geom, (4.0, 0.0, 17.5), 4.0)
    b = gelsim.analytic_sphere_indent(geom, (-4.0, 0.0, 17.5), 4.0)
    wa = wrench.compute_wrench(a, geom, params)
    wb = wrench.compute_wrench(b, geom, params)
    assert wa.force[0] == pytest.approx(-wb.force[0], rel=1e-9)
    w1 = wrench.compute_wrench(a, geom, wrench.FoundationParams(k=0.01))
    w5 = wrench.compute_wrench(a, geom, wrench.FoundationParams(k=0.05))
    assert np.allclose(w5.as_array(), 5.0 * w1.as_array(), rtol=1e-12, atol=1e-12)
    assert time.monotonic() - t0 < 30


@criterion(6, "loss closed forms: silog sqrt(0.15) within 1e-9, lambda=1 "
              "scale invariance within 1e-12, wrench MSE hand cases")
def test_criterion_06_losses():
    gt = torch.rand(1, 1, 16, 16, dtype=torch.float64,
                    generator=torch.Generator().manual_seed(0)) + 0.1
    loss = neural.silog_loss(float(np.e) * gt, gt, lam=0.85)
    assert abs(float(loss) - np.sqrt(0.15)) <= 1e-9
    for c in (0.3, 2.0, 9.0):
        assert float(neural.silog_loss(c * gt, gt, lam=1.0)) <= 1e-12
    z = torch.zeros(6, dtype=torch.float64)
    e1 = torch.zeros(6, dtype=torch.float64)
    e1[0] = 1.0
    assert float(neural.wrench_loss(z, z)) == 0.0
    assert float(neural.wrench_loss(e1, z)) == pytest.approx(1 / 6, abs=1e-12)
    assert float(neural.wrench_loss(torch.full((6,), 0.5, dtype=torch.float64),
                                    z)) == pytest.approx(0.25, abs=1e-12)


@criterion(7, "gradient check: tiny depth and wrench models within 1e-4 of "
              "central finite differences")
def test_criterion_07_gradients():
    t0 = time.monotonic()
    assert neural.grad_check(neural.tiny_spec("depth", input_size=12),
                             "silog") <= 1e-4
    assert neural.grad_check(neural.tiny_spec("wrench", input_size=12)) <= 1e-4
    assert time.monotonic() - t0 < 300


@criterion(8, "filter behavior: duplicate stream keeps 1, similarity "
              "endpoints, ring buffer depth 5")
def test_criterion_08_filter():
    frame = np.full((16, 16), 80, np.uint8)
    assert len(list(dataio.filter_stream([frame] * 10))) == 1
    assert dataio.similarity(frame, frame) == 1.0
    assert dataio.similarity(np.zeros((8, 8), np.uint8),
                             np.full((8, 8), 255, np.uint8)) == pytest.approx(0.0)
    rng = np.random.default_rng(1)
    distinct = [rng.integers(0, 256, (16, 16), dtype=np.uint8) for _ in range(5)]
    reappearing = [frame] + distinct + [frame]
    # the first frame falls out of the 5-deep buffer, so its copy is kept
    assert len(list(dataio.filter_stream(reappearing))) == 7
    buf = dataio.RingBuffer()
    for f in distinct + distinct[:2]:
        buf.push(f)
    assert len(buf.frames) == 5


@criterion(9, "end-to-end depth: ~2000 synthetic frames, held-out unseen "
              "indenter MAE <= 0.5 mm within 30 min")
def test_criterion_09_depth_end_to_end(big_dataset, big_split, depth_run):
    manifest, _ = big_dataset
    assert len(manifest.records) >= 1900
    model, history, elapsed = depth_run
    _, test_m = big_split
    data = calib.ManifestDataset(test_m, "depth")
    pred = _predict(model, data)[:, 0]
    gt = data.y.numpy()[:, 0]
    codec = gelsim.DepthCodec()
    mae_mm = float(np.mean(np.abs(pred - gt)) * 255.0 * codec.step)
    assert mae_mm <= 0.5
    assert elapsed <= 1800
    _line(9, True, f"   (held-out depth MAE {mae_mm:.4f} mm, "
                   f"{elapsed / 60:.1f} min)")


@criterion(10, "end-to-end wrench: held-out normalized MAE <= 0.08 within "
               "30 min")
def test_criterion_10_wrench_end_to_end(big_split, wrench_run):
    model, history, elapsed, _ = wrench_run
    _, test_m = big_split
    data = calib.ManifestDataset(test_m, "wrench")
    pred = _predict(model, data)
    gt = data.y.numpy()
    mae = float(np.mean(np.abs(pred - gt)))
    assert mae <= 0.08
    assert elapsed <= 1800
    _line(10, True, f"   (held-out normalized wrench MAE {mae:.4f}, "
                    f"{elapsed / 60:.1f} min)")


@criterion(11, "transfer: over 3 seeds, fine-tuning on a 12%-size "
               "new-sensor set beats from-scratch training")
def test_criterion_11_transfer(big_dataset, wrench_run, tmp_path_factory):
    manifest, _ = big_dataset
    _, _, _, ckpt = wrench_run
    out = tmp_path_factory.mktemp("newsensor")
    sensor_b = dataio.SensorConfig(sensor_id="simB", pattern_seed=42,
                                   stiffness=0.075, led_tint=(1.0, 0.9, 0.8))
    steps = max(1, round(0.12 * len(manifest.records) / 21))
    plan = dataio.DatasetPlan.default(n_indenters=21, steps=steps,
                                      sensor=sensor_b)
    small = dataio.build_dataset(plan, str(out), seed=21)
    assert len(small.records) <= 0.15 * len(manifest.records)
    ids = sorted({r.indenter_id for r in small.records})
    train_m, val_m = dataio.split(small, [ids[HELD_OUT_INDEX]])
    finals_transfer, finals_scratch = [], []
    spec = neural.ModelSpec(task="wrench", input_size=64)
    for seed in (0, 1, 2):
        cfg = calib.TrainConfig(epochs=6, lr=2e-5, seed=seed, eval_every=50)
        _, ht = calib.transfer_3dim(ckpt, train_m, val_m, cfg)
        _, hs = calib.train(spec, train_m, val_m, cfg)
        assert ht.val_loss and hs.val_loss  # histories recorded
        assert ht.convergence_step is None or ht.convergence_step >= 0
        finals_transfer.append(ht.val_loss[-1])
        finals_scratch.append(hs.val_loss[-1])
    mean_t = float(np.mean(finals_transfer))
    mean_s = float(np.mean(finals_scratch))
    assert mean_t <= mean_s
    _line(11, True, f"   (mean final val loss: transfer {mean_t:.5f} vs "
                    f"scratch {mean_s:.5f})")


def _hash_artifacts(root):
    digest = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            if name == "resolved_config.json":
                continue  # echoes --threads/--out, not an artifact
            digest.update(name.encode())
            digest.update(open(os.path.join(dirpath, name), "rb").read())
    return digest.hexdigest()


@criterion(12, "determinism: identical seeds with --threads 1 vs 8 yield "
               "identical artifact hashes")
def test_criterion_12_determinism(tmp_path):
    hashes = []
    for threads in ("1", "8"):
        out = tmp_path / f"t{threads}"
        rc = cli.main(["dataset", "build", "--indenters", "2", "--steps", "3",
                       "--resolution", "32", "--seed", "5",
                       "--threads", threads, "--out", str(out)])
        assert rc == 0
        rc = cli.main(["pattern", "--n", "256", "--iterations", "3",
                       "--seed", "5", "--threads", threads,
                       "--out", str(out / "pattern.png")])
        assert rc == 0
        hashes.append(_hash_artifacts(str(out)))
    assert hashes[0] == hashes[1]
