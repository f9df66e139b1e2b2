"""Exit criteria of the build, one test (or group) per criterion.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary prints one
PASS/FAIL/SKIP line per criterion.  Criteria 7 and 8 need the public
datasets and long GPU runs; set ``CYCLEPOSE_EXTENDED=1`` together with
``CYCLEPOSE_BBBC039`` / ``CYCLEPOSE_DSB2018`` to run them.
"""

import itertools
import math
import os
from dataclasses import replace

import numpy as np
import pytest
import torch

from cyclepose import cli
from cyclepose import data as data_mod
from cyclepose.config import RunConfig, TrainConfig
from cyclepose.data import write_image, write_mask
from cyclepose.engine import ImagePool, Trainer, lr_at
from cyclepose.flowcodec import decode_flows, encode_flows
from cyclepose.losses import LossWeights, m2i_total, total_loss
from cyclepose.metrics import jaccard, match_instances, panoptic_quality
from cyclepose.perlinimg import PerlinConfig, render_perlin_image
from cyclepose.synthmask import DeformConfig, EllipseConfig, synthesize_mask

EXTENDED = os.environ.get("CYCLEPOSE_EXTENDED", "") == "1"

# stand-in for real microscopy: a Perlin look that differs from the training one
REAL_LOOK = PerlinConfig(octaves=3, base_frequency=1 / 24, fg_intensity_range=(0.35, 0.8),
                         bg_intensity_range=(0.0, 0.1), blur_sigma=1.0, poisson_scale=400.0)


def fake_real_images(n, size, seed=100):
    ecfg = EllipseConfig(canvas_size=(size, size), count_range=(3, 12))
    out = []
    for i in range(n):
        m = synthesize_mask(ecfg, DeformConfig(), [seed, i])
        out.append(render_perlin_image(m, REAL_LOOK, (seed, i)))
    return out


def matched_iou_oracle(pred, gt):
    """IoU of each gt instance with the prediction overlapping it by more
    than half (such a partner is unique), 0 when there is none."""
    out = []
    for g in range(1, gt.max() + 1):
        gm = gt == g
        best = 0.0
        for p in np.unique(pred[gm]):
            if p == 0:
                continue
            pm = pred == p
            best = max(best, (gm & pm).sum() / (gm | pm).sum())
        out.append(best if best > 0.5 else 0.0)
    return out


# ---------------------------------------------------------------------------
# 1
# ---------------------------------------------------------------------------

@pytest.mark.acceptance(criterion=1, title="m2i loss on the 2x2 hand fixture equals 1.5 (tol 1e-6)")
def test_c1_m2i_fixture(record_property):
    mask = torch.tensor([[[[1.0, 0.0], [0.0, 0.0]]]], dtype=torch.float64)
    fake = torch.tensor([[[[0.1, 0.0], [0.0, 1.0]]]], dtype=torch.float64)
    w = LossWeights(t_n=0.2, t_b=0.3, lambda_m2i=7.5, dilation_d=0)
    value = float(m2i_total(mask, fake, w))
    record_property("measured", f"value={value:.9f}")
    assert abs(value - 1.5) < 1e-6


# ---------------------------------------------------------------------------
# 2
# ---------------------------------------------------------------------------

def _random_labels(rng, size=32, max_instances=6):
    lab = np.zeros((size, size), dtype=np.int32)
    n = int(rng.integers(0, max_instances + 1))
    yy, xx = np.mgrid[:size, :size]
    for k in range(1, n + 1):
        cy, cx = rng.uniform(0, size, 2)
        ry, rx = rng.uniform(2, 9, 2)
        lab[((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1] = k
    return lab


def _perturb(rng, gt):
    size = gt.shape[0]
    pred = np.roll(gt, tuple(rng.integers(-2, 3, 2)), axis=(0, 1))
    noise = rng.random(gt.shape) < 0.05
    pred = np.where(noise, 0, pred)
    # drop one instance sometimes, add a stray blob sometimes
    ids = np.unique(pred[pred > 0])
    if len(ids) and rng.random() < 0.3:
        pred[pred == rng.choice(ids)] = 0
    if rng.random() < 0.3:
        extra = _random_labels(rng, size, 1)
        pred = np.where(extra > 0, pred.max() + 1, pred)
    # scramble ids
    perm = np.concatenate([[0], rng.permutation(np.arange(1, pred.max() + 1)) + 10])
    return perm[pred]


def brute_force_reports(pred, gt, taus):
    g_ids = [g for g in np.unique(gt) if g]
    p_ids = [p for p in np.unique(pred) if p]
    n = max(len(g_ids), len(p_ids))
    iou = np.zeros((n, n))
    for i, g in enumerate(g_ids):
        gm = gt == g
        for j, p in enumerate(p_ids):
            pm = pred == p
            union = np.count_nonzero(gm | pm)
            iou[i, j] = np.count_nonzero(gm & pm) / union
    if n == 0:
        return {tau: (0, 0, 0, []) for tau in taus}
    out = {}
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64).reshape(-1, n)
    vals = iou[np.arange(n)[None, :], perms]
    for tau in taus:
        valid = vals > tau
        count = valid.sum(axis=1)
        total = np.where(valid, vals, 0.0).sum(axis=1)
        best = max(range(len(perms)), key=lambda k: (count[k], total[k]))
        tp = int(count[best])
        ious = sorted(float(v) for v in vals[best][valid[best]])
        out[tau] = (tp, len(p_ids) - tp, len(g_ids) - tp, ious)
    return out


@pytest.mark.acceptance(criterion=2, title="matching/JAC/PQ equal a brute-force matcher on 500 random 32x32 pairs")
def test_c2_bruteforce_matching(record_property):
    rng = np.random.default_rng(2024)
    taus = [round(0.5 + 0.05 * i, 2) for i in range(10)]
    mismatches = 0
    checked = 0
    for _ in range(500):
        gt = _random_labels(rng)
        pred = _perturb(rng, gt) if rng.random() < 0.7 else _random_labels(rng)
        oracle = brute_force_reports(pred, gt, taus)
        for tau in taus:
            rep = match_instances(pred, gt, tau)
            tp, fp, fn, ious = oracle[tau]
            checked += 1
            ok = (rep.tp, rep.fp, rep.fn) == (tp, fp, fn) and rep.matched_ious == ious
            denom = tp + fp + fn
            jac_o = 1.0 if denom == 0 else tp / denom
            if denom == 0:
                pq_o = 1.0
            elif tp == 0:
                pq_o = 0.0
            else:
                pq_o = float(np.mean(ious)) * (tp / (tp + 0.5 * fp + 0.5 * fn))
            ok = ok and jaccard(rep) == jac_o and panoptic_quality(rep).pq == pq_o
            mismatches += not ok
    record_property("measured", f"{mismatches} mismatches / {checked} (pair, tau) checks")
    assert mismatches == 0


# ---------------------------------------------------------------------------
# 3
# ---------------------------------------------------------------------------

@pytest.mark.acceptance(criterion=3, title="decode(encode(m)) on 50 synthetic masks: mean IoU >= 0.9, count right on >= 95%")
def test_c3_flow_round_trip(record_property):
    ious, correct = [], 0
    for seed in range(50):
        m = synthesize_mask(EllipseConfig(), DeformConfig(), seed)
        rec = decode_flows(encode_flows(m))
        ious += matched_iou_oracle(rec, m)
        correct += int(rec.max()) == int(m.max())
    mean_iou = float(np.mean(ious))
    record_property("measured", f"mean IoU {mean_iou:.4f}, counts correct {correct}/50")
    assert mean_iou >= 0.9
    assert correct >= 0.95 * 50


# ---------------------------------------------------------------------------
# 4
# ---------------------------------------------------------------------------

def _pick_entries(grad, rng, k=1):
    flat = grad.abs().flatten()
    cand = torch.nonzero(flat >= 0.1 * flat.max()).flatten().numpy()
    return rng.choice(cand, size=min(k, len(cand)), replace=False)


@pytest.mark.acceptance(criterion=4, title="autodiff matches central differences on G and S params (rel err < 1e-3)")
@pytest.mark.slow
def test_c4_gradient_check(record_property):
    cfg = RunConfig(train=TrainConfig(crop=64, seed=3))
    trainer = Trainer(cfg, fake_real_images(2, 64), dtype=torch.float64)
    batch = trainer.make_batch(0)
    trainer.G.train()
    trainer.S.train()
    for p in list(trainer.D_img.parameters()) + list(trainer.D_seg.parameters()):
        p.requires_grad_(False)

    def objective():
        comps, _ = trainer.generator_objective(batch)
        return total_loss(comps)

    comps, _ = trainer.generator_objective(batch)
    assert set(comps) == {"cyc_mask", "cyc_img", "adv_img", "adv_seg", "perlin", "m2i"}
    trainer.G.zero_grad()
    trainer.S.zero_grad()
    objective().backward()

    g_params = [trainer.G.model[1].weight, trainer.G.model[12].block[1].weight, trainer.G.model[-2].weight]
    s_params = [trainer.S.down[0].conv[0][2].weight, trainer.S.up[1].conv1.conv[2].weight,
                trainer.S.output[2].weight]
    rng = np.random.default_rng(0)
    # small enough that +-eps rarely straddles a ReLU/max-pool kink somewhere
    # in the network; float64 keeps round-off near 1e-7 relative
    eps = 1e-7
    worst = 0.0
    results = []
    for name, params in (("G", g_params), ("S", s_params)):
        for p in params:
            for idx in _pick_entries(p.grad, rng):
                ad = float(p.grad.flatten()[idx])
                flat = p.data.view(-1)
                orig = float(flat[idx])
                with torch.no_grad():
                    flat[idx] = orig + eps
                    up = float(objective())
                    flat[idx] = orig - eps
                    down = float(objective())
                    flat[idx] = orig
                fd = (up - down) / (2 * eps)
                rel = abs(ad - fd) / max(abs(ad), abs(fd), 1e-12)
                worst = max(worst, rel)
                results.append((name, rel))
    record_property("measured", f"{len(results)} entries, worst rel err {worst:.2e}")
    assert sum(n == "G" for n, _ in results) >= 3
    assert sum(n == "S" for n, _ in results) >= 3
    assert worst < 1e-3


# ---------------------------------------------------------------------------
# 5
# ---------------------------------------------------------------------------

def _ema(values, beta=0.9):
    out, acc = [], values[0]
    for v in values:
        acc = beta * acc + (1 - beta) * v
        out.append(acc)
    return out


@pytest.mark.acceptance(criterion=5, title="200-step smoke run: EMA decreases, finite, resume is bitwise identical")
@pytest.mark.slow
def test_c5_smoke_training(tmp_path, record_property):
    torch.set_num_threads(1)
    images = fake_real_images(16, 128)
    cfg = RunConfig(train=TrainConfig(crop=128, seed=7))
    trainer = Trainer(cfg, images)
    records = []
    for step in range(200):
        if step == 100:
            trainer.save_checkpoint(tmp_path / "step100.ckpt")
        records.append(trainer.train_step())

    totals = [r.total for r in records]
    finite = all(math.isfinite(v) for r in records
                 for v in [r.total, *r.components.values(), *r.d_losses.values()])
    ema = _ema(totals)

    resumed = Trainer.from_checkpoint(tmp_path / "step100.ckpt", images)
    replay = [resumed.train_step() for _ in range(20)]
    identical = all(a == b for a, b in zip(replay, records[100:120]))

    record_property("measured", f"EMA step20 {ema[19]:.3f} -> step200 {ema[199]:.3f}; "
                                f"finite={finite}; resume identical={identical}")
    assert finite
    assert ema[199] < ema[19]
    assert identical
    for r in records:
        assert abs(r.total - sum(r.components.values())) <= 1e-6 * max(1.0, abs(r.total))


# ---------------------------------------------------------------------------
# 6
# ---------------------------------------------------------------------------

@pytest.mark.acceptance(criterion=6, title="lr schedule exact at epochs 0/100/150/200; pool swap rate in [0.45, 0.55]")
def test_c6_schedule_and_pool(record_property):
    expected = {0: 0.0008, 100: 0.0008, 150: 0.0004, 200: 0.0}
    got = {e: lr_at(e) for e in expected}
    pool = ImagePool(50, seed=0)
    for i in range(50):
        pool.query(torch.full((1, 1, 2, 2), float(i)))
    swaps = 0
    n = 10_000
    for i in range(n):
        fresh = torch.full((1, 1, 2, 2), float(1000 + i))
        out = pool.query(fresh)
        swaps += not torch.equal(out, fresh)
        assert len(pool) == 50
    rate = swaps / n
    record_property("measured", f"lr {got}; swap rate {rate:.4f}")
    for e, v in expected.items():
        assert math.isclose(got[e], v, rel_tol=0, abs_tol=1e-15)
    assert 0.45 <= rate <= 0.55


# ---------------------------------------------------------------------------
# 7, 8 (extended)
# ---------------------------------------------------------------------------

@pytest.mark.acceptance(criterion=7, title="[extended] BBBC039 / DSB2018 reproduction within stated bands")
@pytest.mark.skipif(not EXTENDED or not os.environ.get("CYCLEPOSE_BBBC039"),
                    reason="extended run: set CYCLEPOSE_EXTENDED=1 and CYCLEPOSE_BBBC039 (+ CYCLEPOSE_DSB2018)")
def test_c7_table_reproduction(tmp_path, record_property):
    from cyclepose.data import bbbc039_manifest, ingest
    from cyclepose.engine import infer, list_checkpoints, load_segmenter, select_model
    from cyclepose.metrics import evaluate

    def run(root, manifest, targets):
        ds = ingest(manifest, tmp_path / manifest.name)
        trainer = Trainer(RunConfig(), ds.train_images(), device="cuda" if torch.cuda.is_available() else "cpu")
        trainer.fit(tmp_path / manifest.name)
        best, _ = select_model(list_checkpoints(tmp_path / manifest.name), ds.annotated_pairs("val", 10))
        net = load_segmenter(best.path)
        test = ds.annotated_pairs("test")
        scores = evaluate([infer(img, net, normalize=False) for img, _ in test], [m for _, m in test])
        record_property("measured", f"{manifest.name}: {scores}")
        for key, (target, tol) in targets.items():
            assert abs(scores[key] - target) <= tol

    run(os.environ["CYCLEPOSE_BBBC039"], bbbc039_manifest(os.environ["CYCLEPOSE_BBBC039"]),
        {"JAC_0.5": (0.887, 0.03), "JAC_0.5:0.05:0.95": (0.727, 0.04)})
    if os.environ.get("CYCLEPOSE_DSB2018"):
        from cyclepose.data import DatasetManifest
        run(os.environ["CYCLEPOSE_DSB2018"], DatasetManifest.load(os.environ["CYCLEPOSE_DSB2018"]),
            {"JAC_0.5": (0.764, 0.04)})


@pytest.mark.acceptance(criterion=8, title="[extended] removing the Perlin loss lowers DSB2018 JAC sweep and raises its spread")
@pytest.mark.skipif(not EXTENDED or not os.environ.get("CYCLEPOSE_DSB2018"),
                    reason="extended run: set CYCLEPOSE_EXTENDED=1 and CYCLEPOSE_DSB2018 (manifest path)")
def test_c8_ablation_direction(tmp_path, record_property):
    from cyclepose.data import DatasetManifest, ingest
    from cyclepose.engine import infer, list_checkpoints, load_segmenter, select_model
    from cyclepose.metrics import evaluate

    ds = ingest(DatasetManifest.load(os.environ["CYCLEPOSE_DSB2018"]), tmp_path / "cache")
    test = ds.annotated_pairs("test")
    scores = {"full": [], "no_perlin": []}
    for variant, drop in (("full", ()), ("no_perlin", ("perlin",))):
        for seed in range(3):
            cfg = RunConfig()
            cfg = replace(cfg, train=replace(cfg.train, seed=seed, ablation=cfg.train.ablation.without(drop)))
            run_dir = tmp_path / variant / str(seed)
            Trainer(cfg, ds.train_images(), device="cuda" if torch.cuda.is_available() else "cpu").fit(run_dir)
            best, _ = select_model(list_checkpoints(run_dir), ds.annotated_pairs("val", 10))
            net = load_segmenter(best.path)
            preds = [infer(img, net, normalize=False) for img, _ in test]
            scores[variant].append(evaluate(preds, [m for _, m in test])["JAC_0.5:0.05:0.95"])
    record_property("measured", str(scores))
    assert np.mean(scores["no_perlin"]) < np.mean(scores["full"])
    assert np.std(scores["no_perlin"]) > np.std(scores["full"])


# ---------------------------------------------------------------------------
# 9
# ---------------------------------------------------------------------------

def _write_dataset(root, n_train=4, n_val=10, n_test=3, size=64):
    ecfg = EllipseConfig(canvas_size=(size, size), count_range=(2, 6))
    for k, (split, n) in enumerate((("train", n_train), ("val", n_val), ("test", n_test))):
        (root / split / "images").mkdir(parents=True)
        if split != "train":
            (root / split / "masks").mkdir(parents=True)
        for i in range(n):
            m = synthesize_mask(ecfg, DeformConfig(), [k, i])
            write_image(root / split / "images" / f"img{i:03d}.png", render_perlin_image(m, REAL_LOOK, (7, i)))
            if split != "train":
                write_mask(root / split / "masks" / f"img{i:03d}.png", m)


@pytest.mark.acceptance(criterion=9, title="training runs with no train masks; only select/eval read annotations")
@pytest.mark.slow
def test_c9_unsupervised_contract(tmp_path, monkeypatch, record_property):
    data_root = tmp_path / "data"
    _write_dataset(data_root)
    assert not (data_root / "train" / "masks").exists()

    reads = []
    real_read = data_mod._read_raw

    def spy(path):
        reads.append(path)
        return real_read(path)

    monkeypatch.setattr(data_mod, "_read_raw", spy)
    run = tmp_path / "run"
    rc = cli.main(["train", "--images", str(data_root / "train" / "images"), "--out", str(run),
                   "--crop", "64", "--epochs-const", "2", "--epochs-decay", "1", "--select-every", "1",
                   "--seed", "5"])
    assert rc == 0
    train_reads = list(reads)
    assert train_reads and all(p.parent == data_root / "train" / "images" for p in train_reads)
    for f in ("losses.csv", "manifest.json", "checkpoints/last.ckpt", "checkpoints/epoch_0003.ckpt"):
        assert (run / f).exists(), f

    reads.clear()
    assert cli.main(["select", "--runs", str(run), "--val", str(data_root / "val")]) == 0
    assert any(p.parent.name == "masks" for p in reads)
    assert (run / "best_segmenter.pt").exists()

    assert cli.main(["infer", "--weights", str(run / "best_segmenter.pt"), "--in",
                     str(data_root / "test" / "images"), "--out", str(tmp_path / "pred")]) == 0
    reads.clear()
    assert cli.main(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(data_root / "test" / "masks"),
                     "--out", str(tmp_path / "metrics")]) == 0
    assert (tmp_path / "metrics" / "metrics.json").exists()
    assert (tmp_path / "metrics" / "per_image.csv").exists()
    record_property("measured", f"train read {len(train_reads)} files, all under train/images")
