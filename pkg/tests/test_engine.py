import csv
import json
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from cyclepose.config import Ablation, RunConfig, TrainConfig
from cyclepose.engine import (CheckpointRef, ImagePool, NonFiniteLossError, Trainer, expand_dihedral,
                              export_segmenter, infer, list_checkpoints, load_segmenter, lr_at, predict_flows,
                              select_model)
from cyclepose.nets import DiscriminatorSpec, GeneratorSpec, SegmenterSpec
from cyclepose.synthmask import EllipseConfig, sample_ellipse_mask


def tiny_config(**train):
    defaults = dict(crop=32, seed=1, epochs_const=2, epochs_decay=1, select_every=1, pool_size=4)
    defaults.update(train)
    return RunConfig(train=TrainConfig(**defaults),
                     generator=GeneratorSpec(residual_blocks=1, base_width=4),
                     segmenter=SegmenterSpec(base_width=4),
                     discriminator=DiscriminatorSpec(base_width=4))


def images(n=3, size=40, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.random((size, size)) for _ in range(n)]


def params(net):
    return [p.detach().clone() for p in net.parameters()]


# ---------------------------------------------------------------------------
# schedule and pool
# ---------------------------------------------------------------------------

def test_lr_schedule():
    assert lr_at(0) == 0.0008
    assert lr_at(99) == 0.0008
    assert lr_at(150) == pytest.approx(0.0004, abs=1e-18)
    assert lr_at(175) == pytest.approx(0.0002)
    assert lr_at(200) == 0.0
    assert lr_at(250) == 0.0
    cfg = TrainConfig(epochs_const=10, epochs_decay=0)
    assert lr_at(9, cfg) == 0.0008 and lr_at(10, cfg) == 0.0


def test_pool_fill_then_swap():
    pool = ImagePool(3, seed=0)
    for i in range(3):
        x = torch.full((1, 1, 2, 2), float(i))
        assert torch.equal(pool.query(x), x)
    assert len(pool) == 3
    for i in range(50):
        pool.query(torch.full((2, 1, 2, 2), 10.0 + i))
        assert len(pool) == 3


def test_pool_zero_capacity_passes_through():
    pool = ImagePool(0)
    x = torch.randn(2, 1, 3, 3)
    assert torch.equal(pool.query(x), x)


def test_pool_state_round_trip():
    pool = ImagePool(5, seed=3)
    for i in range(8):
        pool.query(torch.full((1, 1, 1, 1), float(i)))
    state = pool.state_dict()
    twin = ImagePool(5, seed=99)
    twin.load_state_dict(state)
    for i in range(20):
        x = torch.full((1, 1, 1, 1), 100.0 + i)
        assert torch.equal(pool.query(x), twin.query(x))


# ---------------------------------------------------------------------------
# training step
# ---------------------------------------------------------------------------

def test_ablation_record_has_only_cycle_terms():
    cfg = tiny_config(ablation=Ablation(adv=False, perlin=False, m2i=False))
    tr = Trainer(cfg, images())
    rec = tr.train_step()
    assert set(rec.components) == {"cyc_mask", "cyc_img"}
    assert rec.d_losses == {}
    assert tr.D_img is None and tr.D_seg is None


def test_ablation_validation():
    with pytest.raises(ValueError):
        Ablation(adv=False, perlin=False, m2i=False, cyc=False)
    with pytest.raises(ValueError):
        Ablation().without(["bogus"])
    assert Ablation().without(["perlin"]).perlin is False


def test_full_record_and_bookkeeping():
    tr = Trainer(tiny_config(), images())
    rec = tr.train_step()
    assert set(rec.components) == {"cyc_mask", "cyc_img", "adv_img", "adv_seg", "perlin", "m2i"}
    assert set(rec.d_losses) == {"d_img", "d_seg"}
    assert rec.total == pytest.approx(sum(rec.components.values()), rel=1e-6)
    assert rec.lr == 0.0008 and rec.step == 0 and tr.step == 1


def test_updates_touch_only_their_own_networks():
    tr = Trainer(tiny_config(), images())
    tr.train_step()                      # populate every .grad
    batch = tr.make_batch(1)
    d_before = params(tr.D_img) + params(tr.D_seg)
    d_grads = [p.grad.clone() for p in list(tr.D_img.parameters()) + list(tr.D_seg.parameters())]
    _, _, aux = tr.update_generators(batch)
    assert all(torch.equal(a, b) for a, b in zip(d_before, params(tr.D_img) + params(tr.D_seg)))
    assert all(torch.equal(g, p.grad) for g, p in zip(d_grads, list(tr.D_img.parameters()) + list(tr.D_seg.parameters())))

    gs_before = params(tr.G) + params(tr.S)
    gs_grads = [p.grad.clone() for p in list(tr.G.parameters()) + list(tr.S.parameters())]
    tr.update_discriminators(batch, aux)
    assert all(torch.equal(a, b) for a, b in zip(gs_before, params(tr.G) + params(tr.S)))
    assert all(torch.equal(g, p.grad) for g, p in zip(gs_grads, list(tr.G.parameters()) + list(tr.S.parameters())))
    assert not all(torch.equal(a, b) for a, b in zip(d_before, params(tr.D_img) + params(tr.D_seg)))


def test_batches_deterministic_and_distinct():
    a = Trainer(tiny_config(), images()).make_batch(4)
    b = Trainer(tiny_config(), images()).make_batch(4)
    c = Trainer(tiny_config(), images()).make_batch(5)
    for k in a:
        assert torch.equal(a[k], b[k])
    assert not torch.equal(a["synth_flows"], c["synth_flows"])
    assert a["real_img"].shape == (1, 1, 32, 32)
    assert a["synth_flows"].shape == (1, 3, 32, 32)
    assert a["real_img"].min() >= -1 and a["real_img"].max() <= 1


def test_epoch_permutation_visits_every_image():
    tr = Trainer(tiny_config(), images(4))
    seen = []
    for step in range(4):
        order = np.random.default_rng([1, 0, 0]).permutation(4)
        seen.append(order[step])
    assert sorted(seen) == [0, 1, 2, 3]
    assert tr.steps_per_epoch == 4


def test_empty_image_list_rejected():
    with pytest.raises(ValueError):
        Trainer(tiny_config(), [])


def test_non_finite_loss_halts_with_diagnostics(tmp_path, monkeypatch):
    tr = Trainer(tiny_config(), images())
    tr._run_dir = tmp_path
    original = tr.generator_objective

    def poisoned(batch):
        comps, aux = original(batch)
        comps["cyc_img"] = comps["cyc_img"] * float("nan")
        return comps, aux

    monkeypatch.setattr(tr, "generator_objective", poisoned)
    before = params(tr.G)
    with pytest.raises(NonFiniteLossError):
        tr.train_step()
    assert (tmp_path / "diagnostics.ckpt").exists()
    assert all(torch.equal(a, b) for a, b in zip(before, params(tr.G)))


# ---------------------------------------------------------------------------
# fit, checkpoints, resume
# ---------------------------------------------------------------------------

def test_fit_outputs_and_resume(tmp_path):
    cfg = tiny_config()
    imgs = images(2)
    full = Trainer(cfg, imgs)
    records = full.fit(tmp_path / "full")
    assert len(records) == 6
    assert [r.lr for r in records] == [lr_at(r.epoch, cfg.train) for r in records]
    assert [r.epoch for r in records] == [0, 0, 1, 1, 2, 2]
    run = tmp_path / "full"
    with open(run / "losses.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["config_hash"] == cfg.hash()
    assert manifest["seed"] == 1
    refs = list_checkpoints(run)
    assert [r.epoch for r in refs] == [1, 2, 3]
    assert (run / "checkpoints" / "last.ckpt").exists()

    # resume from the epoch-1 checkpoint and finish the run
    resumed = Trainer.from_checkpoint(refs[0].path, imgs)
    assert resumed.step == 2
    tail = resumed.fit(tmp_path / "resumed")
    assert tail == records[2:]


def test_segmenter_export_and_load(tmp_path):
    tr = Trainer(tiny_config(), images(1))
    tr.train_step()
    ckpt = tr.save_checkpoint(tmp_path / "a.ckpt")
    export = export_segmenter(ckpt, tmp_path / "s.pt")
    x = torch.randn(1, 1, 32, 32)
    tr.S.eval()
    with torch.no_grad():
        ref = tr.S(x)
        for path in (ckpt, export):
            net = load_segmenter(path)
            assert torch.equal(net(x), ref)
    assert not list(tmp_path.glob("*.tmp"))


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

class ThresholdNet(torch.nn.Module):
    """Zero flow and a sharp logit on intensity: decoding reduces to
    connected components of bright pixels, which is a local operation."""

    def __init__(self):
        super().__init__()
        self.spec = SimpleNamespace(depth=4)
        self.gain = torch.nn.Parameter(torch.tensor(40.0))

    def forward(self, x):
        return torch.cat([torch.zeros_like(x), torch.zeros_like(x), self.gain * x], dim=1)


def test_blank_image_gives_empty_mask():
    assert not infer(np.full((40, 40), 7.0), ThresholdNet()).any()
    assert not infer(np.zeros((37, 45)), ThresholdNet()).any()


def test_infer_odd_sizes_and_compact_labels():
    mask = sample_ellipse_mask(EllipseConfig(canvas_size=(70, 90), count_range=(4, 8)), 0)
    labels = infer((mask > 0).astype(float), ThresholdNet(), normalize=False)
    assert labels.shape == (70, 90)
    assert list(np.unique(labels)) == list(range(labels.max() + 1))


def test_tiled_inference_matches_whole():
    counts = []
    for seed in range(3):
        mask = sample_ellipse_mask(EllipseConfig(canvas_size=(160, 160), count_range=(10, 20)), seed)
        img = (mask > 0).astype(float)
        whole = infer(img, ThresholdNet(), normalize=False)
        tiled = infer(img, ThresholdNet(), normalize=False, tile=64, overlap=0.25)
        counts.append((whole.max(), tiled.max()))
        assert abs(int(tiled.max()) - int(whole.max())) <= 0.05 * whole.max()
    flows = predict_flows(np.random.default_rng(0).random((50, 60)), ThresholdNet(), tile=32)
    assert flows.shape == (3, 50, 60)
    assert flows[2].min() >= 0 and flows[2].max() <= 1


# ---------------------------------------------------------------------------
# model selection
# ---------------------------------------------------------------------------

def _pairs(n=10):
    out = []
    for i in range(n):
        m = np.zeros((20, 20), np.int32)
        m[2:7, 2:7] = 1
        m[10:16, 3:9] = 2
        m[4:9, 12:18] = 3
        out.append((np.random.default_rng(i).random((20, 20)), m))
    return out


def test_dihedral_expansion_count():
    assert len(expand_dihedral(_pairs(10))) == 80


def test_selection_picks_better_checkpoint(monkeypatch):
    import cyclepose.engine as engine
    pairs = _pairs()
    evals = expand_dihedral(pairs)
    monkeypatch.setattr(engine, "expand_dihedral", lambda p: evals)
    truth = {id(img): m for img, m in evals}

    # epoch 5 misses one of three nuclei in every image, epoch 10 is exact
    def factory(ref):
        def predict(image):
            m = truth[id(image)].copy()
            if ref.epoch == 5:
                m[m == m.max()] = 0
            return m
        return predict

    best, scores = select_model([CheckpointRef(None, 5), CheckpointRef(None, 10)], pairs, factory)
    assert best.epoch == 10
    assert scores[5] == pytest.approx(2 / 3)
    assert scores[10] == 1.0


def test_selection_ties_go_to_later_epoch():
    refs = [CheckpointRef(None, 20), CheckpointRef(None, 5)]
    best, _ = select_model(refs, _pairs(), lambda ref: (lambda image: np.zeros((20, 20), np.int32)))
    assert best.epoch == 20


def test_selection_single_and_empty():
    only = CheckpointRef(None, 3)
    assert select_model([only], _pairs())[0] is only
    with pytest.raises(ValueError):
        select_model([only], [])
    with pytest.raises(ValueError):
        select_model([], _pairs())


def test_selection_warns_on_subset_size(caplog):
    refs = [CheckpointRef(None, 1), CheckpointRef(None, 2)]
    with caplog.at_level("WARNING"):
        select_model(refs, _pairs(3), lambda ref: (lambda image: np.zeros((20, 20), np.int32)))
    assert "expected 10" in caplog.text
