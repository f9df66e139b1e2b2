"""Training loop, learning-rate schedule, image pools, checkpoints,
model selection and inference."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import re
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import __version__
from .config import Ablation, RunConfig, TrainConfig, config_from_dict
from .data import augment, dihedral, normalize_percentile, to_network
from .flowcodec import DecodeConfig, decode_flows, encode_flows
from .losses import lsgan_loss, m2i_total, seg_loss, total_loss
from .metrics import jaccard_sweep
from .nets import Segmenter, SegmenterSpec, build_discriminator, build_generator, build_segmenter
from .perlinimg import render_perlin_image
from .synthmask import synthesize_mask

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


def lr_at(epoch: float, cfg: TrainConfig = TrainConfig()) -> float:
    """Constant for ``epochs_const`` epochs, then linear decay to zero."""
    if epoch < cfg.epochs_const:
        return cfg.lr
    if cfg.epochs_decay == 0:
        return 0.0
    frac = (cfg.epochs_const + cfg.epochs_decay - epoch) / cfg.epochs_decay
    return cfg.lr * min(max(frac, 0.0), 1.0)


class ImagePool:
    """Buffer of past generator outputs for discriminator updates.

    Until full, every query is stored and returned unchanged.  Afterwards a
    query returns, with probability 1/2, a random stored item (which the new
    one replaces), else the new item itself.
    """

    def __init__(self, capacity: int = 50, seed=0):
        self.capacity = capacity
        self.items: list[torch.Tensor] = []
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return len(self.items)

    def query(self, images: torch.Tensor) -> torch.Tensor:
        if self.capacity == 0:
            return images
        out = []
        for img in images.detach():
            if len(self.items) < self.capacity:
                self.items.append(img.clone())
                out.append(img)
            elif self.rng.random() > 0.5:
                i = int(self.rng.integers(self.capacity))
                out.append(self.items[i].clone())
                self.items[i] = img.clone()
            else:
                out.append(img)
        return torch.stack(out)

    def state_dict(self) -> dict:
        return {"capacity": self.capacity, "items": [t.clone() for t in self.items],
                "rng": self.rng.bit_generator.state}

    def load_state_dict(self, state: dict) -> None:
        self.capacity = state["capacity"]
        self.items = [t.clone() for t in state["items"]]
        self.rng.bit_generator.state = state["rng"]


@dataclass
class LossRecord:
    step: int
    epoch: int
    lr: float
    components: dict[str, float]
    total: float
    d_losses: dict[str, float] = field(default_factory=dict)

    def row(self) -> dict:
        return {"step": self.step, "epoch": self.epoch, "lr": self.lr, **self.components,
                "total": self.total, **self.d_losses}


def set_requires_grad(nets, flag: bool) -> None:
    for net in nets:
        if net is not None:
            for p in net.parameters():
                p.requires_grad_(flag)


def flows_to_representation(seg_out: torch.Tensor) -> torch.Tensor:
    """Segmenter output -> generator/discriminator input (prob logit -> probability)."""
    return torch.cat([seg_out[:, :2], torch.sigmoid(seg_out[:, 2:3])], dim=1)


class Trainer:
    """Owns the four networks, their optimisers and the image pools.

    ``real_images`` are training images already normalised to [0, 1]; no
    annotation is ever passed in.  Batches are a pure function of
    ``(seed, step)``, so a resumed run sees exactly the data an
    uninterrupted one would.
    """

    def __init__(self, cfg: RunConfig, real_images: Sequence[np.ndarray], device="cpu",
                 dtype: torch.dtype = torch.float32):
        if len(real_images) == 0:
            raise ValueError("no training images")
        self.cfg = cfg
        self.tc = cfg.train
        self.flags: Ablation = cfg.train.ablation
        self.real_images = list(real_images)
        self.device = torch.device(device)
        self.dtype = dtype
        crop = self.tc.crop
        self.ellipse_cfg = replace(cfg.ellipse, canvas_size=(crop, crop))
        self.augment_cfg = replace(cfg.augment, crop=crop)

        torch.manual_seed(self.tc.seed)
        gspec = replace(cfg.generator, in_channels=3, out_channels=1)
        sspec = replace(cfg.segmenter, in_channels=1, out_channels=3)
        self.G = build_generator(gspec).to(self.device, dtype)
        self.S = build_segmenter(sspec).to(self.device, dtype)
        self.D_img = self.D_seg = None
        if self.flags.adv:
            self.D_img = build_discriminator(replace(cfg.discriminator, in_channels=1)).to(self.device, dtype)
            self.D_seg = build_discriminator(replace(cfg.discriminator, in_channels=3)).to(self.device, dtype)

        betas = (self.tc.beta1, self.tc.beta2)
        adamw = dict(lr=self.tc.lr, betas=betas, weight_decay=self.tc.weight_decay)
        self.opt_gs = torch.optim.AdamW(list(self.G.parameters()) + list(self.S.parameters()), **adamw)
        self.opt_d_img = self.opt_d_seg = None
        if self.flags.adv:
            self.opt_d_img = torch.optim.AdamW(self.D_img.parameters(), **adamw)
            self.opt_d_seg = torch.optim.AdamW(self.D_seg.parameters(), **adamw)
        self.pool_img = ImagePool(self.tc.pool_size, seed=[self.tc.seed, 11])
        self.pool_seg = ImagePool(self.tc.pool_size, seed=[self.tc.seed, 12])
        self.step = 0
        self._run_dir: Path | None = None

    # -- data ---------------------------------------------------------------

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.real_images) / self.tc.batch_size)

    @property
    def total_steps(self) -> int:
        n = self.tc.epochs * self.steps_per_epoch
        return min(n, self.tc.max_steps) if self.tc.max_steps is not None else n

    def epoch_of(self, step: int) -> int:
        return step // self.steps_per_epoch

    def _tensor(self, arr: np.ndarray) -> torch.Tensor:
        return torch.as_tensor(np.ascontiguousarray(arr)).to(self.device, self.dtype)

    def make_batch(self, step: int) -> dict[str, torch.Tensor]:
        seed = self.tc.seed
        epoch = self.epoch_of(step)
        order = np.random.default_rng([seed, epoch, 0]).permutation(len(self.real_images))
        real, fl, masks, perlin, perlin_fl = [], [], [], [], []
        for b in range(self.tc.batch_size):
            k = (step % self.steps_per_epoch) * self.tc.batch_size + b
            img = self.real_images[order[k % len(order)]]
            crop, _ = augment(img, None, self.augment_cfg, [seed, step, b, 1])
            real.append(to_network(np.clip(crop, 0.0, 1.0))[None])
            m = synthesize_mask(self.ellipse_cfg, self.cfg.deform, [seed, step, b, 2], self.tc.min_mask_area)
            fl.append(encode_flows(m))
            masks.append((m > 0)[None].astype(np.float32))
            if self.flags.perlin:
                pm = synthesize_mask(self.ellipse_cfg, self.cfg.deform, [seed, step, b, 3], self.tc.min_mask_area)
                pimg = render_perlin_image(pm, self.cfg.perlin, (seed, step, b, 4))
                perlin.append(to_network(pimg)[None])
                perlin_fl.append(encode_flows(pm))
        batch = {"real_img": np.stack(real), "synth_flows": np.stack(fl), "synth_mask": np.stack(masks)}
        if self.flags.perlin:
            batch["perlin_img"] = np.stack(perlin)
            batch["perlin_flows"] = np.stack(perlin_fl)
        return {k: self._tensor(v) for k, v in batch.items()}

    # -- objective ------------------------------------------------------------

    def generator_objective(self, batch: dict[str, torch.Tensor]):
        """All G/S loss terms, each already weighted, plus tensors the
        discriminator phase needs."""
        w, flags = self.cfg.losses, self.flags
        comps: dict[str, torch.Tensor] = {}
        f = batch["synth_flows"]
        real = batch["real_img"]

        # mask -> image -> flows
        fake_img = self.G(f)
        if flags.cyc:
            comps["cyc_mask"] = w.w_cyc_mask * seg_loss(self.S(fake_img), f).total
        if flags.m2i:
            comps["m2i"] = m2i_total(batch["synth_mask"], fake_img, w)
        if flags.adv:
            comps["adv_img"] = lsgan_loss(self.D_img(fake_img), True)

        # image -> flows -> image
        rep_real = flows_to_representation(self.S(real))
        if flags.cyc:
            comps["cyc_img"] = w.w_cyc_img * F.l1_loss(self.G(rep_real), real)
        if flags.adv:
            comps["adv_seg"] = lsgan_loss(self.D_seg(rep_real), True)

        if flags.perlin:
            comps["perlin"] = w.w_perlin * seg_loss(self.S(batch["perlin_img"]), batch["perlin_flows"]).total
        return comps, {"fake_img": fake_img, "rep_real": rep_real}

    def _check_finite(self, values: dict[str, float], run_dir: Path | None) -> None:
        bad = {k: v for k, v in values.items() if not math.isfinite(v)}
        if not bad:
            return
        if run_dir is not None:
            self.save_checkpoint(Path(run_dir) / "diagnostics.ckpt", extra={"nonfinite": bad})
        raise NonFiniteLossError(f"non-finite loss at step {self.step}: {bad}")

    def update_generators(self, batch) -> tuple[dict[str, float], float, dict]:
        set_requires_grad([self.D_img, self.D_seg], False)
        self.opt_gs.zero_grad(set_to_none=True)
        comps, aux = self.generator_objective(batch)
        total = total_loss(comps)
        values = {k: float(v.detach()) for k, v in comps.items()}
        self._check_finite({**values, "total": float(total.detach())}, self._run_dir)
        total.backward()
        self.opt_gs.step()
        return values, float(total.detach()), aux

    def update_discriminators(self, batch, aux) -> dict[str, float]:
        if not self.flags.adv:
            return {}
        set_requires_grad([self.D_img, self.D_seg], True)
        out = {}
        for name, D, opt, pool, real, fake in (
            ("d_img", self.D_img, self.opt_d_img, self.pool_img, batch["real_img"], aux["fake_img"]),
            ("d_seg", self.D_seg, self.opt_d_seg, self.pool_seg, batch["synth_flows"], aux["rep_real"]),
        ):
            opt.zero_grad(set_to_none=True)
            pooled = pool.query(fake.detach())
            loss = 0.5 * (lsgan_loss(D(real), True) + lsgan_loss(D(pooled), False))
            loss.backward()
            opt.step()
            out[name] = float(loss.detach())
        self._check_finite(out, self._run_dir)
        return out

    def set_lr(self, lr: float) -> None:
        for opt in (self.opt_gs, self.opt_d_img, self.opt_d_seg):
            if opt is not None:
                for group in opt.param_groups:
                    group["lr"] = lr

    def train_step(self, batch=None) -> LossRecord:
        epoch = self.epoch_of(self.step)
        lr = lr_at(epoch, self.tc)
        self.set_lr(lr)
        if batch is None:
            batch = self.make_batch(self.step)
        self.G.train()
        self.S.train()
        comps, total, aux = self.update_generators(batch)
        d_losses = self.update_discriminators(batch, aux)
        rec = LossRecord(self.step, epoch, lr, comps, total, d_losses)
        self.step += 1
        return rec

    # -- checkpoints ----------------------------------------------------------

    def state_dict(self) -> dict:
        nets = {"G": self.G, "S": self.S, "D_img": self.D_img, "D_seg": self.D_seg}
        opts = {"gs": self.opt_gs, "d_img": self.opt_d_img, "d_seg": self.opt_d_seg}
        return {
            "version": __version__,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.hash(),
            "step": self.step,
            "epoch": self.epoch_of(self.step),
            "nets": {k: v.state_dict() for k, v in nets.items() if v is not None},
            "optimizers": {k: v.state_dict() for k, v in opts.items() if v is not None},
            "pools": {"img": self.pool_img.state_dict(), "seg": self.pool_seg.state_dict()},
            "torch_rng": torch.get_rng_state(),
            "dtype": str(self.dtype),
        }

    def save_checkpoint(self, path, extra: dict | None = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        state = self.state_dict()
        if extra:
            state.update(extra)
        tmp = path.with_name(path.name + f".{os.getpid()}.tmp")
        torch.save(state, tmp)
        os.replace(tmp, path)
        return path

    def load_state_dict(self, state: dict) -> None:
        if state["config_hash"] != self.cfg.hash():
            log.warning("checkpoint config hash %s differs from run config %s",
                        state["config_hash"], self.cfg.hash())
        nets = {"G": self.G, "S": self.S, "D_img": self.D_img, "D_seg": self.D_seg}
        for k, net in nets.items():
            if net is not None:
                net.load_state_dict(state["nets"][k])
        opts = {"gs": self.opt_gs, "d_img": self.opt_d_img, "d_seg": self.opt_d_seg}
        for k, opt in opts.items():
            if opt is not None:
                opt.load_state_dict(state["optimizers"][k])
        self.pool_img.load_state_dict(state["pools"]["img"])
        self.pool_seg.load_state_dict(state["pools"]["seg"])
        torch.set_rng_state(state["torch_rng"])
        self.step = int(state["step"])

    @classmethod
    def from_checkpoint(cls, path, real_images, device="cpu") -> "Trainer":
        state = load_checkpoint(path)
        dtype = getattr(torch, state.get("dtype", "torch.float32").replace("torch.", ""))
        trainer = cls(config_from_dict(state["config"]), real_images, device=device, dtype=dtype)
        trainer.load_state_dict(state)
        return trainer

    # -- full run -------------------------------------------------------------

    def fit(self, run_dir, on_record: Callable[[LossRecord], None] | None = None) -> list[LossRecord]:
        """Train until the schedule (or ``max_steps``) is exhausted.

        Writes ``losses.csv``, ``manifest.json`` and checkpoints every
        ``select_every`` epochs plus ``checkpoints/last.ckpt``.
        """
        run_dir = Path(run_dir)
        ckpt_dir = run_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        self._run_dir = run_dir
        write_manifest(run_dir, self.cfg, n_train_images=len(self.real_images))
        csv_path = run_dir / "losses.csv"
        records: list[LossRecord] = []
        fieldnames = None
        mode = "a" if self.step > 0 and csv_path.exists() else "w"
        with open(csv_path, mode, newline="") as fh:
            writer = None
            t0 = time.perf_counter()
            while self.step < self.total_steps:
                rec = self.train_step()
                records.append(rec)
                row = rec.row()
                if writer is None:
                    fieldnames = list(row)
                    writer = csv.DictWriter(fh, fieldnames=fieldnames)
                    if mode == "w":
                        writer.writeheader()
                writer.writerow(row)
                if on_record is not None:
                    on_record(rec)
                end_of_epoch = self.step % self.steps_per_epoch == 0
                if end_of_epoch:
                    epoch_done = self.step // self.steps_per_epoch
                    fh.flush()
                    if epoch_done % self.tc.select_every == 0 or self.step >= self.total_steps:
                        self.save_checkpoint(ckpt_dir / f"epoch_{epoch_done:04d}.ckpt")
                    log.info("epoch %d done, step %d, total %.4f (%.1fs)", epoch_done, self.step,
                             rec.total, time.perf_counter() - t0)
            self.save_checkpoint(ckpt_dir / "last.ckpt")
        return records


def load_checkpoint(path) -> dict:
    return torch.load(path, map_location="cpu", weights_only=False)


def write_manifest(run_dir: Path, cfg: RunConfig, **extra) -> None:
    manifest = {
        "version": __version__,
        "config_hash": cfg.hash(),
        "seed": cfg.train.seed,
        "ablation": dataclasses.asdict(cfg.train.ablation),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "config": cfg.to_dict(),
        **extra,
    }
    (Path(run_dir) / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))


# ---------------------------------------------------------------------------
# segmenter export / loading
# ---------------------------------------------------------------------------

def export_segmenter(checkpoint, out_path) -> Path:
    """Write a weights-only file for standalone inference."""
    state = load_checkpoint(checkpoint)
    spec = state["config"]["segmenter"]
    torch.save({"kind": "segmenter", "spec": spec, "state_dict": state["nets"]["S"],
                "epoch": state.get("epoch"), "config_hash": state.get("config_hash")}, out_path)
    return Path(out_path)


def load_segmenter(path) -> Segmenter:
    state = load_checkpoint(path)
    if state.get("kind") == "segmenter":
        spec, weights = state["spec"], state["state_dict"]
    else:
        spec, weights = state["config"]["segmenter"], state["nets"]["S"]
    spec = SegmenterSpec(**spec)
    dtype = next(iter(weights.values())).dtype
    net = Segmenter(spec).to(dtype)
    net.load_state_dict(weights)
    net.eval()
    return net


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def _taper(n: int) -> np.ndarray:
    # blending weight for overlapping tiles, never exactly zero
    x = np.linspace(-1.0, 1.0, n)
    return 1.0 / (1.0 + np.exp((np.abs(x) - 0.8) * 20.0)) + 1e-3


def _forward(net: Segmenter, image: np.ndarray) -> np.ndarray:
    """Run ``net`` on a [-1, 1] image of any size by reflect-padding to the
    network's size multiple."""
    factor = 2 ** (net.spec.depth - 1)
    H, W = image.shape
    ph, pw = (-H) % factor, (-W) % factor
    padded = np.pad(image, ((0, ph), (0, pw)), mode="reflect") if (ph or pw) else image
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        out = net(torch.as_tensor(np.ascontiguousarray(padded), dtype=dtype)[None, None])
    return out[0, :, :H, :W].double().numpy()


def predict_flows(image01: np.ndarray, net: Segmenter, tile: int | None = None,
                  overlap: float = 0.1) -> np.ndarray:
    """Flows and foreground probability for a [0, 1] image, shape (3, H, W).

    With ``tile`` set, the image is processed in overlapping square tiles
    whose outputs are blended with a smooth taper.
    """
    net.eval()
    x = to_network(image01)
    H, W = x.shape
    if tile is None or (tile >= H and tile >= W):
        out = _forward(net, x)
    else:
        tile = min(tile, H, W)
        step = max(int(tile * (1.0 - overlap)), 1)
        ys = sorted(set(list(range(0, H - tile + 1, step)) + [H - tile]))
        xs = sorted(set(list(range(0, W - tile + 1, step)) + [W - tile]))
        acc = np.zeros((3, H, W))
        wsum = np.zeros((H, W))
        wt = np.outer(_taper(tile), _taper(tile))
        for y0 in ys:
            for x0 in xs:
                o = _forward(net, x[y0:y0 + tile, x0:x0 + tile])
                acc[:, y0:y0 + tile, x0:x0 + tile] += o * wt
                wsum[y0:y0 + tile, x0:x0 + tile] += wt
        out = acc / wsum
    out[2] = 1.0 / (1.0 + np.exp(-out[2]))
    return out


def infer(image: np.ndarray, net: Segmenter, decode_cfg: DecodeConfig | None = None,
          normalize: bool = True, tile: int | None = None, overlap: float = 0.1) -> np.ndarray:
    """Instance labels for one image: normalise, run S, sigmoid, decode."""
    img = normalize_percentile(image) if normalize else np.clip(image, 0.0, 1.0)
    flows = predict_flows(img, net, tile=tile, overlap=overlap)
    return decode_flows(flows, decode_cfg or DecodeConfig())


# ---------------------------------------------------------------------------
# model selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CheckpointRef:
    path: Path | None
    epoch: int


_EPOCH_RE = re.compile(r"epoch_(\d+)")


def list_checkpoints(run_dir) -> list[CheckpointRef]:
    """Selection checkpoints under ``run_dir`` (recursively), sorted by epoch."""
    refs = []
    for p in sorted(Path(run_dir).rglob("epoch_*.ckpt")):
        m = _EPOCH_RE.search(p.name)
        refs.append(CheckpointRef(p, int(m.group(1))))
    return sorted(refs, key=lambda r: (r.epoch, str(r.path)))


def expand_dihedral(pairs: Sequence[tuple[np.ndarray, np.ndarray]]):
    """8 rotation/flip variants of each (image, mask) pair."""
    out = []
    for img, mask in pairs:
        out += list(zip(dihedral(img), dihedral(mask)))
    return out


def default_predictor(decode_cfg: DecodeConfig | None = None):
    def factory(ref: CheckpointRef):
        net = load_segmenter(ref.path)
        return lambda image: infer(image, net, decode_cfg, normalize=False)
    return factory


def select_model(checkpoints: Sequence[CheckpointRef], val_pairs, predictor_factory=None,
                 expected_pairs: int = 10):
    """Pick the checkpoint with the best mean JAC over tau in [0.5, 0.95].

    Every validation pair is expanded to its 8 dihedral variants.  Ties go
    to the later epoch.  Returns ``(best, {epoch: score})``.
    """
    if not val_pairs:
        raise ValueError("model selection needs at least one annotated pair")
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    if len(val_pairs) != expected_pairs:
        log.warning("selection subset has %d pairs, expected %d", len(val_pairs), expected_pairs)
    if len(checkpoints) == 1:
        return checkpoints[0], {}
    factory = predictor_factory or default_predictor()
    evals = expand_dihedral(val_pairs)
    scores: dict[int, float] = {}
    best, best_score = None, -np.inf
    for ref in sorted(checkpoints, key=lambda r: r.epoch):
        predict = factory(ref)
        preds = [predict(img) for img, _ in evals]
        score = jaccard_sweep(preds, [m for _, m in evals])["jac_mean"]
        scores[ref.epoch] = score
        if score >= best_score:
            best, best_score = ref, score
    return best, scores
