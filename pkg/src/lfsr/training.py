"""Losses, the three training procedures and the evaluation grid.

Every random choice (epoch shuffles, crop offsets) is drawn from
``derive_rng(seed, "batches", epoch)`` where ``epoch`` counts within a phase,
so an epoch's batches depend only on the config and the epoch index. That
makes checkpoint resume bit-identical without storing generator state, and
makes a GAN run with a frozen chance-level discriminator see exactly the
batches of the corresponding SRResNet run.
"""

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from lfsr import models as Mo
from lfsr import tensor as T
from lfsr.baselines import b_nld
from lfsr.degradation import DegradeConfig, degrade
from lfsr.metrics import aggregate, coverage, detection_grade, psnr, SampleMetrics, ssim
from lfsr.optim import AdamState, adam_step, NonFiniteGradient
from lfsr.phantom_io import is_validation, load_tensors, save_tensors
from lfsr.rng import derive_rng
from lfsr.tensor import Tensor, backward

DATA_RANGE = 2.0


class TrainingError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossWeights:
    w_mse: float = 1.0
    w_vgg: float = 1.0
    w_adv: float = 1.0

    def __post_init__(self):
        ws = (self.w_mse, self.w_vgg, self.w_adv)
        if min(ws) < 0 or max(ws) <= 0:
            raise TrainingError(f"loss weights must be >= 0 with at least one > 0, got {ws}")


@dataclass(frozen=True)
class TrainConfig:
    epochs_ld: int = 100
    epochs_srresnet: int = 350
    epochs_gan_pretrain: int = 50
    epochs_gan: int = 300
    batch_size: int = 4
    lr: float = 1e-4
    lr_ld: float = 1e-3
    lr_decay_ld: float = 0.85  # per-epoch multiplicative decay of the detector learning rate
    lr_d: float | None = None  # None: same as lr
    d_steps: int = 1  # discriminator updates per generator update
    seed: int = 0
    scale: int = 2
    sigma: float = 0.0
    desk_scale_factor: int = 1
    # architectures (desk-sized defaults; the builders default to the full sizes)
    ld_channels: int = 8
    ld_stages: int = 3
    sr_blocks: int = 4
    sr_channels: int = 16
    global_skip: bool = True
    zero_last: bool = True
    d_channels: int = 16
    # data
    roi_size: int = 32
    crop: str = "random"  # "random" | "roi" | "whole"
    margin: float = 1.25
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        for k in ("epochs_ld", "epochs_srresnet", "epochs_gan_pretrain", "epochs_gan"):
            if getattr(self, k) < 0:
                raise TrainingError(f"{k} must be >= 0")
        for k in ("batch_size", "desk_scale_factor", "d_steps", "roi_size", "ld_channels", "ld_stages",
                  "sr_channels", "d_channels"):
            if getattr(self, k) < 1:
                raise TrainingError(f"{k} must be positive")
        if not 0 < self.lr_decay_ld <= 1:
            raise TrainingError("lr_decay_ld must lie in (0, 1]")
        if not (self.lr > 0 and self.lr_ld > 0) or (self.lr_d is not None and not self.lr_d > 0):
            raise TrainingError("learning rates must be > 0")
        if self.scale not in (2, 4):
            raise TrainingError(f"scale must be 2 or 4, got {self.scale}")
        if self.crop not in ("random", "roi", "whole"):
            raise TrainingError(f"unknown crop mode {self.crop!r}")
        if self.margin < 1.0:
            raise TrainingError("margin must be >= 1")

    def epochs(self, which):
        """Epoch count after desk scaling; a nonzero schedule never drops to zero."""
        n = getattr(self, f"epochs_{which}")
        return 0 if n == 0 else max(1, n // self.desk_scale_factor)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def degrade_config(self, sigma=None):
        return DegradeConfig(scale=self.scale, sigma=self.sigma if sigma is None else sigma, seed=self.seed,
                             data_range=DATA_RANGE)


# ------------------------------------------------------------------ losses

def _check_prob(t, what):
    d = t.data
    if not np.all((d >= 0.0) & (d <= 1.0)):
        raise TrainingError(f"{what} must lie in [0, 1]")


def perceptual_loss(sr, hr, perceptual):
    with T.no_grad():
        target = perceptual(T.as_tensor(hr).detach())
    return T.mse_loss(perceptual(sr), target)


def loss_generator(sr, hr, d_out_on_sr, perceptual, w: LossWeights, parts=None):
    """w_mse * MSE(sr, hr) + w_vgg * MSE(phi(sr), phi(hr)) - w_adv * mean(D(sr)).

    Zero-weighted terms are not built at all. ``parts`` (a dict) receives the
    unweighted term values.
    """
    sr, hr = T.as_tensor(sr), T.as_tensor(hr)
    if sr.shape != hr.shape:
        raise T.ShapeError(f"loss_generator: sr {sr.shape} vs hr {hr.shape}")
    terms = []
    mse = T.mse_loss(sr, hr)
    if parts is not None:
        parts["mse"] = mse.item()
    if w.w_mse:
        terms.append(T.scale(mse, w.w_mse))
    if w.w_vgg:
        vgg = perceptual_loss(sr, hr, perceptual)
        terms.append(T.scale(vgg, w.w_vgg))
        if parts is not None:
            parts["vgg"] = vgg.item()
    if d_out_on_sr is not None:
        d_out_on_sr = T.as_tensor(d_out_on_sr)
        _check_prob(d_out_on_sr, "discriminator output")
        adv = T.mean(d_out_on_sr)
        if parts is not None:
            parts["adv"] = adv.item()
        if w.w_adv:
            terms.append(T.scale(adv, -w.w_adv))
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def loss_discriminator(d_out_on_hr, d_out_on_sr):
    """1 - mean(D(hr)) - mean(1 - D(sr)): -1 for a perfect discriminator, 0 at chance."""
    d_hr, d_sr = T.as_tensor(d_out_on_hr), T.as_tensor(d_out_on_sr)
    _check_prob(d_hr, "D(hr)")
    _check_prob(d_sr, "D(sr)")
    return T.sub(T.sub(1.0, T.mean(d_hr)), T.sub(1.0, T.mean(d_sr)))


def d_accuracy(d_hr, d_sr):
    """Thresholded fraction of correctly classified HR and SR inputs."""
    correct = np.count_nonzero(np.asarray(d_hr) > 0.5) + np.count_nonzero(np.asarray(d_sr) < 0.5)
    return correct / (np.size(d_hr) + np.size(d_sr))


def _finite(value, what):
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite {what}: {value}")
    return value


def _adam(params, opt, what):
    try:
        adam_step(params, opt)
    except NonFiniteGradient as e:
        raise DivergenceError(f"{what}: {e}") from None


# ------------------------------------------------------------------ data

@dataclass
class Pair:
    id: int
    hr: np.ndarray
    lr: np.ndarray
    target: np.ndarray  # normalized margin box (cx, cy, h, w)
    roi: Mo.RoiPrediction | None = None


def make_pairs(cfg: TrainConfig, samples, sigma=None):
    dc = cfg.degrade_config(sigma)
    out = []
    for s in samples:
        target = Mo.RoiPrediction.from_box(s.bbox, s.hr.shape, cfg.margin).vector()
        out.append(Pair(s.id, s.hr, degrade(s.hr, dc, s.id), target))
    return out


def split_pairs(pairs):
    train = [p for p in pairs if not is_validation(p.id)]
    val = [p for p in pairs if is_validation(p.id)]
    if not train:
        raise TrainingError("empty training set")
    return train, val


def attach_rois(pairs, ld):
    """Detector ROIs for every pair (ground-truth boxes when ``ld`` is None)."""
    if ld is None:
        for p in pairs:
            p.roi = Mo.RoiPrediction.from_vector(p.target)
        return pairs
    with T.no_grad():
        for i in range(0, len(pairs), 16):
            chunk = pairs[i : i + 16]
            for p, roi in zip(chunk, Mo.predict_rois(ld, np.stack([p.lr for p in chunk]))):
                p.roi = roi
    return pairs


def sr_batch(cfg, batch, rng):
    """(lr, hr) arrays shaped (B, 1, h, w) for the configured crop mode."""
    s, k = cfg.scale, cfg.roi_size
    xs, ys = [], []
    for p in batch:
        if cfg.crop == "whole":
            xs.append(p.lr)
            ys.append(p.hr)
            continue
        hh, ww = p.lr.shape
        if k > hh or k > ww:
            raise TrainingError(f"roi_size {k} exceeds LR image {hh}x{ww}")
        if cfg.crop == "random":
            r0, c0 = int(rng.integers(0, hh - k + 1)), int(rng.integers(0, ww - k + 1))
        else:
            r0, c0 = Mo.roi_origin(p.roi, (hh, ww), k)
        xs.append(p.lr[r0 : r0 + k, c0 : c0 + k])
        ys.append(p.hr[r0 * s : (r0 + k) * s, c0 * s : (c0 + k) * s])
    return np.stack(xs)[:, None], np.stack(ys)[:, None]


def batches(items, batch_size, rng):
    order = rng.permutation(len(items))
    return [[items[j] for j in order[i : i + batch_size]] for i in range(0, len(items), batch_size)]


def predict_sr(g, lr):
    """Generator inference on one (H, W) LR image."""
    mode = g.mode
    g.eval()
    try:
        with T.no_grad():
            return g(Tensor(np.asarray(lr)[None, None])).data[0, 0]
    finally:
        g.mode = mode


def val_mse(g, val, cfg=None):
    """Held-out MSE on whole images, or on the ROI crops when ``cfg.crop == "roi"``."""
    if not val:
        return math.nan
    if cfg is not None and cfg.crop == "roi":
        crops = [sr_batch(cfg, [p], None) for p in val]
        return float(np.mean([np.mean((predict_sr(g, x[0, 0]) - y[0, 0]) ** 2) for x, y in crops]))
    return float(np.mean([np.mean((predict_sr(g, p.lr) - p.hr) ** 2) for p in val]))


def ld_val_loss(ld, val):
    if not val:
        return math.nan
    with T.no_grad():
        rois = Mo.predict_rois(ld, np.stack([p.lr for p in val]))
    return float(np.mean([np.mean((r.vector() - p.target) ** 2) for r, p in zip(rois, val)]))


# ------------------------------------------------------------------ sessions and checkpoints

@dataclass
class TrainResult:
    nets: dict
    curves: dict
    epochs_done: int
    completed: bool

    def __getitem__(self, k):
        return self.nets[k]


class _Session:
    """Networks, optimizer states and curves for one training run."""

    def __init__(self, kind, cfg, nets, opts, checkpoint_dir=None, log=None):
        self.kind = kind
        self.cfg = cfg
        self.nets = nets
        self.opts = opts
        self.curves = {}
        self.epoch = 0
        self.dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.log = log or (lambda msg: None)

    def record(self, key, value):
        self.curves.setdefault(key, []).append(float(value))

    def save(self):
        if self.dir is None:
            return
        self.dir.mkdir(parents=True, exist_ok=True)
        arrays = {}
        for name, net in self.nets.items():
            arrays.update({f"{name}/{k}": v for k, v in net.state_arrays().items()})
        for name, opt in self.opts.items():
            for k in opt.m:
                arrays[f"opt.{name}/m/{k}"] = opt.m[k]
                arrays[f"opt.{name}/v/{k}"] = opt.v[k]
        save_tensors(self.dir / "state.lftb.tmp", arrays)
        meta = {"kind": self.kind, "epoch": self.epoch, "config": self.cfg.to_dict(), "config_hash": self.cfg.hash(),
                "opt_t": {k: o.t for k, o in self.opts.items()}, "curves": self.curves,
                "manifests": {k: n.manifest() for k, n in self.nets.items()},
                "modes": {k: n.mode for k, n in self.nets.items()},
                "rng": "per-epoch streams derived from (seed, 'batches', epoch)"}
        (self.dir / "meta.json.tmp").write_text(json.dumps(meta))
        (self.dir / "state.lftb.tmp").replace(self.dir / "state.lftb")
        (self.dir / "meta.json.tmp").replace(self.dir / "meta.json")

    def restore(self):
        """Load the checkpoint if one exists. Returns True when resumed."""
        if self.dir is None or not (self.dir / "meta.json").exists():
            return False
        meta = json.loads((self.dir / "meta.json").read_text())
        if meta["kind"] != self.kind:
            raise TrainingError(f"checkpoint is for {meta['kind']!r}, not {self.kind!r}")
        if meta["config_hash"] != self.cfg.hash():
            raise TrainingError("checkpoint config hash does not match the current config")
        arrays = load_tensors(self.dir / "state.lftb")
        for name, net in self.nets.items():
            prefix = f"{name}/"
            net.load_state_arrays({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
            net.mode = meta["modes"][name]
        for name, opt in self.opts.items():
            opt.t = meta["opt_t"][name]
            opt.m, opt.v = {}, {}
            for k, v in arrays.items():
                head = f"opt.{name}/"
                if k.startswith(head + "m/"):
                    opt.m[k[len(head) + 2:]] = v.copy()
                elif k.startswith(head + "v/"):
                    opt.v[k[len(head) + 2:]] = v.copy()
        self.curves = meta["curves"]
        self.epoch = meta["epoch"]
        return True

    def run(self, phases, stop_after=None):
        """Run (name, n_epochs, epoch_fn) phases, skipping epochs already done."""
        done = 0
        for name, n, fn in phases:
            for e in range(n):
                done += 1
                if done <= self.epoch:
                    continue
                fn(name, e, derive_rng(self.cfg.seed, "batches", e))
                self.epoch = done
                self.save()
                if stop_after is not None and self.epoch >= stop_after:
                    total = sum(p[1] for p in phases)
                    return TrainResult(self.nets, self.curves, self.epoch, self.epoch >= total)
        return TrainResult(self.nets, self.curves, self.epoch, True)


def _pairs_for(cfg, dataset):
    pairs = dataset if dataset and isinstance(dataset[0], Pair) else make_pairs(cfg, dataset)
    if not pairs:
        raise TrainingError("empty dataset")
    return pairs


# ------------------------------------------------------------------ LD

def train_ld(cfg: TrainConfig, dataset, checkpoint_dir=None, stop_after=None, log=None) -> TrainResult:
    """Regress the margin-enlarged, normalized ground-truth box with an L2 loss."""
    train, val = split_pairs(_pairs_for(cfg, dataset))
    ld = Mo.build_ld(cfg.ld_channels, cfg.ld_stages, seed=cfg.seed)
    sess = _Session("ld", cfg, {"ld": ld}, {"ld": AdamState(lr=cfg.lr_ld)}, checkpoint_dir, log)
    if not sess.restore():
        sess.record("val_loss", ld_val_loss(ld, val))

    def epoch(phase, e, rng):
        ld.train()
        sess.opts["ld"].lr = cfg.lr_ld * cfg.lr_decay_ld ** e
        losses = []
        for batch in batches(train, cfg.batch_size, rng):
            x = np.stack([p.lr for p in batch])[:, None]
            y = np.stack([p.target for p in batch])
            ld.zero_grad()
            loss = T.mse_loss(ld(Tensor(x)), Tensor(y))
            losses.append(_finite(loss.item(), "LD loss"))
            backward(loss)
            _adam(ld.params, sess.opts["ld"], "LD")
        sess.record("train_loss", np.mean(losses))
        sess.record("val_loss", ld_val_loss(ld, val))
        sess.log(f"ld epoch {e + 1} loss {np.mean(losses):.6f} val {sess.curves['val_loss'][-1]:.6f}")

    res = sess.run([("train", cfg.epochs("ld"), epoch)], stop_after)
    ld.eval()
    return res


# ------------------------------------------------------------------ SRResNet

def build_generator(cfg: TrainConfig):
    return Mo.build_srresnet(cfg.sr_blocks, cfg.scale, cfg.sr_channels, seed=cfg.seed,
                             zero_last=cfg.zero_last, global_skip=cfg.global_skip)


def _mse_epoch(cfg, g, opt, train, val, sess, tag):
    def epoch(phase, e, rng):
        g.train()
        losses = []
        for batch in batches(train, cfg.batch_size, rng):
            x, y = sr_batch(cfg, batch, rng)
            g.zero_grad()
            loss = T.mse_loss(g(Tensor(x)), Tensor(y))
            losses.append(_finite(loss.item(), f"{tag} MSE"))
            backward(loss)
            _adam(g.params, opt, tag)
        sess.record(f"{phase}_loss", np.mean(losses))
        sess.record("val_mse", val_mse(g, val, cfg))
        sess.log(f"{tag} {phase} epoch {e + 1} mse {np.mean(losses):.6f} val {sess.curves['val_mse'][-1]:.6f}")

    return epoch


def train_srresnet(cfg: TrainConfig, dataset, ld=None, checkpoint_dir=None, stop_after=None, log=None) -> TrainResult:
    """Pixel-wise MSE training. ``val_mse[0]`` is the held-out MSE at initialization."""
    pairs = _pairs_for(cfg, dataset)
    if cfg.crop == "roi":
        attach_rois(pairs, ld)
    train, val = split_pairs(pairs)
    g = build_generator(cfg)
    sess = _Session("srresnet", cfg, {"g": g}, {"g": AdamState(lr=cfg.lr)}, checkpoint_dir, log)
    if not sess.restore():
        sess.record("val_mse", val_mse(g, val, cfg))
    res = sess.run([("mse", cfg.epochs("srresnet"), _mse_epoch(cfg, g, sess.opts["g"], train, val, sess, "srresnet"))],
                   stop_after)
    g.eval()
    return res


# ------------------------------------------------------------------ GAN

def d_joint(d, hr, sr):
    """D outputs for HR and SR from a single forward pass.

    Batch norm then normalises both halves with shared statistics; separate
    passes would let it cancel exactly the intensity statistics D must see.
    """
    n = hr.shape[0]
    out = d(T.concat([hr, sr], axis=0))
    return T.crop(out, (slice(0, n),)), T.crop(out, (slice(n, None),))


def gan_step(g, d, perceptual, x, y, cfg, opt_g, opt_d, train_g=True, train_d=True):
    """One batch: ``d_steps`` discriminator updates on the current SR output,
    then one generator update against the updated discriminator."""
    stats = {}
    hr = Tensor(y)
    if train_g:
        g.zero_grad()
        sr = g(Tensor(x))
    else:
        with T.no_grad():
            sr = g(Tensor(x))
    sr_fixed = sr.detach()
    for _ in range(cfg.d_steps if train_d else 0):
        d.zero_grad()
        d_hr, d_sr = d_joint(d, hr, sr_fixed)
        l_d = loss_discriminator(d_hr, d_sr)
        stats["d_loss"] = _finite(l_d.item(), "discriminator loss")
        stats["d_acc"] = d_accuracy(d_hr.data, d_sr.data)
        backward(l_d)
        _adam(d.trainable(), opt_d, "discriminator")
    if not train_d:
        with T.no_grad():
            d_hr, d_sr = d_joint(d, hr, sr_fixed)
        stats["d_loss"] = _finite(loss_discriminator(d_hr, d_sr).item(), "discriminator loss")
        stats["d_acc"] = d_accuracy(d_hr.data, d_sr.data)
    if train_g:
        d.zero_grad()
        parts = {}
        _, d_sr = d_joint(d, hr, sr)
        l_g = loss_generator(sr, hr, d_sr, perceptual, cfg.weights, parts)
        stats["g_loss"] = _finite(l_g.item(), "generator loss")
        for k, v in parts.items():
            stats[f"g_{k}"] = _finite(v, f"generator {k} term")
        backward(l_g)
        _adam(g.trainable(), opt_g, "generator")
        d.zero_grad()
    return stats


def train_gan(cfg: TrainConfig, dataset, pretrained_g=None, ld=None, d=None, train_g=True, train_d=True,
              checkpoint_dir=None, stop_after=None, max_steps=None, log=None) -> TrainResult:
    """MSE pretraining (skipped when ``pretrained_g`` is given), then alternating D/G updates.

    Curves: ``step_*`` per batch (``d_acc``, ``d_loss``, ``g_loss``, ``g_mse``, ``g_vgg``, ``g_adv``),
    ``epoch_*`` means, ``val_mse`` per epoch. ``max_steps`` caps the adversarial batches.
    """
    pairs = _pairs_for(cfg, dataset)
    if cfg.crop == "roi":
        attach_rois(pairs, ld)
    train, val = split_pairs(pairs)
    g = pretrained_g.copy() if pretrained_g is not None else build_generator(cfg)
    hr_size = cfg.roi_size * cfg.scale if cfg.crop != "whole" else train[0].hr.shape[0]
    d = d if d is not None else Mo.build_discriminator(cfg.d_channels, hr_size, seed=cfg.seed)
    perceptual = Mo.build_perceptual(seed=cfg.seed)
    opts = {"g": AdamState(lr=cfg.lr), "d": AdamState(lr=cfg.lr_d or cfg.lr)}
    sess = _Session("gan", cfg, {"g": g, "d": d}, opts, checkpoint_dir, log)
    if not sess.restore():
        sess.record("val_mse", val_mse(g, val, cfg))
    steps = [0]

    def adversarial(phase, e, rng):
        g.train() if train_g else g.eval()
        d.train() if train_d else d.eval()
        epoch_stats = {}
        for batch in batches(train, cfg.batch_size, rng):
            if max_steps is not None and steps[0] >= max_steps:
                break
            x, y = sr_batch(cfg, batch, rng)
            stats = gan_step(g, d, perceptual, x, y, cfg, opts["g"], opts["d"], train_g, train_d)
            steps[0] += 1
            for k, v in stats.items():
                sess.record(f"step_{k}", v)
                epoch_stats.setdefault(k, []).append(v)
        for k, v in epoch_stats.items():
            sess.record(f"epoch_{k}", np.mean(v))
        sess.record("val_mse", val_mse(g, val, cfg))
        sess.log(f"gan epoch {e + 1} " + " ".join(f"{k} {np.mean(v):.5f}" for k, v in sorted(epoch_stats.items())))

    phases = []
    if pretrained_g is None:
        phases.append(("pretrain", cfg.epochs("gan_pretrain"), _mse_epoch(cfg, g, opts["g"], train, val, sess, "gan")))
    phases.append(("adversarial", cfg.epochs("gan"), adversarial))
    res = sess.run(phases, stop_after)
    g.eval()
    d.eval()
    return res


# ------------------------------------------------------------------ evaluation

METHODS = ("B+NLD", "SRResNet", "GAN", "LFSR")


def evaluate_suite(methods, samples, configs, models=None, lds=None, roi_size=32, seed=0):
    """One MetricReport per (method, (scale, sigma)).

    ``models`` maps ``(method, scale)`` to a generator; ``lds`` maps scale to a
    detector (ground-truth boxes are used for scales without one). Whole-image
    methods super-resolve the full LR frame and are scored on the ROI crop;
    LFSR super-resolves the LR ROI crop only.
    """
    models, lds = models or {}, lds or {}
    for m in methods:
        if m == "B+NLD":
            continue
        for scale, _ in configs:
            if (m, scale) not in models:
                raise TrainingError(f"no model registered for method {m!r} at scale {scale}")
    reports = []
    for m in methods:
        for scale, sigma in configs:
            dc = DegradeConfig(scale=scale, sigma=sigma, seed=seed, data_range=DATA_RANGE)
            results = []
            for s in samples:
                lr = degrade(s.hr, dc, s.id)
                if scale in lds:
                    roi = Mo.predict_roi(lds[scale], lr)
                else:
                    roi = Mo.RoiPrediction.from_box(s.bbox, s.hr.shape)
                hr_crop = Mo.crop_roi(s.hr, roi, roi_size, scale)
                if m == "LFSR":
                    sr_crop = predict_sr(models[(m, scale)], Mo.crop_roi(lr, roi, roi_size))
                else:
                    full = b_nld(lr, scale, sigma, DATA_RANGE) if m == "B+NLD" else predict_sr(models[(m, scale)], lr)
                    sr_crop = Mo.crop_roi(full, roi, roi_size, scale)
                grade = detection_grade(coverage(roi.to_box(s.hr.shape), s.lesion_mask))
                results.append(SampleMetrics(psnr(sr_crop, hr_crop, DATA_RANGE), ssim(sr_crop, hr_crop, DATA_RANGE),
                                             grade, s.id))
            reports.append(aggregate(results, m, scale, sigma))
    return reports


def paired_sign_test(a, b):
    """One-sided exact sign test that ``a`` tends to exceed ``b``. Ties are dropped."""
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    wins = int(np.count_nonzero(diff > 0))
    n = wins + int(np.count_nonzero(diff < 0))
    if n == 0:
        return 1.0
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2.0 ** n


def config_with(cfg: TrainConfig, **kw):
    return replace(cfg, **kw)
