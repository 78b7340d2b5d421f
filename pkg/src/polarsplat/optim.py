"""Training: composite loss, Adam, the two-phase streak schedule, ESDS and pruning."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import losses, metrics
from .geometry import Pose, SonarIntrinsics
from .rasterizer import SceneGrad, rasterize_backward, render
from .scene import PARAM_NAMES, Scene, densify_esds, init_from_images
from .streak import detect_streak_rows

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """The training loss became non-finite."""


def load_defaults() -> dict:
    text = resources.files("polarsplat").joinpath("defaults.json").read_text()
    return json.loads(text)


_DEFAULTS = load_defaults()


@dataclass
class TrainConfig:
    lambda_l1: float = _DEFAULTS["lambda_l1"]
    lambda_o: float = _DEFAULTS["lambda_o"]
    lambda_size: float = _DEFAULTS["lambda_size"]
    tau_o: float = _DEFAULTS["tau_o"]
    tau_init: float = _DEFAULTS["tau_init"]
    n_init: int = _DEFAULTS["n_init"]
    init_stride: int = _DEFAULTS["init_stride"]
    n_s: int = _DEFAULTS["n_s"]
    kappa: float = _DEFAULTS["kappa"]
    n_p: int = _DEFAULTS["n_p"]
    n_g: int = _DEFAULTS["n_g"]
    esds: bool = _DEFAULTS["esds"]
    tau_prune: float = _DEFAULTS["tau_prune"]
    lr: dict = field(default_factory=lambda: dict(_DEFAULTS["lr"]))
    means_lr_final_ratio: float = _DEFAULTS["means_lr_final_ratio"]
    iterations: int = _DEFAULTS["iterations"]
    densify_interval: int = _DEFAULTS["densify_interval"]
    densify_until: int | None = _DEFAULTS["densify_until"]
    gamma: float = _DEFAULTS["gamma"]
    use_range_attenuation: bool = _DEFAULTS["use_range_attenuation"]
    seed: int = _DEFAULTS["seed"]
    log_interval: int = _DEFAULTS["log_interval"]
    eval_interval: int = _DEFAULTS["eval_interval"]

    def __post_init__(self):
        if not 0 <= self.lambda_l1 <= 1:
            raise ValueError("lambda_l1 must lie in [0, 1]")
        for name in ("n_init", "n_s", "n_p", "n_g", "iterations", "densify_interval"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        missing = set(PARAM_NAMES) - set(self.lr)
        if missing:
            raise ValueError(f"missing learning rates for {sorted(missing)}")
        if any(v <= 0 for v in self.lr.values()):
            raise ValueError("learning rates must be positive")
        if not 0 < self.means_lr_final_ratio <= 1:
            raise ValueError("means_lr_final_ratio must lie in (0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known - {"version"}
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        d = {k: v for k, v in d.items() if k in known}
        if "lr" in d:
            d["lr"] = {**_DEFAULTS["lr"], **d["lr"]}
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------- Adam

class Adam:
    """Adam with one learning rate per parameter class; moments follow scene resizes."""

    def __init__(self, scene: Scene, lr: dict, betas=(0.9, 0.999), eps=1e-15):
        self.lr = dict(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(getattr(scene, k)) for k in PARAM_NAMES}
        self.v = {k: np.zeros_like(getattr(scene, k)) for k in PARAM_NAMES}
        self.t = {k: 0 for k in PARAM_NAMES}

    def step(self, scene: Scene, grads: SceneGrad, names=PARAM_NAMES, lr_scale=None) -> None:
        lr_scale = lr_scale or {}
        for k in names:
            g = getattr(grads, k)
            self.t[k] += 1
            t = self.t[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1 ** t)
            vhat = self.v[k] / (1 - self.b2 ** t)
            lr = self.lr[k] * lr_scale.get(k, 1.0)
            getattr(scene, k)[...] -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def append(self, n: int) -> None:
        for k in PARAM_NAMES:
            pad = np.zeros((n,) + self.m[k].shape[1:])
            self.m[k] = np.concatenate([self.m[k], pad])
            self.v[k] = np.concatenate([self.v[k], pad])

    def select(self, keep) -> None:
        for k in PARAM_NAMES:
            self.m[k] = self.m[k][keep]
            self.v[k] = self.v[k][keep]


# ------------------------------------------------------------- loss

@dataclass
class StepResult:
    loss: float
    parts: losses.LossParts
    grads: SceneGrad
    bundle: object


def loss_and_grad(scene: Scene, pose: Pose, intr: SonarIntrinsics, gt, cfg: TrainConfig,
                  mask=None, apply_gain: bool = True, transmittance=None) -> StepResult:
    """Render one view, evaluate the composite loss, and backpropagate it."""
    b = render(scene, pose, intr, use_range_attenuation=cfg.use_range_attenuation,
               gamma=cfg.gamma, apply_gain=apply_gain, transmittance=transmittance)
    parts = losses.LossParts(
        l1=losses.loss_l1(b.Ihat, gt, mask),
        ssim=losses.loss_ssim(b.Ihat, gt, mask),
        opacity=losses.loss_opacity(b.Io, gt, cfg.tau_o, mask),
        size=losses.loss_size(scene),
    )
    total = losses.total_loss(parts, cfg.lambda_l1, cfg.lambda_o, cfg.lambda_size)
    g_hat = (cfg.lambda_l1 * losses.loss_l1_grad(b.Ihat, gt, mask)
             + (1 - cfg.lambda_l1) * losses.loss_ssim_grad(b.Ihat, gt, mask))
    g_io = cfg.lambda_o * losses.loss_opacity_grad(b.Io, gt, cfg.tau_o, mask)
    grads = rasterize_backward(b, scene, g_hat, g_io)
    grads.log_scales += cfg.lambda_size * losses.loss_size_grad(scene)
    return StepResult(total, parts, grads, b)


# ------------------------------------------------------------- training

@dataclass
class TrainResult:
    scene: Scene
    trace: list
    config: TrainConfig


def row_mask(image, kappa: float) -> np.ndarray:
    """Pixel mask excluding rows flagged as streaked; full mask if all rows flag."""
    rows = detect_streak_rows(image, kappa)
    mask = np.repeat(~rows[:, None], np.shape(image)[1], axis=1)
    if not mask.any():
        mask[:] = True
    return mask


def scene_extent(poses) -> float:
    c = np.array([p.translation for p in poses])
    return float(max(1.1 * np.linalg.norm(c - c.mean(0), axis=1).max(), 1.0))


def evaluate_views(scene: Scene, frames, intr: SonarIntrinsics, cfg: TrainConfig,
                   apply_gain: bool = True) -> dict:
    ps, ss = [], []
    for img, pose in frames:
        b = render(scene, pose, intr, use_range_attenuation=cfg.use_range_attenuation,
                   gamma=cfg.gamma, apply_gain=apply_gain)
        pred = np.clip(b.Ihat, 0.0, 1.0)
        ps.append(metrics.psnr(pred, img))
        ss.append(metrics.ssim(pred, img))
    return {"psnr": float(np.mean(ps)) if ps else math.nan,
            "ssim": float(np.mean(ss)) if ss else math.nan}


def train(train_frames, intr: SonarIntrinsics, cfg: TrainConfig, val_frames=(),
          scene: Scene | None = None, callback=None) -> TrainResult:
    """Optimize a scene on ``train_frames`` (pairs of image, pose).

    Phase 1 (iterations < ``n_s``) fits geometry, opacity and reflectance on
    rows not flagged as streaked, rendering without gain. Phase 2 fits only
    the streak logits on full images with the adaptive gain active.
    """
    if not train_frames:
        raise ValueError("no training frames")
    rng = np.random.default_rng(cfg.seed)
    images = [np.asarray(f[0], dtype=float) for f in train_frames]
    poses = [f[1] for f in train_frames]
    if scene is None:
        stride = max(1, cfg.init_stride)
        scene = init_from_images(images[::stride], poses[::stride], intr, cfg.tau_init, cfg.n_init)
    else:
        scene = scene.copy()
    masks = [row_mask(img, cfg.kappa) for img in images]
    opt = Adam(scene, cfg.lr)
    extent = scene_extent(poses)
    n_phase1 = max(1, min(cfg.n_s, cfg.iterations))
    phase1 = [k for k in PARAM_NAMES if k != "streak_logits"]
    densify_until = cfg.n_s if cfg.densify_until is None else min(cfg.densify_until, cfg.n_s)
    trace = []
    order: list = []
    for it in range(cfg.iterations):
        phase = 1 if it < cfg.n_s else 2
        if not order:
            order = list(rng.permutation(len(images)))
        k = int(order.pop())
        gt, pose = images[k], poses[k]
        mask = masks[k] if phase == 1 else None
        step = loss_and_grad(scene, pose, intr, gt, cfg, mask=mask, apply_gain=(phase == 2))
        if not math.isfinite(step.loss):
            raise DivergenceError(f"non-finite loss at iteration {it}")
        if phase == 1:
            # exponential decay of the position step over Phase 1
            decay = cfg.means_lr_final_ratio ** (it / n_phase1)
            opt.step(scene, step.grads, phase1, {"means": extent * decay})
            scene.quats /= np.linalg.norm(scene.quats, axis=1, keepdims=True)
        else:
            opt.step(scene, step.grads, ("streak_logits",))
        if not scene.check_finite():
            raise DivergenceError(f"non-finite parameters at iteration {it}")

        if (phase == 1 and cfg.densify_interval > 0 and it > 0
                and it % cfg.densify_interval == 0 and it < densify_until):
            if cfg.esds:
                loss_img = np.abs(step.bundle.Ihat - gt) * mask
                n_before = len(scene)
                scene = densify_esds(scene, loss_img, pose, intr, cfg.n_p, cfg.n_g,
                                     rng_seed=int(rng.integers(2 ** 63)), intensity_image=gt)
                opt.append(len(scene) - n_before)
            # pruning runs on the densification schedule with or without ESDS
            keep = scene.opacities >= cfg.tau_prune
            if not keep.all():
                scene = scene.select(keep)
                opt.select(keep)

        last = it == cfg.iterations - 1
        if (cfg.log_interval and it % cfg.log_interval == 0) or last:
            row = {"iteration": it, "phase": phase, "loss": step.loss,
                   "l1": step.parts.l1, "ssim": step.parts.ssim,
                   "opacity": step.parts.opacity, "size": step.parts.size,
                   "n_gaussians": len(scene), "val_psnr": None, "val_ssim": None}
            if val_frames and ((cfg.eval_interval and it % cfg.eval_interval == 0) or last):
                ev = evaluate_views(scene, val_frames, intr, cfg, apply_gain=(phase == 2))
                row["val_psnr"], row["val_ssim"] = ev["psnr"], ev["ssim"]
            trace.append(row)
            log.debug("it %d loss %.5f n=%d", it, step.loss, len(scene))
        if callback is not None:
            callback(it, scene, step)
    return TrainResult(scene, trace, cfg)


TRACE_COLUMNS = ("iteration", "phase", "loss", "l1", "ssim", "opacity", "size",
                 "n_gaussians", "val_psnr", "val_ssim")


def write_trace_csv(trace, path) -> None:
    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return repr(v)
        return str(v)
    lines = [",".join(TRACE_COLUMNS)]
    lines += [",".join(fmt(row.get(c)) for c in TRACE_COLUMNS) for row in trace]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
