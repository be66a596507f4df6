"""Training: masked squared-error loss, Adam, checkpointed runs and ablations."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import __version__, ops
from .checkpoint import save_model
from .data import stream_seed
from .metrics import evaluate
from .network import FusionScheme, build
from .tensor import Tensor, backward, no_grad, precision

log = logging.getLogger(__name__)


class NumericalFailure(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    weight_decay: float = 1e-6
    lr_halving_period_iters: int = 2000
    batch_size: int = 8
    max_iters: int = 10000
    seed: int = 0
    precision: str = "float32"
    mean_loss: bool = True  # per-valid-pixel mean instead of the plain sum
    checkpoint_every: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self):
        if self.lr0 < 0 or self.weight_decay < 0:
            raise ValueError("learning rate and weight decay must be non-negative")
        if self.lr_halving_period_iters <= 0 or self.batch_size <= 0 or self.max_iters < 0:
            raise ValueError("period, batch size and iteration budget must be positive")

    def lr_at(self, iteration):
        return self.lr0 * 0.5 ** (iteration // self.lr_halving_period_iters)

    def to_text(self):
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())


def masked_mse_loss(pred, gt, mask, mean=False):
    """Sum (or mean) of squared errors over valid pixels.

    ``gt`` and ``mask`` are plain arrays; only ``pred`` carries gradients.
    """
    gt = np.asarray(getattr(gt, "data", gt))
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or mask.shape != gt.shape:
        raise ValueError(f"shapes differ: pred {pred.shape}, gt {gt.shape}, mask {mask.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("empty validity mask")
    m = mask.astype(pred.dtype)
    diff = ops.mul(ops.sub(pred, gt.astype(pred.dtype)), m)
    loss = ops.sum(ops.square(diff))
    if mean:
        loss = ops.mul(loss, 1.0 / count)
    return loss


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    skipped: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state, config, iteration):
    """One Adam update with L2 weight decay folded into the gradient.

    A step whose gradients contain NaN/inf is skipped (and counted).
    Returns True if the parameters were updated.
    """
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(params, grads)]
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.skipped += 1
        log.warning("non-finite gradient at iteration %d; step skipped", iteration)
        return False
    state.step += 1
    t = state.step
    lr = config.lr_at(iteration)
    b1, b2, eps, wd = config.beta1, config.beta2, config.adam_eps, config.weight_decay
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if wd:
            g = g + wd * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)
    return True


def predict(model, image, sparse, batch_size=8):
    """Eval-mode dense prediction (N, 1, H, W) as a numpy array."""
    model.eval()
    outs = []
    with no_grad():
        for i in range(0, image.shape[0], batch_size):
            outs.append(model(Tensor(image[i:i + batch_size]), Tensor(sparse[i:i + batch_size])).data)
    return np.concatenate(outs, axis=0)


def evaluate_model(model, dataset, batch_size=8):
    pred = predict(model, dataset.image, dataset.sparse, batch_size)
    return evaluate(pred, dataset.gt, dataset.gt > 0)


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)  # (iteration, loss, lr)
    checkpoints: list = field(default_factory=list)
    metrics: object = None
    skipped_steps: int = 0


def run_header(seed, config_text):
    import hashlib

    digest = hashlib.sha256(config_text.encode()).hexdigest()[:12]
    return f"# guidedconv {__version__} seed={seed} config_hash={digest}\n"


def train(model, dataset, config, run_dir=None, val=None, progress=None):
    """Train ``model`` in place.

    With ``run_dir`` set, writes ``config.txt``, ``loss.csv`` (iter,loss,lr),
    ``checkpoints/iter_N.gdc1`` and ``metrics_val.txt``.  A non-finite loss
    aborts with :class:`NumericalFailure`, leaving earlier checkpoints intact.
    """
    config.validate()
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    ckpt_dir = None
    loss_fh = None
    if run_dir is not None:
        ckpt_dir = os.path.join(run_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)
        cfg_text = model.config.to_text() + config.to_text()
        with open(os.path.join(run_dir, "config.txt"), "w", encoding="utf-8") as fh:
            fh.write(run_header(config.seed, cfg_text))
            fh.write(cfg_text)
        loss_fh = open(os.path.join(run_dir, "loss.csv"), "w", encoding="utf-8", newline="\n")
        loss_fh.write("iter,loss,lr\n")

    result = TrainResult()
    params = model.parameters()
    state = AdamState.zeros_like(params)
    order_rng = np.random.default_rng(stream_seed(config.seed, "data-order"))
    n = len(dataset)
    bs = min(config.batch_size, n)
    order = np.empty(0, dtype=np.int64)
    pos = 0
    last_ckpt = None
    try:
        with precision(config.precision):
            for it in range(config.max_iters):
                if pos + bs > order.size:
                    order = order_rng.permutation(n)
                    pos = 0
                idx = np.sort(order[pos:pos + bs])
                pos += bs
                image, sparse, gt = dataset.batch(idx)
                dtype = params[0].dtype
                model.train()
                pred = model(Tensor(image.astype(dtype)), Tensor(sparse.astype(dtype)))
                loss = masked_mse_loss(pred, gt, gt > 0, mean=config.mean_loss)
                value = float(loss.data)
                lr = config.lr_at(it)
                if not math.isfinite(value):
                    raise NumericalFailure(f"non-finite loss at iteration {it}", last_ckpt)
                result.losses.append((it, value, lr))
                if loss_fh is not None:
                    loss_fh.write(f"{it},{value!r},{lr!r}\n")
                model.zero_grad()
                backward(loss)
                adam_step(params, [p.grad for p in params], state, config, it)
                if progress is not None:
                    progress(it, value)
                done = it + 1
                if ckpt_dir is not None and config.checkpoint_every and done % config.checkpoint_every == 0:
                    last_ckpt = os.path.join(ckpt_dir, f"iter_{done}.gdc1")
                    save_model(last_ckpt, model)
                    result.checkpoints.append(last_ckpt)
    finally:
        if loss_fh is not None:
            loss_fh.close()
    result.skipped_steps = state.skipped
    if ckpt_dir is not None and (not result.checkpoints or not result.checkpoints[-1].endswith(f"iter_{config.max_iters}.gdc1")):
        last_ckpt = os.path.join(ckpt_dir, f"iter_{config.max_iters}.gdc1")
        save_model(last_ckpt, model)
        result.checkpoints.append(last_ckpt)
    if val is not None:
        result.metrics = evaluate_model(model, val, config.batch_size)
        if run_dir is not None:
            with open(os.path.join(run_dir, "metrics_val.txt"), "w", encoding="utf-8") as fh:
                fh.write(result.metrics.to_text())
            with open(os.path.join(run_dir, "metrics_val.json"), "w", encoding="utf-8") as fh:
                fh.write(result.metrics.to_json() + "\n")
    return result


@dataclass
class AblationRow:
    scheme: FusionScheme
    rmse_mm: float
    mae_mm: float
    irmse_per_km: float
    imae_per_km: float
    seeds: tuple = ()
    per_seed_rmse_mm: tuple = ()


def run_ablation(schemes, net_config, train_config, train_data, val_data, seeds=None, run_root=None,
                 progress=None):
    """Train every scheme with identical seeds, data order and budget.

    Metrics are averaged over ``seeds`` (default: just ``train_config.seed``);
    rows come back sorted by RMSE.
    """
    schemes = [FusionScheme.parse(s) for s in schemes]
    if len(schemes) < 2:
        raise ValueError("an ablation needs at least two schemes")
    seeds = tuple(seeds) if seeds is not None else (train_config.seed,)
    rows = []
    for i, scheme in enumerate(schemes):
        per_seed = []
        for seed in seeds:
            cfg = replace(net_config, fusion=scheme)
            model = build(cfg, seed=stream_seed(seed, "init"))
            tcfg = replace(train_config, seed=seed)
            run_dir = None if run_root is None else os.path.join(run_root, f"{i:02d}_{scheme.value}", f"seed{seed}")
            res = train(model, train_data, tcfg, run_dir=run_dir, val=val_data,
                        progress=None if progress is None else (lambda it, v, s=scheme, sd=seed: progress(s, sd, it, v)))
            per_seed.append(res.metrics)
        rows.append(AblationRow(scheme,
                                float(np.mean([m.rmse_mm for m in per_seed])),
                                float(np.mean([m.mae_mm for m in per_seed])),
                                float(np.mean([m.irmse_per_km for m in per_seed])),
                                float(np.mean([m.imae_per_km for m in per_seed])),
                                seeds,
                                tuple(m.rmse_mm for m in per_seed)))
    rows.sort(key=lambda r: r.rmse_mm)
    return rows


def format_ablation(rows):
    lines = [f"{'scheme':12s} {'RMSE':>10s} {'MAE':>10s} {'iRMSE':>8s} {'iMAE':>8s}"]
    for r in rows:
        lines.append(f"{r.scheme.value:12s} {r.rmse_mm:10.2f} {r.mae_mm:10.2f} {r.irmse_per_km:8.2f} {r.imae_per_km:8.2f}")
    return "\n".join(lines)
