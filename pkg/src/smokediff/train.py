"""Training loop: Adam with cosine learning-rate decay over mini-batches of
(x0, condition) pairs, plus checkpointing with bit-exact resume.

Every stochastic choice (parameter init, per-sample diffusion step and noise,
per-epoch shuffling) flows from the config seed through fixed derivation
streams, so the whole loss history is a pure function of (data, config).
Checkpoints restore parameters, optimizer moments, and the noise-stream state
exactly; resuming reproduces the continuation losses bit for bit.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from smokediff import tensor as T
from smokediff.data import NormStats, read_tensor_bundle, write_tensor_bundle
from smokediff.ddpm import NoiseSchedule, make_schedule, q_sample
from smokediff.rng import Rng, derive_seed
from smokediff.unet import UNetConfig, build_unet, denoise

_PARAM_STREAM = 101
_NOISE_STREAM = 202
_SHUFFLE_STREAM = 3_000_000  # + epoch


class NonFiniteGradientError(ArithmeticError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite; carries the iteration and the last good checkpoint."""

    def __init__(self, iteration: int, checkpoint):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 8
    base_lr: float = 1e-4
    T: int = 400
    beta_start: float = 1e-4
    beta_end: float = 0.02
    seed: int = 0
    time_input: str = "integer"
    checkpoint_every: int = 0  # iterations; 0 = only at the end
    grad_clip: float | None = None  # optional global max-norm

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(params: dict, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update in place; gradients must be finite."""
    state.step += 1
    b1c = 1.0 - state.beta1**state.step
    b2c = 1.0 - state.beta2**state.step
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / b1c) / (np.sqrt(v / b2c) + state.eps)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Half-cosine decay from base_lr at step 0 to 0 at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def clip_gradients(params: dict, max_norm: float) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


@dataclass
class Checkpoint:
    params: dict
    adam: AdamState
    train_cfg: TrainConfig
    unet_cfg: UNetConfig
    stats: NormStats
    rng_state: int
    iteration: int
    n_samples: int
    total_time: float
    grid: tuple[int, int]
    loss_history: list = field(default_factory=list)  # (iteration, lr, loss)

    @property
    def sched(self) -> NoiseSchedule:
        return make_schedule(self.train_cfg.T, self.train_cfg.beta_start, self.train_cfg.beta_end)


def save_checkpoint(ckpt: Checkpoint, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": 1,
        "train": asdict(ckpt.train_cfg),
        "unet": asdict(ckpt.unet_cfg),
        "normalization": {
            "scale_ux": ckpt.stats.scale_ux,
            "scale_uy": ckpt.stats.scale_uy,
            "warnings": list(ckpt.stats.warnings),
        },
        "rng_state": ckpt.rng_state,
        "iteration": ckpt.iteration,
        "n_samples": ckpt.n_samples,
        "data": {"total_time": ckpt.total_time, "grid": list(ckpt.grid)},
        "adam": {"step": ckpt.adam.step, "beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2, "eps": ckpt.adam.eps},
    }
    # JSON keeps tuples as lists; load_checkpoint restores them.
    (out / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    write_tensor_bundle(out / "params.fdt", ckpt.params)
    adam_entries = {f"m.{k}": v for k, v in ckpt.adam.m.items()}
    adam_entries.update({f"v.{k}": v for k, v in ckpt.adam.v.items()})
    write_tensor_bundle(out / "adam.fdt", adam_entries)
    with open(out / "loss.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "lr", "loss"])
        for it, lr, loss in ckpt.loss_history:
            writer.writerow([it, repr(lr), repr(loss)])


def load_checkpoint(ckpt_dir) -> Checkpoint:
    root = Path(ckpt_dir)
    meta = json.loads((root / "config.json").read_text())
    if meta.get("format_version") != 1:
        raise ValueError(f"unsupported checkpoint format_version {meta.get('format_version')}")
    unet_raw = dict(meta["unet"])
    unet_raw["channel_mult"] = tuple(unet_raw["channel_mult"])
    unet_raw["attention_levels"] = tuple(unet_raw["attention_levels"])
    unet_cfg = UNetConfig(**unet_raw)
    train_cfg = TrainConfig(**meta["train"])
    params = {k: T.Tensor(v, requires_grad=True) for k, v in read_tensor_bundle(root / "params.fdt").items()}
    adam_raw = read_tensor_bundle(root / "adam.fdt")
    adam = AdamState(
        m={k: adam_raw[f"m.{k}"] for k in params},
        v={k: adam_raw[f"v.{k}"] for k in params},
        step=meta["adam"]["step"],
        beta1=meta["adam"]["beta1"],
        beta2=meta["adam"]["beta2"],
        eps=meta["adam"]["eps"],
    )
    norm = meta["normalization"]
    history = []
    loss_path = root / "loss.csv"
    if loss_path.exists():
        with open(loss_path, newline="") as f:
            rows = list(csv.reader(f))
        history = [(int(r[0]), float(r[1]), float(r[2])) for r in rows[1:]]
    return Checkpoint(
        params=params,
        adam=adam,
        train_cfg=train_cfg,
        unet_cfg=unet_cfg,
        stats=NormStats(norm["scale_ux"], norm["scale_uy"], tuple(norm["warnings"])),
        rng_state=meta["rng_state"],
        iteration=meta["iteration"],
        n_samples=meta["n_samples"],
        total_time=meta["data"]["total_time"],
        grid=tuple(meta["data"]["grid"]),
        loss_history=history,
    )


def train(
    samples: list,
    stats: NormStats,
    cfg: TrainConfig,
    unet_cfg: UNetConfig,
    out_dir=None,
    resume: Checkpoint | None = None,
    max_iterations: int | None = None,
) -> Checkpoint:
    """Run the full noise-prediction training loop over TrainSample pairs.

    Per iteration and per sample an independent diffusion step t is drawn
    uniformly from {1..T} and fresh Gaussian noise corrupts x0; the batch
    loss is the mean per-sample MSE between true and predicted noise.

    The cosine horizon comes from cfg.epochs; max_iterations only stops the
    loop early (an interrupted run), so a resumed run under the same config
    continues the identical trajectory.
    """
    if not samples:
        raise ValueError("empty dataset")
    sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    n = len(samples)
    if cfg.batch_size > n:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {n}")
    batches_per_epoch = n // cfg.batch_size  # drop-last batching
    total_steps = cfg.epochs * batches_per_epoch

    if resume is not None:
        if resume.n_samples != n:
            raise ValueError(f"checkpoint was trained on {resume.n_samples} samples, got {n}")
        params = resume.params
        adam = resume.adam
        rng = Rng(0)
        rng.set_state(resume.rng_state)
        iteration = resume.iteration
        history = list(resume.loss_history)
    else:
        params = build_unet(unet_cfg, derive_seed(cfg.seed, _PARAM_STREAM))
        adam = AdamState.init(params)
        rng = Rng(derive_seed(cfg.seed, _NOISE_STREAM))
        iteration = 0
        history = []

    x_shape = samples[0].x0.shape
    total_time = samples[0].cond.total_time
    grid = (x_shape[1], x_shape[2])

    def snapshot() -> Checkpoint:
        return Checkpoint(
            params=params,
            adam=adam,
            train_cfg=cfg,
            unet_cfg=unet_cfg,
            stats=stats,
            rng_state=rng.state,
            iteration=iteration,
            n_samples=n,
            total_time=total_time,
            grid=grid,
            loss_history=history,
        )

    stop_at = total_steps if max_iterations is None else min(total_steps, max_iterations)
    order = None
    order_epoch = -1
    while iteration < stop_at:
        epoch = iteration // batches_per_epoch
        if epoch != order_epoch:
            order = Rng(derive_seed(cfg.seed, _SHUFFLE_STREAM + epoch)).shuffled(n)
            order_epoch = epoch
        b = iteration % batches_per_epoch
        batch = [samples[order[b * cfg.batch_size + j]] for j in range(cfg.batch_size)]

        lr = cosine_lr(iteration, total_steps, cfg.base_lr)
        try:
            loss = None
            for sample in batch:
                t = rng.randint(1, cfg.T + 1)
                eps = rng.normal(x_shape).astype(np.float32)
                xt = q_sample(sample.x0, t, eps, sched).astype(np.float32)
                pred = denoise(params, unet_cfg, T.Tensor(xt), t, sample.cond, sched, cfg.time_input)
                term = T.mse(pred, T.Tensor(eps))
                loss = term if loss is None else T.add(loss, term)
            loss = T.scale(loss, 1.0 / cfg.batch_size)
            loss_value = loss.item()
        except T.NonFiniteError:
            loss_value = math.nan
        if not math.isfinite(loss_value):
            T.reset_tape()
            ckpt = snapshot()
            if out_dir is not None:
                save_checkpoint(ckpt, out_dir)
            raise TrainingDivergedError(iteration, ckpt)

        T.backward(loss)
        if cfg.grad_clip is not None:
            clip_gradients(params, cfg.grad_clip)
        adam_step(params, adam, lr)
        T.zero_grad(params)

        history.append((iteration, lr, loss_value))
        iteration += 1
        if cfg.checkpoint_every and out_dir is not None and iteration % cfg.checkpoint_every == 0:
            save_checkpoint(snapshot(), Path(out_dir) / "checkpoints" / f"iter_{iteration:06d}")

    ckpt = snapshot()
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir)
    return ckpt
