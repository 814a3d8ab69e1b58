"""Adam, learning-rate schedules, pre-training and two-stage test-time inference."""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor_autodiff as ad
from .tensor_autodiff import Tape, Tensor
from .fields import FieldArch, HyperPrior, init_hyper_params, init_latent
from .losses import LossWeights, loss_inference, loss_pretrain
from .render import RenderOptions


# -------------------------------------------------------------------- adam

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    nonfinite: int = 0

    @classmethod
    def zeros_like(cls, params, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(state: AdamState, params: list, grads: list, lr) -> list:
    """One bias-corrected Adam update. ``lr`` is a scalar or one value per group.

    A non-finite gradient skips the whole step (moments and step count untouched).
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state disagree in group count")
    lrs = list(lr) if isinstance(lr, (list, tuple)) else [lr] * len(params)
    for p, g, m, l in zip(params, grads, state.m, lrs):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        if not l > 0:
            raise ValueError("learning rate must be positive")
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.nonfinite += 1
        warnings.warn("non-finite gradient; Adam step skipped")
        return [p.copy() for p in params]
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    out = []
    for i, (p, g, l) in enumerate(zip(params, grads, lrs)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        mhat = state.m[i] / (1 - b1 ** t)
        vhat = state.v[i] / (1 - b2 ** t)
        out.append(p - l * mhat / (np.sqrt(vhat) + state.eps))
    return out


# ---------------------------------------------------------------- schedule

@dataclass
class Schedule:
    initial_lr: float
    total_epochs: int
    decay_epochs: tuple = ()
    decay_factor: float = 0.5

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError("decay epochs must be strictly increasing")
        if self.decay_epochs and self.decay_epochs[-1] >= self.total_epochs:
            raise ValueError("decay epochs must precede the last epoch")
        if self.initial_lr <= 0 or self.total_epochs < 0:
            raise ValueError("invalid schedule")

    def lr(self, epoch: int) -> float:
        n = sum(1 for e in self.decay_epochs if e <= epoch)
        return self.initial_lr * self.decay_factor ** n

    def scaled(self, divisor: int) -> "Schedule":
        """Shrink the epoch budget keeping decay points at the same fractions."""
        total = max(1, self.total_epochs // divisor)
        decays = tuple(sorted({max(1, e // divisor) for e in self.decay_epochs if e // divisor < total}))
        return Schedule(self.initial_lr, total, decays, self.decay_factor)


PAPER_SCHEDULES = {
    "mvs": Schedule(1e-4, 3000, (1000, 1500, 2000)),
    "sdf": Schedule(1e-3, 1000),
    "pc": Schedule(5e-3, 1500),
}


# -------------------------------------------------------------- run config

@dataclass
class RunConfig:
    task: str = "sdf"
    weights: LossWeights = field(default_factory=LossWeights)
    z_schedule: Schedule = field(default_factory=lambda: PAPER_SCHEDULES["sdf"])
    theta_schedule: Schedule | None = None
    stage1_iters: int | None = None
    stage2_iters: int | None = None
    patience: int = 200
    min_delta: float = 1e-5
    seed: int = 0
    deterministic: bool = True
    alternating: bool = False
    samples_per_iter: int = 4096
    render: RenderOptions = field(default_factory=RenderOptions)
    z_init_std: float = 0.01

    def __post_init__(self):
        if self.theta_schedule is None:
            self.theta_schedule = self.z_schedule
        total = self.z_schedule.total_epochs
        if self.stage1_iters is None:
            self.stage1_iters = total // 3
        if self.stage2_iters is None:
            self.stage2_iters = total - self.stage1_iters
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **kw) -> "RunConfig":
        return replace(self, **kw)


def preset_config(task: str, preset: str = "paper", **overrides) -> RunConfig:
    """Paper schedules, or the desk preset with epoch budgets divided by ten."""
    if task not in PAPER_SCHEDULES:
        raise ValueError(f"unknown task {task!r}")
    sched = PAPER_SCHEDULES[task]
    if preset == "desk":
        sched = sched.scaled(10)
    elif preset != "paper":
        raise ValueError(f"unknown preset {preset!r}")
    return RunConfig(task=task, z_schedule=sched, **overrides)


@dataclass
class PretrainConfig:
    task: str = "sdf"
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: Schedule = field(default_factory=lambda: Schedule(1e-3, 1000))
    batch_size: int = 8
    samples_per_shape: int = 2048
    seed: int = 0
    render: RenderOptions = field(default_factory=RenderOptions)
    code_init_std: float = 0.01

    def to_dict(self) -> dict:
        return asdict(self)


def theta_hash(theta: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(theta, dtype="<f8").tobytes()).hexdigest()


# ---------------------------------------------------------------- pretrain

def _finite(x: float) -> bool:
    return math.isfinite(x)


def pretrain(dataset: list, arch: FieldArch, config: PretrainConfig, prior: HyperPrior | None = None,
             log=None) -> HyperPrior:
    """Auto-decoder training of theta and one code per shape; freezes theta0 at the end.

    ``dataset`` is a list of ``(shape_id, observation)`` pairs.
    """
    if not dataset:
        raise ValueError("pretrain needs at least one shape")
    rng = np.random.default_rng(config.seed)
    prior = prior.clone() if prior is not None else HyperPrior.initialize(arch, config.seed)
    theta = prior.theta.copy()
    codes = np.stack([prior.codebook.get(sid, init_latent(arch.latent_dim, rng, config.code_init_std))
                      for sid, _ in dataset])
    state = AdamState.zeros_like([theta, codes])
    sched = config.schedule
    bad = 0
    history = []
    for epoch in range(sched.total_epochs):
        lr = sched.lr(epoch)
        order = rng.permutation(len(dataset))
        epoch_total, comps = 0.0, {}
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = [dataset[i][1].subsample(config.samples_per_shape, rng)
                     if config.task != "mvs" else dataset[i][1] for i in idx]
            with Tape():
                th = Tensor(theta, requires_grad=True)
                cb = Tensor(codes, requires_grad=True)
                total, rep = loss_pretrain(config.task, batch, arch, th, ad.index_select(cb, idx, axis=0),
                                           config.weights, config.render, rng)
                g_th, g_cb = ad.backward(total, [th, cb])
            theta, codes = adam_step(state, [theta, codes], [g_th, g_cb], lr)
            epoch_total += rep.total
            for k, v in rep.components.items():
                comps[k] = comps.get(k, 0.0) + v
        bad = bad + 1 if not _finite(epoch_total) else 0
        if bad >= 2:
            raise FloatingPointError(f"pretraining diverged: non-finite loss in epochs {epoch - 1} and {epoch}")
        record = {"epoch": epoch, "lr": lr, "total": epoch_total, "components": comps}
        history.append(record)
        if log is not None:
            log(record)
    prior.theta = theta
    prior.freeze()
    prior.codebook = {sid: codes[i].copy() for i, (sid, _) in enumerate(dataset)}
    prior.history = history
    return prior


# ------------------------------------------------------------------- infer

@dataclass
class InferResult:
    z: np.ndarray
    theta: np.ndarray
    history: list
    best_loss: float
    stage_best: dict
    nonfinite_steps: int = 0


def _observation_batch(obs, config: RunConfig, rng):
    if config.task == "sdf":
        return obs.subsample(config.samples_per_iter, rng)
    return obs


def _run_stage(stage: int, iters: int, start_iter: int, obs, arch, theta, z, theta0, config: RunConfig,
               rng, update_theta: bool, use_theta_term: bool, history, log):
    """Adam on z (and theta when ``update_theta``); returns best-so-far (loss, z, theta)."""
    params = [z, theta] if update_theta else [z]
    state = AdamState.zeros_like(params)
    best = (math.inf, z.copy(), theta.copy())
    since_best = 0
    for it in range(iters):
        gi = start_iter + it
        lrs = [config.z_schedule.lr(gi)] + ([config.theta_schedule.lr(gi)] if update_theta else [])
        batch = _observation_batch(obs, config, rng)
        with Tape():
            zt = Tensor(z, requires_grad=True)
            tt = Tensor(theta, requires_grad=update_theta)
            total, rep = loss_inference(config.task, batch, arch, tt, zt, theta0, config.weights,
                                        config.render, rng, use_theta_term=use_theta_term)
            grads = ad.backward(total, [zt, tt] if update_theta else [zt])
        record = {"iter": gi, "stage": stage, "lr": lrs[0], **rep.to_dict()}
        history.append(record)
        if log is not None:
            log(record)
        if rep.total < best[0] - config.min_delta:
            best, since_best = (rep.total, z.copy(), theta.copy()), 0
        else:
            if rep.total < best[0]:
                best = (rep.total, z.copy(), theta.copy())
            since_best += 1
            if since_best >= config.patience:
                break
        if update_theta and config.alternating:
            # even iterations move z, odd iterations move theta
            mask = [gi % 2 == 0, gi % 2 == 1]
            grads = [g if m else np.zeros_like(g) for g, m in zip(grads, mask)]
        new = adam_step(state, params, list(grads), lrs)
        z = new[0]
        if update_theta:
            theta = new[1]
        params = [z, theta] if update_theta else [z]
    return best, state.nonfinite


def infer(obs, prior: HyperPrior, config: RunConfig, persist: bool = False, log=None,
          z_init: np.ndarray | None = None) -> InferResult:
    """Stage 1 fits z with theta at theta0; stage 2 fits (z, theta) jointly.

    The caller's prior is untouched unless ``persist`` is set.
    """
    if prior.theta0 is None:
        raise ValueError("prior has no theta0; freeze it after pre-training")
    arch = prior.arch
    rng = np.random.default_rng(config.seed)
    z0 = init_latent(arch.latent_dim, rng, config.z_init_std) if z_init is None else np.array(z_init, float)
    theta0 = prior.theta0.copy()
    history: list = []
    if config.stage1_iters == 0 and config.stage2_iters == 0:
        warnings.warn("no inference iterations requested; returning the initial code")
        return InferResult(z0, theta0, history, math.nan, {})
    (l1, z1, _), bad1 = _run_stage(1, config.stage1_iters, 0, obs, arch, theta0, z0, theta0, config, rng,
                                   False, True, history, log)
    if config.stage1_iters == 0:
        z1 = z0
    (l2, z2, t2), bad2 = _run_stage(2, config.stage2_iters, config.stage1_iters, obs, arch, theta0.copy(),
                                    z1.copy(), theta0, config, rng, True, True, history, log)
    if l2 <= l1 and config.stage2_iters > 0:
        z_best, t_best, best = z2, t2, l2
    else:
        z_best, t_best, best = z1, theta0, l1
    if persist:
        prior.theta = t_best.copy()
    return InferResult(z_best, t_best, history, best, {"stage1": l1, "stage2": l2}, bad1 + bad2)


def infer_random_init(obs, arch: FieldArch, config: RunConfig, log=None) -> InferResult:
    """Joint (z, theta) optimization from freshly initialized theta without the consistency term.

    Uses the combined stage budget so the comparison with :func:`infer` is iteration-matched.
    """
    rng = np.random.default_rng(config.seed)
    theta = init_hyper_params(arch, np.random.default_rng(config.seed + 7919))
    z0 = init_latent(arch.latent_dim, rng, config.z_init_std)
    history: list = []
    iters = config.stage1_iters + config.stage2_iters
    if iters == 0:
        warnings.warn("no inference iterations requested; returning the initial code")
        return InferResult(z0, theta, history, math.nan, {})
    (best, z, t), bad = _run_stage(2, iters, 0, obs, arch, theta, z0, None, config, rng, True, False,
                                   history, log)
    return InferResult(z, t, history, best, {"stage2": best}, bad)
