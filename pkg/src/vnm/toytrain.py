"""Desk-scale sparse training sandbox.

A frozen random teacher defines the regression target; the student starts
from a "pretrained" base that differs from the teacher by a low-rank shift,
so dense LoRA can in principle close the gap while V:N:M masks cannot. Inputs
are correlated Gaussians with uneven channel scales, which lets retained
weights compensate for pruned ones and gives RIA's activation term something
to see.

Models are bias-free: a single linear map, or linear -> tanh -> linear.
Gradients are written out by hand and training is plain SGD in float64.

Modes:

``lora``   adapters on frozen base weights, mask schedule given by strategy A-E
``fixed``  full-parameter training of one-shot pruned weights (mask frozen)
``srste``  full-parameter SR-STE with masks refreshed every few epochs
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .core import ActivationNorms, DimensionError, SparseMask, VnmError, VnmPattern
from .importance import scores_for
from .pruner import prune_vnm

STRATEGIES = ("A", "B", "C", "D", "E")
MODES = ("lora", "fixed", "srste")
DEFAULT_FRACTIONS = (0.025, 0.025, 0.95)
EARLY_BUDGET = 0.10

DENSE, DYNAMIC, FIXED, SRSTE = "dense", "dynamic", "fixed", "srste"


# --------------------------------------------------------------------------
# task


@dataclass
class TaskData:
    x: np.ndarray  # (samples, in)
    y: np.ndarray  # (samples, out)
    base: list  # student starting weights per layer, (out_l, in_l)
    teacher: list

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        return [w.shape for w in self.base]

    def permuted(self, input_perm: np.ndarray, output_perm: np.ndarray) -> "TaskData":
        """Same task expressed in permuted channel order (single-layer tasks only)."""
        if len(self.base) != 1:
            raise VnmError("channel permutation of a task is only defined for linear tasks")
        return TaskData(
            self.x[:, input_perm],
            self.y[:, output_perm],
            [self.base[0][output_perm][:, input_perm]],
            [self.teacher[0][output_perm][:, input_perm]],
        )


@dataclass(frozen=True)
class ToyTask:
    in_features: int = 80
    out_features: int = 32
    hidden: int = 0  # 0 selects the linear model
    samples: int = 512
    seed: int = 0
    shift_rank: int = 4
    shift_scale: float = 0.5
    correlation_decay: float = 0.15

    def build(self) -> TaskData:
        rng = np.random.default_rng(self.seed)
        dims = [self.in_features, self.out_features] if not self.hidden else [
            self.in_features, self.hidden, self.out_features]
        base, teacher = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w0 = rng.standard_normal((fan_out, fan_in)) / math.sqrt(fan_in)
            u = rng.standard_normal((fan_out, self.shift_rank))
            v = rng.standard_normal((self.shift_rank, fan_in))
            shift = u @ v * (self.shift_scale / math.sqrt(fan_in * self.shift_rank))
            base.append(w0)
            teacher.append(w0 + shift)
        # correlated inputs: decaying spectrum in a random basis, uneven channel scales
        q, _ = np.linalg.qr(rng.standard_normal((self.in_features, self.in_features)))
        spectrum = np.exp(-self.correlation_decay * np.arange(self.in_features))
        mix = (q * np.sqrt(spectrum)) @ q.T
        mix /= np.sqrt(np.mean(np.sum(mix * mix, axis=0)))
        scales = rng.lognormal(0.0, 0.5, size=self.in_features)
        x = rng.standard_normal((self.samples, self.in_features)) @ mix * scales
        y = forward(teacher, x)[0]
        return TaskData(x, y, base, teacher)

    @classmethod
    def from_weights(cls, w: np.ndarray, samples: int = 512, seed: int = 0) -> TaskData:
        """Task whose teacher and base are both ``w``: recover the dense function under sparsity."""
        w = np.asarray(w, dtype=np.float64)
        out_f, in_f = w.shape
        task = cls(in_features=in_f, out_features=out_f, samples=samples, seed=seed)
        data = task.build()
        return TaskData(data.x, data.x @ w.T, [w.copy()], [w.copy()])


# --------------------------------------------------------------------------
# model maths


def forward(weights: Sequence[np.ndarray], x: np.ndarray):
    """Return (output, hidden activations or None)."""
    if len(weights) == 1:
        return x @ weights[0].T, None
    h = np.tanh(x @ weights[0].T)
    return h @ weights[1].T, h


def loss_and_grads(weights: Sequence[np.ndarray], x: np.ndarray, y: np.ndarray):
    """Mean squared error and its gradient with respect to each weight matrix."""
    out, h = forward(weights, x)
    diff = out - y
    loss = float(np.mean(diff * diff))
    d_out = 2.0 * diff / diff.size
    if h is None:
        return loss, [d_out.T @ x]
    g1 = d_out.T @ h
    d_pre = (d_out @ weights[1]) * (1.0 - h * h)
    return loss, [d_pre.T @ x, g1]


def layer_inputs(weights: Sequence[np.ndarray], x: np.ndarray) -> list[np.ndarray]:
    """Input activations seen by each layer."""
    if len(weights) == 1:
        return [x]
    return [x, np.tanh(x @ weights[0].T)]


@dataclass
class LoraLayer:
    """Frozen ``w`` plus rank-``r`` adapters; effective weight ``(w + alpha/r * b a) * mask``."""

    w: np.ndarray
    b: np.ndarray  # (out, r)
    a: np.ndarray  # (r, in)
    alpha: float = 32.0
    mask: Optional[np.ndarray] = None  # None = all true

    def __post_init__(self):
        out_f, in_f = self.w.shape
        if self.b.shape[0] != out_f or self.a.shape[1] != in_f or self.b.shape[1] != self.a.shape[0]:
            raise DimensionError(
                f"adapter shapes b{self.b.shape} a{self.a.shape} do not fit w{self.w.shape}"
            )
        if self.mask is not None and np.shape(self.mask) != self.w.shape:
            raise DimensionError("mask shape does not match w")

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def merged(self) -> np.ndarray:
        return self.w + self.scale * (self.b @ self.a)

    def adapter_grads(self, g_eff: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Gradients for (b, a) given the gradient at the effective weight."""
        gm = g_eff if self.mask is None else g_eff * self.mask
        return self.scale * gm @ self.a.T, self.scale * self.b.T @ gm


def effective_weight(layer: LoraLayer) -> np.ndarray:
    merged = layer.merged()
    return merged if layer.mask is None else merged * layer.mask


def fixed_mask_step(w_sparse: np.ndarray, grad: np.ndarray, lr: float, mask: np.ndarray) -> np.ndarray:
    """SGD on the kept weights only; pruned entries stay exactly zero."""
    if w_sparse.shape != grad.shape or w_sparse.shape != np.shape(mask):
        raise DimensionError("weights, gradient and mask shapes differ")
    return np.where(mask, w_sparse - lr * grad, 0.0)


def srste_step(
    w_dense: np.ndarray, grad: np.ndarray, mask: np.ndarray, lr: float, lam: float
) -> np.ndarray:
    """Dense update with the straight-through gradient plus decay of pruned weights.

    ``grad`` must be taken at the masked weights.
    """
    if w_dense.shape != grad.shape or w_dense.shape != np.shape(mask):
        raise DimensionError("weights, gradient and mask shapes differ")
    return w_dense - lr * (grad + lam * np.where(mask, 0.0, w_dense))


def update_mask(
    weights: np.ndarray,
    pattern: VnmPattern,
    criterion: str = "ria",
    act: Optional[ActivationNorms] = None,
    previous: Optional[np.ndarray] = None,
) -> tuple[SparseMask, int]:
    """Prune ``weights`` (already merged with any adapters) and report how many
    bits differ from ``previous`` (``None`` means the all-true mask)."""
    mask = prune_vnm(scores_for(weights.astype(np.float32), criterion, act), pattern)
    prev = np.ones(mask.shape, dtype=bool) if previous is None else previous
    return mask, int(np.count_nonzero(mask.bits != prev))


# --------------------------------------------------------------------------
# schedules


def _floor(total: int, frac: float) -> int:
    return int(math.floor(total * frac + 1e-9))


def check_fractions(fractions: Sequence[float]) -> tuple[float, float, float]:
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise VnmError(f"need three nonnegative stage fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise VnmError(f"stage fractions must sum to 1, got {sum(fractions)}")
    if fractions[0] + fractions[1] > EARLY_BUDGET + 1e-12:
        raise VnmError("dense and dynamic stages together may not exceed 10% of the iterations")
    return tuple(float(f) for f in fractions)


def three_stage_schedule(total_iters: int, fractions: Sequence[float] = DEFAULT_FRACTIONS):
    """Contiguous ``(stage, start, end)`` ranges covering ``[0, total_iters)``.

    The first two stage lengths are floored (at least one iteration each when
    the run has room for three stages); the remainder goes to the fixed stage.
    """
    f1, f2, _ = check_fractions(fractions)
    n1, n2 = _floor(total_iters, f1), _floor(total_iters, f2)
    if total_iters >= 3:
        n1 = max(n1, 1) if f1 > 0 else 0
        n2 = max(n2, 1) if f2 > 0 else 0
    return [(DENSE, 0, n1), (DYNAMIC, n1, n1 + n2), (FIXED, n1 + n2, total_iters)]


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "lora"
    strategy: str = "E"
    learning_rate: float = 1e-2
    srste_lambda: float = 2e-4
    total_iters: int = 2000
    mask_update_interval: int = 20  # iterations (lora)
    mask_update_epochs: int = 5  # epochs (srste)
    stage_fractions: tuple = DEFAULT_FRACTIONS
    early_fraction: float = 0.05  # strategy D update window
    rank: int = 16
    alpha: float = 32.0
    batch_size: int = 32
    criterion: Optional[str] = None  # default: abs for srste, ria otherwise
    ria_exponent: float = 0.5
    v: int = 16
    m: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise VnmError(f"unknown mode {self.mode!r}")
        if self.strategy not in STRATEGIES:
            raise VnmError(f"unknown strategy {self.strategy!r}")
        check_fractions(self.stage_fractions)
        object.__setattr__(self, "stage_fractions", tuple(self.stage_fractions))
        if self.total_iters < 0 or self.mask_update_interval < 1 or self.mask_update_epochs < 1:
            raise VnmError("iteration counts must be nonnegative and intervals positive")
        if self.batch_size < 1 or self.rank < 1:
            raise VnmError("batch size and rank must be positive")
        if not 0 <= self.early_fraction <= 1:
            raise VnmError("early_fraction must lie in [0, 1]")
        VnmPattern(self.v, self.m)

    @property
    def pattern(self) -> VnmPattern:
        return VnmPattern(self.v, self.m)

    @property
    def resolved_criterion(self) -> str:
        if self.criterion:
            return self.criterion
        return "abs" if self.mode == "srste" else "ria"


def lora_plan(config: TrainConfig) -> tuple[list[str], set[int]]:
    """Stage label per iteration and the iterations at which masks are recomputed."""
    total, every = config.total_iters, config.mask_update_interval
    (_, _, n1), (_, _, n2), _ = three_stage_schedule(total, config.stage_fractions)
    s = config.strategy
    if s == "A":
        labels, updates = [FIXED] * total, {0}
    elif s == "B":
        labels = [DENSE] * n1 + [FIXED] * (total - n1)
        updates = {n1}
    elif s == "C":
        labels, updates = [DYNAMIC] * total, set(range(0, max(total, 1), every))
    elif s == "D":
        early = _floor(total, config.early_fraction)
        labels = [DYNAMIC] * early + [FIXED] * (total - early)
        updates = set(range(0, max(early, 1), every))
    else:
        labels = [DENSE] * n1 + [DYNAMIC] * (n2 - n1) + [FIXED] * (total - n2)
        updates = set(range(n1, max(n2, n1 + 1), every))
    return labels, updates


# --------------------------------------------------------------------------
# training


@dataclass
class TrainRun:
    config: dict
    loss: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    mask_changed: list = field(default_factory=list)
    stage: list = field(default_factory=list)
    final_loss: float = float("nan")
    final_weights: list = field(default_factory=list)
    final_masks: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "loss": self.loss,
            "grad_norm": self.grad_norm,
            "mask_changed": self.mask_changed,
            "stage": self.stage,
            "final_loss": self.final_loss,
        }


def _batches(rng: np.random.Generator, n: int, batch: int):
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch + 1, batch):
            yield order[i : i + batch]


def _acts(weights: Sequence[np.ndarray], x: np.ndarray, exponent: float) -> list[ActivationNorms]:
    return [ActivationNorms.from_inputs(inp, exponent) for inp in layer_inputs(weights, x)]


def _check_shapes(data: TaskData, pattern: VnmPattern) -> None:
    for shape in data.layer_shapes:
        pattern.check_divisible(*shape)


def train(task, config: TrainConfig) -> TrainRun:
    """Run one training session; deterministic given the task and ``config.seed``."""
    data = task.build() if isinstance(task, ToyTask) else task
    _check_shapes(data, config.pattern)
    if config.batch_size > data.x.shape[0]:
        raise VnmError("batch size exceeds sample count")
    run = TrainRun(config=asdict(config))
    if config.mode == "lora":
        _train_lora(data, config, run)
    else:
        _train_full(data, config, run)
    run.final_loss = loss_and_grads(run.final_weights, data.x, data.y)[0]
    return run


def _train_lora(data: TaskData, cfg: TrainConfig, run: TrainRun) -> None:
    rng = np.random.default_rng(cfg.seed)
    pattern, criterion = cfg.pattern, cfg.resolved_criterion
    layers = []
    for w in data.base:
        out_f, in_f = w.shape
        a = rng.standard_normal((cfg.rank, in_f)) / math.sqrt(in_f)
        layers.append(LoraLayer(w.copy(), np.zeros((out_f, cfg.rank)), a, cfg.alpha))
    labels, updates = lora_plan(cfg)

    def refresh() -> int:
        merged = [layer.merged() for layer in layers]
        acts = _acts(merged, data.x, cfg.ria_exponent)
        changed = 0
        for layer, wm, act in zip(layers, merged, acts):
            mask, diff = update_mask(wm, pattern, criterion, act, layer.mask)
            layer.mask = mask.bits
            changed += diff
        return changed

    pending = refresh() if 0 in updates else 0
    batches = _batches(rng, data.x.shape[0], cfg.batch_size)
    for t in range(cfg.total_iters):
        if t in updates and t > 0:
            pending += refresh()
        idx = next(batches)
        loss, grads = loss_and_grads([effective_weight(l) for l in layers], data.x[idx], data.y[idx])
        sq = 0.0
        for layer, g in zip(layers, grads):
            gb, ga = layer.adapter_grads(g)
            sq += float(np.sum(gb * gb) + np.sum(ga * ga))
            layer.b = layer.b - cfg.learning_rate * gb
            layer.a = layer.a - cfg.learning_rate * ga
        run.loss.append(loss)
        run.grad_norm.append(math.sqrt(sq))
        run.mask_changed.append(pending)
        run.stage.append(labels[t])
        pending = 0
    run.final_weights = [effective_weight(l) for l in layers]
    run.final_masks = [l.mask for l in layers]


def _train_full(data: TaskData, cfg: TrainConfig, run: TrainRun) -> None:
    rng = np.random.default_rng(cfg.seed)
    pattern, criterion = cfg.pattern, cfg.resolved_criterion
    weights = [w.copy() for w in data.base]
    masks: list = [None] * len(weights)

    def refresh() -> int:
        acts = _acts(weights, data.x, cfg.ria_exponent)
        changed = 0
        for i, (w, act) in enumerate(zip(weights, acts)):
            mask, diff = update_mask(w, pattern, criterion, act, masks[i])
            masks[i] = mask.bits
            changed += diff
        return changed

    refresh()
    if cfg.mode == "fixed":
        weights = [np.where(mk, w, 0.0) for w, mk in zip(weights, masks)]
    iters_per_epoch = data.x.shape[0] // cfg.batch_size
    every = cfg.mask_update_epochs * iters_per_epoch
    batches = _batches(rng, data.x.shape[0], cfg.batch_size)
    label = FIXED if cfg.mode == "fixed" else SRSTE
    for t in range(cfg.total_iters):
        changed = 0
        if cfg.mode == "srste" and t > 0 and t % every == 0:
            changed = refresh()
        idx = next(batches)
        eff = [np.where(mk, w, 0.0) for w, mk in zip(weights, masks)]
        loss, grads = loss_and_grads(eff, data.x[idx], data.y[idx])
        if cfg.mode == "fixed":
            grads = [g * mk for g, mk in zip(grads, masks)]
            weights = [fixed_mask_step(w, g, cfg.learning_rate, mk) for w, g, mk in zip(weights, grads, masks)]
        else:
            weights = [
                srste_step(w, g, mk, cfg.learning_rate, cfg.srste_lambda)
                for w, g, mk in zip(weights, grads, masks)
            ]
        run.loss.append(loss)
        run.grad_norm.append(math.sqrt(sum(float(np.sum(g * g)) for g in grads)))
        run.mask_changed.append(changed)
        run.stage.append(label)
    run.final_weights = [np.where(mk, w, 0.0) for w, mk in zip(weights, masks)]
    run.final_masks = masks


# --------------------------------------------------------------------------
# comparisons


@dataclass
class GradNormReport:
    window: int
    fixed: list
    dynamic: list
    fixed_windows: list
    dynamic_windows: list
    fraction_dynamic_lower: float

    def to_json(self) -> dict:
        return asdict(self)

    def rows(self) -> list[dict]:
        return [
            {"window": i, "fixed_mean": f, "dynamic_mean": d}
            for i, (f, d) in enumerate(zip(self.fixed_windows, self.dynamic_windows))
        ]


def grad_norm_report(run_fixed: TrainRun, run_dynamic: TrainRun, window: int = 50) -> GradNormReport:
    """Windowed mean gradient norms and the share of windows where the
    dynamic-mask run is lower (ties count one half)."""
    f, d = list(run_fixed.grad_norm), list(run_dynamic.grad_norm)
    if not f or not d:
        raise VnmError("gradient-norm logs are empty")
    if len(f) != len(d):
        raise DimensionError(f"log lengths differ: {len(f)} vs {len(d)}")
    window = max(1, min(window, len(f)))
    fw = [float(np.mean(f[i : i + window])) for i in range(0, len(f), window)]
    dw = [float(np.mean(d[i : i + window])) for i in range(0, len(d), window)]
    score = sum(1.0 if b < a else 0.5 if b == a else 0.0 for a, b in zip(fw, dw))
    return GradNormReport(window, f, d, fw, dw, score / len(fw))


def ablate(
    strategies: Sequence[str] = STRATEGIES,
    seeds: Sequence[int] = range(5),
    base_config: Optional[TrainConfig] = None,
    task: Optional[ToyTask] = None,
    jobs: int = 1,
) -> list[dict]:
    """Final loss for every (strategy, seed); rows sorted by (strategy, seed)."""
    base_config = base_config or TrainConfig()
    task = task or ToyTask()
    work = [(s, seed) for s in strategies for seed in seeds]
    args = [(replace(task, seed=seed), replace(base_config, strategy=s, seed=seed)) for s, seed in work]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            losses = list(pool.map(_final_loss, args))
    else:
        losses = [_final_loss(a) for a in args]
    rows = [
        {"strategy": s, "seed": seed, "v": base_config.v, "m": base_config.m, "final_loss": loss}
        for (s, seed), loss in zip(work, losses)
    ]
    return sorted(rows, key=lambda r: (r["strategy"], r["seed"]))


def _final_loss(args) -> float:
    task, config = args
    return train(task, config).final_loss
