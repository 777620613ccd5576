"""Frame sampling, multi-view score averaging, the AdamW + warmup/cosine
optimizer, a temporal-order-sensitive synthetic dataset, and the toy
training loop.

Sampling protocols follow the "frames x stride" notation: dense sampling
takes ``n`` frames at a fixed stride from a window placed inside the video
(clip starts evenly spaced over the feasible range, a single clip
centered), while uniform sampling picks one frame per equal temporal
segment.  Multi-clip/multi-crop testing averages softmax scores over all
views.

Everything here is deterministic given the seeds: sampling, drop-path,
shuffling, and evaluation order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .model import UniformerModel
from .nn import Parameter
from .tensor import Tensor


# ----------------------------------------------------------------------
# sampling plans


@dataclass(frozen=True)
class View:
    """One (clip, crop) combination with its frame indices."""

    clip: int
    crop: int
    frames: tuple[int, ...]


@dataclass
class SamplingPlan:
    video_len: int
    protocol: str
    params: dict
    views: list[View] = field(default_factory=list)

    def validate(self):
        if not self.views:
            raise ValueError("sampling plan has no views")
        for v in self.views:
            for idx in v.frames:
                if not 0 <= idx < self.video_len:
                    raise ValueError(f"frame index {idx} outside video of length {self.video_len}")
            if any(b < a for a, b in zip(v.frames, v.frames[1:])):
                raise ValueError(f"frame indices not non-decreasing: {v.frames}")
        return self

    def frame_lists(self) -> list[list[int]]:
        return [list(v.frames) for v in self.views]

    def with_crops(self, num_crops: int) -> "SamplingPlan":
        """Cross every clip with ``num_crops`` spatial crops."""
        if num_crops < 1:
            raise ValueError(f"num_crops must be >= 1, got {num_crops}")
        views = [
            View(v.clip, crop, v.frames) for v in self.views for crop in range(num_crops)
        ]
        params = dict(self.params, num_crops=num_crops)
        return SamplingPlan(self.video_len, self.protocol, params, views)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def dense_sample(video_len: int, frames: int, stride: int, num_clips: int = 1) -> SamplingPlan:
    """Fixed-stride clips; short videos repeat the last frame.

    The clip span is (frames - 1) * stride + 1.  A single clip is centered;
    ``k`` clips start at round(i * slack / (k - 1)) for i in 0..k-1, which
    includes both endpoints.  Indices beyond the video clamp to the last
    frame, so any video_len >= 1 yields a valid plan.
    """
    if video_len < 1:
        raise ValueError(f"video_len must be >= 1, got {video_len}")
    if frames < 1 or stride < 1 or num_clips < 1:
        raise ValueError(
            f"frames, stride, num_clips must be >= 1, got {frames}, {stride}, {num_clips}"
        )
    span = (frames - 1) * stride + 1
    slack = max(video_len - span, 0)
    if num_clips == 1:
        starts = [slack // 2]
    else:
        starts = [_round_half_up(i * slack / (num_clips - 1)) for i in range(num_clips)]
    views = []
    for clip_id, start in enumerate(starts):
        idx = tuple(min(start + j * stride, video_len - 1) for j in range(frames))
        views.append(View(clip_id, 0, idx))
    params = dict(frames=frames, stride=stride, num_clips=num_clips)
    return SamplingPlan(video_len, "dense", params, views).validate()


def uniform_sample(
    video_len: int, segments: int, mode: str = "center", seed: int | None = None
) -> SamplingPlan:
    """One frame per equal temporal segment (segment-based sampling).

    ``center`` picks each segment's middle frame, floor((2i+1)*L/(2*n));
    ``random`` picks uniformly inside each segment, reproducibly for a
    given seed.
    """
    if video_len < 1:
        raise ValueError(f"video_len must be >= 1, got {video_len}")
    if segments < 1:
        raise ValueError(f"segments must be >= 1, got {segments}")
    if mode not in ("center", "random"):
        raise ValueError(f"mode must be 'center' or 'random', got {mode!r}")
    if mode == "center":
        idx = tuple(((2 * i + 1) * video_len) // (2 * segments) for i in range(segments))
    else:
        rng = np.random.default_rng(seed)
        idx = []
        for i in range(segments):
            lo = (i * video_len) // segments
            hi = max(lo, ((i + 1) * video_len) // segments - 1)
            idx.append(int(rng.integers(lo, hi + 1)))
        idx = tuple(idx)
    params = dict(segments=segments, mode=mode, seed=seed)
    return SamplingPlan(video_len, "uniform", params, [View(0, 0, idx)]).validate()


# ----------------------------------------------------------------------
# spatial views (resize + square crops) for evaluation


def resize_shorter(video: np.ndarray, target: int) -> np.ndarray:
    """Bilinear resize of [C, T, H, W] so the shorter spatial side is
    ``target``, preserving aspect ratio."""
    if video.ndim != 4:
        raise ValueError(f"expected [C, T, H, W], got {video.shape}")
    c, t, h, w = video.shape
    if target < 1:
        raise ValueError(f"target must be >= 1, got {target}")
    scale = target / min(h, w)
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    if (nh, nw) == (h, w):
        return video

    def axis_weights(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = pos - lo
        return lo, hi, frac

    ylo, yhi, yf = axis_weights(h, nh)
    xlo, xhi, xf = axis_weights(w, nw)
    yf = yf.reshape(1, 1, -1, 1)
    xf = xf.reshape(1, 1, 1, -1)
    top = video[:, :, ylo][:, :, :, xlo] * (1 - xf) + video[:, :, ylo][:, :, :, xhi] * xf
    bot = video[:, :, yhi][:, :, :, xlo] * (1 - xf) + video[:, :, yhi][:, :, :, xhi] * xf
    return top * (1 - yf) + bot * yf


def square_crops(video: np.ndarray, crop_size: int, num_crops: int) -> list[np.ndarray]:
    """1 crop: center.  3 crops: start / center / end along the longer
    spatial axis, centered on the shorter one."""
    c, t, h, w = video.shape
    if crop_size > min(h, w):
        raise ValueError(f"crop size {crop_size} exceeds spatial extent {h}x{w}")
    if num_crops not in (1, 3):
        raise ValueError(f"num_crops must be 1 or 3, got {num_crops}")
    out = []
    if num_crops == 1:
        offsets = [((h - crop_size) // 2, (w - crop_size) // 2)]
    else:
        long_axis_h = h >= w
        slack = (h if long_axis_h else w) - crop_size
        fixed = ((w if long_axis_h else h) - crop_size) // 2
        positions = [0, slack // 2, slack]
        offsets = [(p, fixed) if long_axis_h else (fixed, p) for p in positions]
    for oy, ox in offsets:
        out.append(video[:, :, oy : oy + crop_size, ox : ox + crop_size])
    return out


def multi_view_average(view_logits) -> np.ndarray:
    """Softmax each view's logits and average; argmax is the prediction."""
    views = [v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64) for v in view_logits]
    if not views:
        raise ValueError("multi_view_average needs at least one view")
    n = views[0].shape[-1]
    for v in views:
        if v.ndim != 1 or v.shape[0] != n:
            raise ValueError(f"views must share one class axis; got {v.shape} vs ({n},)")
    scores = np.zeros(n, dtype=np.float64)
    for v in views:
        e = np.exp(v - v.max())
        scores += e / e.sum()
    return scores / len(views)


# ----------------------------------------------------------------------
# learning-rate schedule and AdamW


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup to ``base_lr`` then half-cosine decay to zero."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if not 0 <= warmup_steps < total_steps:
        raise ValueError(f"warmup_steps {warmup_steps} must be < total_steps {total_steps}")
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_init(params) -> dict:
    """Fresh first/second moments and step counter for the given arrays."""
    return {
        "step": 0,
        "m": [np.zeros_like(p) for p in params],
        "v": [np.zeros_like(p) for p in params],
    }


def adamw_step(
    params,
    grads,
    state: dict,
    lr: float,
    betas=(0.9, 0.999),
    weight_decay: float = 0.0,
    eps: float = 1e-8,
    decay_mask=None,
) -> dict:
    """One decoupled-weight-decay Adam update, in place on ``params``.

    Weight decay multiplies each decaying parameter by (1 - lr * wd)
    before the bias-corrected Adam step.  ``decay_mask`` selects which
    parameters decay (all, by default); norm scales/shifts and biases are
    expected to be excluded by the caller.
    """
    b1, b2 = betas
    if len(params) != len(grads) or len(params) != len(state["m"]):
        raise ValueError(
            f"params/grads/state length mismatch: {len(params)}/{len(grads)}/{len(state['m'])}"
        )
    if decay_mask is None:
        decay_mask = [True] * len(params)
    t = state["step"] + 1
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, g, m, v, dec in zip(params, grads, state["m"], state["v"], decay_mask):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if weight_decay and dec:
            p -= lr * weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    state["step"] = t
    return state


class AdamW:
    """Optimizer over named model parameters.

    Biases and normalization scales/shifts (``Parameter.decay`` False) are
    excluded from weight decay.
    """

    def __init__(self, named_params, betas=(0.9, 0.999), weight_decay: float = 0.0, eps: float = 1e-8):
        self.items = [(name, p) for name, p in named_params]
        if not self.items:
            raise ValueError("optimizer needs at least one parameter")
        self.betas = tuple(betas)
        self.weight_decay = weight_decay
        self.eps = eps
        self.state = adamw_init([p.data for _, p in self.items])
        self.decay_mask = [isinstance(p, Parameter) and p.decay for _, p in self.items]

    def step(self, lr: float):
        params = [p.data for _, p in self.items]
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for _, p in self.items]
        adamw_step(
            params,
            grads,
            self.state,
            lr,
            self.betas,
            self.weight_decay,
            self.eps,
            self.decay_mask,
        )

    def zero_grad(self):
        for _, p in self.items:
            p.zero_grad()


# ----------------------------------------------------------------------
# train configuration


@dataclass
class TrainConfig:
    base_lr: float = 4e-3
    batch_size: int = 8
    warmup_epochs: int = 20
    total_epochs: int = 300
    weight_decay: float = 0.05
    drop_path_max: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.batch_size < 1 or self.total_epochs < 1:
            raise ValueError("batch_size and total_epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("warmup_epochs must be in [0, total_epochs)")

    @property
    def effective_lr(self) -> float:
        """Base rate linearly scaled by batch size against a reference of 32."""
        return self.base_lr * self.batch_size / 32.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = set(TrainConfig.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return TrainConfig(**d)


def load_train_config(path) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return TrainConfig.from_dict(json.load(fh))


def save_train_config(config: TrainConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2)
        fh.write("\n")


# ----------------------------------------------------------------------
# synthetic temporal dataset


@dataclass
class SyntheticDataset:
    """Clips of a bright patch moving along a class-specific direction.

    Classes come in time-reversed pairs: class 2p+1 holds the exact frame
    reversals of class 2p's clips, so per-frame content sets are identical
    within a pair and only temporal order separates them.
    """

    clips: np.ndarray  # [N, 3, T, H, W] float64
    labels: np.ndarray  # [N] int64
    num_classes: int

    def __len__(self):
        return self.clips.shape[0]

    @staticmethod
    def pair_of(label: int) -> int:
        return label ^ 1


def make_synthetic_dataset(
    num_classes: int = 4,
    clips_per_class: int = 2,
    shape=(3, 8, 32, 32),
    seed: int = 0,
) -> SyntheticDataset:
    if num_classes < 2 or num_classes % 2 != 0:
        raise ValueError(f"num_classes must be even and >= 2, got {num_classes}")
    if clips_per_class < 1:
        raise ValueError(f"clips_per_class must be >= 1, got {clips_per_class}")
    c, t, h, w = shape
    if c != 3 or t < 2:
        raise ValueError(f"shape must be (3, T>=2, H, W), got {shape}")
    rng = np.random.default_rng(seed)
    pairs = num_classes // 2
    yy, xx = np.mgrid[0:h, 0:w]
    sigma = min(h, w) / 10.0

    clips, labels = [], []
    for p in range(pairs):
        angle = math.pi * p / pairs
        direction = np.array([math.sin(angle), math.cos(angle)])  # (dy, dx)
        color = 0.5 + 0.5 * rng.random(3)
        for _ in range(clips_per_class):
            # travel through the frame center with a perpendicular offset
            center = np.array([h / 2, w / 2])
            perp = np.array([-direction[1], direction[0]])
            offset = perp * rng.uniform(-0.15, 0.15) * min(h, w)
            start = center - direction * 0.35 * min(h, w) + offset
            stop = center + direction * 0.35 * min(h, w) + offset
            frames = np.empty((c, t, h, w), dtype=np.float64)
            for ti in range(t):
                pos = start + (stop - start) * (ti / (t - 1))
                blob = np.exp(-((yy - pos[0]) ** 2 + (xx - pos[1]) ** 2) / (2 * sigma**2))
                noise = rng.normal(0.0, 0.05, size=(c, h, w))
                frames[:, ti] = color.reshape(3, 1, 1) * blob + noise
            clips.append(frames)
            labels.append(2 * p)
            clips.append(frames[:, ::-1].copy())
            labels.append(2 * p + 1)
    order = np.argsort(np.asarray(labels), kind="stable")
    return SyntheticDataset(
        clips=np.stack(clips)[order],
        labels=np.asarray(labels, dtype=np.int64)[order],
        num_classes=num_classes,
    )


# ----------------------------------------------------------------------
# toy training loop


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over the batch."""
    b, n = logits.shape
    onehot = np.zeros((b, n), dtype=logits.data.dtype)
    onehot[np.arange(b), labels] = 1.0
    return (logits.log_softmax(axis=1) * Tensor(onehot)).sum() * (-1.0 / b)


@dataclass
class TrainStep:
    step: int
    lr: float
    loss: float
    acc: float

    def line(self) -> str:
        return f"{self.step},{self.lr:.8g},{self.loss:.8g},{self.acc:.6g}"


@dataclass
class TrainLog:
    steps: list[TrainStep] = field(default_factory=list)
    eval_history: list[tuple[int, float]] = field(default_factory=list)
    final_accuracy: float = 0.0
    reached_full_at: int | None = None

    def lines(self):
        return [s.line() for s in self.steps]


def _shuffle_frames(batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Independently permute the time axis of every clip."""
    out = np.empty_like(batch)
    t = batch.shape[2]
    for i in range(batch.shape[0]):
        out[i] = batch[i][:, rng.permutation(t)]
    return out


def evaluate_accuracy(
    model: UniformerModel,
    clips: np.ndarray,
    labels: np.ndarray,
    batch_size: int = 8,
    frame_shuffle_rng: np.random.Generator | None = None,
    passes: int = 1,
) -> float:
    """Eval-mode accuracy over the full set, optionally with the time axis
    of every clip freshly shuffled each pass (temporal-order control)."""
    was_training = model.training
    model.eval()
    correct = 0
    total = 0
    try:
        for _ in range(passes):
            for lo in range(0, clips.shape[0], batch_size):
                batch = clips[lo : lo + batch_size]
                if frame_shuffle_rng is not None:
                    batch = _shuffle_frames(batch, frame_shuffle_rng)
                logits = model(Tensor(batch)).data
                correct += int((logits.argmax(axis=1) == labels[lo : lo + batch_size]).sum())
                total += batch.shape[0]
    finally:
        model.train(was_training)
    return correct / total


def train_toy(
    model: UniformerModel,
    dataset: SyntheticDataset,
    config: TrainConfig,
    log_path=None,
    shuffle_frames: bool = False,
    eval_every: int = 10,
    stop_at_full_accuracy: bool = False,
) -> TrainLog:
    """Cross-entropy training with AdamW and the warmup+cosine schedule.

    Deterministic for a fixed seed: iteration order, drop-path draws, and
    any frame shuffling all derive from ``config.seed``.  A non-finite
    loss aborts with the failing step index.  The log carries one
    ``step,lr,loss,acc`` record per step.
    """
    n = len(dataset)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.total_epochs * steps_per_epoch
    warmup_steps = config.warmup_epochs * steps_per_epoch

    rng = np.random.default_rng(config.seed)
    model.train()
    model.set_drop_path(config.drop_path_max)
    model.seed_stochastic(config.seed + 1)
    optimizer = AdamW(
        model.named_parameters(), betas=config.betas, weight_decay=config.weight_decay
    )
    eval_rng = np.random.default_rng(config.seed + 2)

    log = TrainLog()
    step = 0
    done = False
    for _epoch in range(config.total_epochs):
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            if idx.size == 0:
                continue
            batch = dataset.clips[idx]
            if shuffle_frames:
                batch = _shuffle_frames(batch, rng)
            labels = dataset.labels[idx]
            logits = model(Tensor(batch))
            loss = cross_entropy(logits, labels)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise RuntimeError(f"non-finite loss at step {step}")
            lr = lr_at(step, total_steps, warmup_steps, config.effective_lr)
            model.zero_grad()
            loss.backward()
            optimizer.step(lr)
            acc = float((logits.data.argmax(axis=1) == labels).mean())
            log.steps.append(TrainStep(step, lr, loss_val, acc))
            step += 1
            if eval_every and (step % eval_every == 0 or step == total_steps):
                shuffle_rng = (
                    np.random.default_rng(eval_rng.integers(2**32)) if shuffle_frames else None
                )
                full_acc = evaluate_accuracy(
                    model, dataset.clips, dataset.labels, config.batch_size, shuffle_rng
                )
                log.eval_history.append((step, full_acc))
                if full_acc == 1.0 and log.reached_full_at is None:
                    log.reached_full_at = step
                    if stop_at_full_accuracy:
                        done = True
                        break
        if done:
            break

    shuffle_rng = np.random.default_rng(config.seed + 3) if shuffle_frames else None
    log.final_accuracy = evaluate_accuracy(
        model,
        dataset.clips,
        dataset.labels,
        config.batch_size,
        shuffle_rng,
        passes=16 if shuffle_frames else 1,
    )
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for line in log.lines():
                fh.write(line + "\n")
    return log


# ----------------------------------------------------------------------
# multi-view video scoring


def predict_video(
    model: UniformerModel,
    video: np.ndarray,
    frames: int,
    stride: int,
    num_clips: int = 1,
    num_crops: int = 1,
    crop_size: int | None = None,
    resize_to: int | None = None,
) -> tuple[np.ndarray, SamplingPlan]:
    """Average softmax scores over dense clips x spatial crops.

    ``video`` is [3, F, H, W].  The video is optionally resized so its
    shorter side matches ``resize_to``, then square crops of ``crop_size``
    (default: the shorter side) are taken.
    """
    if video.ndim != 4:
        raise ValueError(f"expected [C, F, H, W] video, got {video.shape}")
    plan = dense_sample(video.shape[1], frames, stride, num_clips).with_crops(num_crops)
    work = video.astype(np.float64, copy=False)
    if resize_to is not None:
        work = resize_shorter(work, resize_to)
    size = crop_size if crop_size is not None else min(work.shape[2], work.shape[3])
    crops = square_crops(work, size, num_crops)
    was_training = model.training
    model.eval()
    try:
        per_view = []
        for view in plan.views:
            clip = crops[view.crop][:, list(view.frames)]
            logits = model(Tensor(clip[None]))
            per_view.append(logits.data[0])
    finally:
        model.train(was_training)
    return multi_view_average(per_view), plan
