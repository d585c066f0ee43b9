"""Synthetic captioning task, momentum SGD and the training loop.

The task draws a latent class ``z``; the "image" is a fixed random embedding
of ``z`` (one ``d_image_feat`` vector per image token) plus Gaussian noise and
the caption is sampled from a ``z``-conditioned Markov chain.  Everything is
driven by explicit ``numpy.random.Generator`` objects so runs are bitwise
reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import __version__
from . import tensor as tc
from .infotheory import DiscreteSequenceModel
from .losses import VARIANTS, WeightScheme, total_loss, vista_cosine_loss, vista_l2_loss, cross_entropy
from .model import ModelConfig, MultimodalBatch, Params, forward, init_params
from .tensor import Tensor

HOLDOUT_SIZE = 1024
PROBE_SIZE = 256
# stream tags mixed into seeds so the streams never overlap
_HOLDOUT_TAG = 0x401D
_PROBE_TAG = 0x9B0E
_TRAIN_TAG = 0x7A1


class TrainingError(RuntimeError):
    def __init__(self, msg: str, last_good_step: int):
        super().__init__(f"{msg} (last good step {last_good_step})")
        self.last_good_step = last_good_step


@dataclass(frozen=True)
class TaskSpec:
    latent_size: int = 8
    vocab_size: int = 32
    text_len: int = 16
    n_image_tokens: int = 8
    d_image_feat: int = 16
    noise: float = 0.1
    concentration: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("latent_size", "vocab_size", "text_len", "n_image_tokens", "d_image_feat"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if not (math.isfinite(self.noise) and self.noise >= 0):
            raise ValueError("noise must be finite and >= 0")
        if not self.concentration > 0:
            raise ValueError("concentration must be positive")

    def model_config(self, **overrides) -> ModelConfig:
        kw = dict(
            vocab_size=self.vocab_size,
            n_image_tokens=self.n_image_tokens,
            max_text_len=self.text_len,
            d_image_feat=self.d_image_feat,
        )
        kw.update(overrides)
        return ModelConfig(**kw)


@dataclass
class Task:
    """A :class:`TaskSpec` with its frozen random tables materialized."""

    spec: TaskSpec
    caption_model: DiscreteSequenceModel
    vision: np.ndarray  # (Z, n, d_image_feat): frozen "encoder" output per class

    @classmethod
    def build(cls, spec: TaskSpec) -> Task:
        rng = np.random.default_rng(spec.seed)
        Z, V = spec.latent_size, spec.vocab_size
        a = np.full(V, spec.concentration)
        caption = DiscreteSequenceModel(
            prior=np.full(Z, 1.0 / Z),
            initial=rng.dirichlet(a, size=Z),
            transition=rng.dirichlet(a, size=(Z, V)),
            horizon=spec.text_len,
            name=f"caption-seed{spec.seed}",
        )
        vision = rng.normal(0.0, 1.0, (Z, spec.n_image_tokens, spec.d_image_feat))
        return cls(spec, caption, vision)


def _sample_categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One draw per row of ``probs`` (shape (B, V)) by inverse CDF."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0])[:, None] * cdf[:, -1:]
    return np.minimum((u >= cdf).sum(axis=-1), probs.shape[-1] - 1)


def synth_batch(task: Task, rng: np.random.Generator, count: int) -> tuple[MultimodalBatch, np.ndarray]:
    spec, cm = task.spec, task.caption_model
    z = _sample_categorical(rng, np.tile(cm.prior, (count, 1)))
    feats = task.vision[z]
    if spec.noise > 0:
        feats = feats + spec.noise * rng.normal(size=feats.shape)
    ids = np.empty((count, spec.text_len), dtype=np.int64)
    ids[:, 0] = _sample_categorical(rng, cm.initial[z])
    for k in range(1, spec.text_len):
        ids[:, k] = _sample_categorical(rng, cm.transition[z, ids[:, k - 1]])
    mask = np.ones(ids.shape, dtype=bool)
    return MultimodalBatch(feats, ids, mask), z


def holdout_set(task: Task) -> MultimodalBatch:
    return synth_batch(task, np.random.default_rng([task.spec.seed, _HOLDOUT_TAG]), HOLDOUT_SIZE)[0]


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def sgd_step(params: Params, grads: dict[str, np.ndarray], lr: float,
             velocity: dict[str, np.ndarray], momentum: float) -> tuple[Params, dict[str, np.ndarray]]:
    """Heavy-ball SGD: ``v <- mu*v + g``, ``p <- p - lr*v``.

    Returns fresh parameter tensors and velocity buffers; inputs are untouched.
    """
    if not lr >= 0:
        raise ValueError("learning rate must be >= 0")
    if not 0 <= momentum < 1:
        raise ValueError("momentum must lie in [0, 1)")
    new_params: Params = {}
    new_vel: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape:
            raise tc.DimensionError(f"gradient for {name} has shape {g.shape}, param {p.shape}")
        v = velocity.get(name)
        v = g.copy() if v is None else momentum * v + g
        new_vel[name] = v
        new_params[name] = Tensor(p.data - lr * v, requires_grad=True)
    return new_params, new_vel


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def frozen(params: Params) -> Params:
    return {k: Tensor(v.data) for k, v in params.items()}


def alignment_matrix(text_repr: np.ndarray, summary: np.ndarray) -> np.ndarray:
    """cos(x_t, S_n) for every (row, position); zero vectors give 0."""
    num = np.einsum("bmd,bd->bm", text_repr, summary)
    den = (np.maximum(np.linalg.norm(text_repr, axis=-1), 1e-12)
           * np.maximum(np.linalg.norm(summary, axis=-1), 1e-12)[:, None])
    return num / den


def eval_alignment(params: Params, cfg: ModelConfig, batches, text_source: str = "embedding"
                   ) -> tuple[float, np.ndarray]:
    """Mean cosine between supervised text representations and the image summary.

    Returns the overall mean and the per-position mean (length m).
    """
    if isinstance(batches, MultimodalBatch):
        batches = [batches]
    batches = list(batches)
    if not batches:
        raise ValueError("need at least one batch")
    p = frozen(params)
    total, count = 0.0, 0
    pos_sum = pos_cnt = None
    for batch in batches:
        out = forward(p, cfg, batch)
        sims = alignment_matrix(out.text_repr(text_source).data, out.image_summary.data)
        mask = batch.loss_mask
        total += float(sims[mask].sum())
        count += int(mask.sum())
        s = np.where(mask, sims, 0.0).sum(axis=0)
        c = mask.sum(axis=0)
        pos_sum = s if pos_sum is None else pos_sum + s
        pos_cnt = c if pos_cnt is None else pos_cnt + c
    curve = np.divide(pos_sum, pos_cnt, out=np.full(pos_sum.shape, np.nan), where=pos_cnt > 0)
    return total / count, curve


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    scheme: WeightScheme = field(default_factory=WeightScheme)
    variant: str = "l2"
    steps: int = 5000
    batch_size: int = 32
    lr: float = 3e-3
    momentum: float = 0.9
    eval_interval: int = 250
    seed: int = 0
    text_source: str = "embedding"
    vista_scale: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.steps < 1 or self.batch_size < 1 or self.eval_interval < 1:
            raise ValueError("steps, batch_size and eval_interval must be >= 1")
        if not self.lr >= 0:
            raise ValueError("learning rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.text_source not in ("embedding", "hidden"):
            raise ValueError("text_source must be 'embedding' or 'hidden'")


@dataclass
class EvalRecord:
    step: int
    ce: float
    vista: float
    total: float
    mean_alignment: float
    holdout_ce: float
    # alignment terms on the holdout set with normalized weights, for both surrogates
    holdout_vista_l2: float
    holdout_vista_cosine: float


@dataclass
class MetricsTrace:
    records: list[EvalRecord] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_jsonl(self, meta: dict | None = None) -> str:
        lines = []
        for r in self.records:
            rec = asdict(r)
            if meta:
                rec["meta"] = meta
            lines.append(json.dumps(rec, sort_keys=False, allow_nan=False))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> MetricsTrace:
        names = EvalRecord.__dataclass_fields__
        recs = []
        for line in text.splitlines():
            if line.strip():
                d = json.loads(line)
                recs.append(EvalRecord(**{k: d[k] for k in names}))
        return cls(recs)


@dataclass
class TrainResult:
    trace: MetricsTrace
    params: Params
    config: TrainConfig
    task: Task


def _evaluate(step: int, params: Params, cfg: TrainConfig, probe: MultimodalBatch,
              holdout: MultimodalBatch) -> EvalRecord:
    p = frozen(params)
    rep = total_loss(forward(p, cfg.model, probe), probe, cfg.scheme, cfg.variant,
                     cfg.text_source, cfg.vista_scale)
    out = forward(p, cfg.model, holdout)
    x = out.text_repr(cfg.text_source)
    norm = WeightScheme("normalized")
    sims = alignment_matrix(x.data, out.image_summary.data)
    return EvalRecord(
        step=step,
        ce=rep.ce,
        vista=rep.vista,
        total=rep.total,
        mean_alignment=float(sims[holdout.loss_mask].mean()),
        holdout_ce=cross_entropy(out.logits, holdout.text_ids, holdout.loss_mask).item(),
        holdout_vista_l2=vista_l2_loss(x, out.image_summary, holdout.loss_mask, norm).item(),
        holdout_vista_cosine=vista_cosine_loss(x, out.image_summary, holdout.loss_mask, norm).item(),
    )


def train(task: Task | TaskSpec, cfg: TrainConfig,
          on_eval: Callable[[EvalRecord], None] | None = None) -> TrainResult:
    """Run ``cfg.steps`` momentum-SGD updates on the composite loss.

    Metrics are logged at step 0, every ``eval_interval`` steps and after the
    final step.  ``ce``/``vista``/``total`` are measured on a fixed probe
    batch drawn from the training distribution; the rest on the holdout set.
    """
    if isinstance(task, TaskSpec):
        task = Task.build(task)
    mc = cfg.model
    ts = task.spec
    if (mc.vocab_size, mc.n_image_tokens, mc.d_image_feat) != (ts.vocab_size, ts.n_image_tokens, ts.d_image_feat) \
            or mc.max_text_len < ts.text_len:
        raise ValueError("model config does not match task")
    params = init_params(mc)
    velocity: dict[str, np.ndarray] = {}
    holdout = holdout_set(task)
    probe = synth_batch(task, np.random.default_rng([cfg.seed, _PROBE_TAG]), PROBE_SIZE)[0]
    rng = np.random.default_rng([cfg.seed, _TRAIN_TAG])
    trace = MetricsTrace()

    def log(step):
        try:
            rec = _evaluate(step, params, cfg, probe, holdout)
        except FloatingPointError as exc:
            raise TrainingError(str(exc), last_good) from None
        if not all(math.isfinite(v) for v in asdict(rec).values()):
            raise TrainingError("non-finite metric", last_good)
        trace.records.append(rec)
        if on_eval:
            on_eval(rec)

    last_good = 0
    log(0)
    for step in range(1, cfg.steps + 1):
        batch, _ = synth_batch(task, rng, cfg.batch_size)
        try:
            rep = total_loss(forward(params, mc, batch), batch, cfg.scheme, cfg.variant,
                             cfg.text_source, cfg.vista_scale)
            tc.backward(rep.loss)
        except FloatingPointError as exc:
            raise TrainingError(str(exc), last_good) from None
        grads = {k: (p.grad if p.grad is not None else np.zeros(p.shape)) for k, p in params.items()}
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingError("non-finite gradient", last_good)
        params, velocity = sgd_step(params, grads, cfg.lr, velocity, cfg.momentum)
        last_good = step
        if step % cfg.eval_interval == 0 or step == cfg.steps:
            log(step)
    return TrainResult(trace, params, cfg, task)


def metadata(config_hash: str | None = None) -> dict:
    meta = {"version": __version__}
    if config_hash:
        meta["config_hash"] = config_hash
    return meta


def with_variant(cfg: TrainConfig, variant: str, scheme: WeightScheme | None = None) -> TrainConfig:
    return replace(cfg, variant=variant, scheme=scheme or cfg.scheme)
