"""Replaced token detection: masking, generator MLM loss, sampling, discriminator loss, training.

Sign convention (pinned here and nowhere else): the discriminator output
``D(x_i) = sigmoid(w . h_i)`` is the probability that token ``i`` was
*replaced*. The per-token RTD loss is ``-log(1 - D)`` for original tokens
and ``-log D`` for replaced ones, so the anomaly score
``-mean log(1 - D)`` is the average loss of a line under the hypothesis
that none of its tokens were replaced.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import encoder as enc
from .corpus import ANOMALY
from .encoder import EncoderConfig, EncoderState, NumericError
from .preprocess import NormalizerConfig
from .tokenizer import TokenSequence, Vocabulary

PROB_FLOOR = 1e-12  # generator probabilities are clamped below before the log
D_CLAMP = 1e-7  # discriminator outputs live in [D_CLAMP, 1 - D_CLAMP]


@dataclass(frozen=True)
class ModelShape:
    layers: int
    width: int
    heads: int
    ff_mult: int = 4


PRESETS = {
    "desk": {"generator": ModelShape(2, 64, 2), "discriminator": ModelShape(4, 128, 4)},
    "paper": {"generator": ModelShape(3, 256, 4), "discriminator": ModelShape(6, 512, 8)},
}


@dataclass(frozen=True)
class TrainingConfig:
    lam: float = 50.0
    mask_prob: float = 0.15
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    epochs: int = 16
    max_steps: int | None = None
    warmup_steps: int = 50
    clip_norm: float | None = 1.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-6
    seed: int = 0
    max_len: int = 128
    generator: ModelShape = PRESETS["desk"]["generator"]
    discriminator: ModelShape = PRESETS["desk"]["discriminator"]

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("lambda must be nonnegative")
        if not 0.0 < self.mask_prob < 1.0:
            raise ValueError("mask_prob must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainingConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        d = dict(d)
        d["generator"] = ModelShape(**d["generator"])
        d["discriminator"] = ModelShape(**d["discriminator"])
        d["adam_betas"] = tuple(d.get("adam_betas", (0.9, 0.999)))
        return cls(**d)


@dataclass
class ModelBundle:
    vocab: Vocabulary
    normalizer: NormalizerConfig
    emb: np.ndarray  # shared token table, (V, discriminator width)
    generator: EncoderState
    gen_head: dict[str, np.ndarray]  # "w": (gen width, V), "b": (V,)
    discriminator: EncoderState
    disc_head: np.ndarray  # w of the sigmoid layer, (discriminator width,)
    max_len: int = 128
    steps: int = 0

    def parameters(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of every trainable tensor (arrays are shared, not copied)."""
        out = {"emb": self.emb}
        out.update({"gen." + k: v for k, v in self.generator.params.items()})
        out.update({"gen_head." + k: v for k, v in self.gen_head.items()})
        out.update({"disc." + k: v for k, v in self.discriminator.params.items()})
        out["disc_head.w"] = self.disc_head
        return out

    @property
    def dtype(self):
        return self.emb.dtype

    def astype(self, dtype) -> "ModelBundle":
        return ModelBundle(
            self.vocab, self.normalizer, self.emb.astype(dtype), self.generator.astype(dtype),
            {k: v.astype(dtype) for k, v in self.gen_head.items()}, self.discriminator.astype(dtype),
            self.disc_head.astype(dtype), self.max_len, self.steps,
        )


def encoder_configs(cfg: TrainingConfig, vocab_size: int) -> tuple[EncoderConfig, EncoderConfig]:
    d, g = cfg.discriminator, cfg.generator
    disc = EncoderConfig(d.layers, d.width, d.heads, vocab_size, d.ff_mult, cfg.max_len)
    gen = EncoderConfig(g.layers, g.width, g.heads, vocab_size, g.ff_mult, cfg.max_len, emb_dim=d.width)
    return gen, disc


def new_bundle(vocab: Vocabulary, normalizer: NormalizerConfig, cfg: TrainingConfig,
               dtype=np.float32) -> ModelBundle:
    """Fresh model; the sigmoid head starts at zero so every D is exactly 0.5."""
    gen_cfg, disc_cfg = encoder_configs(cfg, len(vocab))
    seed = cfg.seed
    rng = np.random.default_rng((seed, 1))
    emb = (rng.standard_normal((len(vocab), disc_cfg.width)) * enc.INIT_STD).astype(dtype)
    gen = enc.init(gen_cfg, seed=(seed * 1000 + 2), dtype=dtype, with_embedding=False)
    disc = enc.init(disc_cfg, seed=(seed * 1000 + 3), dtype=dtype, with_embedding=False)
    head_w = (np.random.default_rng((seed, 4)).standard_normal((gen_cfg.width, len(vocab))) * enc.INIT_STD).astype(dtype)
    return ModelBundle(vocab, normalizer, emb, gen, {"w": head_w, "b": np.zeros(len(vocab), dtype)},
                       disc, np.zeros(disc_cfg.width, dtype), cfg.max_len)


# ---------------------------------------------------------------- masking


@dataclass(frozen=True)
class MaskingPlan:
    k: int
    masked_indices: np.ndarray
    masked_sequence: np.ndarray
    originals: np.ndarray
    sequence: np.ndarray  # the unmasked input


def n_masked(n_tokens: int, mask_prob: float) -> int:
    """``max(1, round(mask_prob * N))`` with halves rounded up."""
    return min(n_tokens, max(1, int(math.floor(mask_prob * n_tokens + 0.5))))


def make_masking_plan(seq, mask_prob: float, rng: np.random.Generator, mask_id: int) -> MaskingPlan:
    ids = seq.array() if isinstance(seq, TokenSequence) else np.asarray(seq, dtype=np.int64)
    n = len(ids)
    if n < 1:
        raise ValueError("cannot mask an empty sequence")
    k = n_masked(n, mask_prob)
    idx = np.sort(rng.choice(n, size=k, replace=False))
    masked = ids.copy()
    masked[idx] = mask_id
    return MaskingPlan(k, idx, masked, ids[idx].copy(), ids)


def pad_batch(seqs: Sequence[np.ndarray], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to the longest sequence; returns (ids, pad_mask) with True at pads."""
    n = max(len(s) for s in seqs)
    ids = np.full((len(seqs), n), pad_id, dtype=np.int64)
    pad = np.ones((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        pad[i, :len(s)] = False
    return ids, pad


# ---------------------------------------------------------------- generator


@dataclass(frozen=True)
class CorruptedSequence:
    ids: np.ndarray
    replaced_flags: np.ndarray  # bool per position: corrupt token != original


def _masked_rows(plans):
    b = np.concatenate([np.full(p.k, i) for i, p in enumerate(plans)])
    pos = np.concatenate([p.masked_indices for p in plans])
    return b, pos


def _generator_forward(bundle: ModelBundle, plans: Sequence[MaskingPlan], keep_cache=False):
    ids, pad = pad_batch([p.masked_sequence for p in plans], bundle.vocab.pad_id)
    out = enc.forward(bundle.generator, ids, pad, emb=bundle.emb, keep_cache=keep_cache)
    h, cache = out if keep_cache else (out, None)
    b, pos = _masked_rows(plans)
    hm = h[b, pos]
    logits = hm @ bundle.gen_head["w"] + bundle.gen_head["b"]
    # [PAD] and [MASK] never occur as originals; keep them out of the output distribution
    logits[:, [bundle.vocab.pad_id, bundle.vocab.mask_id]] = -np.inf
    m = logits.max(-1, keepdims=True)
    logp = logits - m - np.log(np.exp(logits - m).sum(-1, keepdims=True))
    return logp, (h.shape, b, pos, hm, cache)


def generator_loss(bundle: ModelBundle, plans: Sequence[MaskingPlan]) -> float:
    """Batch mean of ``-sum_i log p_G(x_{m_i} | x_masked)``."""
    logp, _ = _generator_forward(bundle, plans)
    return _nll(logp, np.concatenate([p.originals for p in plans]))[0].sum() / len(plans)


def _nll(logp, targets):
    lp = logp[np.arange(len(targets)), targets]
    floor = np.log(PROB_FLOOR)
    return -np.maximum(lp, floor), lp > floor


def sample_replacements(logp: np.ndarray, plans: Sequence[MaskingPlan],
                        rngs: Sequence[np.random.Generator]) -> list[CorruptedSequence]:
    """One temperature-1 categorical draw per masked position.

    Works on detached generator log-probabilities: nothing downstream of the
    sample propagates gradient back into the generator.
    """
    probs = np.exp(logp.astype(np.float64))
    cdf = np.cumsum(probs, axis=-1)
    out = []
    row = 0
    for plan, rng in zip(plans, rngs):
        u = rng.random(plan.k)
        draws = np.empty(plan.k, dtype=np.int64)
        for j in range(plan.k):
            c = cdf[row + j]
            draws[j] = min(int(np.searchsorted(c, u[j] * c[-1], side="right")), len(c) - 1)
        row += plan.k
        ids = plan.sequence.copy()
        ids[plan.masked_indices] = draws
        out.append(CorruptedSequence(ids, ids != plan.sequence))
    return out


# ---------------------------------------------------------------- discriminator


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _discriminator_forward(bundle: ModelBundle, seqs: Sequence[np.ndarray], keep_cache=False):
    ids, pad = pad_batch(seqs, bundle.vocab.pad_id)
    out = enc.forward(bundle.discriminator, ids, pad, emb=bundle.emb, keep_cache=keep_cache)
    h, cache = out if keep_cache else (out, None)
    raw = sigmoid(h @ bundle.disc_head)
    d = np.clip(raw, D_CLAMP, 1.0 - D_CLAMP)
    return d, ~pad, (h, raw, cache)


def discriminator_prob(bundle: ModelBundle, seqs: Sequence) -> list[np.ndarray]:
    """Per-token probability of having been replaced, one array per input sequence."""
    arrs = [s.ids if isinstance(s, CorruptedSequence) else np.asarray(s, dtype=np.int64) for s in seqs]
    d, valid, _ = _discriminator_forward(bundle, arrs)
    return [d[i, :len(a)] for i, a in enumerate(arrs)]


def _rtd_token_loss(d, replaced):
    return np.where(replaced, -np.log(d), -np.log(1.0 - d))


def discriminator_loss(bundle: ModelBundle, corrupted: Sequence[CorruptedSequence]) -> float:
    """Batch mean over sequences of the per-token RTD loss summed over non-pad positions."""
    d, valid, _ = _discriminator_forward(bundle, [c.ids for c in corrupted])
    y, _ = pad_batch([c.replaced_flags for c in corrupted], False)
    return float((_rtd_token_loss(d, y.astype(bool)) * valid).sum() / len(corrupted))


# ---------------------------------------------------------------- joint objective


@dataclass
class StepOutput:
    loss_g: float
    loss_d: float
    corrupted: list[CorruptedSequence]
    grads: dict[str, np.ndarray] | None = None

    def joint(self, lam: float) -> float:
        return self.loss_g + lam * self.loss_d


def rtd_step(bundle: ModelBundle, plans: Sequence[MaskingPlan], rngs=None, coef_g: float = 1.0,
             coef_d: float = 50.0, corrupted: Sequence[CorruptedSequence] | None = None,
             with_grads: bool = True) -> StepOutput:
    """Losses and gradients of ``coef_g * L_g + coef_d * L_d``.

    Replacements are sampled from ``rngs`` unless ``corrupted`` is given.
    """
    B = len(plans)
    logp, (hshape, b, pos, hm, gcache) = _generator_forward(bundle, plans, keep_cache=with_grads)
    targets = np.concatenate([p.originals for p in plans])
    nll, live = _nll(logp, targets)
    loss_g = float(nll.sum() / B)
    if corrupted is None:
        corrupted = sample_replacements(logp, plans, rngs)
    corrupted = list(corrupted)

    d, valid, (hd, raw, dcache) = _discriminator_forward(bundle, [c.ids for c in corrupted], keep_cache=with_grads)
    yb, _ = pad_batch([c.replaced_flags for c in corrupted], False)
    y = yb.astype(bool)
    loss_d = float((_rtd_token_loss(d, y) * valid).sum() / B)
    if not (math.isfinite(loss_g) and math.isfinite(loss_d)):
        raise NumericError(f"non-finite loss (L_g={loss_g}, L_d={loss_d})")
    out = StepOutput(loss_g, loss_d, corrupted)
    if not with_grads:
        return out

    grads: dict[str, np.ndarray] = {}
    dtype = bundle.dtype

    # discriminator: d/dz of the token loss is (D - y) inside the clamp, 0 outside
    inside = (raw > D_CLAMP) & (raw < 1.0 - D_CLAMP)
    dz = ((d - y) * (valid & inside)).astype(dtype) * (coef_d / B)
    grads["disc_head.w"] = np.einsum("bn,bnw->w", dz, hd)
    dh = dz[..., None] * bundle.disc_head
    dgrads = enc.backward(bundle.discriminator, dcache, dh, emb_shape=bundle.emb.shape)
    d_emb = dgrads.pop("tok_emb")
    grads.update({"disc." + k: v for k, v in dgrads.items()})

    # generator: softmax cross-entropy at masked positions
    probs = np.exp(logp)
    dlogits = probs
    dlogits[np.arange(len(targets)), targets] -= 1.0
    dlogits *= (live[:, None] * (coef_g / B)).astype(dtype)
    grads["gen_head.w"] = hm.T @ dlogits
    grads["gen_head.b"] = dlogits.sum(0)
    dhg = np.zeros(hshape, dtype)
    dhg[b, pos] = dlogits @ bundle.gen_head["w"].T
    ggrads = enc.backward(bundle.generator, gcache, dhg, emb_shape=bundle.emb.shape)
    d_emb = d_emb + ggrads.pop("tok_emb")
    grads.update({"gen." + k: v for k, v in ggrads.items()})
    grads["emb"] = d_emb
    out.grads = grads
    return out


# ---------------------------------------------------------------- optimization


class AdamW:
    """Adam with decoupled weight decay; decay applies to matrices only."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, weight_decay: float = 0.01,
                 betas=(0.9, 0.999), eps: float = 1e-6):
        self.params = params
        self.lr, self.wd, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.wd and p.ndim >= 2:
                p -= (lr * self.wd) * p
            p -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def lr_at(step: int, total: int, cfg: TrainingConfig) -> float:
    """Linear warmup, then linear decay to zero at ``total``."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.learning_rate * (step + 1) / cfg.warmup_steps
    span = max(1, total - cfg.warmup_steps)
    return cfg.learning_rate * max(0.0, 1.0 - (step - cfg.warmup_steps) / span)


@dataclass
class LossRecord:
    step: int
    loss_g: float
    loss_d: float
    joint: float


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; ``bundle`` holds the last finite parameters."""

    def __init__(self, msg, bundle, history):
        super().__init__(msg)
        self.bundle = bundle
        self.history = history


def train(corpus: Sequence[TokenSequence], cfg: TrainingConfig, vocab: Vocabulary,
          normalizer: NormalizerConfig, labels: Sequence[str] | None = None,
          bundle: ModelBundle | None = None,
          on_step: Callable[[LossRecord], None] | None = None) -> tuple[ModelBundle, list[LossRecord]]:
    """Minimize ``L_g + lam * L_d`` with AdamW over normal-only sequences.

    Each sequence's masking and sampling draw from its own stream seeded by
    ``(seed, epoch, index)``, so batches are reproducible regardless of how
    they are assembled.
    """
    if labels is not None:
        if len(labels) != len(corpus):
            raise ValueError("labels and corpus differ in length")
        bad = [i for i, l in enumerate(labels) if l == ANOMALY]
        if bad:
            raise ValueError(f"training corpus must be normal-only; {len(bad)} anomaly-labeled "
                             f"sequences (first at index {bad[0]})")
    seqs = [s.array() if isinstance(s, TokenSequence) else np.asarray(s, dtype=np.int64) for s in corpus]
    keep = [i for i, s in enumerate(seqs) if len(s) > 0]
    if not keep:
        raise ValueError("no non-empty sequences to train on")

    bundle = bundle or new_bundle(vocab, normalizer, cfg)
    params = bundle.parameters()
    opt = AdamW(params, cfg.learning_rate, cfg.weight_decay, cfg.adam_betas, cfg.adam_eps)
    per_epoch = math.ceil(len(keep) / cfg.batch_size)
    total = cfg.max_steps if cfg.max_steps is not None else cfg.epochs * per_epoch
    history: list[LossRecord] = []
    step = 0
    epoch = 0
    while step < total:
        order = np.random.default_rng((cfg.seed, epoch)).permutation(len(keep))
        for start in range(0, len(order), cfg.batch_size):
            if step >= total:
                break
            idx = [keep[j] for j in order[start:start + cfg.batch_size]]
            rngs = [np.random.default_rng((cfg.seed, epoch, i, 7)) for i in idx]
            plans = [make_masking_plan(seqs[i], cfg.mask_prob, r, vocab.mask_id) for i, r in zip(idx, rngs)]
            try:
                out = rtd_step(bundle, plans, rngs, 1.0, cfg.lam)
            except NumericError as exc:
                raise TrainingDiverged(f"step {step}: {exc}", bundle, history) from exc
            if cfg.clip_norm:
                clip_grads(out.grads, cfg.clip_norm)
            opt.step(out.grads, lr_at(step, total, cfg))
            step += 1
            bundle.steps += 1
            rec = LossRecord(step, out.loss_g, out.loss_d, out.joint(cfg.lam))
            history.append(rec)
            if on_step:
                on_step(rec)
        epoch += 1
    return bundle, history
