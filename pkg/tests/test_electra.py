import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rtdlog import electra as E
from rtdlog import preprocess, tokenizer
from rtdlog.corpus import ANOMALY, NORMAL

import oracles
from conftest import TINY_MESSAGES, tiny_config


def plans_for(bundle, seqs, seed=0, mask_prob=0.15):
    rngs = [np.random.default_rng((seed, i)) for i in range(len(seqs))]
    plans = [E.make_masking_plan(s, mask_prob, r, bundle.vocab.mask_id) for s, r in zip(seqs, rngs)]
    return plans, rngs


def random_seqs(bundle, n, rng, lo=1, hi=9):
    V = len(bundle.vocab)
    return [rng.integers(3, V, rng.integers(lo, hi + 1)) for _ in range(n)]


# ---------------------------------------------------------------- masking


@pytest.mark.parametrize("n, k", [(20, 3), (1, 1), (3, 1), (10, 2), (7, 1), (30, 5)])
def test_mask_count(n, k):
    assert E.n_masked(n, 0.15) == k


@given(st.integers(1, 60), st.integers(0, 2 ** 20))
def test_masking_plan_invariants(n, seed):
    ids = np.arange(3, 3 + n)
    p = E.make_masking_plan(ids, 0.15, np.random.default_rng(seed), 2)
    assert p.k == max(1, math.floor(0.15 * n + 0.5))
    assert len(set(p.masked_indices.tolist())) == p.k
    diff = np.flatnonzero(p.masked_sequence != ids)
    assert diff.tolist() == p.masked_indices.tolist()
    assert (p.masked_sequence[diff] == 2).all()
    assert p.originals.tolist() == ids[p.masked_indices].tolist()


def test_mask_frequency_monte_carlo():
    rng = np.random.default_rng(0)
    counts = np.zeros(20)
    for _ in range(10_000):
        counts[E.make_masking_plan(np.arange(3, 23), 0.15, rng, 2).masked_indices] += 1
    freq = counts / 10_000
    assert np.all(np.abs(freq - 0.15) <= 0.02)


def test_replacement_frequency_monte_carlo():
    V = 6
    logp = np.full((1, V), -np.inf)
    logp[0, [3, 4]] = math.log(0.5)
    plan = E.make_masking_plan(np.array([3]), 0.15, np.random.default_rng(0), 2)
    rng = np.random.default_rng(1)
    hits = sum(E.sample_replacements(logp, [plan], [rng])[0].replaced_flags[0] for _ in range(10_000))
    assert abs(hits / 10_000 - 0.5) <= 0.03


def test_certain_generator_never_replaces():
    ids = np.array([3, 4, 5, 6, 7, 8, 9])
    plan = E.make_masking_plan(ids, 0.3, np.random.default_rng(0), 2)
    logp = np.full((plan.k, 12), -np.inf)
    logp[np.arange(plan.k), plan.originals] = 0.0
    c = E.sample_replacements(logp, [plan], [np.random.default_rng(0)])[0]
    assert not c.replaced_flags.any()
    assert np.array_equal(c.ids, ids)


# ---------------------------------------------------------------- losses


def test_zero_head_anchor(tiny_bundle):
    tiny_bundle.disc_head[:] = 0
    seq = np.arange(3, 13)
    assert all(d == 0.5 for d in E.discriminator_prob(tiny_bundle, [seq])[0])
    c = E.CorruptedSequence(seq, np.zeros(10, bool))
    assert abs(E.discriminator_loss(tiny_bundle, [c]) - 10 * math.log(2)) < 1e-12


def test_clamp(tiny_bundle):
    tiny_bundle.disc_head[:] = 1e6
    d = E.discriminator_prob(tiny_bundle, [np.arange(3, 8)])[0]
    assert d.min() >= E.D_CLAMP and d.max() <= 1 - E.D_CLAMP


def test_uniform_generator_loss(tiny_bundle):
    b = tiny_bundle
    b.gen_head["w"][:] = 0
    b.gen_head["b"][:] = 0
    plan = E.make_masking_plan(np.array([5]), 0.15, np.random.default_rng(0), b.vocab.mask_id)
    # PAD and MASK are outside the output distribution
    assert abs(E.generator_loss(b, [plan]) - math.log(len(b.vocab) - 2)) < 1e-12


def test_perfect_generator_loss(tiny_bundle):
    b = tiny_bundle
    b.gen_head["w"][:] = 0
    b.gen_head["b"][:] = -1e3
    b.gen_head["b"][5] = 1e3
    plan = E.make_masking_plan(np.array([5, 5, 5]), 0.15, np.random.default_rng(0), b.vocab.mask_id)
    assert E.generator_loss(b, [plan]) == 0.0


def test_sigmoid_by_hand(tiny_vocab):
    cfg = tiny_config(discriminator=E.ModelShape(1, 2, 1), generator=E.ModelShape(1, 2, 1))
    b = E.new_bundle(tiny_vocab, preprocess.default_config(), cfg, dtype=np.float64)
    b.disc_head[:] = [0.7, -1.3]
    h = oracles.hidden(b.discriminator, b.emb, [4, 9])
    d = E.discriminator_prob(b, [np.array([4, 9])])[0]
    for i in range(2):
        z = 0.7 * h[i, 0] - 1.3 * h[i, 1]
        assert abs(d[i] - 1 / (1 + math.exp(-z))) < 1e-15


def test_formula_oracles(tiny_bundle):
    rng = np.random.default_rng(11)
    b = tiny_bundle
    seqs = random_seqs(b, 6, rng)
    plans, rngs = plans_for(b, seqs)
    out = E.rtd_step(b, plans, rngs, 1.0, 50.0, with_grads=False)
    lg = sum(oracles.generator_nll(b, p.masked_sequence, p.masked_indices, p.originals) for p in plans) / 6
    ld = sum(oracles.rtd_loss(b, c.ids, c.replaced_flags) for c in out.corrupted) / 6
    assert abs(out.loss_g - lg) < 1e-10
    assert abs(out.loss_d - ld) < 1e-10
    assert abs(out.joint(50.0) - (lg + 50 * ld)) < 1e-10 * 50
    assert abs(E.generator_loss(b, plans) - lg) < 1e-10
    assert abs(E.discriminator_loss(b, out.corrupted) - ld) < 1e-10


def test_corruption_flags_by_identity(tiny_bundle):
    rng = np.random.default_rng(3)
    seqs = random_seqs(tiny_bundle, 20, rng, 4, 12)
    plans, rngs = plans_for(tiny_bundle, seqs)
    out = E.rtd_step(tiny_bundle, plans, rngs, with_grads=False)
    for p, c in zip(plans, out.corrupted):
        unmasked = np.setdiff1d(np.arange(len(p.sequence)), p.masked_indices)
        assert np.array_equal(c.ids[unmasked], p.sequence[unmasked])
        assert np.array_equal(c.replaced_flags, c.ids != p.sequence)


# ---------------------------------------------------------------- gradients


def step_grads(b, plans, corrupted, cg, cd):
    return E.rtd_step(b, plans, None, cg, cd, corrupted=corrupted).grads


def test_joint_gradient_linearity(tiny_bundle):
    rng = np.random.default_rng(4)
    seqs = random_seqs(tiny_bundle, 5, rng)
    plans, rngs = plans_for(tiny_bundle, seqs)
    corrupted = E.rtd_step(tiny_bundle, plans, rngs, with_grads=False).corrupted
    joint = step_grads(tiny_bundle, plans, corrupted, 1.0, 50.0)
    g = step_grads(tiny_bundle, plans, corrupted, 1.0, 0.0)
    d = step_grads(tiny_bundle, plans, corrupted, 0.0, 1.0)
    for name in joint:
        assert np.allclose(joint[name], g[name] + 50.0 * d[name], rtol=1e-10, atol=1e-12), name


def test_lambda_zero_leaves_head_untouched(tiny_bundle):
    seqs = random_seqs(tiny_bundle, 4, np.random.default_rng(5))
    plans, rngs = plans_for(tiny_bundle, seqs)
    grads = E.rtd_step(tiny_bundle, plans, rngs, 1.0, 0.0).grads
    assert not grads["disc_head.w"].any()
    assert not any(v.any() for k, v in grads.items() if k.startswith("disc."))


def test_no_generator_gradient_from_rtd_loss(tiny_bundle):
    seqs = random_seqs(tiny_bundle, 4, np.random.default_rng(6))
    plans, rngs = plans_for(tiny_bundle, seqs)
    grads = E.rtd_step(tiny_bundle, plans, rngs, 0.0, 1.0).grads
    for k, v in grads.items():
        if k.startswith("gen"):
            assert not v.any(), k
    assert grads["emb"].any()


# ---------------------------------------------------------------- training


def toy_corpus():
    # roomy vocabulary so whole words are single tokens
    vocab = tokenizer.train_vocab(TINY_MESSAGES, 400)
    seqs = [tokenizer.encode(m, vocab, 16) for m in (TINY_MESSAGES * 7)[:50]]
    return vocab, seqs


def test_training_reduces_generator_loss():
    vocab, seqs = toy_corpus()
    cfg = tiny_config(max_steps=200, batch_size=10, learning_rate=1e-2, warmup_steps=10,
                      generator=E.ModelShape(2, 32, 2))
    _, hist = E.train(seqs, cfg, vocab, preprocess.default_config())
    first = np.mean([h.loss_g for h in hist[:10]])
    last = np.mean([h.loss_g for h in hist[-10:]])
    assert last <= 0.5 * first


def test_training_deterministic():
    vocab, seqs = toy_corpus()
    cfg = tiny_config(max_steps=5)
    b1, h1 = E.train(seqs, cfg, vocab, preprocess.default_config())
    b2, h2 = E.train(seqs, cfg, vocab, preprocess.default_config())
    assert [(h.loss_g, h.loss_d) for h in h1] == [(h.loss_g, h.loss_d) for h in h2]
    for k, v in b1.parameters().items():
        assert np.array_equal(v, b2.parameters()[k])


def test_first_step_rtd_anchor():
    vocab, seqs = toy_corpus()
    cfg = tiny_config(max_steps=1, batch_size=50)
    _, hist = E.train(seqs, cfg, vocab, preprocess.default_config())
    mean_len = np.mean([len(s) for s in seqs])
    assert abs(hist[0].loss_d - mean_len * math.log(2)) < 1e-5


def test_training_updates_everything():
    vocab, seqs = toy_corpus()
    cfg = tiny_config(max_steps=3)
    fresh = E.new_bundle(vocab, preprocess.default_config(), cfg).parameters()
    fresh = {k: v.copy() for k, v in fresh.items()}
    b, _ = E.train(seqs, cfg, vocab, preprocess.default_config())
    for k, v in b.parameters().items():
        assert not np.array_equal(v, fresh[k]), k


def test_anomaly_labels_rejected():
    vocab, seqs = toy_corpus()
    labels = [NORMAL] * len(seqs)
    labels[3] = ANOMALY
    with pytest.raises(ValueError, match="normal-only"):
        E.train(seqs, tiny_config(max_steps=1), vocab, preprocess.default_config(), labels=labels)


def test_divergence_keeps_last_finite_bundle():
    vocab, seqs = toy_corpus()
    cfg = tiny_config(max_steps=5)
    b = E.new_bundle(vocab, preprocess.default_config(), cfg)
    b.gen_head["w"][:] = np.nan
    with pytest.raises(E.TrainingDiverged) as info:
        E.train(seqs, cfg, vocab, preprocess.default_config(), bundle=b)
    assert info.value.history == []


def test_lr_schedule():
    cfg = E.TrainingConfig(learning_rate=1.0, warmup_steps=4)
    lrs = [E.lr_at(s, 10, cfg) for s in range(10)]
    assert lrs[:4] == [0.25, 0.5, 0.75, 1.0]
    assert lrs[-1] == pytest.approx(1 / 6)
    assert all(a >= b for a, b in zip(lrs[3:], lrs[4:]))


def test_config_validation_and_presets():
    with pytest.raises(ValueError):
        E.TrainingConfig(mask_prob=0.0)
    with pytest.raises(ValueError):
        E.TrainingConfig(lam=-1.0)
    paper = E.TrainingConfig.preset("paper")
    assert (paper.discriminator.layers, paper.discriminator.width) == (6, 512)
    assert (paper.generator.layers, paper.generator.width) == (3, 256)
    assert paper.lam == 50 and paper.mask_prob == 0.15
    assert E.TrainingConfig.from_dict(paper.to_dict()) == paper
