import numpy as np
import pytest
from hypothesis import settings

from rtdlog import corpus, electra, preprocess, tokenizer

settings.register_profile("ci", max_examples=60, deadline=None)
settings.load_profile("ci")

TINY_MESSAGES = [
    "generating core <num>",
    "instruction cache parity error corrected",
    "ciod : failed to read message prefix on control stream",
    "total <num> mb files downloaded .",
    "data tlb error interrupt",
    "<date> ras kernel info <num> double hummer alignment exceptions",
    "idoproxydb hit assert condition",
    "node card vpd check : missing <hex>",
]


def tiny_config(**kw):
    base = dict(
        generator=electra.ModelShape(2, 16, 2),
        discriminator=electra.ModelShape(2, 16, 2),
        max_len=16, batch_size=4, warmup_steps=2,
    )
    base.update(kw)
    return electra.TrainingConfig(**base)


@pytest.fixture(scope="session")
def tiny_vocab():
    return tokenizer.train_vocab(TINY_MESSAGES, max_vocab=120)


@pytest.fixture
def tiny_bundle(tiny_vocab):
    """Float64 tiny model with a nonzero sigmoid head so D varies per token."""
    cfg = tiny_config()
    b = electra.new_bundle(tiny_vocab, preprocess.default_config(), cfg, dtype=np.float64)
    b.disc_head[:] = np.random.default_rng(5).normal(0, 0.5, b.disc_head.shape)
    return b


@pytest.fixture(scope="session")
def small_synth():
    return corpus.synthesize(corpus.SynthSpec(n_templates=8, n_lines=600, n_anomalies=30,
                                              n_anomaly_templates=4, seed=3))
