import pytest

from flowup import phantom
from flowup.model import ModelConfig, init_model, model_from_checkpoint, model_to_checkpoint
from flowup.train import TrainHyper, train


@pytest.fixture(scope="session")
def small_cohort():
    return phantom.generate_cohort(8, 16, seed=11)


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(image_size=16, level_widths=(6, 8, 12), context_dim=8,
                       attention_heads=2, time_embed_dim=8)


@pytest.fixture(scope="session")
def small_ckpt(small_cohort, small_config):
    """A briefly trained small checkpoint for plumbing tests."""
    hyper = TrainHyper(batch=4, grad_accum=1, lr=2e-3, epochs=2,
                       steps_per_epoch=6, seed=17)
    return train(small_cohort, small_config, hyper)


@pytest.fixture(scope="session")
def small_net(small_ckpt):
    return model_from_checkpoint(small_ckpt)
