import numpy as np
import pytest

from pcdlib.config import TrainConfig
from pcdlib.rng import SplitMix64


@pytest.fixture
def rng():
    return SplitMix64(1234)


@pytest.fixture
def tiny_config():
    """Smallest config that still exercises every stage of a run."""
    config = TrainConfig()
    config.data.n_images = 8
    config.data.image_size = 16
    config.model.teacher_hidden = 16
    config.model.teacher_out = 8
    config.model.student_hidden = 16
    config.model.heads = 2
    config.model.head_dim = 4
    config.loss.queue_capacity = 16
    config.optim.batch_size = 4
    config.optim.epochs = 1.0
    config.optim.warmup_epochs = 0.0
    return config


def gaussian(rng, *shape):
    return rng.gaussian(int(np.prod(shape))).reshape(shape)
