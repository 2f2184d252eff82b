import pytest
import torch

from models.config import DatasetSpec, EncoderConfig, RosterConfig, SearchConfig, SyntheticFamilySpec
from navigator.encoder import init_encoder
from navigator.policyspace import default_roster
from navigator.seeding import make_generator
from navigator.supernet import Supernet
from navigator.tasks import load_dataset, make_distributions

torch.set_default_dtype(torch.float64)

N_WAY = 3
DIM = 8


@pytest.fixture
def family():
    return SyntheticFamilySpec(
        dim=DIM, class_pool_size=15, noise_scale=0.3, examples_per_class=12, split_sizes=(5, 5, 5), seed=0
    )


@pytest.fixture
def dataset(family):
    return load_dataset(DatasetSpec(name="tiny", synthetic=family))


@pytest.fixture
def search_config():
    return SearchConfig(episodes_total=3, n_way=N_WAY, k_shot=1, q_per_class=3, checkpoint_every=2)


@pytest.fixture
def distributions(dataset, search_config):
    return make_distributions(dataset, search_config)


@pytest.fixture
def encoder_config():
    return EncoderConfig(stages=2, widths=[8, 8], embedding_dim=8)


@pytest.fixture
def pretrained(encoder_config):
    return init_encoder(encoder_config, (DIM,), make_generator(0, "pretrain"), torch.float64)


@pytest.fixture
def roster():
    return RosterConfig(inner_steps=2)


@pytest.fixture
def make_supernet(encoder_config, pretrained, roster):
    """Builder for a tiny mixture over the default roster; keyword options go to Supernet.build."""

    def build(seed: int = 0, **options) -> Supernet:
        encoder_roster, classifier_roster = default_roster(roster, encoder_config.stages)
        return Supernet.build(
            encoder_config, pretrained, encoder_roster, classifier_roster, N_WAY,
            make_generator(seed, "init"), **options,
        )

    return build


@pytest.fixture
def supernet(make_supernet):
    return make_supernet()


@pytest.fixture
def episode(distributions):
    dist_a, _, _ = distributions
    return dist_a.sample(make_generator(0, "episode"))
