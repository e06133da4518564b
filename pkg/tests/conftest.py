import json

import numpy as np
import pytest

from roadscan import cli, data as D
from roadscan.training import TrainConfig


TINY_CONFIG = dict(
    max_epochs=3,
    early_stop_patience=3,
    triplet_budget=150,
    pair_budget=200,
    image_size=16,
    similarity_epochs=100,
    seed=11,
)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_data")
    D.gen_synthetic_dataset(per_class=10, side=32, seed=5, out_root=root)
    return root


@pytest.fixture(scope="session")
def tiny_test_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_test")
    D.gen_synthetic_dataset(per_class=6, side=32, seed=6, out_root=root)
    return root


@pytest.fixture(scope="session")
def tiny_config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return path


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory, tiny_dataset, tiny_config_file):
    """A quickly trained model checkpoint shared across tests."""
    out = tmp_path_factory.mktemp("model") / "tiny.ckpt"
    code = cli.main(
        [
            "train",
            "--data", str(tiny_dataset),
            "--config", str(tiny_config_file),
            "--out", str(out),
        ]
    )
    assert code == 0
    return out


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture()
def tiny_train_config():
    return TrainConfig(**TINY_CONFIG)
