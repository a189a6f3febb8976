import numpy as np
import pytest

from tsinsight.data import DataBundle, Dataset, SynthConfig, generate_synthetic_anomaly, normalize_bundle
from tsinsight.models import AutoEncoderSpec, ClassifierSpec, ModelBundle, build_model


@pytest.fixture(scope="session")
def tiny_synth() -> DataBundle:
    """Small normalized synthetic bundle for fast functional tests."""
    cfg = SynthConfig(train_size=256, val_size=64, test_size=64, length=24, seed=11)
    bundle, _ = normalize_bundle(generate_synthetic_anomaly(cfg))
    return bundle


@pytest.fixture()
def tiny_classifier():
    return build_model(ClassifierSpec(2, 8, 3, conv_channels=[3, 4], kernel_width=3), seed=5)


@pytest.fixture()
def tiny_autoencoder():
    return build_model(AutoEncoderSpec(2, 8, encoder_channels=[3], kernel_width=3), seed=7)


@pytest.fixture()
def tiny_bundle(tiny_classifier, tiny_autoencoder):
    return ModelBundle(tiny_classifier, tiny_autoencoder)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
