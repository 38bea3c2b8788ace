import numpy as np
import pytest
from hypothesis import HealthCheck, settings

# Property tests must be reproducible across runs and machines; some of
# them exercise genuinely slow numeric kernels, so no deadline.
settings.register_profile(
    "suite",
    deadline=None,
    derandomize=True,
    max_examples=50,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus():
    """Small synthetic corpus shared by pipeline-level tests."""
    from buildage import data

    corpus = data.synth_corpus(
        n_per_class=3, image_size=64, clutter_fraction=0.25, seed=11)
    records = data.split_by_house(
        corpus.records, data.SplitRatios(0.7, 0.1, 0.2), seed=11)
    return corpus, records


@pytest.fixture(scope="session")
def tiny_corpus_dir(tiny_corpus, tmp_path_factory):
    """The same corpus written to disk in the CLI's on-disk layout."""
    from pathlib import Path

    from buildage import data, imaging

    corpus, records = tiny_corpus
    root = tmp_path_factory.mktemp("corpus")
    for record, image, mask in zip(records, corpus.images, corpus.clutter_masks):
        imaging.save_image_png(root / record.image_path, image)
        imaging.save_image_png(root / "masks" / Path(record.image_path).name, mask)
    data.write_manifest(root / "manifest.csv", records)
    return root
