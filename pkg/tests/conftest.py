import pytest

from langrasp.data.synthetic import SyntheticConfig, build_synthetic_dataset


@pytest.fixture(scope="session")
def toy_data(tmp_path_factory):
    """Small 48px synthetic dataset shared by training/baseline/eval tests."""
    root = str(tmp_path_factory.mktemp("toy48") / "dataset")
    build_synthetic_dataset(SyntheticConfig(out_dir=root, scenes=6, seed=3, image_size=48, max_objects=3))
    return root
