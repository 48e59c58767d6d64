import numpy as np
import pytest

from segcode import tensor as T


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(x, grad=True):
    return T.Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad, dtype=np.float64)


@pytest.fixture(scope="session")
def small_manifest(tmp_path_factory):
    """16x16 default-spec dataset, 2/1/1 clips per class, masks rendered."""
    from segcode import ingest, maskcode, synth

    spec = synth.default_spec(resolution=16, frames_per_clip=8,
                              clips_per_class={"train": 2, "val": 1, "test": 1})
    path = synth.generate(spec, tmp_path_factory.mktemp("small"))
    maskcode.encode_manifest_masks(ingest.load_manifest(path))
    return path
