import numpy as np
import pytest

from naflow import (
    BatchNorm2d,
    ClassifierHead,
    Conv2d,
    EmbeddingHead,
    LeakyReLU,
    MaxPool2d,
    ReLU,
    build_graph,
    write_model,
)


def random_conv(rng, ci, co, k=3, pad=1, stride=1):
    return Conv2d(
        co, ci, (k, k), (stride, stride), (pad, pad),
        rng.standard_normal((co, ci, k, k)) * 0.3,
        rng.standard_normal(co) * 0.1,
    )


def make_toy_classifier(seed=0):
    """conv -> BN -> ReLU -> maxpool -> conv -> ReLU on 3x16x16, 5 classes."""
    rng = np.random.default_rng(seed)
    layers = [
        random_conv(rng, 3, 8),
        BatchNorm2d(
            rng.uniform(0.5, 1.5, 8),
            rng.standard_normal(8) * 0.1,
            rng.standard_normal(8) * 0.1,
            rng.uniform(0.5, 2.0, 8),
            1e-5,
        ),
        ReLU(),
        MaxPool2d((2, 2), (2, 2)),
        random_conv(rng, 8, 16),
        ReLU(),
    ]
    head = ClassifierHead(
        rng.standard_normal((5, 16)) * 0.3, rng.standard_normal(5) * 0.1
    )
    return build_graph("toy-classifier", (3, 16, 16), layers, head)


def make_toy_embedding(seed=1):
    rng = np.random.default_rng(seed)
    layers = [
        random_conv(rng, 3, 8),
        ReLU(),
        MaxPool2d((2, 2), (2, 2)),
        random_conv(rng, 8, 16),
        LeakyReLU(0.1),
    ]
    return build_graph(
        "toy-embedding", (3, 16, 16), layers, EmbeddingHead(l2_normalize=True)
    )


PEAK_CELLS = [(1, 1), (1, 4), (3, 1), (4, 4)]


def make_counting_model():
    """1x6x6 input, valid 3x3 conv (center-tap kernel), 2x2/2 maxpool, GAP+FC.

    With the companion image the pool argmaxes land on conv outputs
    (0,0), (0,3), (2,0), (3,3): four retained 3x3 windows sharing 3 inputs.
    """
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    layers = [
        Conv2d(1, 1, (3, 3), (1, 1), (0, 0), w, np.zeros(1)),
        MaxPool2d((2, 2), (2, 2)),
    ]
    head = ClassifierHead(np.array([[1.0], [-1.0]]), np.zeros(2))
    return build_graph("peak-counter", (1, 6, 6), layers, head)


def make_counting_image():
    img = np.add.outer(np.arange(6) * 0.001, np.arange(6) * 0.0001)
    for r, c in PEAK_CELLS:
        img[r, c] = 0.9
    return img[None, :, :]


def write_f32(path, arr):
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


@pytest.fixture
def toy_classifier():
    return make_toy_classifier()


@pytest.fixture
def toy_embedding():
    return make_toy_embedding()


@pytest.fixture
def counting_model_dir(tmp_path):
    """Model directory plus an input whose peaks pin the pool selections."""
    model = make_counting_model()
    write_model(model, tmp_path / "model")
    write_f32(tmp_path / "img.f32", make_counting_image())
    return tmp_path


@pytest.fixture
def toy_classifier_dir(tmp_path):
    model = make_toy_classifier()
    write_model(model, tmp_path / "model")
    rng = np.random.default_rng(7)
    write_f32(tmp_path / "img.f32", rng.uniform(0.0, 1.0, model.input_shape))
    return tmp_path
