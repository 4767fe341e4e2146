import numpy as np
import pytest
import torch

from epsseg.data import LabeledImage, SynthSpec, synth_generate

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def synth_small():
    return synth_generate(SynthSpec(num_classes=3, image_side=64, num_images=3, noise_std=0.05, seed=3, cells=6))


@pytest.fixture
def striped_image():
    """Left half class 0, right half class 1, pixel = column / width."""
    labels = np.zeros((20, 20), dtype=np.int64)
    labels[:, 10:] = 1
    pixels = np.tile(np.linspace(0, 1, 20, dtype=np.float32), (20, 1))
    return LabeledImage(pixels, labels, "halves")
