import numpy as np
import pytest
from PIL import Image

from colorista.training import TrainConfig, Trainer


def make_frames(directory, count, size=16, seed=0, prefix="frame"):
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        arr = (rng.random((size, size, 3)) * 255).astype(np.uint8)
        p = directory / f"{prefix}_{i:04d}.png"
        Image.fromarray(arr).save(p)
        paths.append(p)
    return paths


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory):
    """Untrained desk-scale checkpoint shared by inference-side tests."""
    config = TrainConfig(
        crop_size=16,
        network={
            "active_scales": (1,),
            "decoder_widths": (8, 8, 8, 8),
            "lstm_hidden": (8, 8, 8, 8),
        },
        seed=0,
    )
    trainer = Trainer(config)
    path = tmp_path_factory.mktemp("ckpt") / "tiny.cnet"
    trainer.save_checkpoint(path)
    return path
