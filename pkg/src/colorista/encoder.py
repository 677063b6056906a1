"""Frozen VGG-19 multi-scale feature encoder.

Runs the first nine convolutions of VGG-19 and exposes the post-ReLU
activations of conv1_1, conv2_1, conv3_1 and conv4_1 as four feature
scales (64/128/256/512 channels at 1, 1/2, 1/4, 1/8 resolution). Weights
live in registered buffers, never parameters, so no optimizer can touch
them; gradients still flow through to the input, which is what the
content loss needs.

Weights come from the shared archive format. The per-channel input
normalization constants travel inside the archive metadata rather than
being hard-coded here, so a checkpoint fully describes its own
preprocessing.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .archive import ArchiveError, load_archive, save_archive

# layer name, input channels, output channels, max-pool before this conv
VGG_LAYOUT = [
    ("conv1_1", 3, 64, False),
    ("conv1_2", 64, 64, False),
    ("conv2_1", 64, 128, True),
    ("conv2_2", 128, 128, False),
    ("conv3_1", 128, 256, True),
    ("conv3_2", 256, 256, False),
    ("conv3_3", 256, 256, False),
    ("conv3_4", 256, 256, False),
    ("conv4_1", 256, 512, True),
]

TAP_LAYERS = ("conv1_1", "conv2_1", "conv3_1", "conv4_1")
SCALE_CHANNELS = (64, 128, 256, 512)
SCALE_FACTORS = (1, 2, 4, 8)

# sum over layers of out*in*3*3 + out
PARAM_COUNT = sum(o * i * 9 + o for _, i, o, _ in VGG_LAYOUT)

# standard pretrained-VGG input normalization; written into generated
# archives, never consumed directly by the encoder
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class MultiScaleFeatures:
    """Post-ReLU taps at the four encoder scales; deeper taps may be
    absent when encoding was cut short for speed."""

    f1: torch.Tensor
    f2: Optional[torch.Tensor] = None
    f3: Optional[torch.Tensor] = None
    f4: Optional[torch.Tensor] = None

    def tap(self, scale):
        if scale not in (1, 2, 3, 4):
            raise ValueError(f"scale must be 1..4, got {scale}")
        return (self.f1, self.f2, self.f3, self.f4)[scale - 1]

    def present(self):
        return [i + 1 for i, f in enumerate((self.f1, self.f2, self.f3, self.f4)) if f is not None]


def _layer_keys(name):
    return f"{name}.weight", f"{name}.bias"


class FeatureEncoder(nn.Module):
    """VGG-19 front end with frozen weights held as buffers."""

    def __init__(self, arrays, preprocess):
        super().__init__()
        for name, c_in, c_out, _ in VGG_LAYOUT:
            wk, bk = _layer_keys(name)
            for key, want in ((wk, (c_out, c_in, 3, 3)), (bk, (c_out,))):
                if key not in arrays:
                    raise ArchiveError(f"encoder weights missing array '{key}'")
                arr = np.asarray(arrays[key], dtype=np.float32)
                if arr.shape != want:
                    raise ArchiveError(
                        f"encoder array '{key}' has shape {arr.shape}, expected {want}"
                    )
                self.register_buffer(key.replace(".", "_"), torch.from_numpy(arr.copy()))
        mean = torch.tensor(preprocess["mean"], dtype=torch.float32).reshape(1, 3, 1, 1)
        std = torch.tensor(preprocess["std"], dtype=torch.float32).reshape(1, 3, 1, 1)
        if mean.numel() != 3 or std.numel() != 3:
            raise ArchiveError("preprocess constants must have 3 channels")
        self.register_buffer("pre_mean", mean)
        self.register_buffer("pre_std", std)

    def parameter_count(self):
        return sum(
            getattr(self, k.replace(".", "_")).numel()
            for name in [l[0] for l in VGG_LAYOUT]
            for k in _layer_keys(name)
        )

    def _conv(self, x, name):
        w = getattr(self, f"{name}_weight")
        b = getattr(self, f"{name}_bias")
        return F.conv2d(x, w, b, padding=1)

    def encode(self, image, max_scale=4):
        """Multi-scale taps of an image batch in [0,1].

        image: (3,H,W) or (N,3,H,W) with H, W divisible by 8. max_scale
        cuts the forward pass after that tap; the remaining fields of the
        result are None.
        """
        squeeze = image.dim() == 3
        if squeeze:
            image = image[None]
        if image.dim() != 4 or image.shape[1] != 3:
            raise ValueError(f"expected (N,3,H,W) image batch, got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        if h % 8 or w % 8:
            raise ValueError(f"image size {h}x{w} not divisible by 8")
        if image.min() < 0 or image.max() > 1:
            raise ValueError("image values must lie in [0,1]")
        if max_scale not in (1, 2, 3, 4):
            raise ValueError(f"max_scale must be 1..4, got {max_scale}")

        x = (image - self.pre_mean) / self.pre_std
        taps = {}
        for name, _, _, pool_before in VGG_LAYOUT:
            if pool_before:
                x = F.max_pool2d(x, 2)
            x = F.relu(self._conv(x, name))
            if name in TAP_LAYERS:
                taps[name] = x[0] if squeeze else x
                if len(taps) == max_scale:
                    break
        return MultiScaleFeatures(*[taps.get(t) for t in TAP_LAYERS])

    def content_feature(self, image):
        """conv4_1 tap only; the representation the content loss compares."""
        return self.encode(image).f4

    def forward(self, image, max_scale=4):
        return self.encode(image, max_scale)

    def state_arrays(self):
        """Weights as numpy arrays keyed by archive names."""
        out = {}
        for name, _, _, _ in VGG_LAYOUT:
            for key in _layer_keys(name):
                out[key] = getattr(self, key.replace(".", "_")).numpy().copy()
        return out

    def preprocess_constants(self):
        return {
            "mean": [float(v) for v in self.pre_mean.reshape(-1)],
            "std": [float(v) for v in self.pre_std.reshape(-1)],
        }


def load_pretrained(path, prefix=""):
    """Build a frozen encoder from a weight archive.

    The archive must contain '<prefix><layer>.weight' / '.bias' for every
    layer of the layout and carry {"preprocess": {"mean", "std"}} in its
    metadata. Shape or checksum problems raise errors naming the array.
    """
    names = [prefix + k for l in VGG_LAYOUT for k in _layer_keys(l[0])]
    try:
        arrays, metadata = load_archive(path, names=names)
    except FileNotFoundError:
        raise ArchiveError(f"encoder weight archive not found: {path}")
    if prefix:
        arrays = {k[len(prefix):]: v for k, v in arrays.items()}
    pre = (metadata or {}).get("preprocess")
    if not pre or "mean" not in pre or "std" not in pre:
        raise ArchiveError("encoder archive metadata lacks preprocess constants")
    enc = FeatureEncoder(arrays, pre)
    enc.eval()
    for buf in enc.buffers():
        buf.requires_grad_(False)
    return enc


def random_encoder_arrays(seed=0):
    """Seeded random weights with the exact VGG-19 layout.

    Kaiming-scaled so activations neither die nor explode through the
    ReLU stack; useful wherever real pretrained weights are unavailable
    or deliberately avoided (unit tests, offline smoke runs).
    """
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, c_in, c_out, _ in VGG_LAYOUT:
        wk, bk = _layer_keys(name)
        std = np.sqrt(2.0 / (c_in * 9))
        arrays[wk] = rng.normal(0.0, std, (c_out, c_in, 3, 3)).astype(np.float32)
        arrays[bk] = np.zeros(c_out, dtype=np.float32)
    return arrays


def save_random_encoder(path, seed=0):
    """Write a self-contained random-weight encoder archive."""
    save_archive(
        path,
        random_encoder_arrays(seed),
        metadata={"preprocess": {"mean": list(IMAGENET_MEAN), "std": list(IMAGENET_STD)}},
    )
    return path


def export_torchvision_encoder(path):
    """Convert torchvision's pretrained VGG-19 into our archive format.

    Needs torchvision plus its downloaded weights; raises ArchiveError
    when either is unavailable so offline environments fail cleanly.
    """
    try:
        from torchvision.models import VGG19_Weights, vgg19
    except ImportError as err:
        raise ArchiveError(f"torchvision unavailable: {err}")
    try:
        net = vgg19(weights=VGG19_Weights.IMAGENET1K_V1)
    except Exception as err:
        raise ArchiveError(f"could not fetch pretrained weights: {err}")
    convs = [m for m in net.features if isinstance(m, nn.Conv2d)]
    arrays = {}
    for (name, _, _, _), conv in zip(VGG_LAYOUT, convs):
        wk, bk = _layer_keys(name)
        arrays[wk] = conv.weight.detach().numpy().copy()
        arrays[bk] = conv.bias.detach().numpy().copy()
    save_archive(
        path,
        arrays,
        metadata={"preprocess": {"mean": list(IMAGENET_MEAN), "std": list(IMAGENET_STD)}},
    )
    return path
