"""Channel-statistics feature transforms.

The stylization primitive used throughout: per-channel mean/std of an
activation map carries its "style", and restyling a content map means
normalizing it and re-imposing target statistics. The full transform
decouples this into a whitening step, a shared channel-expanding 3x3
convolution applied to both the whitened content and the raw style
features, a statistics-matching step against a convex blend of the two
paths' statistics, and a 3x3 fusing convolution back to the input width.

All operations accept (C,H,W) or (N,C,H,W) tensors; statistics are per
channel over the spatial dimensions. Everything here is differentiable
and free of side effects, so concurrent calls are safe once module
parameters exist.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

DEFAULT_EPSILON = 1e-5


@dataclass
class ChannelStats:
    """Per-channel (mean, std) of a feature map; std is stabilized >= epsilon."""

    mean: torch.Tensor  # (C,) or (N, C)
    std: torch.Tensor
    epsilon: float = DEFAULT_EPSILON

    @property
    def channels(self):
        return self.mean.shape[-1]

    def expand_as(self, f):
        """Mean/std broadcastable against a (C,H,W) or (N,C,H,W) map."""
        return self.mean[..., None, None], self.std[..., None, None]


def _check_feature_map(f, name="feature map"):
    if f.dim() not in (3, 4):
        raise ValueError(f"{name} must be (C,H,W) or (N,C,H,W), got shape {tuple(f.shape)}")
    # single reduction instead of a full isfinite scan: any NaN or Inf
    # poisons the sum, and feature values never overflow it
    if not torch.isfinite(f.sum()):
        raise ValueError(f"{name} contains non-finite values")


def channel_stats(f, epsilon=DEFAULT_EPSILON):
    """Spatial mean and stabilized population std per channel.

    std = sqrt(population variance + epsilon**2), so constant channels
    come out with std exactly ``epsilon`` instead of zero.
    """
    _check_feature_map(f)
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    # compensated mean: one correction pass makes the mean exact on
    # constant channels (f - mean then cancels bitwise), so whitening a
    # constant gives true zeros that later stages can rely on
    rough = f.mean(dim=(-2, -1))
    mean = rough + (f - rough[..., None, None]).mean(dim=(-2, -1))
    # explicit two-pass variance; much faster than var() with dim
    # arguments on a single CPU thread, same numerics
    centered = f - mean[..., None, None]
    var = centered.square().mean(dim=(-2, -1))
    std = torch.sqrt(var + epsilon * epsilon)
    return ChannelStats(mean=mean, std=std, epsilon=epsilon)


def whiten(f, epsilon=DEFAULT_EPSILON):
    """Normalize each channel to zero mean, unit std (up to epsilon)."""
    stats = channel_stats(f, epsilon)
    mean, std = stats.expand_as(f)
    return (f - mean) / std


def adain_stylize(content, target):
    """Whiten ``content`` and re-impose the ``target`` channel statistics.

    Output channel stats equal ``target`` up to epsilon effects. Raises on
    channel-count mismatch.
    """
    _check_feature_map(content, "content")
    if content.shape[-3] != target.channels:
        raise ValueError(
            f"channel mismatch: content has {content.shape[-3]}, target stats have {target.channels}"
        )
    own = channel_stats(content, target.epsilon)
    mean_c, std_c = own.expand_as(content)
    mean_t, std_t = target.expand_as(content)
    return std_t * (content - mean_c) / std_c + mean_t


def reweight_stats(content_stats, style_stats, lam):
    """Convex blend of content and style statistics.

    lam=0 returns the content stats exactly, lam=1 the style stats; in
    between the blend is elementwise linear in lam.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"stylization factor must be in [0,1], got {lam}")
    if content_stats.channels != style_stats.channels:
        raise ValueError(
            f"channel mismatch: {content_stats.channels} vs {style_stats.channels}"
        )
    mean = lam * style_stats.mean + (1.0 - lam) * content_stats.mean
    std = lam * style_stats.std + (1.0 - lam) * content_stats.std
    return ChannelStats(mean=mean, std=std, epsilon=content_stats.epsilon)


@dataclass
class TransformDetail:
    """Intermediates of one decoupled transform, mainly for verification."""

    output: torch.Tensor
    pre_fuse: torch.Tensor  # stylized 2c-channel map before the fusing conv
    target_stats: ChannelStats
    content_stats: ChannelStats  # stats of the expanded content path
    style_stats: ChannelStats  # stats of the expanded style path


class DecoupledIN(nn.Module):
    """Decoupled restyling transform at one feature scale.

    Whitens the content features ``whiten_count`` times, runs both the
    whitened content and the raw style features through one shared 3x3
    convolution with 2c filters, matches the content path's statistics to
    a lam-blend of the two paths' statistics, and fuses back to c
    channels with a second 3x3 convolution. No nonlinearity sits between
    the expansion and the statistics matching.
    """

    def __init__(self, channels, whiten_count=1, epsilon=DEFAULT_EPSILON):
        super().__init__()
        if whiten_count not in (1, 2, 3):
            raise ValueError(f"whiten_count must be 1, 2 or 3, got {whiten_count}")
        self.channels = channels
        self.whiten_count = whiten_count
        self.epsilon = epsilon
        self.expand = nn.Conv2d(channels, 2 * channels, 3, padding=1)
        self.fuse = nn.Conv2d(2 * channels, channels, 3, padding=1)
        for conv in (self.expand, self.fuse):
            nn.init.normal_(conv.weight, std=1.0 / math.sqrt(conv.in_channels * 9))
            nn.init.zeros_(conv.bias)

    def style_statistics(self, style):
        """Stats of the expanded style path; the per-frame style summary."""
        _check_feature_map(style, "style")
        return channel_stats(self.expand(style), self.epsilon)

    def forward(self, content, style=None, lam=1.0, style_stats=None, return_detail=False):
        """Restyle ``content`` toward ``style`` (or precomputed ``style_stats``)."""
        _check_feature_map(content, "content")
        if (style is None) == (style_stats is None):
            raise ValueError("provide exactly one of style / style_stats")
        if content.shape[-3] != self.channels:
            raise ValueError(
                f"content has {content.shape[-3]} channels, transform expects {self.channels}"
            )
        if style_stats is None:
            if style.shape[-3] != self.channels:
                raise ValueError(
                    f"style has {style.shape[-3]} channels, transform expects {self.channels}"
                )
            style_stats = self.style_statistics(style)
        whitened = content
        for _ in range(self.whiten_count):
            whitened = whiten(whitened, self.epsilon)
        expanded = self.expand(whitened)
        content_stats = channel_stats(expanded, self.epsilon)
        target = reweight_stats(content_stats, style_stats, lam)
        stylized = adain_stylize(expanded, target)
        out = self.fuse(stylized)
        if return_detail:
            return TransformDetail(out, stylized, target, content_stats, style_stats)
        return out


def consecutive_decoupled_in(content, style, stages, lam=1.0):
    """Chain transforms: each stage's output feeds the next as content,
    while the style input is reused at every stage."""
    stages = list(stages)
    if not stages:
        raise ValueError("at least one transform stage is required")
    if len(stages) > 3:
        raise ValueError(f"at most 3 consecutive stages are supported, got {len(stages)}")
    out = content
    for stage in stages:
        out = stage(out, style=style, lam=lam)
    return out


@dataclass
class StyleVector:
    """Flattened per-scale (mean, std) of the expanded style path for one frame."""

    values: np.ndarray
    frame_index: int = 0


def style_vector_from_stats(stats_list, frame_index=0):
    """Concatenate per-scale stats into one flat vector, mean then std per scale."""
    parts = []
    for stats in stats_list:
        mean = stats.mean.detach().reshape(-1).cpu().numpy()
        std = stats.std.detach().reshape(-1).cpu().numpy()
        parts.append(np.concatenate([mean, std]))
    return StyleVector(values=np.concatenate(parts).astype(np.float64), frame_index=frame_index)


def split_style_vector(vector, channel_counts, epsilon=DEFAULT_EPSILON, dtype=torch.float32):
    """Inverse of :func:`style_vector_from_stats` given per-scale channel counts."""
    values = np.asarray(vector.values if isinstance(vector, StyleVector) else vector)
    expected = sum(2 * c for c in channel_counts)
    if values.size != expected:
        raise ValueError(f"style vector length {values.size}, expected {expected}")
    stats_list = []
    offset = 0
    for c in channel_counts:
        mean = torch.as_tensor(values[offset:offset + c], dtype=dtype)
        std = torch.as_tensor(values[offset + c:offset + 2 * c], dtype=dtype)
        stats_list.append(ChannelStats(mean=mean, std=std, epsilon=epsilon))
        offset += 2 * c
    return stats_list


def gaussian_kernel(size, sigma=None):
    """Normalized 1-D Gaussian over offsets; sigma defaults to size/4."""
    if size < 1:
        raise ValueError(f"kernel size must be >= 1, got {size}")
    if sigma is None:
        sigma = size / 4.0
    offsets = np.arange(size) - size // 2
    w = np.exp(-0.5 * (offsets / sigma) ** 2)
    return offsets, w / w.sum()


def gaussian_smooth_style_vectors(seq, kernel_size=20):
    """Temporal Gaussian smoothing of a style-vector sequence.

    Each frame's vector becomes a Gaussian-weighted average over a window
    of ``kernel_size`` frames (sigma = kernel_size/4); the window is
    truncated at the sequence boundaries and the weights renormalized.
    The average is evaluated as v[t] + sum_i w_i * (v[i] - v[t]) so that
    constant stretches pass through bitwise unchanged.
    """
    if not seq:
        raise ValueError("style vector sequence is empty")
    offsets, weights = gaussian_kernel(kernel_size)
    values = np.stack([np.asarray(v.values, dtype=np.float64) for v in seq])
    n = len(seq)
    smoothed = []
    for t in range(n):
        idx = t + offsets
        valid = (idx >= 0) & (idx < n)
        w = weights[valid]
        w = w / w.sum()
        out = values[t] + (w[:, None] * (values[idx[valid]] - values[t])).sum(axis=0)
        smoothed.append(StyleVector(values=out, frame_index=seq[t].frame_index))
    return smoothed
