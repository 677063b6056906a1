"""Temporal coherence machinery: optical flow, state warping, ConvLSTM.

Flow convention is backward sampling: a flow field belongs to the current
frame, and warp(prev_state, flow)[y, x] samples prev_state at
(x + dx, y + dy). estimate_flow(prev, next) therefore answers "where in
the previous frame does each pixel of the next frame come from".

The built-in estimator is exhaustive block matching; it is slow but fully
deterministic, needs no weights, and returns exact zeros on identical
frames, which makes it usable as a test oracle. A learned estimator can
be plugged in through the adapter below.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .archive import load_manifest

TEMPORAL_MODES = ("full", "no_flow", "no_recurrence")


class ConfigurationError(RuntimeError):
    pass


def validate_temporal_mode(mode):
    if mode not in TEMPORAL_MODES:
        raise ConfigurationError(
            f"unknown temporal mode '{mode}', expected one of {TEMPORAL_MODES}"
        )
    return mode


@dataclass
class FlowField:
    """Per-pixel displacement; channel 0 horizontal (dx), channel 1 vertical (dy).

    ``scale`` tags the resolution the field applies to: 1 for input
    resolution, 2/4/8 for the downscaled feature grids.
    """

    values: torch.Tensor
    scale: int = 1

    def __post_init__(self):
        if self.values.dim() != 3 or self.values.shape[0] != 2:
            raise ValueError(f"flow must be (2,H,W), got {tuple(self.values.shape)}")
        if not torch.isfinite(self.values).all():
            raise ValueError("flow contains non-finite values")
        h, w = self.values.shape[-2:]
        bound = max(h, w)
        if self.values.abs().max() > bound:
            raise ValueError(f"flow displacement exceeds sanity bound {bound}")

    @property
    def shape(self):
        return tuple(self.values.shape[-2:])


def zero_flow(h, w, scale=1):
    return FlowField(torch.zeros(2, h, w), scale=scale)


def _to_gray(image):
    """Channel-mean grayscale as float64 numpy, from torch or numpy input."""
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image.mean(axis=0)
    if image.ndim != 2:
        raise ValueError(f"expected (H,W) or (C,H,W) image, got shape {image.shape}")
    return image


class BlockMatchingFlow:
    """Exhaustive SAD block matcher on a coarse anchor grid.

    8x8 cost windows around anchors every ``grid`` pixels, search radius
    ``radius`` in both axes, candidates tried in order of increasing
    squared magnitude then (dx, dy), with a strict-less running minimum.
    Ties therefore resolve toward the smaller, lexicographically earlier
    displacement, and identical frames yield exact zeros. The anchor-grid
    result is nearest-filled back to full resolution.
    """

    def __init__(self, patch=8, grid=4, radius=8):
        if patch < 1 or grid < 1 or radius < 0:
            raise ValueError("patch and grid must be >= 1, radius >= 0")
        self.patch = patch
        self.grid = grid
        self.radius = radius

    def __call__(self, prev, next):
        a = _to_gray(prev)
        b = _to_gray(next)
        if a.shape != b.shape:
            raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
        h, w = a.shape
        ys = np.arange(0, h, self.grid)
        xs = np.arange(0, w, self.grid)

        # cost window rows/cols per anchor, clipped at the borders so the
        # window is identical across candidates at a given anchor
        half = self.patch // 2
        y0 = np.clip(ys - (half - 1), 0, h)
        y1 = np.clip(ys + half + 1, 0, h)
        x0 = np.clip(xs - (half - 1), 0, w)
        x1 = np.clip(xs + half + 1, 0, w)

        candidates = sorted(
            ((dx * dx + dy * dy, dx, dy)
             for dx in range(-self.radius, self.radius + 1)
             for dy in range(-self.radius, self.radius + 1))
        )

        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        best_cost = np.full((len(ys), len(xs)), np.inf)
        best_dx = np.zeros_like(best_cost)
        best_dy = np.zeros_like(best_cost)
        for _, dx, dy in candidates:
            sy = np.clip(yy + dy, 0, h - 1)
            sx = np.clip(xx + dx, 0, w - 1)
            diff = np.abs(a[sy, sx] - b)
            # integral image with a zero top row/left column
            integral = np.zeros((h + 1, w + 1))
            integral[1:, 1:] = diff.cumsum(axis=0).cumsum(axis=1)
            cost = (
                integral[y1][:, x1]
                - integral[y0][:, x1]
                - integral[y1][:, x0]
                + integral[y0][:, x0]
            )
            better = cost < best_cost
            best_cost[better] = cost[better]
            best_dx[better] = dx
            best_dy[better] = dy

        # nearest-fill the anchor grid back to pixel resolution
        full_dx = np.repeat(np.repeat(best_dx, self.grid, 0), self.grid, 1)[:h, :w]
        full_dy = np.repeat(np.repeat(best_dy, self.grid, 0), self.grid, 1)[:h, :w]
        values = torch.from_numpy(np.stack([full_dx, full_dy]).astype(np.float32))
        return FlowField(values, scale=1)


_FLOW_BUILDERS = {}


def register_flow_builder(name, builder):
    """Register a constructor (arrays, metadata) -> callable(prev, next)."""
    _FLOW_BUILDERS[name] = builder


class LearnedFlowAdapter:
    """Wraps an external pretrained flow network stored in a weight archive.

    The package ships no such network; using the adapter requires a
    registered builder that knows how to assemble one from the archive's
    arrays. Without it this raises a configuration error, which is the
    defined behavior for an unavailable estimator.
    """

    def __init__(self, archive_path, builder_name="default"):
        builder = _FLOW_BUILDERS.get(builder_name)
        if builder is None:
            raise ConfigurationError(
                f"no learned flow builder registered under '{builder_name}'; "
                "install one via register_flow_builder or use block matching"
            )
        manifest = load_manifest(archive_path)
        from .archive import load_archive

        arrays, metadata = load_archive(archive_path)
        self._estimate = builder(arrays, metadata)
        self.manifest = manifest

    def __call__(self, prev, next):
        flow = self._estimate(prev, next)
        if isinstance(flow, FlowField):
            return flow
        return FlowField(torch.as_tensor(flow, dtype=torch.float32), scale=1)


def estimate_flow(prev, next, estimator=None):
    """Flow from the current frame back into the previous one."""
    if estimator is None:
        estimator = BlockMatchingFlow()
    return estimator(prev, next)


def downscale_flow(flow, factor):
    """Average-pool a flow field by a power-of-two factor.

    Displacements are divided by the factor so they stay in units of the
    coarser grid's pixels.
    """
    if factor not in (1, 2, 4, 8):
        raise ValueError(f"factor must be one of 1,2,4,8, got {factor}")
    if factor == 1:
        return flow
    h, w = flow.shape
    if h % factor or w % factor:
        raise ValueError(f"flow size {h}x{w} not divisible by {factor}")
    pooled = torch.nn.functional.avg_pool2d(flow.values[None], factor)[0] / factor
    return FlowField(pooled, scale=flow.scale * factor)


def warp(state, flow):
    """Backward-bilinear warp with border clamping.

    output[..., y, x] = bilinear(state at (x + dx, y + dy)), sample
    coordinates clamped to the image. Zero flow reproduces the input
    bitwise and the map is exactly linear in the state values.
    """
    values = flow.values if isinstance(flow, FlowField) else flow
    if values.dim() != 3 or values.shape[0] != 2:
        raise ValueError(f"flow must be (2,H,W), got {tuple(values.shape)}")
    h, w = state.shape[-2:]
    if values.shape[-2:] != (h, w):
        raise ValueError(
            f"flow grid {tuple(values.shape[-2:])} does not match state {h}x{w}"
        )
    dtype = state.dtype
    yy, xx = torch.meshgrid(
        torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij"
    )
    sx = (xx + values[0].to(dtype)).clamp(0, w - 1)
    sy = (yy + values[1].to(dtype)).clamp(0, h - 1)
    x0 = sx.floor()
    y0 = sy.floor()
    fx = sx - x0
    fy = sy - y0
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    v00 = state[..., y0, x0]
    v01 = state[..., y0, x1]
    v10 = state[..., y1, x0]
    v11 = state[..., y1, x1]
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    return w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11


@dataclass
class ConvLSTMState:
    hidden: torch.Tensor
    cell: torch.Tensor

    def __post_init__(self):
        if self.hidden.shape != self.cell.shape:
            raise ValueError(
                f"hidden {tuple(self.hidden.shape)} and cell {tuple(self.cell.shape)} differ"
            )

    def detach(self):
        return ConvLSTMState(self.hidden.detach(), self.cell.detach())

    def warped(self, flow):
        """Motion-compensate both halves of the state with one flow field."""
        return ConvLSTMState(warp(self.hidden, flow), warp(self.cell, flow))


class ConvLSTMCell(nn.Module):
    """Single convolutional LSTM cell, 3x3 gate convolutions.

    One conv maps (c_in + c_hid) -> 4*c_hid; the four chunks drive the
    input, forget and output gates (sigmoid) and the candidate (tanh).
    With zero weights and zero state the hidden output is exactly zero.
    """

    def __init__(self, in_channels, hidden_channels):
        super().__init__()
        self.in_channels = in_channels
        self.hidden_channels = hidden_channels
        self.gates = nn.Conv2d(in_channels + hidden_channels, 4 * hidden_channels, 3, padding=1)
        nn.init.normal_(self.gates.weight, std=1.0 / math.sqrt((in_channels + hidden_channels) * 9))
        nn.init.zeros_(self.gates.bias)

    def initial_state(self, h, w, batch=None, dtype=torch.float32, device=None):
        shape = (self.hidden_channels, h, w) if batch is None else (batch, self.hidden_channels, h, w)
        zeros = torch.zeros(shape, dtype=dtype, device=device)
        return ConvLSTMState(zeros, zeros.clone())

    def forward(self, x, state=None):
        squeeze = x.dim() == 3
        if squeeze:
            x = x[None]
        if x.shape[1] != self.in_channels:
            raise ValueError(f"input has {x.shape[1]} channels, cell expects {self.in_channels}")
        h, w = x.shape[-2:]
        if state is None:
            state = self.initial_state(h, w, batch=x.shape[0], dtype=x.dtype, device=x.device)
        hidden, cell = state.hidden, state.cell
        if squeeze and hidden.dim() == 3:
            hidden, cell = hidden[None], cell[None]
        if hidden.shape[-2:] != (h, w):
            raise ValueError(
                f"state grid {tuple(hidden.shape[-2:])} does not match input {h}x{w}"
            )
        i, f, o, g = self.gates(torch.cat([x, hidden], dim=1)).chunk(4, dim=1)
        i = torch.sigmoid(i)
        f = torch.sigmoid(f)
        o = torch.sigmoid(o)
        g = torch.tanh(g)
        new_cell = f * cell + i * g
        new_hidden = o * torch.tanh(new_cell)
        if squeeze:
            new_hidden, new_cell = new_hidden[0], new_cell[0]
        return new_hidden, ConvLSTMState(new_hidden, new_cell)


def convlstm_step(x, state, cell):
    """Functional form of one recurrent update; returns (output, new state)."""
    return cell(x, state)


def save_flow(path, flow, frame_pair):
    """Raw little-endian float32 dump plus a JSON sidecar {h, w, frame_pair}."""
    path = Path(path)
    h, w = flow.shape
    path.write_bytes(flow.values.detach().cpu().numpy().astype("<f4").tobytes())
    sidecar = {"h": h, "w": w, "frame_pair": list(frame_pair)}
    Path(str(path) + ".json").write_text(json.dumps(sidecar))
    return path


def load_flow(path):
    path = Path(path)
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    h, w = sidecar["h"], sidecar["w"]
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != 2 * h * w:
        raise ValueError(f"flow payload has {raw.size} floats, sidecar promises {2 * h * w}")
    values = torch.from_numpy(raw.reshape(2, h, w).copy())
    return FlowField(values, scale=1), tuple(sidecar["frame_pair"])
