"""Style removal / restoration networks.

Both variants share one skeleton: encode the frame at up to four scales,
restyle each active scale with a stack of decoupled transforms, then fuse
everything in a U-net decoder back to an RGB image. The restoration
variant additionally runs each transformed scale through a ConvLSTM whose
state is flow-warped between frames; the removal variant has no recurrent
units at all.

Weights are deterministic given the construction seed. The frozen encoder
is shared by reference and contributes no trainable parameters.
"""

import json
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .encoder import SCALE_CHANNELS, SCALE_FACTORS
from .temporal import (
    ConfigurationError,
    ConvLSTMCell,
    downscale_flow,
    validate_temporal_mode,
)
from .transforms import DecoupledIN

DEFAULT_WIDTHS = (64, 128, 256, 512)


@dataclass
class NetworkConfig:
    variant: str = "restoration"
    active_scales: tuple = (1, 2, 3, 4)
    whiten_count: int = 1
    consecutive_count: int = 1
    decoder_widths: tuple = DEFAULT_WIDTHS
    lstm_hidden: tuple = DEFAULT_WIDTHS
    temporal_mode: str = "full"

    def __post_init__(self):
        if self.variant not in ("removal", "restoration"):
            raise ValueError(f"variant must be removal or restoration, got '{self.variant}'")
        scales = tuple(sorted(set(int(s) for s in self.active_scales)))
        if not scales or any(s not in (1, 2, 3, 4) for s in scales):
            raise ValueError(f"active_scales must be a nonempty subset of {{1,2,3,4}}, got {self.active_scales}")
        if 1 not in scales:
            raise ValueError("active_scales must contain scale 1 (the decoder's output grid)")
        self.active_scales = scales
        if self.whiten_count not in (1, 2, 3):
            raise ValueError(f"whiten_count must be in {{1,2,3}}, got {self.whiten_count}")
        if self.consecutive_count not in (1, 2, 3):
            raise ValueError(f"consecutive_count must be in {{1,2,3}}, got {self.consecutive_count}")
        self.decoder_widths = tuple(int(w) for w in self.decoder_widths)
        self.lstm_hidden = tuple(int(w) for w in self.lstm_hidden)
        if len(self.decoder_widths) != 4 or len(self.lstm_hidden) != 4:
            raise ValueError("decoder_widths and lstm_hidden need one entry per scale (4)")
        validate_temporal_mode(self.temporal_mode)
        # no recurrent units in the removal network, ever
        if self.variant == "removal":
            self.temporal_mode = "no_recurrence"

    def to_dict(self):
        return {
            "variant": self.variant,
            "active_scales": list(self.active_scales),
            "whiten_count": self.whiten_count,
            "consecutive_count": self.consecutive_count,
            "decoder_widths": list(self.decoder_widths),
            "lstm_hidden": list(self.lstm_hidden),
            "temporal_mode": self.temporal_mode,
        }

    @classmethod
    def from_dict(cls, d):
        known = {k: d[k] for k in (
            "variant", "active_scales", "whiten_count", "consecutive_count",
            "decoder_widths", "lstm_hidden", "temporal_mode",
        ) if k in d}
        return cls(**known)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


class ConvBlock(nn.Module):
    """Two 3x3 convs with ReLU."""

    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)

    def forward(self, x):
        x = F.relu(self.conv1(x))
        return F.relu(self.conv2(x))


class UpsampleBlock(nn.Module):
    """Nearest x2 then 3x3 conv; nearest avoids checkerboard artifacts."""

    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return F.relu(self.conv(x))


class DownsampleBlock(nn.Module):
    """Stride-2 3x3 conv."""

    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)

    def forward(self, x):
        return F.relu(self.conv(x))


class OutputBlock(nn.Module):
    """3x3 conv to RGB, sigmoid keeps the image in [0,1]."""

    def __init__(self, c_in):
        super().__init__()
        self.conv = nn.Conv2d(c_in, 3, 3, padding=1)

    def forward(self, x):
        return torch.sigmoid(self.conv(x))


class FusionDecoder(nn.Module):
    """U-net over the active scales.

    A downward pass carries the finest scale toward the coarsest,
    concatenating each scale's input on the way; an upward pass mirrors
    it with skip connections; the output block renders RGB at the
    scale-1 grid. Scale gaps (inactive intermediate scales) are bridged
    by chained down/upsample blocks through the intermediate widths.
    """

    def __init__(self, active_scales, input_widths, widths=DEFAULT_WIDTHS):
        super().__init__()
        self.active_scales = tuple(active_scales)
        if 1 not in self.active_scales:
            raise ValueError("decoder needs scale 1")
        w = {s: widths[s - 1] for s in (1, 2, 3, 4)}

        self.entry = ConvBlock(input_widths[self.active_scales[0]], w[self.active_scales[0]])
        self.down_paths = nn.ModuleList()
        self.down_merge = nn.ModuleList()
        for prev, cur in zip(self.active_scales, self.active_scales[1:]):
            steps = []
            for mid in range(prev, cur):
                steps.append(DownsampleBlock(w[mid], w[mid + 1]))
            self.down_paths.append(nn.Sequential(*steps))
            self.down_merge.append(ConvBlock(w[cur] + input_widths[cur], w[cur]))
        self.up_paths = nn.ModuleList()
        self.up_merge = nn.ModuleList()
        for cur, prev in zip(self.active_scales[::-1], self.active_scales[::-1][1:]):
            steps = []
            for mid in range(cur, prev, -1):
                steps.append(UpsampleBlock(w[mid], w[mid - 1]))
            self.up_paths.append(nn.Sequential(*steps))
            self.up_merge.append(ConvBlock(2 * w[prev], w[prev]))
        self.output = OutputBlock(w[1])

    def forward(self, inputs):
        missing = [s for s in self.active_scales if s not in inputs or inputs[s] is None]
        if missing:
            raise ConfigurationError(f"decoder missing features for scales {missing}")

        down = [self.entry(inputs[self.active_scales[0]])]
        for i, cur in enumerate(self.active_scales[1:]):
            x = self.down_paths[i](down[-1])
            down.append(self.down_merge[i](torch.cat([x, inputs[cur]], dim=1)))

        y = down[-1]
        for i, prev_idx in enumerate(range(len(self.active_scales) - 2, -1, -1)):
            y = self.up_paths[i](y)
            y = self.up_merge[i](torch.cat([y, down[prev_idx]], dim=1))
        return self.output(y)


class StyleTransferNetwork(nn.Module):
    """One variant (removal or restoration) wired end to end."""

    def __init__(self, config, encoder, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.config = config
        self.encoder = encoder  # frozen; contributes buffers only
        self.seed = seed

        self.transforms = nn.ModuleDict()
        for s in config.active_scales:
            c = SCALE_CHANNELS[s - 1]
            self.transforms[str(s)] = nn.ModuleList(
                [DecoupledIN(c, config.whiten_count) for _ in range(config.consecutive_count)]
            )

        self.cells = nn.ModuleDict()
        if config.variant == "restoration":
            for s in config.active_scales:
                c = SCALE_CHANNELS[s - 1]
                self.cells[str(s)] = ConvLSTMCell(c, config.lstm_hidden[s - 1])

        input_widths = {}
        for s in config.active_scales:
            if config.variant == "restoration":
                input_widths[s] = config.lstm_hidden[s - 1]
            else:
                input_widths[s] = SCALE_CHANNELS[s - 1]
        self.decoder = FusionDecoder(config.active_scales, input_widths, config.decoder_widths)

    @property
    def max_scale(self):
        return max(self.config.active_scales)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def parameter_count(self):
        return sum(p.numel() for p in self.trainable_parameters())

    def _encode(self, image):
        return self.encoder.encode(image, max_scale=self.max_scale)

    def style_statistics(self, style_image):
        """Per-scale, per-stage stats of the expanded style features.

        Outer list runs over active scales in order, inner over the
        consecutive transform stages. This is the quantity a StyleVector
        flattens and temporal smoothing averages.
        """
        feats = self._encode(style_image)
        out = []
        for s in self.config.active_scales:
            f = feats.tap(s)
            out.append([stage.style_statistics(f) for stage in self.transforms[str(s)]])
        return out

    def stats_channel_counts(self):
        """Flat channel counts matching style_statistics order (2c per entry)."""
        return [
            2 * SCALE_CHANNELS[s - 1]
            for s in self.config.active_scales
            for _ in range(self.config.consecutive_count)
        ]

    def transform_features(self, feats, style_feats=None, lam=1.0, style_stats=None, return_detail=False):
        """Restyle every active scale; returns {scale: feature map}.

        style_stats, when given, replaces the style image path and must
        follow the style_statistics layout.
        """
        if (style_feats is None) == (style_stats is None):
            raise ValueError("provide exactly one of style_feats / style_stats")
        out = {}
        details = {}
        for i, s in enumerate(self.config.active_scales):
            x = feats.tap(s)
            stages = self.transforms[str(s)]
            for j, stage in enumerate(stages):
                if style_stats is not None:
                    stats = style_stats[i][j]
                    detail = stage(x, style_stats=stats, lam=lam, return_detail=True)
                else:
                    detail = stage(x, style=style_feats.tap(s), lam=lam, return_detail=True)
                x = detail.output
                details[(s, j)] = detail
            out[s] = x
        if return_detail:
            return out, details
        return out

    def apply_recurrence(self, transformed, prev_states=None, flow=None):
        """ConvLSTM update per scale with optional flow-warped state carry.

        transformed: {scale: feature map}; prev_states: {scale:
        ConvLSTMState} or None at the first frame; flow: FlowField at
        input resolution or None. Returns ({scale: hidden}, new states).
        """
        if self.config.variant != "restoration":
            raise ConfigurationError("recurrence only exists in the restoration variant")
        mode = self.config.temporal_mode
        if mode == "no_flow" and flow is not None:
            raise ConfigurationError("temporal mode no_flow forbids passing a flow field")
        if mode == "no_recurrence":
            prev_states = None  # history is discarded every frame
            flow = None

        hiddens = {}
        new_states = {}
        for s in self.config.active_scales:
            x = transformed[s]
            cell = self.cells[str(s)]
            state = None if prev_states is None else prev_states.get(s)
            if state is not None and flow is not None:
                factor = SCALE_FACTORS[s - 1]
                local = downscale_flow(flow, factor) if factor > 1 else flow
                if local.shape != tuple(x.shape[-2:]):
                    raise ConfigurationError(
                        f"flow grid {local.shape} does not match scale-{s} features {tuple(x.shape[-2:])}"
                    )
                state = state.warped(local)
            h, new_state = cell(x, state)
            hiddens[s] = h
            new_states[s] = new_state
        return hiddens, new_states

    def decode(self, inputs):
        squeeze = any(v.dim() == 3 for v in inputs.values())
        if squeeze:
            inputs = {k: v[None] for k, v in inputs.items()}
        out = self.decoder(inputs)
        return out[0] if squeeze else out

    def forward_removal(self, frame, style, lam=1.0, style_stats=None):
        if self.config.variant != "removal":
            raise ConfigurationError("forward_removal needs the removal variant")
        feats = self._encode(frame)
        style_feats = self._encode(style) if style_stats is None else None
        transformed = self.transform_features(feats, style_feats, lam=lam, style_stats=style_stats)
        return self.decode(transformed)

    def forward_restoration(self, frame, style=None, prev_states=None, flow=None,
                            lam=1.0, style_stats=None):
        if self.config.variant != "restoration":
            raise ConfigurationError("forward_restoration needs the restoration variant")
        feats = self._encode(frame)
        style_feats = None
        if style_stats is None:
            if style is None:
                raise ValueError("provide a style image or style_stats")
            style_feats = self._encode(style)
        transformed = self.transform_features(feats, style_feats, lam=lam, style_stats=style_stats)
        hiddens, new_states = self.apply_recurrence(transformed, prev_states, flow)
        return self.decode(hiddens), new_states

    def forward(self, frame, style, **kw):
        if self.config.variant == "removal":
            return self.forward_removal(frame, style, **kw)
        return self.forward_restoration(frame, style, **kw)


def build_network(config, encoder, seed=0):
    return StyleTransferNetwork(config, encoder, seed=seed)


def removal_config(**kw):
    kw.setdefault("variant", "removal")
    return NetworkConfig(**kw)


def restoration_config(**kw):
    kw.setdefault("variant", "restoration")
    return NetworkConfig(**kw)
