"""Batch video stylization.

A render walks the input frame directory in lexicographic order, picks
the active style per frame from the plan, smooths the per-frame style
statistics over time, and runs the restoration network with flow-warped
recurrent state. Style switches therefore fade over the smoothing window
instead of popping.

Smoothing always runs over the full frame timeline even when only a
prefix is rendered, so truncated renders are bitwise prefixes of full
ones.
"""

import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .archive import ArchiveError, load_manifest
from .temporal import estimate_flow, validate_temporal_mode
from .training import IMAGE_SUFFIXES, load_image, load_networks
from .transforms import (
    StyleVector,
    gaussian_smooth_style_vectors,
    split_style_vector,
    style_vector_from_stats,
)


@dataclass
class StylePlan:
    """Which style applies from which frame, plus transform knobs."""

    entries: list  # [(style image path, start frame index)]
    lam: float = 1.0
    consecutive: int = 1
    whiten: int = 1
    smooth_kernel: int = 20

    def __post_init__(self):
        if not self.entries:
            raise ValueError("style plan needs at least one style")
        self.entries = [(str(p), int(s)) for p, s in self.entries]
        starts = [s for _, s in self.entries]
        if starts[0] != 0:
            raise ValueError(f"first style must start at frame 0, got {starts[0]}")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError(f"style start indices must be strictly increasing: {starts}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"stylization factor must be in [0,1], got {self.lam}")
        if self.consecutive not in (1, 2, 3):
            raise ValueError(f"consecutive transform count must be 1..3, got {self.consecutive}")
        if self.whiten not in (1, 2, 3):
            raise ValueError(f"whiten count must be 1..3, got {self.whiten}")
        if self.smooth_kernel < 1:
            raise ValueError(f"smoothing kernel must be >= 1, got {self.smooth_kernel}")

    def active_index(self, frame):
        idx = 0
        for i, (_, start) in enumerate(self.entries):
            if start <= frame:
                idx = i
        return idx

    @classmethod
    def parse_styles(cls, text, **kw):
        """'a.png,b.png@40,c.png@90' -> plan entries."""
        entries = []
        for i, part in enumerate(text.split(",")):
            part = part.strip()
            if "@" in part:
                path, _, start = part.rpartition("@")
                try:
                    entries.append((path, int(start)))
                except ValueError:
                    raise ValueError(f"bad style start index in '{part}'")
            elif i == 0:
                entries.append((part, 0))
            else:
                raise ValueError(f"style '{part}' needs an @START frame index")
        return cls(entries=entries, **kw)


@dataclass
class RenderJob:
    input_dir: str
    output_dir: str
    checkpoint: str
    plan: StylePlan
    temporal_mode: str = ""  # empty = use the checkpoint's trained mode
    force: bool = False
    max_frames: int = 0  # 0 = all
    device: str = "cpu"
    precision: str = "float32"

    def __post_init__(self):
        if self.temporal_mode:
            validate_temporal_mode(self.temporal_mode)
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision}")

    def to_dict(self):
        d = {k: v for k, v in self.__dict__.items() if k != "plan"}
        d["plan"] = {
            "entries": list(self.plan.entries),
            "lam": self.plan.lam,
            "consecutive": self.plan.consecutive,
            "whiten": self.plan.whiten,
            "smooth_kernel": self.plan.smooth_kernel,
        }
        return d


@dataclass
class RenderReport:
    frames: int = 0
    output_dir: str = ""
    per_frame_seconds: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def mean_seconds(self):
        return float(np.mean(self.per_frame_seconds)) if self.per_frame_seconds else 0.0

    def to_dict(self):
        return {
            "frames": self.frames,
            "output_dir": self.output_dir,
            "mean_seconds_per_frame": self.mean_seconds,
            "per_frame_seconds": list(self.per_frame_seconds),
            "warnings": list(self.warnings),
        }


def list_frames(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"frame directory not found: {directory}")
    frames = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not frames:
        raise ValueError(f"no frames under {directory}")
    return frames


def write_frame(path, image):
    arr = image.detach().cpu().numpy()
    arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0)).save(path)


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for images in [0,1]."""
    mse = float(((a - b) ** 2).mean())
    if mse == 0:
        return float("inf")
    return 10.0 * math.log10(1.0 / mse)


def _adapt_network(net, whiten, consecutive, report):
    """Reconcile plan (k, n) with the trained transform stack.

    Dropping stages slices the stack; asking for more cycles the trained
    stages. The whiten count is a pure loop count and can be overridden
    in place.
    """
    cfg = net.config
    if whiten != cfg.whiten_count:
        report.warnings.append(
            f"whiten count {whiten} differs from trained {cfg.whiten_count}"
        )
        for stages in net.transforms.values():
            for stage in stages:
                stage.whiten_count = whiten
        cfg.whiten_count = whiten
    if consecutive != cfg.consecutive_count:
        report.warnings.append(
            f"consecutive count {consecutive} differs from trained {cfg.consecutive_count}"
        )
        for key, stages in list(net.transforms.items()):
            picked = [stages[i % len(stages)] for i in range(consecutive)]
            net.transforms[key] = torch.nn.ModuleList(picked)
        cfg.consecutive_count = consecutive


def _prepare_restoration(job, report):
    """Load, validate and configure the restoration net for a job."""
    try:
        load_manifest(job.checkpoint)
    except FileNotFoundError:
        raise ArchiveError(f"checkpoint not found: {job.checkpoint}")
    _, restoration, _, _ = load_networks(job.checkpoint)
    return _configure(restoration, job, report)


def _configure(net, job, report):
    plan = job.plan
    cfg = net.config
    mismatched = plan.whiten != cfg.whiten_count or plan.consecutive != cfg.consecutive_count
    if mismatched:
        warnings.warn(
            f"plan transform settings (whiten={plan.whiten}, consecutive={plan.consecutive}) "
            f"differ from the checkpoint's training config "
            f"(whiten={cfg.whiten_count}, consecutive={cfg.consecutive_count})"
        )
        if not job.force:
            raise RuntimeError(
                "plan/checkpoint transform mismatch; pass force to render anyway"
            )
        _adapt_network(net, plan.whiten, plan.consecutive, report)
    if job.temporal_mode:
        cfg.temporal_mode = job.temporal_mode
    if job.precision == "float64":
        net.double()
    net.to(job.device)
    net.eval()
    return net


def _style_vectors(net, plan, n_frames):
    """Per-frame style vectors from the plan, then temporal smoothing."""
    per_entry = []
    channel_counts = net.stats_channel_counts()
    with torch.no_grad():
        for path, _ in plan.entries:
            stats = net.style_statistics(load_image(path))
            flat = [s for scale_stats in stats for s in scale_stats]
            per_entry.append(style_vector_from_stats(flat))
    seq = [
        StyleVector(per_entry[plan.active_index(t)].values, frame_index=t)
        for t in range(n_frames)
    ]
    smoothed = gaussian_smooth_style_vectors(seq, plan.smooth_kernel)
    return smoothed, channel_counts


def _nest_stats(flat_stats, net):
    """Flat per-stage stats list -> style_statistics layout."""
    n = net.config.consecutive_count
    nested = []
    it = iter(flat_stats)
    for _ in net.config.active_scales:
        nested.append([next(it) for _ in range(n)])
    return nested


def stylize_video(job):
    """Render every frame of a job; returns the report."""
    report = RenderReport(output_dir=str(job.output_dir))
    net = _prepare_restoration(job, report)
    frames = list_frames(job.input_dir)
    out_dir = Path(job.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    smoothed, channel_counts = _style_vectors(net, job.plan, len(frames))
    limit = job.max_frames if job.max_frames else len(frames)
    dtype = torch.float64 if job.precision == "float64" else torch.float32

    use_flow = net.config.temporal_mode == "full"
    states = None
    prev_frame = None
    with torch.no_grad():
        for t, path in enumerate(frames[:limit]):
            t0 = time.perf_counter()
            try:
                frame = load_image(path).to(dtype)
            except OSError as err:
                raise RuntimeError(f"unreadable frame {t} ({path.name}): {err}")
            flat = split_style_vector(smoothed[t], channel_counts, dtype=dtype)
            stats = _nest_stats(flat, net)
            flow = None
            if use_flow and t > 0:
                flow = estimate_flow(prev_frame, frame)
            if net.config.temporal_mode == "no_recurrence":
                states = None
            out, states = net.forward_restoration(
                frame, style_stats=stats, prev_states=states, flow=flow, lam=job.plan.lam
            )
            write_frame(out_dir / f"{t:06d}.png", out)
            prev_frame = frame
            report.per_frame_seconds.append(time.perf_counter() - t0)
            report.frames += 1
    return report


def remove_style(input_dir, output_dir, checkpoint, style=None, max_frames=0):
    """Run the removal network frame by frame (no recurrence).

    Without an explicit style reference each frame serves as its own,
    matching how the restoration side references the original frame
    during training.
    """
    report = RenderReport(output_dir=str(output_dir))
    try:
        load_manifest(checkpoint)
    except FileNotFoundError:
        raise ArchiveError(f"checkpoint not found: {checkpoint}")
    removal, _, _, _ = load_networks(checkpoint)
    removal.eval()
    frames = list_frames(input_dir)
    out_dir = Path(output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    style_img = load_image(style) if style else None
    limit = max_frames if max_frames else len(frames)
    with torch.no_grad():
        for t, path in enumerate(frames[:limit]):
            t0 = time.perf_counter()
            try:
                frame = load_image(path)
            except OSError as err:
                raise RuntimeError(f"unreadable frame {t} ({path.name}): {err}")
            ref = style_img if style_img is not None else frame
            out = removal.forward_removal(frame, ref, lam=1.0)
            write_frame(out_dir / f"{t:06d}.png", out)
            report.per_frame_seconds.append(time.perf_counter() - t0)
            report.frames += 1
    return report
