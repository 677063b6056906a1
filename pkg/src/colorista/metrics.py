"""Quality metrics and the timing benchmark.

ssim follows the standard windowed formulation (11x11 Gaussian, sigma
1.5, C1=0.01^2, C2=0.03^2 for unit data range) computed per channel in
float64 over valid windows only, which makes it agree with reference
implementations that pad and then crop the border.

perceptual_distance is an LPIPS-shaped distance over the four encoder
taps:
unit-normalize each feature vector across channels, square the
difference, weight per channel and average. Without calibrated weights
(the default, labeled "uncalibrated") every channel weighs 1/C.

gram_loss compares F.F^T/(c*h*w) Gram matrices per tap; its absolute
magnitude depends on this normalization, so values are only comparable
within one convention.
"""

import hashlib
import json
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .archive import load_archive
from .encoder import TAP_LAYERS

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _to_chw(image, name):
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(image)
    if image.dim() == 2:
        image = image[None]
    if image.dim() != 3:
        raise ValueError(f"{name} must be (C,H,W) or (H,W), got {tuple(image.shape)}")
    return image.double()


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = size // 2
    x = torch.arange(-r, r + 1, dtype=torch.float64)
    g = torch.exp(-(x ** 2) / (2 * sigma * sigma))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a, b):
    """Mean SSIM over valid 11x11 windows, channel-averaged."""
    a = _to_chw(a, "a")
    b = _to_chw(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.min() < 0 or a.max() > 1 or b.min() < 0 or b.max() > 1:
        raise ValueError("ssim expects values in [0,1]")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels per side")
    kernel = _gaussian_window()[None, None]
    c = a.shape[0]
    k = kernel.expand(c, 1, -1, -1)

    def filt(x):
        return torch.nn.functional.conv2d(x[None], k, groups=c)[0]

    mu_a = filt(a)
    mu_b = filt(b)
    mu_aa = filt(a * a)
    mu_bb = filt(b * b)
    mu_ab = filt(a * b)
    var_a = mu_aa - mu_a * mu_a
    var_b = mu_bb - mu_b * mu_b
    cov = mu_ab - mu_a * mu_b
    s = ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)) / (
        (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    )
    return float(s.mean())


def _normalized_taps(feats):
    out = {}
    for name, f in zip(TAP_LAYERS, (feats.f1, feats.f2, feats.f3, feats.f4)):
        norm = torch.sqrt((f ** 2).sum(dim=-3, keepdim=True) + 1e-10)
        out[name] = f / norm
    return out


def perceptual_distance(a, b, encoder, weights=None):
    """Channel-weighted squared difference of unit-normalized tap features.

    weights: optional {tap name: (C,) tensor}; defaults to uniform 1/C
    per tap (the uncalibrated variant).
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    with torch.no_grad():
        fa = _normalized_taps(encoder.encode(a))
        fb = _normalized_taps(encoder.encode(b))
    total = 0.0
    for name in TAP_LAYERS:
        diff2 = (fa[name] - fb[name]) ** 2
        c = diff2.shape[-3]
        if weights is not None and name in weights:
            w = torch.as_tensor(weights[name], dtype=diff2.dtype)
            if w.numel() != c:
                raise ValueError(f"calibrated weights for {name} have {w.numel()} entries, expected {c}")
            layer = (diff2 * w[:, None, None]).sum(dim=-3).mean()
        else:
            layer = diff2.mean()
        total = total + float(layer)
    return total / len(TAP_LAYERS)


def load_perceptual_weights(path):
    """Calibrated per-channel weights from an archive, keyed by tap name."""
    arrays, _ = load_archive(path)
    missing = [t for t in TAP_LAYERS if t not in arrays]
    if missing:
        raise ValueError(f"calibration archive lacks weights for taps {missing}")
    return {t: np.abs(arrays[t]) for t in TAP_LAYERS}


def gram_matrix(f):
    """F.F^T over flattened spatial dims, normalized by c*h*w."""
    if f.dim() == 4:
        c, h, w = f.shape[-3:]
        flat = f.reshape(f.shape[0], c, h * w)
        return flat @ flat.transpose(-1, -2) / (c * h * w)
    c, h, w = f.shape
    flat = f.reshape(c, h * w)
    return flat @ flat.T / (c * h * w)


def gram_loss_features(feats_a, feats_b):
    """Mean over taps of mean squared Gram difference; feature-level entry."""
    total = 0.0
    count = 0
    for fa, fb in zip(feats_a, feats_b):
        ga = gram_matrix(fa)
        gb = gram_matrix(fb)
        total = total + float(((ga - gb) ** 2).mean())
        count += 1
    if count == 0:
        raise ValueError("no feature taps supplied")
    return total / count


def gram_loss(a, b, encoder):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    with torch.no_grad():
        fa = encoder.encode(a)
        fb = encoder.encode(b)
    return gram_loss_features(
        (fa.f1, fa.f2, fa.f3, fa.f4), (fb.f1, fb.f2, fb.f3, fb.f4)
    )


def content_distance(a, b, encoder):
    """conv4_1 mean squared error, the content metric of the report."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    with torch.no_grad():
        fa = encoder.content_feature(a)
        fb = encoder.content_feature(b)
    return float(((fa - fb) ** 2).mean())


@dataclass
class PairMetrics:
    content: str
    style: str
    output: str
    ssim: float
    perceptual: float
    content_loss: float
    gram_loss: float


@dataclass
class TimingRow:
    resolution: str
    mean_seconds: float
    std_seconds: float
    frames: int


@dataclass
class MetricsReport:
    pairs: list = field(default_factory=list)
    timings: list = field(default_factory=list)
    checkpoint_hash: str = ""
    config: dict = field(default_factory=dict)
    perceptual_calibrated: bool = False

    def aggregates(self):
        if not self.pairs:
            return {}
        keys = ("ssim", "perceptual", "content_loss", "gram_loss")
        return {k: sum(getattr(p, k) for p in self.pairs) / len(self.pairs) for k in keys}

    def to_dict(self):
        return {
            "pairs": [asdict(p) for p in self.pairs],
            "aggregates": self.aggregates(),
            "timings": [asdict(t) for t in self.timings],
            "checkpoint_hash": self.checkpoint_hash,
            "config": self.config,
            "perceptual_calibrated": self.perceptual_calibrated,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            pairs=[PairMetrics(**p) for p in d.get("pairs", [])],
            timings=[TimingRow(**t) for t in d.get("timings", [])],
            checkpoint_hash=d.get("checkpoint_hash", ""),
            config=d.get("config", {}),
            perceptual_calibrated=d.get("perceptual_calibrated", False),
        )

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def to_table(self):
        """Plain-text summary; metric columns ordered SSIM, LPIPS, Content, Gram."""
        lpips_label = "LPIPS" if self.perceptual_calibrated else "LPIPS(uncal)"
        lines = []
        header = f"{'pair':<24} {'SSIM':>10} {lpips_label:>14} {'Content':>12} {'Gram':>14}"
        lines.append(header)
        lines.append("-" * len(header))
        for p in self.pairs:
            name = p.output.rsplit("/", 1)[-1][:24]
            lines.append(
                f"{name:<24} {p.ssim:>10.4f} {p.perceptual:>14.6f} "
                f"{p.content_loss:>12.6f} {p.gram_loss:>14.8f}"
            )
        agg = self.aggregates()
        if agg:
            lines.append("-" * len(header))
            lines.append(
                f"{'mean':<24} {agg['ssim']:>10.4f} {agg['perceptual']:>14.6f} "
                f"{agg['content_loss']:>12.6f} {agg['gram_loss']:>14.8f}"
            )
        for t in self.timings:
            lines.append(
                f"timing {t.resolution}: {t.mean_seconds:.4f} s/frame "
                f"(std {t.std_seconds:.4f}, n={t.frames})"
            )
        return "\n".join(lines)


def evaluate_pairs(triples, encoder, weights=None):
    """Metric rows for (content, style, output) image triples.

    SSIM / perceptual / content compare the output against the content
    frame; gram compares the output against the style reference.
    """
    from .training import load_image

    rows = []
    for content_path, style_path, output_path in triples:
        content = load_image(content_path)
        style = load_image(style_path)
        output = load_image(output_path)
        rows.append(PairMetrics(
            content=str(content_path),
            style=str(style_path),
            output=str(output_path),
            ssim=ssim(output, content),
            perceptual=perceptual_distance(output, content, encoder, weights=weights),
            content_loss=content_distance(output, content, encoder),
            gram_loss=gram_loss(output, style, encoder),
        ))
    return rows


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def parse_resolution(text):
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise ValueError(f"resolution must look like 600x360, got '{text}'")


def benchmark(checkpoint, resolutions, frames=80, warmup=3, temporal_mode="no_flow", seed=0):
    """Seconds/frame of the restoration pipeline at each resolution.

    Style statistics are computed once per run (as a deployed renderer
    would); the timed loop covers encode, transform, recurrence and
    decode per frame. Warmup frames are excluded from the statistics.
    """
    from .temporal import validate_temporal_mode
    from .training import load_networks

    validate_temporal_mode(temporal_mode)
    _, restoration, _, _ = load_networks(checkpoint)
    restoration.config.temporal_mode = temporal_mode

    rows = []
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for text in resolutions:
            w, h = parse_resolution(text)
            if w % 8 or h % 8:
                warnings.warn(f"resolution {text} not divisible by 8, skipping")
                continue
            style = torch.rand(3, 64, 64, generator=g)
            stats = restoration.style_statistics(style)
            clip = [torch.rand(3, h, w, generator=g) for _ in range(min(frames + warmup, 8))]
            states = None
            times = []
            for i in range(frames + warmup):
                frame = clip[i % len(clip)]
                t0 = time.perf_counter()
                _, states = restoration.forward_restoration(
                    frame, style_stats=stats, prev_states=states
                )
                elapsed = time.perf_counter() - t0
                if i >= warmup:
                    times.append(elapsed)
            times = np.asarray(times)
            rows.append(TimingRow(
                resolution=f"{w}x{h}",
                mean_seconds=float(times.mean()),
                std_seconds=float(times.std()),
                frames=len(times),
            ))
    return rows


def emit_report(report, json_path, table_path=None):
    """Write the JSON report and, optionally, the text table."""
    try:
        with open(json_path, "w") as fh:
            fh.write(report.to_json())
        if table_path is not None:
            with open(table_path, "w") as fh:
                fh.write(report.to_table() + "\n")
    except OSError as err:
        raise RuntimeError(f"could not write report to {json_path}: {err}")
