"""Self-supervised two-network training.

Each step draws clips of five consecutive frames. The removal network
restyles every frame toward a randomly chosen style image (full strength,
so the frame's own look is stripped); the restoration network takes the
removed frames back, using the original frame as its style reference and
threading flow-warped ConvLSTM state through the clip. Both passes are
supervised purely by conv4_1 content loss against the original frames and
backpropagate jointly through the whole chain.

Checkpoints are self-contained: network weights, optimizer momentum, the
frozen encoder, the sampling RNG state and the metric history all live in
one archive, which is what makes bitwise resume possible.
"""

import csv
import json
import math
import random
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .archive import ArchiveError, load_archive, save_archive
from .encoder import FeatureEncoder, load_pretrained, random_encoder_arrays, IMAGENET_MEAN, IMAGENET_STD
from .network import NetworkConfig, StyleTransferNetwork, removal_config, restoration_config
from .temporal import estimate_flow

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
HISTORY_COLUMNS = ("step", "epoch", "lr", "loss_removal", "loss_restoration", "loss_total")


@dataclass
class TrainConfig:
    epochs: int = 80
    momentum: float = 0.9
    base_lr: float = 1e-5
    warm_lr: float = 0.01
    warm_epochs: int = 5  # epochs spent decaying warm_lr down to base_lr
    loss_weight: float = 1.0
    seed: int = 0
    batch_size: int = 1
    sample_lambda: bool = False
    crop_size: int = 128
    steps_per_epoch: int = 50
    network: dict = field(default_factory=dict)
    encoder_archive: str = ""
    encoder_seed: int = 0

    def __post_init__(self):
        if self.loss_weight < 0:
            raise ValueError(f"loss_weight must be >= 0, got {self.loss_weight}")
        if self.epochs < 0 or self.warm_epochs < 1:
            raise ValueError("epochs must be >= 0 and warm_epochs >= 1")
        if self.crop_size % 8:
            raise ValueError(f"crop_size must be divisible by 8, got {self.crop_size}")
        if self.batch_size < 1 or self.steps_per_epoch < 1:
            raise ValueError("batch_size and steps_per_epoch must be >= 1")

    def to_dict(self):
        d = self.__dict__.copy()
        d["network"] = dict(self.network)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def lr_schedule(epoch, config):
    """Learning rate for a 1-based epoch index.

    Epoch 1 runs at warm_lr; the rate decays geometrically to base_lr
    over warm_epochs epochs, then follows cosine decay from base_lr down
    to zero at the final epoch.
    """
    if epoch < 1:
        raise ValueError(f"epochs are 1-based, got {epoch}")
    settle = 1 + config.warm_epochs  # epoch at which base_lr is reached
    if epoch <= settle:
        t = (epoch - 1) / config.warm_epochs
        return float(config.warm_lr * (config.base_lr / config.warm_lr) ** t)
    if config.epochs <= settle:
        return float(config.base_lr)
    t = (epoch - settle) / (config.epochs - settle)
    t = min(t, 1.0)
    return float(config.base_lr * 0.5 * (1.0 + math.cos(math.pi * t)))


@dataclass
class ClipSample:
    """Five consecutive frames sharing one crop window, plus a style image."""

    frames: list
    style: torch.Tensor
    video: str
    start: int
    crop: tuple  # (top, left, size)

    def __post_init__(self):
        if len(self.frames) != 5:
            raise ValueError(f"a clip holds exactly 5 frames, got {len(self.frames)}")
        shapes = {tuple(f.shape) for f in self.frames}
        if len(shapes) != 1:
            raise ValueError(f"clip frames disagree on shape: {shapes}")


def load_image(path, size=None):
    """Image file -> float32 (3,H,W) tensor in [0,1]."""
    img = Image.open(path).convert("RGB")
    if size is not None:
        img = img.resize((size, size), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def _frame_files(directory):
    return sorted(p for p in Path(directory).iterdir()
                  if p.suffix.lower() in IMAGE_SUFFIXES)


class ClipDataset:
    """Clip sampler over per-video frame directories.

    Videos with fewer than five frames, or frames smaller than the crop,
    are skipped with a warning at ingest time. Full frames are cached in
    memory after first load, which is fine at desk scale.
    """

    def __init__(self, content_root, style_root, crop_size=128):
        content_root = Path(content_root)
        style_root = Path(style_root)
        if not content_root.is_dir():
            raise FileNotFoundError(f"content root not found: {content_root}")
        if not style_root.is_dir():
            raise FileNotFoundError(f"style root not found: {style_root}")
        self.crop_size = crop_size
        self.videos = {}
        for sub in sorted(p for p in content_root.iterdir() if p.is_dir()):
            files = _frame_files(sub)
            if len(files) < 5:
                warnings.warn(f"video '{sub.name}' has {len(files)} frames (<5), skipping")
                continue
            with Image.open(files[0]) as probe:
                w, h = probe.size
            if h < crop_size or w < crop_size:
                warnings.warn(
                    f"video '{sub.name}' frames are {w}x{h}, smaller than crop {crop_size}, skipping"
                )
                continue
            self.videos[sub.name] = files
        if not self.videos:
            raise ValueError(f"no usable videos under {content_root}")
        self.styles = _frame_files(style_root)
        if not self.styles:
            raise ValueError(f"no style images under {style_root}")
        self._cache = {}

    def clip_starts(self, video):
        return len(self.videos[video]) - 4

    def total_clips(self):
        return sum(self.clip_starts(v) for v in self.videos)

    def _full_frame(self, path):
        key = str(path)
        if key not in self._cache:
            self._cache[key] = load_image(path)
        return self._cache[key]

    def sample(self, rng):
        """Draw one ClipSample; all randomness comes from the passed rng."""
        video = sorted(self.videos)[rng.randrange(len(self.videos))]
        files = self.videos[video]
        start = rng.randrange(len(files) - 4)
        first = self._full_frame(files[start])
        h, w = first.shape[-2:]
        top = rng.randrange(h - self.crop_size + 1)
        left = rng.randrange(w - self.crop_size + 1)
        style_path = self.styles[rng.randrange(len(self.styles))]
        frames = [
            self._full_frame(files[start + i])[
                :, top:top + self.crop_size, left:left + self.crop_size
            ].clone()
            for i in range(5)
        ]
        style = self._style_image(style_path)
        return ClipSample(frames, style, video, start, (top, left, self.crop_size))

    def _style_image(self, path):
        key = ("style", str(path))
        if key not in self._cache:
            self._cache[key] = load_image(path, size=self.crop_size)
        return self._cache[key]


def ingest_dataset(content_root, style_root, crop_size=128):
    return ClipDataset(content_root, style_root, crop_size)


def content_loss(generated, target, encoder):
    """Mean squared error between conv4_1 features of the two images."""
    if generated.shape != target.shape:
        raise ValueError(
            f"shape mismatch: {tuple(generated.shape)} vs {tuple(target.shape)}"
        )
    fg = encoder.content_feature(generated)
    with torch.no_grad():
        ft = encoder.content_feature(target)
    return torch.mean((fg - ft) ** 2)


def combine_frame_losses(removal_losses, restoration_losses, loss_weight):
    """Sum over frames of removal + loss_weight * restoration terms."""
    if len(removal_losses) != len(restoration_losses):
        raise ValueError(
            f"per-frame loss lists differ: {len(removal_losses)} vs {len(restoration_losses)}"
        )
    total = None
    for r, s in zip(removal_losses, restoration_losses):
        term = r + loss_weight * s
        total = term if total is None else total + term
    return total


def total_loss(clip_outputs_removal, clip_outputs_restoration, clip_frames, encoder, loss_weight=1.0):
    """The per-clip training objective over a 5-frame clip."""
    if not (len(clip_outputs_removal) == len(clip_outputs_restoration) == len(clip_frames) == 5):
        raise ValueError("clip lists must all have length 5")
    rem = [content_loss(g, c, encoder) for g, c in zip(clip_outputs_removal, clip_frames)]
    res = [content_loss(g, c, encoder) for g, c in zip(clip_outputs_restoration, clip_frames)]
    return combine_frame_losses(rem, res, loss_weight)


def _rng_state_to_json(state):
    return [state[0], list(state[1]), state[2]]


def _rng_state_from_json(data):
    return (data[0], tuple(data[1]), data[2])


class Trainer:
    """Owns the two networks, the optimizer and the sampling RNG."""

    def __init__(self, config, dataset=None, encoder=None):
        self.config = config
        self.dataset = dataset
        if encoder is None:
            if config.encoder_archive:
                encoder = load_pretrained(config.encoder_archive)
            else:
                encoder = FeatureEncoder(
                    random_encoder_arrays(config.encoder_seed),
                    {"mean": list(IMAGENET_MEAN), "std": list(IMAGENET_STD)},
                )
                encoder.eval()
        self.encoder = encoder

        net_kw = dict(config.network)
        net_kw.pop("variant", None)
        self.removal = StyleTransferNetwork(
            removal_config(**net_kw), encoder, seed=config.seed
        )
        self.restoration = StyleTransferNetwork(
            restoration_config(**net_kw), encoder, seed=config.seed + 1
        )
        self.removal.train()
        self.restoration.train()

        self._param_names = self._named_params()
        self.optimizer = torch.optim.SGD(
            [p for _, _, p in self._param_names],
            lr=config.base_lr,
            momentum=config.momentum,
        )
        self.rng = random.Random(config.seed)
        self.epoch = 0  # last completed epoch
        self.global_step = 0
        self.history = []
        self._flow_cache = {}

    def _named_params(self):
        out = []
        for tag, net in (("removal", self.removal), ("restoration", self.restoration)):
            for name, p in net.named_parameters():
                out.append((tag, name, p))
        return out

    def current_lr(self, epoch=None):
        return lr_schedule(epoch or max(self.epoch, 0) + 1, self.config)

    def _set_lr(self, lr):
        for group in self.optimizer.param_groups:
            group["lr"] = lr

    def _clip_flows(self, clip):
        if self.restoration.config.temporal_mode != "full":
            return [None] * 4
        key = (clip.video, clip.start, clip.crop)
        if key not in self._flow_cache:
            if len(self._flow_cache) > 64:
                self._flow_cache.clear()
            self._flow_cache[key] = [
                estimate_flow(clip.frames[i], clip.frames[i + 1]) for i in range(4)
            ]
        return self._flow_cache[key]

    def _clip_loss(self, clip, lam):
        frames = torch.stack(clip.frames)
        with torch.no_grad():
            feats_c = self.encoder.encode(frames)  # style/loss targets, constant
        target_f4 = feats_c.f4

        # removal: all five frames at once against the clip's style image
        removed = self.removal.forward_removal(frames, clip.style[None], lam=1.0)

        # restoration: sequential, original frames as style references
        flows = self._clip_flows(clip)
        states = None
        restored = []
        for i in range(5):
            stats = [
                [stage.style_statistics(feats_c.tap(s)[i]) for stage in self.restoration.transforms[str(s)]]
                for s in self.restoration.config.active_scales
            ]
            flow = None if i == 0 else flows[i - 1]
            out, states = self.restoration.forward_restoration(
                removed[i], style_stats=stats, prev_states=states, flow=flow, lam=lam
            )
            restored.append(out)
        restored = torch.stack(restored)

        f_removed = self.encoder.encode(removed, max_scale=4).f4
        f_restored = self.encoder.encode(restored, max_scale=4).f4
        loss_rem = ((f_removed - target_f4) ** 2).mean(dim=(1, 2, 3)).sum()
        loss_res = ((f_restored - target_f4) ** 2).mean(dim=(1, 2, 3)).sum()
        return loss_rem, loss_res

    def train_step(self, batch=None, lr=None):
        """One optimizer update over a batch of clips; returns metrics."""
        if batch is None:
            if self.dataset is None:
                raise RuntimeError("trainer has no dataset and no explicit batch")
            batch = [self.dataset.sample(self.rng) for _ in range(self.config.batch_size)]
        if lr is None:
            lr = self.current_lr()
        self._set_lr(lr)
        self.optimizer.zero_grad()

        sum_rem = 0.0
        sum_res = 0.0
        total = None
        for clip in batch:
            lam = self.rng.uniform(0.0, 1.0) if self.config.sample_lambda else 1.0
            try:
                loss_rem, loss_res = self._clip_loss(clip, lam)
            except ValueError as err:
                # non-finite activations trip the transforms' input checks
                raise RuntimeError(
                    f"non-finite forward pass at step {self.global_step + 1} "
                    f"(clip {clip.video}@{clip.start}, lr={lr}): {err}"
                ) from err
            clip_total = loss_rem + self.config.loss_weight * loss_res
            total = clip_total if total is None else total + clip_total
            sum_rem += float(loss_rem.detach())
            sum_res += float(loss_res.detach())
        total = total / len(batch)

        if not torch.isfinite(total):
            raise RuntimeError(
                f"non-finite loss at step {self.global_step + 1}: "
                f"removal={sum_rem}, restoration={sum_res}, lr={lr}"
            )
        total.backward()
        self.optimizer.step()
        self.global_step += 1
        metrics = {
            "step": self.global_step,
            "epoch": self.epoch + 1,
            "lr": lr,
            "loss_removal": sum_rem / len(batch),
            "loss_restoration": sum_res / len(batch),
            "loss_total": float(total.detach()),
        }
        self.history.append([metrics[k] for k in HISTORY_COLUMNS])
        return metrics

    def fit(self, out_dir):
        """Run the configured schedule, checkpointing once per epoch."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if self.config.epochs == 0 and self.epoch == 0:
            path = out_dir / "checkpoint_epoch0000.cnet"
            self.save_checkpoint(path)
            self.write_history(out_dir / "history.csv")
            return path
        last = None
        for epoch in range(self.epoch + 1, self.config.epochs + 1):
            lr = lr_schedule(epoch, self.config)
            for _ in range(self.config.steps_per_epoch):
                self.train_step(lr=lr)
            self.epoch = epoch
            last = out_dir / f"checkpoint_epoch{epoch:04d}.cnet"
            self.save_checkpoint(last)
            self.write_history(out_dir / "history.csv")
        return last

    def write_history(self, path):
        path = Path(path)
        try:
            with path.open("w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(HISTORY_COLUMNS)
                writer.writerows(self.history)
        except OSError as err:
            raise RuntimeError(f"could not write history to {path}: {err}")

    def save_checkpoint(self, path):
        arrays = {}
        for tag, name, p in self._param_names:
            arrays[f"{tag}/{name}"] = p.detach().cpu().numpy().astype(np.float32, copy=True)
            state = self.optimizer.state.get(p, {})
            buf = state.get("momentum_buffer")
            if buf is not None:
                arrays[f"momentum/{tag}/{name}"] = buf.detach().cpu().numpy().astype(np.float32, copy=True)
        for key, arr in self.encoder.state_arrays().items():
            arrays[f"encoder/{key}"] = arr
        metadata = {
            "kind": "training-checkpoint",
            "epoch": self.epoch,
            "global_step": self.global_step,
            "train_config": self.config.to_dict(),
            "network_removal": self.removal.config.to_dict(),
            "network_restoration": self.restoration.config.to_dict(),
            "history": self.history,
            "rng_state": _rng_state_to_json(self.rng.getstate()),
            "preprocess": self.encoder.preprocess_constants(),
        }
        try:
            save_archive(path, arrays, metadata)
        except OSError as err:
            raise RuntimeError(f"could not write checkpoint to {path}: {err}")
        return path


def load_networks(path):
    """Inference-side loader: (removal, restoration, encoder, metadata)."""
    arrays, metadata = load_archive(path)
    if not metadata or "network_restoration" not in metadata:
        raise ArchiveError(f"{path} is not a training checkpoint (metadata incomplete)")
    enc_arrays = {k[len("encoder/"):]: v for k, v in arrays.items() if k.startswith("encoder/")}
    encoder = FeatureEncoder(enc_arrays, metadata["preprocess"])
    encoder.eval()
    for buf in encoder.buffers():
        buf.requires_grad_(False)

    nets = {}
    for tag, key in (("removal", "network_removal"), ("restoration", "network_restoration")):
        cfg = NetworkConfig.from_dict(metadata[key])
        net = StyleTransferNetwork(cfg, encoder, seed=0)
        with torch.no_grad():
            for name, p in net.named_parameters():
                full = f"{tag}/{name}"
                if full not in arrays:
                    raise ArchiveError(f"checkpoint missing array '{full}'")
                p.copy_(torch.from_numpy(arrays[full]))
        net.eval()
        nets[tag] = net
    return nets["removal"], nets["restoration"], encoder, metadata


def load_checkpoint(path, dataset=None):
    """Rebuild a Trainer mid-run; resumed training continues bitwise."""
    arrays, metadata = load_archive(path)
    if not metadata or "train_config" not in metadata:
        raise ArchiveError(f"{path} is not a training checkpoint (metadata incomplete)")
    config = TrainConfig.from_dict(metadata["train_config"])
    enc_arrays = {k[len("encoder/"):]: v for k, v in arrays.items() if k.startswith("encoder/")}
    encoder = FeatureEncoder(enc_arrays, metadata["preprocess"])
    encoder.eval()
    trainer = Trainer(config, dataset=dataset, encoder=encoder)
    with torch.no_grad():
        for tag, name, p in trainer._param_names:
            p.copy_(torch.from_numpy(arrays[f"{tag}/{name}"]))
            mkey = f"momentum/{tag}/{name}"
            if mkey in arrays:
                trainer.optimizer.state[p] = {
                    "momentum_buffer": torch.from_numpy(arrays[mkey].copy())
                }
    trainer.epoch = metadata["epoch"]
    trainer.global_step = metadata["global_step"]
    trainer.history = [list(row) for row in metadata["history"]]
    trainer.rng.setstate(_rng_state_from_json(metadata["rng_state"]))
    return trainer
