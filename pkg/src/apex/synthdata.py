"""Deterministic synthetic multi-domain segmentation benchmark plus a
frozen, differentiable toy backbone.

Scenes are lesion-on-background images; domain shifts are purely intensity
transforms (gain, bias, smooth multiplicative shading, pixel noise) whose
spectral footprint sits inside the default low-frequency mask, so the
backbone breaks on shifted domains for exactly the reasons amplitude
prompting can repair.

The backbone is an analytic intensity segmenter, sigmoid((blur(x) - t) / s),
calibrated once on source data and then frozen; gradients flow to its input
only, never to its parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from . import tensorio
from .errors import ConfigError, ShapeError
from .numerics import Node

SCENE_BACKGROUND = 0.3
SCENE_LESION = 0.7
AREA_FRACTION_RANGE = (0.02, 0.20)


@dataclass(frozen=True)
class DomainSpec:
    """Intensity transform defining one domain.

    ``shading`` lists low-frequency cosine modes as (freq_u, freq_v, amp);
    per-image phases and small amplitude jitter come from the sample seed,
    which is where intra-domain variability enters.
    """

    domain_id: str
    gain: float
    bias: float
    shading: tuple = ()
    noise_sigma: float = 0.0

    def __post_init__(self) -> None:
        if self.gain <= 0.0:
            raise ConfigError(f"domain {self.domain_id!r}: gain must be positive")
        if len(self.shading) > 3:
            raise ConfigError(f"domain {self.domain_id!r}: at most 3 shading modes")
        for fu, fv, amp in self.shading:
            if (fu, fv) == (0, 0) or abs(fu) > 3 or abs(fv) > 3:
                raise ConfigError("shading modes must be low nonzero frequencies")
            if amp < 0:
                raise ConfigError("shading amplitude must be nonnegative")

    def manifest_fields(self) -> str:
        modes = ";".join(f"{fu}:{fv}:{amp!r}" for fu, fv, amp in self.shading)
        return f"{self.gain!r},{self.bias!r},{modes},{self.noise_sigma!r}"


@dataclass(frozen=True)
class DomainSample:
    sample_id: str
    domain_id: str
    image: np.ndarray   # [h, w, 1]
    mask: np.ndarray    # [h, w] of {0.0, 1.0}
    scene_seed: int


def gen_base_scene(seed: int, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Textured background near 0.3 with 1-3 brighter elliptical lesions.

    Redraws until the lesion area fraction lands in [2%, 20%], so the
    generator satisfies its own area contract by construction.
    """
    if h < 32 or w < 32 or h % 2 or w % 2:
        raise ShapeError(f"scene sides must be even and >= 32, got {h}x{w}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(64):
        img = SCENE_BACKGROUND + 0.03 * rng.standard_normal((h, w))
        mask = np.zeros((h, w), dtype=bool)
        scale = min(h, w) / 32.0
        for _ in range(int(rng.integers(1, 4))):
            cy = rng.uniform(0.22, 0.78) * h
            cx = rng.uniform(0.22, 0.78) * w
            a = rng.uniform(2.8, 5.2) * scale
            b = rng.uniform(2.8, 5.2) * scale
            theta = rng.uniform(0.0, np.pi)
            u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
            v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
            inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
            level = SCENE_LESION + rng.uniform(-0.03, 0.03)
            img = np.where(inside, level + 0.02 * rng.standard_normal((h, w)), img)
            mask |= inside
        frac = mask.mean()
        if AREA_FRACTION_RANGE[0] <= frac <= AREA_FRACTION_RANGE[1]:
            break
    else:
        raise RuntimeError(f"scene generator failed to hit area range for seed {seed}")
    return np.clip(img, 0.0, 1.0)[:, :, None], mask.astype(np.float64)


def shading_field(spec: DomainSpec, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Smooth multiplicative field: 1 plus the domain's cosine modes with
    per-image phase and mild amplitude jitter."""
    yy, xx = np.mgrid[0:h, 0:w]
    out = np.ones((h, w))
    for fu, fv, amp in spec.shading:
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp_eff = amp * rng.uniform(0.75, 1.25)
        out += amp_eff * np.cos(2.0 * np.pi * (fu * yy / h + fv * xx / w) + phase)
    return out


def apply_domain(img: np.ndarray, spec: DomainSpec, seed: int) -> np.ndarray:
    """clamp(gain * shading * img + bias + noise, 0, 1)."""
    arr = np.asarray(img, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    h, w = arr.shape[:2]
    rng = np.random.default_rng(seed)
    fld = shading_field(spec, rng, h, w)[:, :, None]
    noise = spec.noise_sigma * rng.standard_normal(arr.shape) if spec.noise_sigma else 0.0
    out = np.clip(spec.gain * fld * arr + spec.bias + noise, 0.0, 1.0)
    return out[:, :, 0] if squeeze else out


# Seen domains shade along different axes, so confusing them costs Dice;
# unseen gains/biases sit outside the seen convex hull.
DEFAULT_SOURCE = DomainSpec("source", gain=1.0, bias=0.0, shading=(), noise_sigma=0.01)
DEFAULT_SEEN = (
    DomainSpec("A", gain=0.55, bias=0.03,
               shading=((0, 1, 0.17), (0, 2, 0.11), (1, 1, 0.07)), noise_sigma=0.02),
    DomainSpec("B", gain=0.85, bias=0.30,
               shading=((1, 0, 0.17), (2, 0, 0.11), (1, 1, 0.07)), noise_sigma=0.02),
)
DEFAULT_UNSEEN = (
    DomainSpec("C", gain=0.42, bias=0.06,
               shading=((0, 1, 0.19), (1, 1, 0.09)), noise_sigma=0.02),
    DomainSpec("D", gain=0.95, bias=0.40,
               shading=((1, 0, 0.15), (1, 1, 0.10)), noise_sigma=0.02),
)


@dataclass(frozen=True)
class BenchmarkConfig:
    image_size: int = 32
    train_per_domain: int = 200
    test_per_domain: int = 50
    source_train: int = 120
    source_test: int = 50
    source: DomainSpec = DEFAULT_SOURCE
    seen: tuple = DEFAULT_SEEN
    unseen: tuple = DEFAULT_UNSEEN

    def __post_init__(self) -> None:
        if len(self.seen) < 2 or len(self.unseen) < 2:
            raise ConfigError("need at least 2 seen and 2 unseen domains")
        seen_params = {(d.gain, d.bias) for d in self.seen}
        unseen_params = {(d.gain, d.bias) for d in self.unseen}
        if seen_params & unseen_params:
            raise ConfigError("seen and unseen domain parameters overlap")
        ids = [self.source.domain_id] + [d.domain_id for d in self.seen + self.unseen]
        if len(set(ids)) != len(ids):
            raise ConfigError("domain ids must be unique")


@dataclass
class Benchmark:
    config: BenchmarkConfig
    seed: int
    splits: dict  # split name -> list[DomainSample]

    SPLITS = ("source_cal", "source_test", "train_seen", "test_seen", "test_unseen")

    def domains(self) -> dict:
        cfg = self.config
        return {d.domain_id: d for d in (cfg.source,) + cfg.seen + cfg.unseen}

    def by_domain(self, split: str) -> dict:
        out: dict = {}
        for s in self.splits[split]:
            out.setdefault(s.domain_id, []).append(s)
        return out

    def manifest_csv(self) -> str:
        lines = ["sample_id,domain_id,split,scene_seed,gain,bias,shading,noise_sigma"]
        domains = self.domains()
        for split in self.SPLITS:
            for s in self.splits[split]:
                spec = domains[s.domain_id]
                lines.append(f"{s.sample_id},{s.domain_id},{split},{s.scene_seed},"
                             f"{spec.manifest_fields()}")
        return "\n".join(lines) + "\n"


def build_benchmark(config: BenchmarkConfig, seed: int) -> Benchmark:
    """Generate every split; scene seeds are disjoint between train and test
    (and unique per sample), so no base scene is ever shared."""
    size = config.image_size
    counter = 0

    def make(spec: DomainSpec, split: str, count: int, out: list) -> None:
        nonlocal counter
        for i in range(count):
            scene_seed = (seed << 24) + counter
            transform_seed = (seed << 24) + 0x800000 + counter
            counter += 1
            img, mask = gen_base_scene(scene_seed, size, size)
            shifted = apply_domain(img, spec, transform_seed)
            out.append(DomainSample(sample_id=f"{spec.domain_id}-{split}-{i:04d}",
                                    domain_id=spec.domain_id, image=shifted,
                                    mask=mask, scene_seed=scene_seed))

    splits: dict = {name: [] for name in Benchmark.SPLITS}
    make(config.source, "source_cal", config.source_train, splits["source_cal"])
    make(config.source, "source_test", config.source_test, splits["source_test"])
    for spec in config.seen:
        make(spec, "train_seen", config.train_per_domain, splits["train_seen"])
        make(spec, "test_seen", config.test_per_domain, splits["test_seen"])
    for spec in config.unseen:
        make(spec, "test_unseen", config.test_per_domain, splits["test_unseen"])
    return Benchmark(config=config, seed=seed, splits=splits)


def save_benchmark(bench: Benchmark, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "manifest.csv").write_text(bench.manifest_csv(), encoding="ascii")
    for split, samples in bench.splits.items():
        if not samples:
            continue
        tensorio.write_tensor(d / f"{split}_images.apxt",
                              np.stack([s.image for s in samples]))
        tensorio.write_tensor(d / f"{split}_masks.apxt",
                              np.stack([s.mask for s in samples]))


def load_benchmark(directory, config: BenchmarkConfig, seed: int) -> Benchmark:
    """Load tensors saved by :func:`save_benchmark`; metadata comes from the
    manifest, which must match the given config's splits."""
    d = Path(directory)
    rows = (d / "manifest.csv").read_text(encoding="ascii").splitlines()[1:]
    meta: dict = {name: [] for name in Benchmark.SPLITS}
    for row in rows:
        sample_id, domain_id, split, scene_seed = row.split(",")[:4]
        meta[split].append((sample_id, domain_id, int(scene_seed)))
    splits: dict = {}
    for split, entries in meta.items():
        samples = []
        if entries:
            images = tensorio.read_tensor(d / f"{split}_images.apxt")
            masks = tensorio.read_tensor(d / f"{split}_masks.apxt")
            for (sample_id, domain_id, scene_seed), img, mask in zip(entries, images, masks):
                samples.append(DomainSample(sample_id=sample_id, domain_id=domain_id,
                                            image=img, mask=mask, scene_seed=scene_seed))
        splits[split] = samples
    return Benchmark(config=config, seed=seed, splits=splits)


# ---------------------------------------------------------------------------
# frozen backbone
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FrozenBackbone:
    """Differentiable intensity segmenter: sigmoid((blur_r(x) - t) / s)."""

    threshold: float
    slope: float
    blur_radius: int

    def digest(self) -> str:
        return tensorio.tensor_digest(
            np.array([self.threshold, self.slope, float(self.blur_radius)]))


def box_blur(x, radius: int):
    """Circular box blur over the two spatial axes; self-adjoint, so the
    backward rule is the blur itself. Accepts arrays or Nodes shaped
    [h, w, c] or [batch, h, w, c]."""
    node = isinstance(x, Node)
    arr = x.array if node else np.asarray(x, dtype=np.float64)
    axes = (0, 1) if arr.ndim == 3 else (1, 2)

    def run(data: np.ndarray) -> np.ndarray:
        out = data
        for axis in axes:
            acc = np.zeros_like(out)
            for shift in range(-radius, radius + 1):
                acc += np.roll(out, shift, axis=axis)
            out = acc / (2 * radius + 1)
        return out

    result = run(arr)
    if not node:
        return result

    def back(g: np.ndarray) -> None:
        if x._needs_grad:
            x.grad += run(g)

    return nm.custom_op("box_blur", result, (x,), back)


def backbone_forward(bb: FrozenBackbone, img) -> Node:
    """Probability map; differentiable w.r.t. the image only."""
    x = img if isinstance(img, Node) else nm.as_node(np.asarray(img, dtype=np.float64))
    blurred = box_blur(x, bb.blur_radius)
    return nm.sigmoid(nm.div(nm.sub(blurred, bb.threshold), bb.slope))


def soft_dice(pred: np.ndarray, mask: np.ndarray) -> float:
    inter = float((pred * mask).sum())
    return (2.0 * inter + 1.0) / (float(pred.sum()) + float(mask.sum()) + 1.0)


def backbone_calibrate(samples, blur_radius: int = 1,
                       thresholds=None, slopes=(0.05, 0.08, 0.12)) -> FrozenBackbone:
    """Grid-search (t, s) maximizing mean soft Dice on the source samples.

    Deterministic: the grid is fixed and ties keep the first maximum in scan
    order. The returned backbone is immutable; hash it with ``digest()``.
    """
    if not samples:
        raise ConfigError("cannot calibrate on an empty source set")
    if thresholds is None:
        thresholds = np.round(np.linspace(0.2, 0.8, 61), 10)
    blurred = [box_blur(s.image, blur_radius)[:, :, 0] for s in samples]
    masks = [s.mask for s in samples]
    best = (-1.0, None)
    for t in thresholds:
        for s in slopes:
            score = 0.0
            for bl, mk in zip(blurred, masks):
                pred = 1.0 / (1.0 + np.exp(-(bl - t) / s))
                score += soft_dice(pred, mk)
            score /= len(samples)
            if score > best[0]:
                best = (score, FrozenBackbone(threshold=float(t), slope=float(s),
                                              blur_radius=blur_radius))
    return best[1]
