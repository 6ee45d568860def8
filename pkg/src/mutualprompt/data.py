"""Synthetic domain-shifted datasets, augmentations, and array containers.

Every domain shares the same class prototypes; a domain differs only by a
fixed transform applied to all of its samples (rotation, channel gains, a
smooth additive bias field, extra noise). Labels of the target domain are
returned separately from its images so that training code never sees them.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

DATASET_FORMAT = "mutualprompt-dataset"
EMBEDDING_FORMAT = "mutualprompt-embeddings"
CONTAINER_VERSION = 1


class ContainerError(ValueError):
    """Malformed or incompatible array container."""


@dataclass
class DomainShift:
    name: str = "domain"
    rotation_deg: float = 0.0
    channel_gain: list[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    bias: float = 0.0
    noise: float = 0.0
    seed: int = 0

    def is_identity(self) -> bool:
        return (
            self.rotation_deg == 0.0
            and all(g == 1.0 for g in self.channel_gain)
            and self.bias == 0.0
            and self.noise == 0.0
        )


@dataclass
class DomainDatasetSpec:
    num_classes: int = 6
    n_source: int = 40
    n_target: int = 40
    n_eval: int = 20
    image_size: int = 16
    channels: int = 3
    seed: int = 0
    prototype_smoothness: float = 2.0
    instance_variation: float = 0.5
    pixel_noise: float = 0.05
    max_translation: int = 2
    sources: list[DomainShift] = field(default_factory=lambda: [DomainShift(name="source")])
    target: DomainShift | None = field(default_factory=lambda: DomainShift(name="target"))
    unseen: DomainShift | None = None

    def __post_init__(self):
        self.sources = [s if isinstance(s, DomainShift) else DomainShift(**s) for s in self.sources]
        if isinstance(self.target, dict):
            self.target = DomainShift(**self.target)
        if isinstance(self.unseen, dict):
            self.unseen = DomainShift(**self.unseen)

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.n_source < 1 or self.n_eval < 1:
            raise ValueError("per-class sample counts must be positive")
        if self.target is not None and self.n_target < 1:
            raise ValueError("n_target must be positive when a target domain is given")
        if not self.sources:
            raise ValueError("at least one source domain is required")
        for shift in [*self.sources, self.target, self.unseen]:
            if shift is not None and len(shift.channel_gain) != self.channels:
                raise ValueError(
                    f"domain {shift.name!r}: channel_gain has {len(shift.channel_gain)} "
                    f"entries for {self.channels} channels"
                )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LabeledDomain:
    name: str
    images: np.ndarray  # (n, H, W, C)
    labels: np.ndarray  # (n,)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class UnlabeledDomain:
    """Images only. Training batches for unlabeled domains are drawn from here."""

    name: str
    images: np.ndarray

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class DomainData:
    sources: list[LabeledDomain]
    source_eval: list[LabeledDomain]
    target: UnlabeledDomain | None
    # held out from training; only evaluation code reads it
    target_labels: np.ndarray | None
    unseen: LabeledDomain | None = None

    @property
    def target_eval(self) -> LabeledDomain | None:
        if self.target is None:
            return None
        return LabeledDomain(self.target.name, self.target.images, self.target_labels)


def _smooth_field(rng: np.random.Generator, size: int, channels: int, sigma: float) -> np.ndarray:
    noise = rng.standard_normal((size, size, channels))
    f = ndimage.gaussian_filter(noise, sigma=(sigma, sigma, 0), mode="wrap")
    f -= f.mean(axis=(0, 1), keepdims=True)
    f /= f.std(axis=(0, 1), keepdims=True) + 1e-12
    return f


def class_prototypes(spec: DomainDatasetSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0])
    return np.stack(
        [
            _smooth_field(rng, spec.image_size, spec.channels, spec.prototype_smoothness)
            for _ in range(spec.num_classes)
        ]
    )


def _bias_field(shift: DomainShift, size: int, channels: int) -> np.ndarray:
    rng = np.random.default_rng([shift.seed, 1])
    yy, xx = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size), indexing="ij")
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    per_channel = rng.uniform(-1, 1, channels)
    return shift.bias * (ramp[..., None] * per_channel + 0.5 * per_channel)


def apply_shift(images: np.ndarray, shift: DomainShift, rng: np.random.Generator) -> np.ndarray:
    """Apply one domain's fixed transform to a stack of ``(n, H, W, C)`` images."""
    out = images
    if shift.rotation_deg:
        out = ndimage.rotate(out, shift.rotation_deg, axes=(1, 2), reshape=False, order=1, mode="reflect")
    gain = np.asarray(shift.channel_gain, dtype=np.float64)
    out = 0.5 + (out - 0.5) * gain
    if shift.bias:
        out = out + _bias_field(shift, images.shape[1], images.shape[3])
    if shift.noise:
        out = out + shift.noise * rng.standard_normal(out.shape)
    return out


def _sample_domain(
    spec: DomainDatasetSpec,
    protos: np.ndarray,
    shift: DomainShift,
    per_class: int,
    stream: int,
) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([spec.seed, stream])
    labels = np.repeat(np.arange(spec.num_classes), per_class)
    images = np.empty((len(labels), spec.image_size, spec.image_size, spec.channels))
    t = spec.max_translation
    for i, k in enumerate(labels):
        dy, dx = rng.integers(-t, t + 1, size=2)
        base = np.roll(protos[k], (dy, dx), axis=(0, 1))
        wobble = _smooth_field(rng, spec.image_size, spec.channels, spec.prototype_smoothness)
        amp = rng.uniform(0.8, 1.2)
        img = amp * base + spec.instance_variation * wobble
        images[i] = 0.5 + 0.2 * img + spec.pixel_noise * rng.standard_normal(img.shape)
    images = apply_shift(images, shift, rng)
    order = rng.permutation(len(labels))
    return images[order], labels[order]


def generate(spec: DomainDatasetSpec) -> DomainData:
    """Build every domain of ``spec``; a pure function of the spec."""
    spec.validate()
    protos = class_prototypes(spec)
    sources, evals = [], []
    for j, shift in enumerate(spec.sources):
        x, y = _sample_domain(spec, protos, shift, spec.n_source, stream=10 + 2 * j)
        sources.append(LabeledDomain(shift.name, x, y))
        x, y = _sample_domain(spec, protos, shift, spec.n_eval, stream=11 + 2 * j)
        evals.append(LabeledDomain(shift.name, x, y))
    target = target_labels = None
    if spec.target is not None:
        x, y = _sample_domain(spec, protos, spec.target, spec.n_target, stream=1)
        target, target_labels = UnlabeledDomain(spec.target.name, x), y
    unseen = None
    if spec.unseen is not None:
        x, y = _sample_domain(spec, protos, spec.unseen, spec.n_target, stream=2)
        unseen = LabeledDomain(spec.unseen.name, x, y)
    return DomainData(sources, evals, target, target_labels, unseen)


def anchor_sample(spec: DomainDatasetSpec, per_class: int) -> LabeledDomain:
    """Unshifted sample from the class prototypes on a stream no domain uses."""
    x, y = _sample_domain(spec, class_prototypes(spec), DomainShift("anchor"), per_class, stream=3)
    return LabeledDomain("anchor", x, y)


# ---------------------------------------------------------------------------
# augmentations


@dataclass
class StrongAugConfig:
    num_ops: int = 2
    invert_max: float = 0.2
    rotate_max_deg: float = 30.0
    contrast_max: float = 0.5
    noise_max: float = 0.1
    cutout_max: int = 4


def flip(x: np.ndarray) -> np.ndarray:
    """Horizontal flip of an ``(H, W, C)`` image."""
    return x[:, ::-1]


def weak_augment(x: np.ndarray, rng: np.random.Generator, p: float = 0.5) -> np.ndarray:
    return flip(x).copy() if rng.random() < p else x.copy()


def _invert(x, m, rng):
    if m == 0:
        return x
    return x + m * ((1.0 - x) - x)


def _rotate(x, m, rng):
    if m == 0:
        return x
    return ndimage.rotate(x, m, axes=(0, 1), reshape=False, order=1, mode="reflect")


def _contrast(x, m, rng):
    if m == 0:
        return x
    mean = x.mean(axis=(0, 1), keepdims=True)
    return mean + (1.0 + m) * (x - mean)


def _noise(x, m, rng):
    if m == 0:
        return x
    return x + m * rng.standard_normal(x.shape)


def _cutout(x, m, rng):
    size = int(round(m))
    if size <= 0:
        return x
    h, w = x.shape[:2]
    y0 = rng.integers(0, h - size + 1)
    x0 = rng.integers(0, w - size + 1)
    out = x.copy()
    out[y0 : y0 + size, x0 : x0 + size] = x.mean(axis=(0, 1))
    return out


def _magnitude(name: str, cfg: StrongAugConfig, rng: np.random.Generator) -> float:
    if name == "invert":
        return rng.uniform(0.0, cfg.invert_max)
    if name == "rotate":
        return rng.uniform(-cfg.rotate_max_deg, cfg.rotate_max_deg)
    if name == "contrast":
        return rng.uniform(-cfg.contrast_max, cfg.contrast_max)
    if name == "noise":
        return rng.uniform(0.0, cfg.noise_max)
    return rng.uniform(0.0, cfg.cutout_max)


STRONG_OPS = {
    "invert": _invert,
    "rotate": _rotate,
    "contrast": _contrast,
    "noise": _noise,
    "cutout": _cutout,
}


def strong_augment(
    x: np.ndarray, rng: np.random.Generator, cfg: StrongAugConfig | None = None
) -> np.ndarray:
    """Apply ``cfg.num_ops`` distinct ops drawn from :data:`STRONG_OPS`."""
    cfg = cfg or StrongAugConfig()
    names = list(STRONG_OPS)
    out = x
    for i in rng.choice(len(names), size=cfg.num_ops, replace=False):
        name = names[i]
        out = STRONG_OPS[name](out, _magnitude(name, cfg, rng), rng)
    return np.array(out, copy=True)


def augment_batch(images: np.ndarray, rng: np.random.Generator, strong_cfg: StrongAugConfig):
    """Weak and strong views of every image, drawn in a fixed order from ``rng``."""
    weak = np.stack([weak_augment(x, rng) for x in images])
    strong = np.stack([strong_augment(x, rng, strong_cfg) for x in images])
    return weak, strong


# ---------------------------------------------------------------------------
# containers


def _header_array(header: dict) -> np.ndarray:
    return np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)


def _write_npz(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def _read_header(data, path, fmt: str) -> dict:
    if "__header__" not in data.files:
        raise ContainerError(f"{path}: missing header")
    header = json.loads(bytes(data["__header__"]).decode())
    if header.get("format") != fmt:
        raise ContainerError(f"{path}: format {header.get('format')!r}, expected {fmt!r}")
    if header.get("version") != CONTAINER_VERSION:
        raise ContainerError(
            f"{path}: version {header.get('version')} unsupported (expected {CONTAINER_VERSION})"
        )
    return header


def save_dataset(path: str | Path, spec: DomainDatasetSpec, data: DomainData) -> None:
    """Write all domains, including the held-out target labels, to one container."""
    header = {"format": DATASET_FORMAT, "version": CONTAINER_VERSION, "spec": spec.to_dict()}
    arrays = {"__header__": _header_array(header)}
    for i, d in enumerate(data.sources):
        arrays[f"source{i}/images"] = d.images
        arrays[f"source{i}/labels"] = d.labels
    for i, d in enumerate(data.source_eval):
        arrays[f"source_eval{i}/images"] = d.images
        arrays[f"source_eval{i}/labels"] = d.labels
    if data.target is not None:
        arrays["target/images"] = data.target.images
        arrays["target/labels"] = data.target_labels
    if data.unseen is not None:
        arrays["unseen/images"] = data.unseen.images
        arrays["unseen/labels"] = data.unseen.labels
    _write_npz(path, arrays)


def load_dataset(path: str | Path) -> tuple[DomainDatasetSpec, DomainData]:
    with np.load(path) as z:
        header = _read_header(z, path, DATASET_FORMAT)
        spec = DomainDatasetSpec(**header["spec"])
        sources = [
            LabeledDomain(s.name, z[f"source{i}/images"], z[f"source{i}/labels"])
            for i, s in enumerate(spec.sources)
        ]
        evals = [
            LabeledDomain(s.name, z[f"source_eval{i}/images"], z[f"source_eval{i}/labels"])
            for i, s in enumerate(spec.sources)
        ]
        target = target_labels = unseen = None
        if spec.target is not None:
            target = UnlabeledDomain(spec.target.name, z["target/images"])
            target_labels = z["target/labels"]
        if spec.unseen is not None:
            unseen = LabeledDomain(spec.unseen.name, z["unseen/images"], z["unseen/labels"])
    return spec, DomainData(sources, evals, target, target_labels, unseen)


@dataclass
class EmbeddingSet:
    """Precomputed encoder outputs.

    ``labels`` is ``-1`` for unlabeled records; ``domain`` indexes ``domain_names``.
    ``extras`` carries any additional arrays (e.g. prompted embeddings).
    """

    v: np.ndarray  # (R, D)
    v_tilde: np.ndarray  # (R, HW, D)
    s: np.ndarray  # (K, D)
    s_tilde: np.ndarray  # (K, N, D)
    labels: np.ndarray  # (R,)
    domain: np.ndarray  # (R,)
    domain_names: list[str]
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.v.shape[0]

    @property
    def dims(self) -> dict[str, int]:
        return {
            "D": self.v.shape[1],
            "N": self.s_tilde.shape[1],
            "HW": self.v_tilde.shape[1],
            "K": self.s.shape[0],
        }


def export_embeddings(path: str | Path, emb: EmbeddingSet) -> None:
    header = {
        "format": EMBEDDING_FORMAT,
        "version": CONTAINER_VERSION,
        "records": len(emb),
        "domain_names": emb.domain_names,
        **emb.dims,
    }
    arrays = {
        "__header__": _header_array(header),
        "v": emb.v,
        "v_tilde": emb.v_tilde,
        "s": emb.s,
        "s_tilde": emb.s_tilde,
        "labels": emb.labels,
        "domain": emb.domain,
    }
    arrays.update({f"extra/{k}": v for k, v in emb.extras.items()})
    _write_npz(path, arrays)


def ingest_embeddings(path: str | Path, expected: dict[str, int] | None = None) -> EmbeddingSet:
    """Load an embedding container, checking its header against ``expected`` dims."""
    with np.load(path) as z:
        header = _read_header(z, path, EMBEDDING_FORMAT)
        for key, want in (expected or {}).items():
            got = header.get(key)
            if got != want:
                raise ContainerError(f"{path}: field {key}: file has {got}, config expects {want}")
        emb = EmbeddingSet(
            v=z["v"],
            v_tilde=z["v_tilde"],
            s=z["s"],
            s_tilde=z["s_tilde"],
            labels=z["labels"],
            domain=z["domain"],
            domain_names=list(header["domain_names"]),
            extras={k[len("extra/") :]: z[k] for k in z.files if k.startswith("extra/")},
        )
    for key, got in emb.dims.items():
        if header.get(key) != got:
            raise ContainerError(f"{path}: field {key}: header says {header.get(key)}, arrays have {got}")
    if header.get("records") != len(emb):
        raise ContainerError(f"{path}: header records={header.get('records')}, arrays have {len(emb)}")
    return emb
