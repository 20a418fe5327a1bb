"""Feature datasets: synthetic generation, the EMBF file format, manifests, CSV.

EMBF layout (all little-endian)::

    offset  size  field
    0       4     magic b"EMBF"
    4       4     version, uint32 (= 1)
    8       8     rows, uint64
    16      4     cols, uint32
    20      4*rows*cols  float32 payload, row-major
"""
from __future__ import annotations

import csv
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

EMBF_MAGIC = b"EMBF"
EMBF_VERSION = 1
_HEADER = struct.Struct("<4sIQI")

DATASET_MANIFEST = "manifest.json"
TEXT_FILE = "text.embf"
IMAGE_FILE = "image.embf"
HUB_FRACTION = 0.02

_SPLIT_STREAM = {"train": 1, "val": 2, "test": 3}


class FeatureFileError(ValueError):
    """Base class for malformed EMBF files."""


class BadMagicError(FeatureFileError):
    def __init__(self, found: bytes):
        self.found = found
        super().__init__(f"bad magic: expected b'EMBF', found {found!r}")


class VersionMismatchError(FeatureFileError):
    def __init__(self, found: int):
        self.found = found
        super().__init__(f"version mismatch: expected {EMBF_VERSION}, found {found}")


class TruncatedPayloadError(FeatureFileError):
    def __init__(self, expected: int, actual: int):
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"truncated payload: header declares {expected} bytes, file holds {actual}")


def write_features(path, matrix) -> None:
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {m.shape}")
    data = np.ascontiguousarray(m, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(EMBF_MAGIC, EMBF_VERSION, data.shape[0], data.shape[1]))
        f.write(data.tobytes())


def read_features(path) -> np.ndarray:
    """Read an EMBF file into a float32 matrix holding exactly the stored values."""
    raw = Path(path).read_bytes()
    if raw[:4] != EMBF_MAGIC:
        raise BadMagicError(raw[:4])
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(_HEADER.size, len(raw))
    _, version, rows, cols = _HEADER.unpack_from(raw)
    if version != EMBF_VERSION:
        raise VersionMismatchError(version)
    expected = 4 * rows * cols
    actual = len(raw) - _HEADER.size
    if expected != actual:
        raise TruncatedPayloadError(expected, actual)
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(rows, cols).astype(np.float32)


@dataclass(frozen=True)
class FeatureDataset:
    """Paired text/image features, ``captions_per_image`` captions per image.

    Caption row ``c`` is labelled as describing image ``c // captions_per_image``.
    ``caption_source[c]`` records the image whose content actually generated
    the caption; it differs from the label only for label-noise captions.
    """

    text_features: np.ndarray
    image_features: np.ndarray
    captions_per_image: int
    caption_source: np.ndarray = None

    def __post_init__(self):
        tf = np.asarray(self.text_features, dtype=np.float64)
        imf = np.asarray(self.image_features, dtype=np.float64)
        m = int(self.captions_per_image)
        if m < 1:
            raise ValueError("captions_per_image must be >= 1")
        if tf.shape[0] != imf.shape[0] * m:
            raise ValueError(
                f"{tf.shape[0]} captions do not match {imf.shape[0]} images x {m} captions")
        src = self.caption_source
        src = np.arange(tf.shape[0]) // m if src is None else np.asarray(src, dtype=np.int64)
        object.__setattr__(self, "text_features", tf)
        object.__setattr__(self, "image_features", imf)
        object.__setattr__(self, "captions_per_image", m)
        object.__setattr__(self, "caption_source", src)

    @property
    def n_pairs(self) -> int:
        return self.text_features.shape[0]

    @property
    def n_images(self) -> int:
        return self.image_features.shape[0]

    @property
    def pair_index(self) -> np.ndarray:
        return np.arange(self.n_pairs) // self.captions_per_image

    @property
    def noisy_captions(self) -> np.ndarray:
        return np.flatnonzero(self.caption_source != self.pair_index)


@dataclass(frozen=True)
class SyntheticSpec:
    n_images: int = 2000
    captions_per_image: int = 5
    d_text: int = 32
    d_image: int = 32
    latent_dim: int = 8
    noise_std: float = 0.3
    label_noise_fraction: float = 0.0
    hub_bias: float = 0.5
    seed: int = 0

    def validate(self):
        if self.n_images < 2:
            raise ValueError("n_images must be >= 2")
        if self.captions_per_image < 1:
            raise ValueError("captions_per_image must be >= 1")
        if not 1 <= self.latent_dim <= min(self.d_text, self.d_image):
            raise ValueError("latent_dim must satisfy 1 <= latent_dim <= min(d_text, d_image)")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not 0.0 <= self.label_noise_fraction < 1.0:
            raise ValueError("label_noise_fraction must lie in [0, 1)")
        if self.hub_bias < 0:
            raise ValueError("hub_bias must be >= 0")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)


def _leading_axis(m, d):
    """Leading left singular vector of ``m``, sign-fixed, cut or zero-padded to ``d``."""
    u = np.linalg.svd(m, full_matrices=False)[0][:, 0]
    u = u * np.sign(u[np.argmax(np.abs(u))])
    out = np.zeros(d)
    out[: min(d, u.size)] = u[:d]
    return out / np.linalg.norm(out)


def latent_maps(spec: SyntheticSpec):
    """Fixed per-seed draws: ``(text_map, image_map, text_hub, image_hub)``.

    The maps send latent vectors to features. A hub offset points along the
    axis of largest content variance of the *other* modality, so a biased
    item sits close to many queries rather than to a handful. Its length is
    ``hub_bias`` times the expected norm of a clean feature row.
    """
    rng = np.random.default_rng([spec.seed, 0])
    # near-isometric maps: noise_std is measured in latent units
    image_map = rng.normal(0.0, 1.0 / np.sqrt(spec.d_image), size=(spec.d_image, spec.latent_dim))
    text_map = rng.normal(0.0, 1.0 / np.sqrt(spec.d_text), size=(spec.d_text, spec.latent_dim))

    def scale(d):
        return spec.hub_bias * np.sqrt(spec.latent_dim + d * spec.noise_std ** 2)

    text_hub = scale(spec.d_text) * _leading_axis(image_map, spec.d_text)
    image_hub = scale(spec.d_image) * _leading_axis(text_map, spec.d_image)
    return text_map, image_map, text_hub, image_hub


def generate_synthetic(spec: SyntheticSpec, split="train", n_images=None) -> FeatureDataset:
    """Draw a paired dataset from latent factors shared by both modalities.

    All splits of one spec share the latent->feature maps. Label noise is
    applied to the ``train`` split only. Every draw has a fixed size, so two
    specs differing only in noise level or hub bias share all other
    randomness.
    """
    spec.validate()
    n_img = spec.n_images if n_images is None else int(n_images)
    m = spec.captions_per_image
    n_pairs = n_img * m
    text_map, image_map, hub_txt, hub_img = latent_maps(spec)
    rng = np.random.default_rng([spec.seed, _SPLIT_STREAM[split]])

    z = rng.normal(size=(n_img, spec.latent_dim))
    img_noise = rng.normal(size=(n_img, spec.d_image))
    txt_noise = rng.normal(size=(n_pairs, spec.d_text))
    hub_img_rows = rng.permutation(n_img)[: max(1, round(HUB_FRACTION * n_img))]
    hub_txt_rows = rng.permutation(n_pairs)[: max(1, round(HUB_FRACTION * n_pairs))]
    noise_order = rng.permutation(n_pairs)
    wrong_offset = rng.integers(0, n_img - 1, size=n_pairs)

    labels = np.arange(n_pairs) // m
    source = labels.copy()
    if split == "train":
        n_noisy = math.floor(round(spec.label_noise_fraction * n_pairs, 9))
        noisy = noise_order[:n_noisy]
        off = wrong_offset[noisy]
        source[noisy] = off + (off >= labels[noisy])

    image = z @ image_map.T + spec.noise_std * img_noise
    text = z[source] @ text_map.T + spec.noise_std * txt_noise
    image[hub_img_rows] += hub_img
    text[hub_txt_rows] += hub_txt
    return FeatureDataset(text, image, m, source)


def save_dataset(ds: FeatureDataset, out_dir, provenance=None) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_features(out / TEXT_FILE, ds.text_features)
    write_features(out / IMAGE_FILE, ds.image_features)
    noisy = ds.noisy_captions
    manifest = {
        "format": "hubvse-dataset",
        "version": 1,
        "text_features": TEXT_FILE,
        "image_features": IMAGE_FILE,
        "captions_per_image": ds.captions_per_image,
        "n_images": ds.n_images,
        "n_pairs": ds.n_pairs,
        "relabelled_captions": {str(int(c)): int(ds.caption_source[c]) for c in noisy},
        "provenance": provenance or {},
    }
    write_json(out / DATASET_MANIFEST, manifest)
    return [out / TEXT_FILE, out / IMAGE_FILE, out / DATASET_MANIFEST]


def load_dataset(data_dir) -> FeatureDataset:
    d = Path(data_dir)
    manifest = json.loads((d / DATASET_MANIFEST).read_text())
    text = read_features(d / manifest["text_features"])
    image = read_features(d / manifest["image_features"])
    m = int(manifest["captions_per_image"])
    source = np.arange(text.shape[0]) // m
    for c, img in manifest.get("relabelled_captions", {}).items():
        source[int(c)] = img
    return FeatureDataset(text, image, m, source)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def write_csv(path, header, rows) -> None:
    """Write dict rows under a fixed header; floats keep full precision."""
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    with open(tmp, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(header), lineterminator="\n",
                           extrasaction="raise")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})
    os.replace(tmp, path)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def save_encoder(path, encoder, meta=None) -> None:
    with open(path, "wb") as f:
        np.savez(f, text_weights=encoder.text_weights, image_weights=encoder.image_weights,
                 meta=np.array(json.dumps(meta or {}, sort_keys=True, default=_json_default)))


def load_encoder(path):
    from .embed import EncoderPair

    with np.load(path) as z:
        return EncoderPair(z["text_weights"], z["image_weights"])
