"""Synthetic compound-domain benchmark: generation, splits, serialization.

Class identity is carried by shape/frequency content (disk, ring, cross,
horizontal or vertical stripes); domain identity is carried only by global
style transforms (channel gain/bias, gamma, background level and texture),
so per-channel pixel statistics separate domains by construction while the
geometry stays class-informative in every domain.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ChecksumError,
    InvalidDimensionError,
    MalformedHeaderError,
    TruncatedPayloadError,
)

MAGIC = b"COMENDS1"

# Per-domain style: channel gains, channel biases, gamma, background level,
# foreground level, noise amplitude. Separation is moderate on purpose: the
# domains must be recoverable from channel statistics, but an unseen domain
# should still land near the source-style manifold. Domain 3 softly inverts
# figure/ground polarity.
_DOMAIN_STYLES = [
    {"gain": (0.92, 0.68, 0.50), "bias": (0.05, 0.03, 0.02), "gamma": 1.00,
     "bg": 0.34, "fg": 0.76, "noise": 0.10},
    {"gain": (0.82, 0.62, 0.46), "bias": (0.04, 0.03, 0.02), "gamma": 1.12,
     "bg": 0.42, "fg": 0.68, "noise": 0.12},
    {"gain": (0.50, 0.68, 0.92), "bias": (0.02, 0.04, 0.06), "gamma": 0.92,
     "bg": 0.36, "fg": 0.80, "noise": 0.09},
    {"gain": (0.46, 0.62, 0.84), "bias": (0.02, 0.03, 0.05), "gamma": 1.05,
     "bg": 0.56, "fg": 0.34, "noise": 0.11},
]


@dataclass
class Sample:
    pixels: np.ndarray  # (C, H, W) float32 in [0, 1]
    class_label: int
    true_domain: int  # hidden from training; evaluation-only


@dataclass
class TrainView:
    """Training-visible view of a sample: the domain id is not present."""

    pixels: np.ndarray
    class_label: int


@dataclass
class Splits:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


@dataclass
class DatasetBundle:
    samples: list[Sample]
    domains: int
    classes: int
    seed: int  # generator seed; provenance only (not serialized)
    _digest: int | None = field(default=None, repr=False, compare=False)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.samples[0].pixels.shape)

    def content_digest(self) -> int:
        """CRC32 of the serialized records; split randomness derives from
        this so the fold protocol is a pure function of the stored data."""
        if self._digest is None:
            self._digest = zlib.crc32(_bundle_payload(self))
        return self._digest

    def labels(self) -> np.ndarray:
        return np.array([s.class_label for s in self.samples], dtype=np.int64)

    def true_domains(self) -> np.ndarray:
        return np.array([s.true_domain for s in self.samples], dtype=np.int64)

    def pixel_array(self, indices=None) -> np.ndarray:
        idx = range(len(self.samples)) if indices is None else indices
        return np.stack([self.samples[i].pixels for i in idx]).astype(np.float64)

    def train_views(self, indices) -> list[TrainView]:
        return [TrainView(self.samples[i].pixels, self.samples[i].class_label) for i in indices]


@dataclass
class FoldData:
    """Arrays for one leave-one-domain-out fold. Training splits carry no
    domain ids; test-set domain ids are not needed (the whole test split is
    the held-out domain)."""

    held_out: int
    domains: int  # latent domains in the source mixture
    classes: int
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def source_idx(self) -> np.ndarray:
        """Bundle positions of all source (train+val) samples, ascending."""
        return np.sort(np.concatenate([self.train_idx, self.val_idx]))


def _cell_rng(seed: int, domain: int, klass: int) -> np.random.Generator:
    key = (zlib.crc32(b"cell"), domain, klass)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))


def _class_mask(klass: int, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Soft geometry mask in [0, 1] for one class instance."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = (h - 1) / 2.0 + rng.uniform(-1.5, 1.5)
    cx = (w - 1) / 2.0 + rng.uniform(-1.5, 1.5)
    scale = 1.0 + rng.uniform(-0.12, 0.12)
    dy, dx = yy - cy, xx - cx
    r = np.hypot(dy, dx)
    if klass == 0:  # solid disk
        return np.clip(0.30 * h * scale - r, 0.0, 1.0)
    if klass == 1:  # ring
        r_mid = 0.28 * h * scale
        return np.clip(0.09 * h - np.abs(r - r_mid), 0.0, 1.0)
    if klass == 2:  # X cross
        width = 0.055 * h
        arm = np.minimum(np.abs(dy - dx), np.abs(dy + dx)) / np.sqrt(2.0)
        return np.clip(width + 1.0 - arm, 0.0, 1.0) * (r < 0.42 * h * scale)
    period = 0.22 * h * scale
    phase = rng.uniform(0.0, period)
    if klass == 3:  # horizontal stripes in a disk window
        wave = 0.5 + 0.5 * np.sin(2.0 * np.pi * (yy + phase) / period)
    else:  # vertical stripes in a disk window
        wave = 0.5 + 0.5 * np.sin(2.0 * np.pi * (xx + phase) / period)
    return wave * (r < 0.40 * h * scale)


def _style_params(domain: int, rng: np.random.Generator) -> dict:
    base = _DOMAIN_STYLES[domain % len(_DOMAIN_STYLES)]
    # Extra domains beyond the built-in palette get rotated channel gains.
    shift = domain // len(_DOMAIN_STYLES)
    gain = np.roll(np.asarray(base["gain"], dtype=np.float64), shift)
    bias = np.roll(np.asarray(base["bias"], dtype=np.float64), shift)
    return {
        "gain": gain * (1.0 + rng.uniform(-0.08, 0.08, size=3)),
        "bias": bias + rng.uniform(-0.03, 0.03, size=3),
        "gamma": base["gamma"],
        "bg": base["bg"] + rng.uniform(-0.05, 0.05),
        "fg": base["fg"] + rng.uniform(-0.05, 0.05),
        "noise": base["noise"] * (1.0 + rng.uniform(-0.3, 0.3)),
    }


def _render(klass: int, domain: int, channels: int, h: int, w: int,
            rng: np.random.Generator) -> np.ndarray:
    mask = _class_mask(klass, h, w, rng)
    style = _style_params(domain, rng)
    gray = style["bg"] + (style["fg"] - style["bg"]) * mask
    gray = np.clip(gray, 0.0, 1.0) ** style["gamma"]
    noise = rng.uniform(-1.0, 1.0, size=(h, w)) * style["noise"]
    img = np.empty((channels, h, w), dtype=np.float64)
    for c in range(channels):
        g = style["gain"][c % 3]
        b = style["bias"][c % 3]
        img[c] = g * gray + b + noise
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_benchmark(seed: int, domains: int = 4, classes: int = 5,
                       n_per_cell: int = 40,
                       image_size: tuple[int, int, int] = (3, 16, 16)) -> DatasetBundle:
    """Deterministic synthetic benchmark; a pure function of its arguments."""
    if domains < 2 or classes < 2 or n_per_cell < 4:
        raise InvalidDimensionError(
            f"need domains >= 2, classes >= 2, n_per_cell >= 4; "
            f"got {domains}, {classes}, {n_per_cell}"
        )
    c, h, w = image_size
    if c < 1 or h < 8 or w < 8:
        raise InvalidDimensionError(f"image size {image_size} too small (need C>=1, H,W >= 8)")
    samples = []
    for d in range(domains):
        for k in range(classes):
            rng = _cell_rng(seed, d, k)
            for _ in range(n_per_cell):
                samples.append(Sample(_render(k, d, c, h, w, rng), k, d))
    return DatasetBundle(samples=samples, domains=domains, classes=classes, seed=int(seed))


def leave_one_domain_out(bundle: DatasetBundle, held_out: int) -> Splits:
    """Test = the held-out domain; remaining samples split 70/30 train/val.

    The split is stratified per (domain, class) cell so each cell keeps at
    least two training samples, then both lists are shuffled; all randomness
    derives from (bundle.seed, held_out).
    """
    if not 0 <= held_out < bundle.domains:
        raise ValueError(f"held_out {held_out} outside [0, {bundle.domains})")
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=bundle.content_digest(),
                               spawn_key=(zlib.crc32(b"lodo"), int(held_out)))
    )
    test, train, val = [], [], []
    by_cell: dict[tuple[int, int], list[int]] = {}
    for i, s in enumerate(bundle.samples):
        if s.true_domain == held_out:
            test.append(i)
        else:
            by_cell.setdefault((s.true_domain, s.class_label), []).append(i)
    for cell in sorted(by_cell):
        idx = np.array(by_cell[cell])
        idx = idx[rng.permutation(idx.size)]
        n_val = int(round(0.3 * idx.size))
        n_val = min(max(n_val, 0), idx.size - 2)  # keep >= 2 training samples
        val.extend(idx[:n_val])
        train.extend(idx[n_val:])
    train = np.array(train, dtype=np.int64)
    val = np.array(val, dtype=np.int64)
    return Splits(
        train=train[rng.permutation(train.size)],
        val=val[rng.permutation(val.size)],
        test=np.array(test, dtype=np.int64),
    )


def fold_data(bundle: DatasetBundle, held_out: int) -> FoldData:
    """Assemble training arrays for one fold from domain-stripped views."""
    sp = leave_one_domain_out(bundle, held_out)
    train_views = bundle.train_views(sp.train)
    val_views = bundle.train_views(sp.val)
    return FoldData(
        held_out=held_out,
        domains=bundle.domains - 1,
        classes=bundle.classes,
        train_x=np.stack([v.pixels for v in train_views]).astype(np.float64),
        train_y=np.array([v.class_label for v in train_views], dtype=np.int64),
        val_x=np.stack([v.pixels for v in val_views]).astype(np.float64),
        val_y=np.array([v.class_label for v in val_views], dtype=np.int64),
        test_x=bundle.pixel_array(sp.test),
        test_y=np.array([bundle.samples[i].class_label for i in sp.test], dtype=np.int64),
        train_idx=sp.train,
        val_idx=sp.val,
        test_idx=sp.test,
    )


def bundles_equal(a: DatasetBundle, b: DatasetBundle) -> bool:
    """Equality over serialized content (samples, domain and class counts)."""
    if (a.domains, a.classes, len(a.samples)) != (b.domains, b.classes, len(b.samples)):
        return False
    for sa, sb in zip(a.samples, b.samples):
        if sa.class_label != sb.class_label or sa.true_domain != sb.true_domain:
            return False
        if sa.pixels.tobytes() != sb.pixels.tobytes():
            return False
    return True


def _bundle_payload(bundle: DatasetBundle) -> bytes:
    chunks = []
    for s in bundle.samples:
        chunks.append(np.uint16(s.class_label).tobytes())
        chunks.append(np.uint16(s.true_domain).tobytes())
        chunks.append(np.ascontiguousarray(s.pixels, dtype="<f4").tobytes())
    return b"".join(chunks)


def write_bundle(bundle: DatasetBundle, path) -> None:
    c, h, w = bundle.image_shape
    header = np.array(
        [bundle.domains, bundle.classes, c, h, w, len(bundle.samples)], dtype="<u4"
    ).tobytes()
    payload = _bundle_payload(bundle)
    crc = np.uint32(zlib.crc32(payload)).tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC + header + payload + crc)


def read_bundle(path) -> DatasetBundle:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 24:
        raise MalformedHeaderError("file too short for a header")
    if blob[: len(MAGIC)] != MAGIC:
        raise MalformedHeaderError(f"bad magic {blob[:len(MAGIC)]!r}")
    m, k, c, h, w, n = np.frombuffer(blob, dtype="<u4", count=6, offset=len(MAGIC))
    if m == 0 or k == 0 or c == 0 or h == 0 or w == 0:
        raise MalformedHeaderError(f"impossible header fields M={m} K={k} C={c} H={h} W={w}")
    record = 4 + 4 * c * h * w
    start = len(MAGIC) + 24
    expected = start + int(n) * record + 4
    if len(blob) < expected:
        raise TruncatedPayloadError(f"expected {expected} bytes, file has {len(blob)}")
    payload = blob[start : expected - 4]
    stored_crc = int(np.frombuffer(blob, dtype="<u4", count=1, offset=expected - 4)[0])
    if zlib.crc32(payload) != stored_crc:
        raise ChecksumError("payload CRC32 mismatch")

    samples = []
    off = 0
    for _ in range(int(n)):
        label = int(np.frombuffer(payload, dtype="<u2", count=1, offset=off)[0])
        domain = int(np.frombuffer(payload, dtype="<u2", count=1, offset=off + 2)[0])
        pix = np.frombuffer(payload, dtype="<f4", count=c * h * w, offset=off + 4)
        samples.append(Sample(pix.reshape(c, h, w).copy(), label, domain))
        off += record
    return DatasetBundle(samples=samples, domains=int(m), classes=int(k), seed=0)
