"""Synthetic lesion phantoms and the on-disk formats.

Phantoms stand in for brain MRI slices: a smooth random brain texture inside
an elliptical head with a bright skull ring, plus one bright elliptical
lesion with a soft boundary and a heterogeneous interior that carries fine
detail lost at LR. Intensities follow the [-1, 1]
convention.

File formats
------------
Tensor container (``.lftb``), little-endian::

    b"LFTB" | u32 version | records...
    record = u32 name_len | name (ASCII) | u32 rank | u64 dims[rank] | f64 data[prod(dims)]

Dataset manifest (``manifest.txt``): one line per sample,
``id file row0 col0 height width``; lines starting with ``#`` are comments.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lfsr.degradation import fft2, ifft2, KSpaceGrid
from lfsr.metrics import BoundingBox
from lfsr.rng import derive_rng, stable_hash

MAGIC = b"LFTB"
VERSION = 1


class PhantomError(RuntimeError):
    pass


class ContainerError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    image_size: int = 128
    n_samples: int = 200
    seed: int = 0
    radius_min: float = 6.0
    radius_max: float = 20.0

    def __post_init__(self):
        n = self.image_size
        if n < 16 or n & (n - 1):
            raise PhantomError(f"image_size must be a power of two >= 16, got {n}")
        if not 0 < self.radius_min <= self.radius_max:
            raise PhantomError("need 0 < radius_min <= radius_max")


@dataclass
class Sample:
    hr: np.ndarray
    lesion_mask: np.ndarray
    bbox: BoundingBox
    id: int


def tight_bbox(mask) -> BoundingBox:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise PhantomError("empty lesion mask")
    return BoundingBox(int(rows[0]), int(cols[0]), int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1))


def smooth_field(rng, n, cutoff):
    """Unit-std Gaussian random field low-passed at ``cutoff`` cycles/image."""
    k = fft2(rng.normal(size=(n, n)))
    f = np.fft.fftfreq(n) * n
    lp = np.exp(-(f[:, None] ** 2 + f[None, :] ** 2) / (2.0 * cutoff ** 2))
    field = ifft2(KSpaceGrid(n, n, k.re * lp, k.im * lp))
    return (field - field.mean()) / field.std()


def gen_phantom(cfg: PhantomConfig, sample_id: int) -> Sample:
    n = cfg.image_size
    rng = derive_rng(cfg.seed, "phantom", sample_id)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    c = (n - 1) / 2.0

    hy = n * rng.uniform(0.40, 0.45)
    hx = n * rng.uniform(0.34, 0.40)
    cy = c + rng.uniform(-0.02, 0.02) * n
    cx = c + rng.uniform(-0.02, 0.02) * n
    rho_head = np.sqrt(((yy - cy) / hy) ** 2 + ((xx - cx) / hx) ** 2)
    brain = 1.0 / (1.0 + np.exp((rho_head - 0.92) * 60.0))
    head = 1.0 / (1.0 + np.exp((rho_head - 1.0) * 60.0))
    skull = np.clip(head - brain, 0.0, 1.0)

    tissue = 0.38 + 0.07 * smooth_field(rng, n, 3.0) + 0.03 * smooth_field(rng, n, 10.0)
    img = brain * tissue + skull * 0.75

    # lesion: rejection-sample a pose whose binary mask sits inside the brain interior
    interior = rho_head < 0.85
    for _ in range(100):
        ry = rng.uniform(cfg.radius_min, cfg.radius_max)
        rx = rng.uniform(cfg.radius_min, cfg.radius_max)
        theta = rng.uniform(0.0, np.pi)
        ly = cy + rng.uniform(-0.8, 0.8) * hy
        lx = cx + rng.uniform(-0.8, 0.8) * hx
        ct, st = np.cos(theta), np.sin(theta)
        u = ((yy - ly) * ct + (xx - lx) * st) / ry
        v = (-(yy - ly) * st + (xx - lx) * ct) / rx
        rho = np.sqrt(u * u + v * v)
        mask = rho <= 1.0
        if mask.any() and np.all(interior[mask]):
            break
    else:
        raise PhantomError(f"lesion placement failed after 100 tries for sample {sample_id}")

    profile = 1.0 / (1.0 + np.exp((rho - 1.0) * min(ry, rx) / 1.2))
    # heterogeneous lesion interior; the n/3 component sits partly above the X2 Nyquist limit
    lesion = 0.86 + 0.05 * smooth_field(rng, n, n / 6.0) + 0.04 * smooth_field(rng, n, n / 3.0)
    img = img * (1.0 - profile) + lesion * profile
    hr = np.clip(img, 0.0, 1.0) * 2.0 - 1.0
    return Sample(hr=hr, lesion_mask=mask.astype(np.float64), bbox=tight_bbox(mask), id=int(sample_id))


def is_validation(sample_id: int) -> bool:
    """Stable 80/20 split keyed on the sample id alone."""
    return stable_hash("split", int(sample_id)) % 5 == 0


def split_ids(ids):
    ids = list(ids)
    return [i for i in ids if not is_validation(i)], [i for i in ids if is_validation(i)]


def generate(cfg: PhantomConfig, ids=None):
    return [gen_phantom(cfg, i) for i in (range(cfg.n_samples) if ids is None else ids)]


# ------------------------------------------------------------------ container

def save_tensors(path, named):
    """Write name -> array (or Tensor) pairs to the LFTB container."""
    out = bytearray(MAGIC + struct.pack("<I", VERSION))
    for name, value in named.items():
        if not name or not name.isascii():
            raise ContainerError(f"tensor names must be non-empty ASCII, got {name!r}")
        arr = np.asarray(getattr(value, "data", value), dtype="<f8")
        raw = name.encode("ascii")
        out += struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape) + arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_tensors(path):
    buf = Path(path).read_bytes()
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise ContainerError(f"bad magic at offset 0 in {path}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version} at offset 4")
    pos = 8
    out = {}

    def take(nbytes, what):
        nonlocal pos
        if pos + nbytes > len(buf):
            raise ContainerError(f"truncated {what} at offset {pos} (need {nbytes} bytes, have {len(buf) - pos})")
        chunk = buf[pos : pos + nbytes]
        pos += nbytes
        return chunk

    while pos < len(buf):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode("ascii")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims"))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(8 * count, f"payload of {name!r}"), dtype="<f8").astype(np.float64)
        out[name] = data.reshape(dims)
    return out


def export_pgm(img, path, data_range=(-1.0, 1.0)):
    """16-bit binary PGM; value = floor((x - lo) / (hi - lo) * 65535), clipped.

    Returns the number of clipped pixels.
    """
    a = np.asarray(getattr(img, "data", img), dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"export_pgm expects a 2-D image, got shape {a.shape}")
    lo, hi = data_range
    v = np.floor((a - lo) / (hi - lo) * 65535.0)
    clipped = int(np.count_nonzero((v < 0) | (v > 65535)))
    v = np.clip(v, 0, 65535).astype(">u2")
    header = f"P5\n{a.shape[1]} {a.shape[0]}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + v.tobytes())
    return clipped


def read_pgm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=">u2").reshape(h, w).astype(np.int64)


# ------------------------------------------------------------------ datasets

def sample_filename(sample_id):
    return f"sample_{sample_id:05d}.lftb"


def save_sample(sample: Sample, directory):
    path = Path(directory) / sample_filename(sample.id)
    save_tensors(path, {"hr": sample.hr, "lesion_mask": sample.lesion_mask})
    return path


def write_manifest(samples, directory):
    lines = ["# id file row0 col0 height width"]
    for s in samples:
        b = s.bbox
        lines.append(f"{s.id} {sample_filename(s.id)} {b.row0} {b.col0} {b.height} {b.width}")
    (Path(directory) / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_manifest(directory):
    entries = []
    for line in (Path(directory) / "manifest.txt").read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        sid, fname, r0, c0, h, w = line.split()
        entries.append((int(sid), fname, BoundingBox(int(r0), int(c0), int(h), int(w))))
    return entries


def load_dataset(directory):
    """Read every sample listed in ``manifest.txt``."""
    samples = []
    for sid, fname, bbox in read_manifest(directory):
        t = load_tensors(Path(directory) / fname)
        samples.append(Sample(t["hr"], t["lesion_mask"], bbox, sid))
    return samples
