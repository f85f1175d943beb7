"""Environment samplers and MNIST IDX ingestion.

Every sampler draws from a Philox (counter-based) generator keyed by
``(seed, env_id)``, so adding an environment never perturbs the streams of the
existing ones and a fixed seed reproduces the same bits on every platform.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .objectives import EnvBatch


def make_rng(seed, env_id=0):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(env_id)])))


def _rad(rng, sigma, n):
    """Rademacher-style flips: -1 with probability ``sigma``."""
    return np.where(rng.random(n) < sigma, -1.0, 1.0)


@dataclass(frozen=True)
class TwoBitSampleSpec:
    alpha: float
    beta: float
    n: int
    seed: int = 0
    env_id: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        for v in (self.alpha, self.beta):
            if not 0 <= v <= 1:
                raise ValueError("flip probabilities must lie in [0, 1]")


def sample_twobit(spec: TwoBitSampleSpec) -> EnvBatch:
    rng = make_rng(spec.seed, spec.env_id)
    y = _rad(rng, 0.5, spec.n)
    x1 = y * _rad(rng, spec.alpha, spec.n)
    x2 = y * _rad(rng, spec.beta, spec.n)
    return EnvBatch(spec.env_id, np.column_stack([x1, x2]), y)


def twobit_envs(alpha, betas, n, seed=0, first_env_id=0):
    return [sample_twobit(TwoBitSampleSpec(alpha, b, n, seed, first_env_id + i))
            for i, b in enumerate(betas)]


# -- IDX ------------------------------------------------------------------

class IdxParseError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def parse_idx_bytes(raw: bytes) -> np.ndarray:
    if len(raw) < 4:
        raise IdxParseError("file shorter than the 4-byte magic number", len(raw))
    zero0, zero1, code, ndim = raw[:4]
    if zero0 != 0 or zero1 != 0:
        raise IdxParseError("bad magic number: first two bytes must be zero", 0)
    if code not in _IDX_DTYPES:
        raise IdxParseError(f"unsupported dtype code 0x{code:02x}", 2)
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IdxParseError(f"truncated header: {ndim} dimensions declared", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype = _IDX_DTYPES[code]
    need = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    have = len(raw) - header_end
    if have < need:
        raise IdxParseError(f"truncated payload: need {need} bytes, found {have}", len(raw))
    if have > need:
        raise IdxParseError(f"{have - need} trailing bytes after payload", header_end + need)
    data = np.frombuffer(raw, dtype=dtype, count=need // dtype.itemsize, offset=header_end)
    return data.reshape(dims).astype(dtype.newbyteorder("="))


def parse_idx(path) -> np.ndarray:
    """Read a (possibly gzipped) big-endian IDX file into an array."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        import gzip

        raw = gzip.decompress(raw)
    return parse_idx_bytes(raw)


def write_idx(path, array):
    array = np.asarray(array)
    code = {v.str[1:]: k for k, v in _IDX_DTYPES.items()}[array.dtype.newbyteorder(">").str[1:]]
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(array.dtype.newbyteorder(">")).tobytes())


# -- colored digits -------------------------------------------------------

@dataclass(frozen=True)
class ColoredDigitSpec:
    """Colored-digit environments in the style of ColoredMNIST.

    ``env_colors`` holds one color-flip probability per environment: the color
    equals the noisy label except with that probability. ``source`` is
    ``"synthetic_blobs"`` or ``"idx_files"`` (then ``idx_paths`` names the
    image and label files).
    """

    env_colors: tuple[float, ...] = (0.1, 0.2, 0.9)
    label_noise: float = 0.25
    n_per_env: int = 2000
    seed: int = 0
    source: str = "synthetic_blobs"
    idx_paths: tuple[str, str] | None = None
    blob_dim: int = 4
    blob_spread: float = 0.15

    def __post_init__(self):
        for v in (self.label_noise, *self.env_colors):
            if not 0 <= v < 1:
                raise ValueError("correlation parameters must lie in [0, 1)")
        if self.source not in ("synthetic_blobs", "idx_files"):
            raise ValueError(f"unknown source {self.source!r}")
        if self.source == "idx_files" and not self.idx_paths:
            raise ValueError("idx_files source needs idx_paths=(images, labels)")


BLOB_RADIUS = 2.0


def _blob_centers(dim):
    """Ten fixed digit centers on a sphere, far apart relative to the blob spread."""
    rng = make_rng(0xB10B, 0)
    c = rng.normal(size=(10, dim))
    return BLOB_RADIUS * c / np.linalg.norm(c, axis=1, keepdims=True)


def make_colored_envs(spec: ColoredDigitSpec):
    """Draw digit -> binary label -> label noise -> color, per environment.

    Synthetic blobs give ``blob_dim`` digit features followed by one color
    feature in {-1, +1}; IDX images give 2 x 14 x 14 color-channel features.
    """
    if spec.source == "idx_files":
        images = parse_idx(spec.idx_paths[0])
        labels = parse_idx(spec.idx_paths[1])
        if images.shape[0] != labels.shape[0]:
            raise IdxParseError("image and label counts differ", 4)
        perm = make_rng(spec.seed, 10_000).permutation(labels.shape[0])
    else:
        centers = _blob_centers(spec.blob_dim)

    envs = []
    for e, color_flip in enumerate(spec.env_colors):
        rng = make_rng(spec.seed, e)
        n = spec.n_per_env
        if spec.source == "idx_files":
            idx = perm[e * n:(e + 1) * n]
            if idx.size < n:
                raise ValueError("not enough images for the requested environments")
            digits = labels[idx].astype(int)
        else:
            digits = rng.integers(0, 10, size=n)
        clean = np.where(digits < 5, -1.0, 1.0)
        y = clean * _rad(rng, spec.label_noise, n)
        color = y * _rad(rng, color_flip, n)
        if spec.source == "idx_files":
            img = images[idx][:, ::2, ::2].reshape(n, -1).astype(np.float64) / 255.0
            red = (color > 0)[:, None]
            X = np.hstack([img * red, img * ~red])
        else:
            feats = centers[digits] + spec.blob_spread * rng.normal(size=(n, spec.blob_dim))
            X = np.column_stack([feats, color])
        envs.append(EnvBatch(e, X, y))
    return envs


def blob_digit_oracle(X, blob_dim=4):
    """Nearest-center digit classification from the invariant blob features."""
    centers = _blob_centers(blob_dim)
    d = ((X[:, None, :blob_dim] - centers[None]) ** 2).sum(axis=2)
    return np.where(d.argmin(axis=1) < 5, -1.0, 1.0)


# -- sine regression ------------------------------------------------------

UNIFORM_RECTS = (((-3.0, -3.0), (-2.0, 1.0)), ((-1.0, 2.0), (3.0, 3.0)))
GAUSSIAN_PARAMS = (
    ((-0.9, -2.2), ((0.9, 0.11), (0.11, 0.1))),
    ((1.0, 2.0), ((1.0, -0.3), (-0.3, 0.1))),
)


@dataclass(frozen=True)
class SineRegSpec:
    sampling: str = "gaussian"
    n_per_env: int = 2500
    seed: int = 0
    rects: tuple = UNIFORM_RECTS
    gaussians: tuple = field(default=GAUSSIAN_PARAMS)

    def __post_init__(self):
        if self.sampling not in ("uniform", "gaussian"):
            raise ValueError(f"unknown sampling {self.sampling!r}")
        if self.sampling == "gaussian":
            for _, cov in self.gaussians:
                cov = np.asarray(cov)
                if not np.allclose(cov, cov.T) or np.any(np.linalg.eigvalsh(cov) <= 0):
                    raise ValueError("covariances must be symmetric positive-definite")


def sine_target(x1):
    return np.sin(x1) + 1.0


def sample_sine_envs(spec: SineRegSpec):
    envs = []
    regions = spec.rects if spec.sampling == "uniform" else spec.gaussians
    for e, region in enumerate(regions):
        rng = make_rng(spec.seed, e)
        if spec.sampling == "uniform":
            lo, hi = np.asarray(region[0]), np.asarray(region[1])
            X = lo + (hi - lo) * rng.random((spec.n_per_env, 2))
        else:
            mean, cov = region
            X = rng.multivariate_normal(mean, cov, size=spec.n_per_env, method="cholesky")
        envs.append(EnvBatch(e, X, sine_target(X[:, 0])))
    return envs


def write_batches_csv(path, batches):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        width = batches[0].inputs.shape[1]
        w.writerow(["env_id"] + [f"x{i + 1}" for i in range(width)] + ["y"])
        for b in batches:
            for x, y in zip(b.inputs, b.targets):
                w.writerow([b.env_id] + [repr(float(v)) for v in x] + [repr(float(y))])
