"""Nearest-centroid speech codec over a frozen, versioned codebook."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

from ..errors import FormatError
from .corpus import gen_corpus
from .io import frames_from_bytes, frames_to_bytes
from .render import all_centers, max_jitter_norm, render_speech
from .world import WorldConfig

CODEBOOK_VERSION = 1
REFERENCE_SEED = 12345
REFERENCE_COUNT = 4000


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    diff = np.asarray(x, dtype=np.float64)[:, None, :] - np.asarray(c, dtype=np.float64)[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


@dataclass
class Codec:
    centroids: np.ndarray   # [V_s - 1, F] float32
    version: int
    radius: float           # bound on frame-to-centroid distance for any rendered frame

    @property
    def eos(self) -> int:
        return len(self.centroids)

    @property
    def vocab_size(self) -> int:
        return len(self.centroids) + 1

    def encode(self, frames: np.ndarray) -> np.ndarray:
        """Per-frame nearest centroid (lowest id on ties), then EOS."""
        frames = np.asarray(frames)
        if frames.ndim != 2 or frames.shape[1] != self.centroids.shape[1]:
            raise FormatError(f"frames shape {frames.shape} incompatible with codebook")
        ids = np.argmin(_sq_dists(frames, self.centroids), axis=1) if len(frames) else np.zeros(0, np.int64)
        return np.concatenate([ids.astype(np.int64), [self.eos]])

    def decode(self, tokens) -> np.ndarray:
        """Centroid lookup for the ids before EOS."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size == 0 or tokens[-1] != self.eos or np.count_nonzero(tokens == self.eos) != 1:
            raise FormatError("speech tokens must contain exactly one EOS, at the end")
        body = tokens[:-1]
        if np.any((body < 0) | (body >= self.eos)):
            raise FormatError(f"unknown speech token id (valid: 0..{self.eos})")
        return self.centroids[body].astype(np.float32)

    def checksum(self) -> str:
        return hashlib.sha256(self.centroids.astype("<f4").tobytes()).hexdigest()


def center_radius(centroids: np.ndarray, world: WorldConfig) -> float:
    """Max distance from any jitter-free render center to its nearest centroid."""
    centers, _ = all_centers(world)
    best = np.inf * np.ones(len(centers))
    for i in range(0, len(centers), 2048):
        best[i:i + 2048] = _sq_dists(centers[i:i + 2048], centroids).min(axis=1)
    return float(np.sqrt(best.max()))


def quantization_radius(centroids: np.ndarray, world: WorldConfig) -> float:
    # clamping is a projection onto a box containing every centroid, so it
    # never increases a distance; jitter adds at most its norm
    return center_radius(centroids, world) + max_jitter_norm(world)


def build_codebook(world: WorldConfig, seed: int = REFERENCE_SEED, count: int = REFERENCE_COUNT,
                   iters: int = 25) -> np.ndarray:
    """k-means (Lloyd) over rendered reference frames.

    Initialised at the (phoneme, slot, dialect) cell means when their number
    equals the codebook size, otherwise at a seeded sample of frames.
    """
    corpus = gen_corpus(seed, world, count)
    frames = np.concatenate([render_speech(u, world) for u in corpus]).astype(np.float64)
    k = world.n_centroids
    centers, labels = all_centers(world)
    cell = (labels[:, 0] * world.frames_per_token + labels[:, 1]) * world.D + labels[:, 3]
    n_cells = world.A * world.frames_per_token * world.D
    if n_cells == k:
        init = np.stack([centers[cell == c].mean(axis=0) for c in range(n_cells)])
    else:
        rng = np.random.default_rng(seed)
        init = frames[rng.choice(len(frames), size=k, replace=False)]
    cent = init.copy()
    for _ in range(iters):
        assign = np.argmin(_sq_dists(frames, cent), axis=1)
        for j in range(k):
            members = frames[assign == j]
            if len(members):
                cent[j] = members.mean(axis=0)
    return cent.astype(np.float32)


def _asset_name(version: int) -> str:
    return f"codebook_v{version}"


@lru_cache(maxsize=4)
def load_codec(world: WorldConfig | None = None, version: int = CODEBOOK_VERSION) -> Codec:
    """Shipped codebook for the default world; other worlds get one built on the fly."""
    world = world or WorldConfig()
    if world == WorldConfig():
        pkg = resources.files("goat_tts.toy_world") / "assets"
        blob = (pkg / f"{_asset_name(version)}.f32").read_bytes()
        meta = json.loads((pkg / f"{_asset_name(version)}.json").read_text())
        cent = frames_from_bytes(blob)
        if meta["sha256"] != hashlib.sha256(cent.astype("<f4").tobytes()).hexdigest():
            raise FormatError("shipped codebook does not match its recorded checksum")
        codec = Codec(cent, version, float(meta["radius"]))
    else:
        cent = build_codebook(world)
        codec = Codec(cent, version, quantization_radius(cent, world))
    check_margin(codec, world)
    return codec


def codebook_assets(world: WorldConfig, version: int = CODEBOOK_VERSION) -> tuple[bytes, dict]:
    cent = build_codebook(world)
    meta = {
        "version": version,
        "reference_seed": REFERENCE_SEED,
        "reference_count": REFERENCE_COUNT,
        "radius": quantization_radius(cent, world),
        "sha256": hashlib.sha256(cent.astype("<f4").tobytes()).hexdigest(),
        "world": world.to_dict(),
    }
    return frames_to_bytes(cent), meta


@lru_cache(maxsize=4)
def phoneme_margin(world: WorldConfig) -> float:
    """Min distance between render centers of different phonemes.

    Candidates come from the Gram-matrix form of the squared distance; every
    pair near the minimum is then re-measured directly, so the result does not
    depend on cancellation in the fast form.
    """
    centers, labels = all_centers(world)
    centers = np.asarray(centers, dtype=np.float64)
    norms = np.einsum("ij,ij->i", centers, centers)
    best = np.inf
    for p in range(world.A):
        mine = labels[:, 0] == p
        a, b = centers[mine], centers[~mine]
        approx = norms[mine][:, None] + norms[~mine][None, :] - 2.0 * (a @ b.T)
        lo = approx.min()
        i, j = np.nonzero(approx <= lo + 1e-6 * max(1.0, abs(lo)))
        exact = np.einsum("ij,ij->i", a[i] - b[j], a[i] - b[j]).min()
        best = min(best, exact)
    return float(np.sqrt(best))


def margin_report(codec: Codec, world: WorldConfig) -> dict:
    margin = phoneme_margin(world)
    jitter = max_jitter_norm(world)
    return {
        "margin": margin,
        "quantization_radius": codec.radius,
        "jitter_bound": jitter,
        "margin_gt_2r": margin > 2 * codec.radius,
        # what oracle exactness after a codec round trip actually needs
        "margin_gt_2r_plus_jitter": margin > 2 * (codec.radius + jitter),
    }


def check_margin(codec: Codec, world: WorldConfig) -> dict:
    rep = margin_report(codec, world)
    if not (rep["margin_gt_2r"] and rep["margin_gt_2r_plus_jitter"]):
        raise FormatError(f"codebook violates the template margin property: {rep}")
    return rep
