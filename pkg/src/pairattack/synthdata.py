"""Procedural identity corpus with live and spoof renderings.

Each identity is a latent vector mixed into low-frequency cosine patterns
over a 3x32x32 canvas. Live captures carry a fixed-period sensor grid at
full strength; the spoof branch attenuates that grid, adds a red/blue color
shift, and damps part of the per-pixel sensor noise, which is what the
anti-spoofing nets learn to detect. The signature strength varies per
capture so the class boundary stays soft.
All randomness flows through seeded generators; the same seeds reproduce the
same pixel bytes.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field

import numpy as np

from .ioutil import (
    IMG_MAGIC,
    atomic_write_bytes,
    atomic_write_text,
    canonical_json,
    read_array_record,
    write_array_record,
)

IMG_SHAPE = (3, 32, 32)
LATENT_DIM = 24
LIVE, SPOOF = "live", "spoof"
# identities are redrawn until every pairwise latent cosine stays below this,
# so no two identities sit close enough to blur verification thresholds
MAX_ID_COS = 0.28

# low-frequency 2-D cosine basis, one function per latent dimension; kept
# below the pooling scale of the toy nets so every architecture resolves
# the same identity structure
_BASIS_FREQS = [
    (0, 1), (1, 0), (1, 1), (0, 2), (2, 0), (1, 2), (2, 1), (2, 2),
    (0, 3), (3, 0), (1, 3), (3, 1), (2, 3), (3, 2), (3, 3), (0, 4),
    (4, 0), (1, 4), (4, 1), (2, 4), (4, 2), (3, 4), (4, 3), (4, 4),
]

PATTERN_GAIN = 0.05
NOISE_GAIN = 0.025
GRID_PERIOD = 4
GRID_AMPLITUDE = 0.015  # live sensor-grid strength
GRID_DAMP = 0.8  # fraction of the grid lost to recapture, times strength
CHANNEL_SHIFT = 0.008  # +R, -B on the spoof branch
LUMA_DROP = 0.03  # recapture loses brightness across all channels
NOISE_DAMP = 0.2  # recapture also smooths away part of the sensor noise
# per-capture multiplier on all spoof cues
SPOOF_STRENGTH_RANGE = (0.85, 1.2)
# mild per-capture jitter on the grid, color-balance, and brightness
# coefficients; weak spoofs therefore overlap the live population and
# anti-spoofing keeps an irreducible error floor
LIVE_GRID_SIGMA = 0.007
LIVE_SHIFT_SIGMA = 0.004
LIVE_LUMA_SIGMA = 0.012


def _cosine_basis() -> np.ndarray:
    h, w = IMG_SHAPE[1], IMG_SHAPE[2]
    ii = (np.arange(h) + 0.5) / h
    jj = (np.arange(w) + 0.5) / w
    basis = np.empty((LATENT_DIM, h, w))
    for k, (u, v) in enumerate(_BASIS_FREQS):
        basis[k] = np.cos(np.pi * u * ii)[:, None] * np.cos(np.pi * v * jj)[None, :]
    return basis


_BASIS = _cosine_basis()
# fixed channel mixing; a renderer constant, not per-corpus state
_MIX = np.random.default_rng(51966).normal(size=(3, LATENT_DIM))


def _spoof_grid() -> np.ndarray:
    h, w = IMG_SHAPE[1], IMG_SHAPE[2]
    gi = np.cos(2.0 * np.pi * np.arange(h) / GRID_PERIOD)
    gj = np.cos(2.0 * np.pi * np.arange(w) / GRID_PERIOD)
    return gi[:, None] * gj[None, :]


_GRID = _spoof_grid()


@dataclass(frozen=True)
class IdentitySpec:
    identity_id: int
    latent: np.ndarray  # (LATENT_DIM,)


@dataclass(frozen=True)
class FaceImage:
    pixels: np.ndarray  # (3, 32, 32) in [0, 1]
    identity_id: int
    liveness: str  # LIVE or SPOOF


def make_identity(seed: int, identity_id: int) -> IdentitySpec:
    """Latent for one identity, rejection-sampled against all lower ids.

    Replays the draw sequence for ids 0..identity_id so the result depends
    only on (seed, identity_id) while still honoring the pairwise cosine cap.
    """
    accepted: list[np.ndarray] = []
    for i in range(identity_id + 1):
        rng = np.random.default_rng([seed, i])
        while True:
            cand = rng.normal(size=LATENT_DIM)
            unit = cand / np.linalg.norm(cand)
            if all(abs(float(unit @ (p / np.linalg.norm(p)))) <= MAX_ID_COS for p in accepted):
                break
        accepted.append(cand)
    return IdentitySpec(identity_id=identity_id, latent=accepted[-1])


def render(spec: IdentitySpec, liveness: str, noise_seed: int) -> FaceImage:
    """Render one sample; live and spoof share base pattern and noise."""
    if liveness not in (LIVE, SPOOF):
        raise ValueError(f"liveness must be '{LIVE}' or '{SPOOF}', got {liveness!r}")
    pattern = np.einsum("k,ck,kxy->cxy", spec.latent, _MIX, _BASIS)
    rms = float(np.sqrt(np.mean(pattern**2)))
    if rms > 1e-9:
        pattern = pattern / rms
    noise = np.random.default_rng([noise_seed, spec.identity_id]).normal(size=IMG_SHAPE)
    # capture artifacts: live keeps the full sensor grid; recapture attenuates
    # it, tints the color balance, and smooths part of the sensor noise, so
    # the same-seed live/spoof difference is exactly the strength-scaled
    # signature
    aux = np.random.default_rng([noise_seed, spec.identity_id, 4242])
    grid_coef = GRID_AMPLITUDE + LIVE_GRID_SIGMA * aux.normal()
    shift_coef = LIVE_SHIFT_SIGMA * aux.normal()
    luma_coef = LIVE_LUMA_SIGMA * aux.normal()
    strength = aux.uniform(*SPOOF_STRENGTH_RANGE)
    noise_scale = 1.0
    if liveness == SPOOF:
        grid_coef = max(grid_coef * (1.0 - strength * GRID_DAMP), 0.0)
        shift_coef += strength * CHANNEL_SHIFT
        luma_coef -= strength * LUMA_DROP
        noise_scale = max(1.0 - strength * NOISE_DAMP, 0.0)
    img = 0.5 + PATTERN_GAIN * pattern + NOISE_GAIN * noise_scale * noise
    img = img + grid_coef * _GRID[None, :, :] + luma_coef
    img[0] += shift_coef
    img[2] -= shift_coef
    img = np.clip(img, 0.0, 1.0)
    return FaceImage(pixels=img, identity_id=spec.identity_id, liveness=liveness)


@dataclass(frozen=True)
class CorpusEntry:
    index: int
    identity_id: int
    liveness: str
    noise_seed: int
    split: str  # "train" or "eval"
    pixels: np.ndarray


@dataclass
class Corpus:
    seed: int
    n_identities: int
    images_per: int
    train_identities: list[int]
    eval_identities: list[int]
    entries: list[CorpusEntry]
    eval_pairs: list[tuple[int, int]] = field(default_factory=list)  # (spoof idx, live idx)

    def select(self, split: str | None = None, liveness: str | None = None) -> list[CorpusEntry]:
        out = self.entries
        if split is not None:
            out = [e for e in out if e.split == split]
        if liveness is not None:
            out = [e for e in out if e.liveness == liveness]
        return out


def gen_corpus(seed: int, n_identities: int, images_per: int) -> Corpus:
    """Generate the full corpus: disjoint train/eval identities plus the
    shuffled list of impersonation pairs (spoof of a -> live of b, a != b)."""
    if n_identities < 4:
        raise ValueError(f"need at least 4 identities, got {n_identities}")
    if images_per < 1:
        raise ValueError("images_per must be >= 1")

    n_train = n_identities // 2
    train_ids = list(range(n_train))
    eval_ids = list(range(n_train, n_identities))

    seed_src = np.random.default_rng([seed, 777])
    entries: list[CorpusEntry] = []
    index_of: dict[tuple[int, str, int], int] = {}
    for ident in range(n_identities):
        spec = make_identity(seed, ident)
        split = "train" if ident < n_train else "eval"
        for liveness in (LIVE, SPOOF):
            for j in range(images_per):
                noise_seed = int(seed_src.integers(0, 2**63))
                img = render(spec, liveness, noise_seed)
                idx = len(entries)
                entries.append(
                    CorpusEntry(
                        index=idx,
                        identity_id=ident,
                        liveness=liveness,
                        noise_seed=noise_seed,
                        split=split,
                        pixels=img.pixels,
                    )
                )
                index_of[(ident, liveness, j)] = idx

    pairs = []
    for a in eval_ids:
        for b in eval_ids:
            if a == b:
                continue
            for js in range(images_per):
                for jt in range(images_per):
                    pairs.append((index_of[(a, SPOOF, js)], index_of[(b, LIVE, jt)]))
    arr = np.asarray(pairs, dtype=np.int64)
    np.random.default_rng([seed, 778]).shuffle(arr, axis=0)
    eval_pairs = [(int(s), int(t)) for s, t in arr]

    return Corpus(
        seed=seed,
        n_identities=n_identities,
        images_per=images_per,
        train_identities=train_ids,
        eval_identities=eval_ids,
        entries=entries,
        eval_pairs=eval_pairs,
    )


# ---------------------------------------------------------------------------
# persistence: one .bin of image records plus a JSON manifest with offsets


def save_corpus(corpus: Corpus, out_dir: str) -> None:
    buf = io.BytesIO()
    offsets = []
    for e in corpus.entries:
        off, _ = write_array_record(buf, e.pixels, IMG_MAGIC)
        offsets.append(off)
    manifest = {
        "format": "corpus-v1",
        "seed": corpus.seed,
        "n_identities": corpus.n_identities,
        "images_per": corpus.images_per,
        "train_identities": corpus.train_identities,
        "eval_identities": corpus.eval_identities,
        "images": [
            {
                "index": e.index,
                "identity_id": e.identity_id,
                "liveness": e.liveness,
                "noise_seed": e.noise_seed,
                "split": e.split,
                "offset": offsets[e.index],
            }
            for e in corpus.entries
        ],
        "eval_pairs": [[s, t] for s, t in corpus.eval_pairs],
    }
    atomic_write_bytes(os.path.join(out_dir, "images.bin"), buf.getvalue())
    atomic_write_text(os.path.join(out_dir, "manifest.json"), canonical_json(manifest))


def load_corpus(in_dir: str) -> Corpus:
    import json

    man_path = os.path.join(in_dir, "manifest.json")
    if not os.path.exists(man_path):
        raise FileNotFoundError(f"no corpus manifest at {man_path}")
    with open(man_path, encoding="utf-8") as fh:
        man = json.load(fh)
    if man.get("format") != "corpus-v1":
        raise ValueError(f"unsupported corpus format {man.get('format')!r}")
    entries = []
    with open(os.path.join(in_dir, "images.bin"), "rb") as fh:
        for rec in man["images"]:
            pixels = read_array_record(fh, rec["offset"], IMG_MAGIC)
            entries.append(
                CorpusEntry(
                    index=rec["index"],
                    identity_id=rec["identity_id"],
                    liveness=rec["liveness"],
                    noise_seed=rec["noise_seed"],
                    split=rec["split"],
                    pixels=pixels,
                )
            )
    return Corpus(
        seed=man["seed"],
        n_identities=man["n_identities"],
        images_per=man["images_per"],
        train_identities=list(man["train_identities"]),
        eval_identities=list(man["eval_identities"]),
        entries=entries,
        eval_pairs=[(int(s), int(t)) for s, t in man["eval_pairs"]],
    )
