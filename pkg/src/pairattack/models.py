"""Layered single-branch networks with named taps, segments, and training.

Two model families: face-recognition nets ending in a unit-norm embedding,
and anti-spoofing nets ending in a scalar pre-sigmoid live score. Every model
runs identically through two forward paths: a taped path used when gradients
are needed, and a plain numpy path for cheap inference. Both paths execute
the same kernels on the same arrays, so their outputs are bit-identical.

Layer indices are 1-based throughout, matching the segment notation: layer i
consumes exactly the output of layer i-1, and Segment(i, j) composes layers
i..j so that Segment(1, k) followed by Segment(k+1, l) is the full forward.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .ioutil import WTS_MAGIC, atomic_write_bytes, canonical_json
from .synthdata import LIVE, Corpus

FR_EMBEDDING = "fr_embedding"
FAS_SCORE = "fas_score"
EMBED_DIM = 32
PHOTONORM_FR = False


class TrainingDivergedError(ArithmeticError):
    pass


def _is_tensor(x) -> bool:
    return isinstance(x, ad.Tensor)


# ---------------------------------------------------------------------------
# layers


class ConvLayer:
    kind = "conv"

    def __init__(self, w: np.ndarray, stride: int = 1):
        self.w = np.asarray(w, dtype=np.float64)
        self.stride = int(stride)

    def params(self):
        return {"w": self.w}

    def set_param(self, name, arr):
        if name != "w":
            raise KeyError(name)
        self.w = np.asarray(arr, dtype=np.float64)

    def descriptor(self):
        return {"kind": "conv", "stride": self.stride}

    def forward(self, x, override=None):
        w = override["w"] if override else self.w
        if _is_tensor(x):
            return ad.conv2d(x, w, stride=self.stride)
        return ad.kernel("conv2d", x, w, stride=self.stride)


class ReluLayer:
    kind = "relu"

    def params(self):
        return {}

    def set_param(self, name, arr):
        raise KeyError(name)

    def descriptor(self):
        return {"kind": "relu"}

    def forward(self, x, override=None):
        return ad.relu(x) if _is_tensor(x) else ad.kernel("relu", x)


class PoolLayer:
    kind = "pool"

    def __init__(self, k: int):
        self.k = int(k)

    def params(self):
        return {}

    def set_param(self, name, arr):
        raise KeyError(name)

    def descriptor(self):
        return {"kind": "pool", "k": self.k}

    def forward(self, x, override=None):
        if _is_tensor(x):
            return ad.avgpool2d(x, self.k)
        return ad.kernel("avgpool2d", x, k=self.k)


class FlattenLayer:
    """Per-sample flatten: (B, ...) -> (B, features)."""

    kind = "flatten"

    def params(self):
        return {}

    def set_param(self, name, arr):
        raise KeyError(name)

    def descriptor(self):
        return {"kind": "flatten"}

    def forward(self, x, override=None):
        b = x.data.shape[0] if _is_tensor(x) else x.shape[0]
        if _is_tensor(x):
            return ad.reshape(x, (b, -1))
        return ad.kernel("reshape", x, shape=(b, -1))


class DenseLayer:
    kind = "dense"

    def __init__(self, w: np.ndarray):
        self.w = np.asarray(w, dtype=np.float64)

    def params(self):
        return {"w": self.w}

    def set_param(self, name, arr):
        if name != "w":
            raise KeyError(name)
        self.w = np.asarray(arr, dtype=np.float64)

    def descriptor(self):
        return {"kind": "dense"}

    def forward(self, x, override=None):
        w = override["w"] if override else self.w
        if _is_tensor(x):
            return ad.matmul(x, w)
        return ad.kernel("matmul", x, w)


class AffineLayer:
    """x @ w + b with an explicit bias; used by the linear-tail construction."""

    kind = "affine"

    def __init__(self, w: np.ndarray, b: np.ndarray):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64).reshape(1, -1)

    def params(self):
        return {"w": self.w, "b": self.b}

    def set_param(self, name, arr):
        if name == "w":
            self.w = arr
        elif name == "b":
            self.b = arr.reshape(1, -1)
        else:
            raise KeyError(name)

    def descriptor(self):
        return {"kind": "affine"}

    def forward(self, x, override=None):
        w = override["w"] if override else self.w
        b = override["b"] if override else self.b
        if _is_tensor(x):
            return ad.add(ad.matmul(x, w), b)
        return ad.kernel("add", ad.kernel("matmul", x, w), b)


class L2NormLayer:
    """Row-wise normalization onto the unit sphere."""

    kind = "l2norm"

    def params(self):
        return {}

    def set_param(self, name, arr):
        raise KeyError(name)

    def descriptor(self):
        return {"kind": "l2norm"}

    def forward(self, x, override=None):
        if _is_tensor(x):
            return ad.l2_normalize(x, axis=1)
        return ad.kernel("l2_normalize", x, axis=1)


class CenterLayer:
    """Fixed input centering x - 0.5; [0,1] images become zero-mean-ish."""

    kind = "center"

    def params(self):
        return {}

    def set_param(self, name, arr):
        raise KeyError(name)

    def descriptor(self):
        return {"kind": "center"}

    def forward(self, x, override=None):
        if _is_tensor(x):
            return ad.sub(x, np.float64(0.5))
        return ad.kernel("sub", x, np.float64(0.5))


class PhotometricNormLayer:
    """Per-sample, per-channel spatial mean removal. Recognition stacks
    normalize illumination before feature extraction, which makes them
    insensitive to the global brightness and color-cast cues that the
    anti-spoof family depends on."""

    kind = "photonorm"

    def params(self):
        return {}

    def set_param(self, name, arr):
        raise KeyError(name)

    def descriptor(self):
        return {"kind": "photonorm"}

    def forward(self, x, override=None):
        if _is_tensor(x):
            return ad.spatial_center(x)
        return ad.kernel("spatial_center", x)


_LAYER_BUILDERS = {
    "conv": lambda d: ConvLayer(np.zeros((1, 1, 1, 1)), stride=d["stride"]),
    "relu": lambda d: ReluLayer(),
    "pool": lambda d: PoolLayer(d["k"]),
    "flatten": lambda d: FlattenLayer(),
    "dense": lambda d: DenseLayer(np.zeros((1, 1))),
    "affine": lambda d: AffineLayer(np.zeros((1, 1)), np.zeros(1)),
    "l2norm": lambda d: L2NormLayer(),
    "center": lambda d: CenterLayer(),
    "photonorm": lambda d: PhotometricNormLayer(),
}


# ---------------------------------------------------------------------------
# model


class TapModel:
    def __init__(self, layers, tap_names: dict[int, str], head_kind: str):
        if head_kind not in (FR_EMBEDDING, FAS_SCORE):
            raise ValueError(f"unknown head_kind {head_kind!r}")
        self.layers = list(layers)
        self.tap_names = dict(tap_names)
        self.head_kind = head_kind
        for k in self.tap_names:
            if not 1 <= k <= len(self.layers):
                raise IndexError(f"tap index {k} outside 1..{len(self.layers)}")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def tap_index(self, name: str) -> int:
        for k, v in self.tap_names.items():
            if v == name:
                return k
        raise KeyError(f"no tap named {name!r}; have {sorted(self.tap_names.values())}")

    def forward(self, x, taps=(), weights=None):
        """Run layers 1..l; returns (final, {tap index: activation}).

        x may be a Tensor (recorded on its tape) or a plain array. weights
        optionally overrides layer parameters, keyed [layer index][param name];
        training uses this to thread gradient-requiring tensors through.
        """
        taps = set(taps)
        for k in taps:
            if not 1 <= k <= len(self.layers):
                raise IndexError(f"tap index {k} outside 1..{len(self.layers)}")
        out = x
        tapped = {}
        for i, layer in enumerate(self.layers, start=1):
            out = layer.forward(out, override=weights.get(i) if weights else None)
            if i in taps:
                tapped[i] = out
        return out, tapped

    def score_np(self, x: np.ndarray) -> np.ndarray:
        """Pre-sigmoid live scores, shape (B,)."""
        if self.head_kind != FAS_SCORE:
            raise ValueError("score_np on a non-FAS model")
        out, _ = self.forward(x)
        return out[:, 0]

    def embed_np(self, x: np.ndarray) -> np.ndarray:
        """Unit-norm embeddings, shape (B, d)."""
        if self.head_kind != FR_EMBEDDING:
            raise ValueError("embed_np on a non-FR model")
        out, _ = self.forward(x)
        return out


def forward_with_taps(model: TapModel, x, taps=()):
    return model.forward(x, taps=taps)


@dataclass(frozen=True)
class Segment:
    """Composition of layers start..end of a model (1-based, inclusive)."""

    model: TapModel
    start: int
    end: int

    def __post_init__(self):
        if not (1 <= self.start <= self.end <= self.model.n_layers):
            raise IndexError(
                f"segment [{self.start}, {self.end}] invalid for {self.model.n_layers} layers"
            )

    def forward(self, x):
        out = x
        for i in range(self.start, self.end + 1):
            out = self.model.layers[i - 1].forward(out)
        return out


# ---------------------------------------------------------------------------
# architectures


def _he(rng, shape, fan_in):
    return rng.normal(size=shape) * np.sqrt(2.0 / fan_in)


def build_model(
    head_kind: str, filters, kernels, init_seed: int, pools=None, head_hidden: int = 0
) -> TapModel:
    """Conv/relu/pool blocks followed by the family head. Spatial sizes must
    come out integral; the supported kernel/pool tuples are chosen so they do.
    pools widens individual pooling windows (default 2 per block); anti-spoof
    nets pool the last block to 1x1 so its tap is a global texture summary.
    head_hidden > 0 inserts a relu bottleneck before the anti-spoof score,
    giving that family a curved decision surface instead of an affine one."""
    if len(filters) != len(kernels):
        raise ValueError("filters and kernels must have equal length")
    if pools is None:
        pools = (2,) * len(filters)
    if len(pools) != len(filters):
        raise ValueError("pools and filters must have equal length")
    rng = np.random.default_rng([init_seed, 0xA7C4])
    layers = [CenterLayer()]
    if head_kind == FR_EMBEDDING and PHOTONORM_FR:
        layers.append(PhotometricNormLayer())
    tap_names = {}
    c_in, size = 3, 32
    for bi, (f, k, p) in enumerate(zip(filters, kernels, pools), start=1):
        layers.append(ConvLayer(_he(rng, (f, c_in, k, k), c_in * k * k)))
        layers.append(ReluLayer())
        size = size - k + 1
        if size % p:
            raise ValueError(f"block {bi}: conv output {size} not divisible by pool")
        layers.append(PoolLayer(p))
        size //= p
        c_in = f
        tap_names[len(layers)] = f"block{bi}"
    layers.append(FlattenLayer())
    feat = c_in * size * size
    if head_kind == FR_EMBEDDING:
        layers.append(DenseLayer(_he(rng, (feat, EMBED_DIM), feat)))
        layers.append(L2NormLayer())
        tap_names[len(layers)] = "embedding"
    else:
        if head_hidden:
            layers.append(AffineLayer(_he(rng, (feat, head_hidden), feat), np.zeros(head_hidden)))
            layers.append(ReluLayer())
            feat = head_hidden
        # bias lets the head absorb the DC feature offset instead of
        # burning the weight direction on it
        layers.append(AffineLayer(_he(rng, (feat, 1), feat), np.zeros(1)))
        tap_names[len(layers)] = "score"
    return TapModel(layers, tap_names, head_kind)


def linear_tail_feature_dim(k: int, trunk_seed: int = 0) -> int:
    """Flattened width of trunk layer k, for sizing the affine tail's w."""
    trunk = build_model(FAS_SCORE, (8, 16, 32), (3, 4, 3), trunk_seed)
    if not 1 <= k < trunk.n_layers:
        raise IndexError(f"tail split {k} outside 1..{trunk.n_layers - 1}")
    _, tapped = trunk.forward(np.zeros((1, 3, 32, 32)), taps={k})
    return int(np.prod(tapped[k].shape[1:]))


def make_linear_tail_fas(k: int, w, b: float, trunk_seed: int = 0) -> TapModel:
    """FAS model whose layers k+1..l compute exactly w . flatten(h_k) + b.

    The trunk below k is an ordinary random conv stack; the tail is affine by
    construction, which makes score monotonicity along w testable exactly.
    """
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    m_k = linear_tail_feature_dim(k, trunk_seed)
    if w.shape[0] != m_k:
        raise ValueError(f"w has {w.shape[0]} elements but layer {k} flattens to {m_k}")
    trunk = build_model(FAS_SCORE, (8, 16, 32), (3, 4, 3), trunk_seed)
    layers = trunk.layers[:k] + [FlattenLayer(), AffineLayer(w[:, None], np.array([float(b)]))]
    tap_names = {i: n for i, n in trunk.tap_names.items() if i <= k}
    tap_names[k] = tap_names.get(k, "tail_input")
    tap_names[len(layers)] = "score"
    return TapModel(layers, tap_names, FAS_SCORE)


# ---------------------------------------------------------------------------
# training

IDENTITY_OBJECTIVE = "identity_classification_with_embedding"
BINARY_OBJECTIVE = "live_spoof_binary"

_LOGIT_SCALE = 8.0  # cosine-softmax temperature for the identity head


def _training_set(corpus: Corpus, objective: str):
    entries = corpus.select(split="train")
    if not entries:
        raise ValueError("corpus has no training entries")
    x = np.stack([e.pixels for e in entries])
    if objective == IDENTITY_OBJECTIVE:
        ids = sorted({e.identity_id for e in entries})
        lut = {ident: i for i, ident in enumerate(ids)}
        y = np.array([lut[e.identity_id] for e in entries], dtype=np.int64)
        return x, y, len(ids)
    if objective == BINARY_OBJECTIVE:
        y = np.array([[1.0 if e.liveness == LIVE else 0.0] for e in entries])
        return x, y, 2
    raise ValueError(f"unknown objective {objective!r}")


def train(
    model: TapModel,
    corpus: Corpus,
    objective: str,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 16,
    sample_frac: float = 1.0,
    stop_acc: float | None = None,
) -> TapModel:
    """Adam on minibatches; mutates model weights in place.

    Adam rather than raw SGD because the conv trunk and the scalar head see
    very different gradient scales at this size. Deterministic for a fixed
    seed: shuffles, init, and batch order all flow from seeded generators.
    epochs=0 is a no-op by contract. sample_frac below 1 trains on a seeded
    subsample of the train split, one of the zoo's diversity axes: a model
    fed less data keeps generic low-level filters but grows a more
    idiosyncratic decision layer. stop_acc halts at the first epoch boundary
    where training accuracy reaches it, capping how confident (and how hard
    to push around) the net gets; some training runs land in sharp basins
    and a fixed epoch count alone leaves their logit scales seeds apart.
    """
    x_all, y_all, n_classes = _training_set(corpus, objective)
    if stop_acc is not None and objective != BINARY_OBJECTIVE:
        raise ValueError("stop_acc is only defined for the live/spoof objective")
    if not 0.0 < sample_frac <= 1.0:
        raise ValueError("sample_frac must be in (0, 1]")
    if sample_frac < 1.0:
        keep = max(int(round(len(x_all) * sample_frac)), batch_size)
        sel = np.random.default_rng([seed, 0x5AB5]).permutation(len(x_all))[:keep]
        x_all, y_all = x_all[sel], y_all[sel]
    if epochs == 0:
        return model
    b1, b2, adam_eps = 0.9, 0.999, 1e-8

    slots = []  # (layer index, param name)
    for i, layer in enumerate(model.layers, start=1):
        for pname in layer.params():
            slots.append((i, pname))
    head = None
    if objective == IDENTITY_OBJECTIVE:
        rng = np.random.default_rng([seed, 0x4EAD])
        head = rng.normal(size=(EMBED_DIM, n_classes)) / np.sqrt(EMBED_DIM)

    state = {}
    for sl in slots:
        arr = model.layers[sl[0] - 1].params()[sl[1]]
        state[sl] = (np.zeros_like(arr), np.zeros_like(arr))
    if head is not None:
        state["head"] = (np.zeros_like(head), np.zeros_like(head))

    def adam_step(key, value, g, t):
        m, v = state[key]
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state[key] = (m, v)
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        return value - lr * mh / (np.sqrt(vh) + adam_eps)

    n = x_all.shape[0]
    t = 0
    for epoch in range(epochs):
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        for lo in range(0, n, batch_size):
            idx = perm[lo : lo + batch_size]
            xb, tape = x_all[idx], ad.Tape()
            wmap: dict[int, dict[str, ad.Tensor]] = {}
            for i, pname in slots:
                arr = model.layers[i - 1].params()[pname]
                wmap.setdefault(i, {})[pname] = ad.Tensor(arr, requires_grad=True, tape=tape)
            try:
                out, _ = model.forward(ad.Tensor(xb, requires_grad=False, tape=tape), weights=wmap)
                if objective == IDENTITY_OBJECTIVE:
                    head_t = ad.Tensor(head, requires_grad=True, tape=tape)
                    logits = ad.mul_scalar(ad.matmul(out, head_t), _LOGIT_SCALE)
                    loss = ad.softmax_xent(logits, y_all[idx])
                else:
                    yb = ad.Tensor(y_all[idx])
                    loss = ad.mean(ad.sub(ad.softplus(out), ad.mul(yb, out)))
                grads = ad.backward(loss)
            except ad.NonFiniteError as err:
                raise TrainingDivergedError(f"training diverged at epoch {epoch}") from err
            t += 1
            for i, pname in slots:
                layer = model.layers[i - 1]
                new = adam_step((i, pname), layer.params()[pname], grads[wmap[i][pname]], t)
                layer.set_param(pname, new)
            if head is not None:
                head = adam_step("head", head, grads[head_t], t)
        if stop_acc is not None and objective == BINARY_OBJECTIVE:
            pred = (model.score_np(x_all) > 0.0).astype(np.float64)
            if float((pred == y_all).mean()) >= stop_acc:
                break
    return model


# ---------------------------------------------------------------------------
# quality diagnostics (the learnability bars live in the test suite)


def fas_accuracy(model: TapModel, entries) -> float:
    """Live/spoof accuracy at the neutral logit-0 cut."""
    x = np.stack([e.pixels for e in entries])
    y = np.array([1.0 if e.liveness == LIVE else 0.0 for e in entries])
    pred = (model.score_np(x) > 0.0).astype(np.float64)
    return float((pred == y).mean())


def fr_triple_accuracy(model: TapModel, entries, n_triples: int, seed: int) -> float:
    """Fraction of (anchor, same-id, other-id) triples ranked correctly by cosine."""
    by_id: dict[int, list] = {}
    for e in entries:
        by_id.setdefault(e.identity_id, []).append(e)
    ids = [i for i, es in sorted(by_id.items()) if len(es) >= 2]
    if len(ids) < 2:
        raise ValueError("need at least two identities with two images each")
    emb_cache = {}

    def emb(e):
        if e.index not in emb_cache:
            emb_cache[e.index] = model.embed_np(e.pixels[None])[0]
        return emb_cache[e.index]

    rng = np.random.default_rng([seed, 0x7319])
    hits = 0
    for _ in range(n_triples):
        a_id, b_id = rng.choice(ids, size=2, replace=False)
        ja, jb = rng.choice(len(by_id[a_id]), size=2, replace=False)
        anchor, same = by_id[a_id][int(ja)], by_id[a_id][int(jb)]
        other = by_id[b_id][int(rng.integers(len(by_id[b_id])))]
        ea = emb(anchor)
        if float(ea @ emb(same)) > float(ea @ emb(other)):
            hits += 1
    return hits / n_triples


# ---------------------------------------------------------------------------
# zoo

ZOO_SPECS = {
    "fr_surrogate": dict(
        head=FR_EMBEDDING, filters=(8, 16, 32), kernels=(3, 4, 3), tag=1, epochs=45, lr=0.003
    ),
    "fr_target_a": dict(
        head=FR_EMBEDDING, filters=(12, 24, 40), kernels=(3, 4, 3), tag=2, epochs=45, lr=0.003
    ),
    "fr_target_b": dict(
        head=FR_EMBEDDING, filters=(10, 20, 36), kernels=(5, 3, 3), tag=3, epochs=45, lr=0.003
    ),
    "fr_target_c": dict(
        head=FR_EMBEDDING, filters=(16, 28), kernels=(5, 3), tag=4, epochs=45, lr=0.003
    ),
    "fas_surrogate": dict(
        head=FAS_SCORE, filters=(8, 16, 32), kernels=(3, 4, 3), pools=(2, 2, 4),
        tag=5, epochs=30, lr=0.01, stop_acc=0.97
    ),
    "fas_target_a": dict(
        head=FAS_SCORE, filters=(12, 20, 32), kernels=(3, 4, 3), pools=(2, 2, 4),
        tag=6, epochs=30, lr=0.01
    ),
    "fas_target_b": dict(
        head=FAS_SCORE, filters=(12, 24), kernels=(5, 4), pools=(4, 4),
        tag=7, epochs=30, lr=0.01
    ),
}


QUALITY_BAR = 0.92  # held-out bar a trained model must clear before joining the zoo


def make_zoo(seed: int, corpus: Corpus, max_attempts: int = 3) -> dict[str, TapModel]:
    """Build and train the full surrogate/target family on one corpus.

    Targets differ from the surrogate in filter counts, kernel sizes, depth,
    and training seed, which is what makes the transfer setting black-box.
    An occasional init lands in a bad basin at this scale, so each model gets
    up to max_attempts deterministic re-inits; the best held-out scorer wins.
    """
    ev = corpus.select(split="eval")
    zoo = {}
    for name, spec in ZOO_SPECS.items():
        best = None
        for attempt in range(max_attempts):
            init_seed = int(
                np.random.default_rng([seed, spec["tag"], 1, attempt]).integers(2**63)
            )
            train_seed = int(
                np.random.default_rng([seed, spec["tag"], 2, attempt]).integers(2**63)
            )
            model = build_model(
                spec["head"], spec["filters"], spec["kernels"], init_seed,
                pools=spec.get("pools"), head_hidden=spec.get("head_hidden", 0),
            )
            frac = spec.get("train_frac", 1.0)
            if spec["head"] == FR_EMBEDDING:
                train(model, corpus, IDENTITY_OBJECTIVE, spec["epochs"], spec["lr"],
                      train_seed, sample_frac=frac)
                quality = fr_triple_accuracy(model, ev, n_triples=200, seed=train_seed)
            else:
                train(model, corpus, BINARY_OBJECTIVE, spec["epochs"], spec["lr"],
                      train_seed, sample_frac=frac, stop_acc=spec.get("stop_acc"))
                quality = fas_accuracy(model, ev)
            if best is None or quality > best[0]:
                best = (quality, model)
            if quality >= QUALITY_BAR:
                break
        zoo[name] = best[1]
    return zoo


# ---------------------------------------------------------------------------
# persistence


def zoo_bytes(zoo: dict[str, TapModel]) -> bytes:
    arrays = io.BytesIO()
    manifest: dict = {"format": "zoo-v1", "models": {}}
    for name in sorted(zoo):
        model = zoo[name]
        recs = []
        for i, layer in enumerate(model.layers, start=1):
            for pname, arr in sorted(layer.params().items()):
                off = arrays.tell()
                arrays.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
                recs.append(
                    {"layer": i, "name": pname, "shape": list(arr.shape), "offset": off}
                )
        manifest["models"][name] = {
            "head_kind": model.head_kind,
            "layers": [layer.descriptor() for layer in model.layers],
            "tap_names": {str(k): v for k, v in model.tap_names.items()},
            "arrays": recs,
        }
    man = canonical_json(manifest).encode("utf-8")
    return WTS_MAGIC + struct.pack("<I", len(man)) + man + arrays.getvalue()


def save_zoo(zoo: dict[str, TapModel], path: str) -> None:
    atomic_write_bytes(path, zoo_bytes(zoo))


def load_zoo(path: str) -> dict[str, TapModel]:
    import json

    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != WTS_MAGIC:
            raise ValueError(f"not a zoo weight file: magic {magic!r}")
        (man_len,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(man_len).decode("utf-8"))
        if manifest.get("format") != "zoo-v1":
            raise ValueError(f"unsupported zoo format {manifest.get('format')!r}")
        base = fh.tell()
        zoo = {}
        for name, m in manifest["models"].items():
            layers = [_LAYER_BUILDERS[d["kind"]](d) for d in m["layers"]]
            for rec in m["arrays"]:
                fh.seek(base + rec["offset"])
                n = int(np.prod(rec["shape"])) if rec["shape"] else 1
                arr = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(rec["shape"])
                layers[rec["layer"] - 1].set_param(rec["name"], arr.astype(np.float64))
            zoo[name] = TapModel(
                layers,
                {int(k): v for k, v in m["tap_names"].items()},
                m["head_kind"],
            )
    return zoo
