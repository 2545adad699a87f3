"""The quality network: two-branch patch encoders, fusion, and score heads.

Each patch runs through a structure branch (sparse random subset of the
patch) and a texture branch (dense nearest-neighbor subset), both built from
two sampling/grouping/shared-MLP abstraction layers plus a strided side
convolution over the raw points. Pooled patch features are fused by a
width-1 convolution + batch norm + ELU block, and two small heads emit a
weight and a score per patch; the cloud's score is the mean of their
products.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from pstpcqa import autodiff as ad
from pstpcqa.autodiff import BatchNormState, Tensor
from pstpcqa.patching import PatchSet, knn, random_sample
from pstpcqa.pointcloud import IoFailure, PointCloud

WEIGHTS_MAGIC = b"PSTW"
WEIGHTS_VERSION = 1

POOLINGS = {
    "GMP": ("max",),
    "GAP": ("mean",),
    "GVP": ("variance",),
    "GAP+GVP": ("mean", "variance"),
    "GMP+GVP": ("max", "variance"),
}


class TooFewPoints(ValueError):
    """An abstraction layer received fewer points than it must sample/group."""


class IncompatibleWeights(ValueError):
    """Weight names or shapes do not match the model configuration."""


class VersionMismatch(ValueError):
    """Weight file was written by an unsupported format version."""


class ChecksumMismatch(ValueError):
    """Weight file body does not match its trailing CRC32."""


class NameMismatch(ValueError):
    """Weight file tensors do not line up with the expected parameter set."""


@dataclass(frozen=True)
class SGPConfig:
    """One sampling/grouping/shared-MLP abstraction layer.

    n_out points are randomly sampled as centers, each grouped with its k
    nearest input points; the shared MLP (width-1 grouped convolutions with
    batch norm and ELU) maps every neighbor's relative-position+feature
    vector, and a max over the group yields d_out features per center.
    """

    n_out: int
    k: int
    d_out: int
    mlp_widths: tuple = ()
    conv_groups: int = 4

    def __post_init__(self):
        if self.n_out < 1 or self.k < 1 or self.d_out < 1:
            raise ValueError("n_out, k, and d_out must be positive")
        if not self.mlp_widths:
            raise ValueError("mlp_widths must not be empty")
        if self.mlp_widths[-1] != self.d_out:
            raise ValueError(f"last MLP width {self.mlp_widths[-1]} must equal d_out {self.d_out}")
        if self.conv_groups < 1:
            raise ValueError("conv_groups must be positive")
        # The first convolution is ungrouped (its input width is arbitrary);
        # all later ones are grouped, so every MLP width must divide.
        for w in self.mlp_widths:
            if w % self.conv_groups:
                raise ValueError(f"MLP width {w} not divisible by conv_groups {self.conv_groups}")


def _default_sgp1() -> SGPConfig:
    return SGPConfig(n_out=512, k=32, d_out=128, mlp_widths=(64, 64, 128), conv_groups=4)


def _default_sgp2() -> SGPConfig:
    # Hidden width chosen so the default parameter count lands at ~1.8M.
    return SGPConfig(n_out=256, k=32, d_out=128, mlp_widths=(1408, 1408, 128), conv_groups=4)


@dataclass(frozen=True)
class ModelConfig:
    """Full architecture description; defaults reproduce the trained metric."""

    K: int = 16
    Np: int = 14900
    Ns: int = 1024
    Nt: int = 8192
    sgp1: SGPConfig = field(default_factory=_default_sgp1)
    sgp2: SGPConfig = field(default_factory=_default_sgp2)
    side_branch_channels: int = 128
    pooling: str = "GVP"
    use_tfe: bool = True
    use_sfe: bool = True
    use_lbe_weights: bool = True
    seed: int = 0

    def __post_init__(self):
        if not (self.use_tfe or self.use_sfe):
            raise ValueError("at least one of use_tfe/use_sfe must be enabled")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {sorted(POOLINGS)}, got {self.pooling!r}")
        if self.K < 1:
            raise ValueError("K must be positive")
        if not (1 <= self.Ns <= self.Np and 1 <= self.Nt <= self.Np):
            raise ValueError(f"need 1 <= Ns,Nt <= Np, got Ns={self.Ns} Nt={self.Nt} Np={self.Np}")
        for name, n_b in self.branch_inputs():
            if n_b < max(self.sgp1.n_out, self.sgp1.k):
                raise ValueError(f"{name} input {n_b} too small for first abstraction layer")
            if n_b < self.sgp2.n_out:
                raise ValueError(f"{name} input {n_b} smaller than final point count {self.sgp2.n_out}")
        if self.sgp1.n_out < max(self.sgp2.n_out, self.sgp2.k):
            raise ValueError("second abstraction layer asks for more points than the first emits")
        if self.side_branch_channels < 1:
            raise ValueError("side_branch_channels must be positive")

    def branch_inputs(self):
        """Live branches as (name, input point count) pairs, structure first."""
        out = []
        if self.use_sfe:
            out.append(("sfe", self.Ns))
        if self.use_tfe:
            out.append(("tfe", self.Nt))
        return out

    @property
    def branch_width(self) -> int:
        """Feature width of one branch output (abstraction + side channels)."""
        return self.sgp2.d_out + self.side_branch_channels

    @property
    def fused_width(self) -> int:
        """Width of the fused per-patch feature vector."""
        return len(self.branch_inputs()) * self.branch_width

    def side_stride(self, n_b: int) -> int:
        return n_b // self.sgp2.n_out


@dataclass
class PredictionBundle:
    """Per-patch weights and scores plus the aggregated cloud score.

    Tensor fields keep the computation graph alive for training; the array
    and float properties are the plain-value view.
    """

    weights_t: Tensor
    scores_t: Tensor
    global_t: Tensor

    @property
    def patch_weights(self) -> np.ndarray:
        return self.weights_t.data

    @property
    def patch_scores(self) -> np.ndarray:
        return self.scores_t.data

    @property
    def global_score(self) -> float:
        return float(self.global_t.data)


class ModelWeights:
    """Named parameter tensors plus batch-norm running statistics."""

    def __init__(self, params: dict, stats: dict, version: int = WEIGHTS_VERSION):
        self.params = params
        self.stats = stats
        self.version = version

    def zero_grads(self):
        for p in self.params.values():
            p.zero_grad()

    def astype(self, dtype) -> "ModelWeights":
        params = {}
        for name, p in self.params.items():
            t = Tensor(p.data.astype(dtype), requires_grad=p.requires_grad)
            params[name] = t
        stats = {}
        for name, s in self.stats.items():
            ns = BatchNormState(s.mean.shape[0], dtype=dtype)
            ns.mean[...] = s.mean.astype(dtype)
            ns.var[...] = s.var.astype(dtype)
            stats[name] = ns
        return ModelWeights(params, stats, self.version)

    def copy(self) -> "ModelWeights":
        return self.astype(next(iter(self.params.values())).data.dtype)

    @property
    def dtype(self):
        return next(iter(self.params.values())).data.dtype


def _parameter_specs(config: ModelConfig):
    """Yield (name, shape, fan_in, kind) for every trainable tensor, in order.

    kind is one of 'weight', 'bias', 'gamma', 'beta'; batch-norm running
    buffers are not included (they are state, not parameters).
    """
    for branch, n_b in config.branch_inputs():
        in_ch = 6  # 3 relative coordinates + 3 colors
        for li, sgp in ((1, config.sgp1), (2, config.sgp2)):
            c = in_ch
            for j, width in enumerate(sgp.mlp_widths):
                groups = 1 if j == 0 else sgp.conv_groups
                yield f"{branch}.sgp{li}.conv{j}.weight", (width, c // groups, 1), c // groups, "weight"
                yield f"{branch}.sgp{li}.conv{j}.bias", (width,), c // groups, "bias"
                yield f"{branch}.sgp{li}.bn{j}.gamma", (width,), None, "gamma"
                yield f"{branch}.sgp{li}.bn{j}.beta", (width,), None, "beta"
                c = width
            in_ch = 3 + sgp.d_out
        stride = config.side_stride(n_b)
        yield f"{branch}.side.weight", (config.side_branch_channels, 6, stride), 6 * stride, "weight"
        yield f"{branch}.side.bias", (config.side_branch_channels,), 6 * stride, "bias"

    cbe_in = config.fused_width * len(POOLINGS[config.pooling])
    cbe_out = config.fused_width
    yield "fuse.conv.weight", (cbe_out, cbe_in, 1), cbe_in, "weight"
    yield "fuse.conv.bias", (cbe_out,), cbe_in, "bias"
    yield "fuse.bn.gamma", (cbe_out,), None, "gamma"
    yield "fuse.bn.beta", (cbe_out,), None, "beta"
    if config.use_lbe_weights:
        yield "weight_head.linear.weight", (1, cbe_out), cbe_out, "weight"
        yield "weight_head.linear.bias", (1,), cbe_out, "bias"
        yield "weight_head.bn.gamma", (1,), None, "gamma"
        yield "weight_head.bn.beta", (1,), None, "beta"
    yield "score_head.weight", (1, cbe_out), cbe_out, "weight"
    yield "score_head.bias", (1,), cbe_out, "bias"


def _stat_channels(config: ModelConfig):
    """Yield (batch-norm key, channel count) for every running-stat buffer."""
    for branch, _ in config.branch_inputs():
        for li, sgp in ((1, config.sgp1), (2, config.sgp2)):
            for j, width in enumerate(sgp.mlp_widths):
                yield f"{branch}.sgp{li}.bn{j}", width
    yield "fuse.bn", config.fused_width
    if config.use_lbe_weights:
        yield "weight_head.bn", 1


def param_count(config: ModelConfig) -> int:
    """Total trainable scalar count (running statistics excluded)."""
    return sum(int(np.prod(shape)) for _, shape, _, _ in _parameter_specs(config))


def init_weights(config: ModelConfig, seed: Optional[int] = None, dtype=np.float64) -> ModelWeights:
    """Seeded uniform initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    Batch-norm scales start at one, shifts at zero, running mean/var at 0/1.
    The score head's bias starts at 0.5, the midpoint of the scaled score
    range the trainer regresses onto.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        [(config.seed if seed is None else seed) & 0xFFFFFFFFFFFFFFFF, 0x57]
    )))
    params = {}
    for name, shape, fan_in, kind in _parameter_specs(config):
        if kind in ("weight", "bias"):
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
            if name == "score_head.bias":
                data = np.full(shape, 0.5)
        elif kind == "gamma":
            data = np.ones(shape)
        else:
            # The weight head's shift starts at 1 so initial patch weights sit
            # at elu(1) = 1: uniform weighting until training learns otherwise.
            data = np.ones(shape) if name == "weight_head.bn.beta" else np.zeros(shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True)
    stats = {name: BatchNormState(ch, dtype=dtype) for name, ch in _stat_channels(config)}
    return ModelWeights(params, stats)


def check_compatible(weights: ModelWeights, config: ModelConfig):
    """Raise IncompatibleWeights unless names and shapes match the config."""
    expected = {name: shape for name, shape, _, _ in _parameter_specs(config)}
    actual = {name: tuple(p.data.shape) for name, p in weights.params.items()}
    if expected.keys() != actual.keys():
        missing = sorted(expected.keys() - actual.keys())[:3]
        extra = sorted(actual.keys() - expected.keys())[:3]
        raise IncompatibleWeights(f"parameter names differ (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if tuple(shape) != actual[name]:
            raise IncompatibleWeights(f"{name}: expected shape {tuple(shape)}, got {actual[name]}")
    expected_stats = dict(_stat_channels(config))
    for name, ch in expected_stats.items():
        if name not in weights.stats or weights.stats[name].mean.shape[0] != ch:
            raise IncompatibleWeights(f"running stats for {name} missing or wrong width")


def _child_seed(*parts) -> int:
    seq = np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts])
    return int(seq.generate_state(1, np.uint64)[0])


def _group_neighbors(coords: np.ndarray, center_idx: np.ndarray, k: int) -> np.ndarray:
    """k nearest input points per center, ascending (distance, index).

    Vectorized partition with an exact-tie fallback, so the result equals a
    per-center brute-force knn() call bit for bit.
    """
    n = coords.shape[0]
    centers = coords[center_idx]
    diff = centers[:, None, :] - coords[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    if k == n:
        return np.argsort(d2, axis=1, kind="stable").astype(np.int64)
    part = np.partition(d2, (k - 1, k), axis=1)
    ambiguous = part[:, k - 1] == part[:, k]
    sel = np.sort(np.argpartition(d2, k - 1, axis=1)[:, :k], axis=1)
    dsel = np.take_along_axis(d2, sel, axis=1)
    order = np.argsort(dsel, axis=1, kind="stable")
    out = np.take_along_axis(sel, order, axis=1).astype(np.int64)
    for row in np.nonzero(ambiguous)[0]:
        out[row] = np.argsort(d2[row], kind="stable")[:k]
    return out


def sgp_layer(features: Tensor, config: SGPConfig, weights: ModelWeights,
              prefix: str, seed: int, mode: str) -> Tensor:
    """One abstraction layer: sample centers, group, shared MLP, max-reduce.

    Args:
        features: (n_in, 3 + c_in) tensor; columns 0-2 are coordinates.
        config: layer geometry and MLP widths.
        weights: parameter store holding `{prefix}.conv{j}.*` and bn entries.
        prefix: parameter path prefix, e.g. "tfe.sgp1".
        seed: drives the center sampling.
        mode: "train" or "eval" (batch-norm behavior).

    Returns:
        (n_out, 3 + d_out) tensor: center coordinates then learned features.
    """
    n_in = features.data.shape[0]
    c_in = features.data.shape[1] - 3
    if n_in < max(config.n_out, config.k):
        raise TooFewPoints(f"{prefix}: {n_in} points, need at least {max(config.n_out, config.k)}")

    coords = features.data[:, :3].astype(np.float64)
    center_idx = random_sample(n_in, config.n_out, seed)
    neighbor_idx = _group_neighbors(coords, center_idx, config.k)

    rel = coords[neighbor_idx] - coords[center_idx][:, None, :]
    rel_t = Tensor(rel.astype(features.data.dtype))
    feats = ad.slice_axis(features, 1, 3, 3 + c_in)
    grouped = ad.reshape(ad.take(feats, neighbor_idx.reshape(-1), axis=0),
                         (config.n_out, config.k, c_in))
    h = ad.concat([rel_t, grouped], axis=2)
    h = ad.transpose(ad.reshape(h, (config.n_out * config.k, 3 + c_in)))

    length = config.n_out * config.k
    for j, width in enumerate(config.mlp_widths):
        groups = 1 if j == 0 else config.conv_groups
        h = ad.conv1d(h, weights.params[f"{prefix}.conv{j}.weight"],
                      weights.params[f"{prefix}.conv{j}.bias"], stride=1, groups=groups)
        h = ad.reshape(h, (1, width, length))
        h = ad.batchnorm1d(h, weights.params[f"{prefix}.bn{j}.gamma"],
                           weights.params[f"{prefix}.bn{j}.beta"],
                           weights.stats[f"{prefix}.bn{j}"], mode)
        h = ad.elu(ad.reshape(h, (width, length)))

    h = ad.reshape(h, (config.d_out, config.n_out, config.k))
    h = ad.reduce(h, axis=2, kind="max")
    out_feats = ad.transpose(h)
    out_coords = Tensor(coords[center_idx].astype(features.data.dtype))
    return ad.concat([out_coords, out_feats], axis=1)


def branch_forward(patch: Tensor, which: str, config: ModelConfig,
                   weights: ModelWeights, mode: str, seed: int) -> Tensor:
    """Run one branch over its input points.

    The main path stacks the two abstraction layers; the side path is a
    single learnable convolution with kernel width equal to its stride over
    the raw points (6 channels), truncated to the abstraction point count.
    Output is (sgp2.n_out, branch_width).
    """
    n_b = patch.data.shape[0]
    h = sgp_layer(patch, config.sgp1, weights, f"{which}.sgp1", _child_seed(seed, 1), mode)
    h = sgp_layer(h, config.sgp2, weights, f"{which}.sgp2", _child_seed(seed, 2), mode)
    main = ad.slice_axis(h, 1, 3, 3 + config.sgp2.d_out)

    stride = config.side_stride(n_b)
    side = ad.conv1d(ad.transpose(patch), weights.params[f"{which}.side.weight"],
                     weights.params[f"{which}.side.bias"], stride=stride)
    side = ad.transpose(ad.slice_axis(side, 1, 0, config.sgp2.n_out))
    return ad.concat([main, side], axis=1)


_eq4_checks = 0


def eq4_check_count() -> int:
    """How many forward calls have verified the aggregation identity."""
    return _eq4_checks


def _verify_aggregation(bundle: PredictionBundle):
    global _eq4_checks
    expected = float(np.mean(bundle.patch_weights * bundle.patch_scores))
    got = bundle.global_score
    assert abs(got - expected) <= 1e-6 * max(1.0, abs(expected)), \
        f"aggregation identity violated: {got} vs mean(w*s) = {expected}"
    _eq4_checks += 1


def forward(patchset: PatchSet, config: ModelConfig, weights: ModelWeights,
            mode: str = "eval") -> PredictionBundle:
    """Score a patch set: per-patch branch features, fusion, weight/score heads.

    In train mode the computation graph is retained for backward() and batch
    norms use (and update) per-call statistics; eval mode builds no graph and
    normalizes by running statistics. Every call verifies that the global
    score equals the mean of weight*score over patches.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if patchset.data.ndim != 3 or patchset.data.shape[2] != 6:
        raise ad.ShapeMismatch(f"patch set must be (K, Np, 6), got {patchset.data.shape}")
    if patchset.K != config.K or patchset.Np != config.Np:
        raise ad.ShapeMismatch(
            f"patch set is {patchset.K}x{patchset.Np}, config wants {config.K}x{config.Np}")
    check_compatible(weights, config)

    if mode == "eval":
        with ad.no_grad():
            return _forward_impl(patchset, config, weights, mode)
    return _forward_impl(patchset, config, weights, mode)


def _forward_impl(patchset, config, weights, mode):
    dtype = weights.dtype
    pool_kinds = POOLINGS[config.pooling]
    branches = config.branch_inputs()

    pooled_rows = []
    for k in range(config.K):
        patch = patchset.data[k].astype(dtype)
        coords = patch[:, :3].astype(np.float64)
        center = coords[0]  # row 0 is the point nearest the patch center

        parts = []
        for branch, n_b in branches:
            if branch == "tfe":
                idx = knn(coords, center, config.Nt)
            else:
                idx = random_sample(config.Np, config.Ns, _child_seed(config.seed, 0xA5, k))
            inp = Tensor(patch[idx])
            branch_tag = 1 if branch == "sfe" else 2
            parts.append(branch_forward(inp, branch, config, weights, mode,
                                        _child_seed(config.seed, 0xB7, k, branch_tag)))
        fused = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
        pooled = ad.concat([ad.reduce(fused, axis=0, kind=kind) for kind in pool_kinds], axis=0)
        pooled_rows.append(ad.reshape(pooled, (1, -1)))

    feats = ad.concat(pooled_rows, axis=0)  # (K, fused_width * n_poolings)

    h = ad.conv1d(ad.transpose(feats), weights.params["fuse.conv.weight"],
                  weights.params["fuse.conv.bias"])
    h = ad.batchnorm1d(ad.transpose(h), weights.params["fuse.bn.gamma"],
                       weights.params["fuse.bn.beta"], weights.stats["fuse.bn"], mode)
    f_patch = ad.elu(h)  # (K, fused_width)

    if config.use_lbe_weights:
        w = ad.linear(f_patch, weights.params["weight_head.linear.weight"],
                      weights.params["weight_head.linear.bias"])
        w = ad.batchnorm1d(w, weights.params["weight_head.bn.gamma"],
                           weights.params["weight_head.bn.beta"],
                           weights.stats["weight_head.bn"], mode)
        w = ad.reshape(ad.elu(w), (config.K,))
    else:
        w = Tensor(np.ones(config.K, dtype=dtype))

    y = ad.reshape(ad.linear(f_patch, weights.params["score_head.weight"],
                             weights.params["score_head.bias"]), (config.K,))
    global_score = ad.reduce(w * y, axis=0, kind="mean")

    bundle = PredictionBundle(weights_t=w, scores_t=y, global_t=global_score)
    _verify_aggregation(bundle)
    return bundle


def score_cloud(cloud: PointCloud, config: ModelConfig, weights: ModelWeights,
                workers: int = 1) -> PredictionBundle:
    """Convenience pipeline: normalize, patch, and score one cloud."""
    from pstpcqa.patching import PatchConfig, extract_patches
    from pstpcqa.pointcloud import normalize

    patches = extract_patches(normalize(cloud), PatchConfig(config.K, config.Np, config.seed),
                              workers=workers)
    return forward(patches, config, weights, mode="eval")


# ---------------------------------------------------------------------------
# Weight serialization
# ---------------------------------------------------------------------------

def save_weights(weights: ModelWeights, path) -> None:
    """Write the PSTW format: versioned named float32 tensors plus a CRC32.

    Values are stored in float32, so weights held in float64 round-trip only
    to float32 precision; float32 weights round-trip bit-exactly.
    """
    entries = [(name, p.data) for name, p in weights.params.items()]
    for name, s in weights.stats.items():
        entries.append((f"{name}.running_mean", s.mean))
        entries.append((f"{name}.running_var", s.var))

    body = bytearray()
    body += struct.pack("<HI", weights.version, len(entries))
    for name, arr in entries:
        encoded = name.encode("utf-8")
        body += struct.pack("<H", len(encoded)) + encoded
        body += struct.pack("<B", arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(WEIGHTS_MAGIC)
            fh.write(body)
            fh.write(struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_weights(path, config: Optional[ModelConfig] = None) -> ModelWeights:
    """Read a PSTW file; validates CRC, version, and (if given) the config."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if len(blob) < 14 or blob[:4] != WEIGHTS_MAGIC:
        raise ChecksumMismatch(f"{path}: not a PSTW weight file")
    body, trailer = blob[4:-4], blob[-4:]
    if struct.unpack("<I", trailer)[0] != (zlib.crc32(body) & 0xFFFFFFFF):
        raise ChecksumMismatch(f"{path}: body CRC32 mismatch")
    version, count = struct.unpack_from("<HI", body, 0)
    if version != WEIGHTS_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {WEIGHTS_VERSION}")

    offset = 6
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, offset)
            offset += 2
            name = body[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", body, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}I", body, offset)
            offset += 4 * rank
            n_vals = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(body, dtype="<f4", count=n_vals, offset=offset).reshape(shape)
            offset += 4 * n_vals
            tensors[name] = arr.copy()
    except (struct.error, ValueError) as exc:
        raise ChecksumMismatch(f"{path}: malformed tensor table ({exc})") from exc

    params = {}
    stats_raw: dict[str, dict[str, np.ndarray]] = {}
    for name, arr in tensors.items():
        if name.endswith(".running_mean"):
            stats_raw.setdefault(name[:-len(".running_mean")], {})["mean"] = arr
        elif name.endswith(".running_var"):
            stats_raw.setdefault(name[:-len(".running_var")], {})["var"] = arr
        else:
            params[name] = Tensor(arr, requires_grad=True)
    stats = {}
    for name, parts in stats_raw.items():
        if "mean" not in parts or "var" not in parts:
            raise NameMismatch(f"{path}: incomplete running stats for {name}")
        state = BatchNormState(parts["mean"].shape[0], dtype=np.float32)
        state.mean[...] = parts["mean"]
        state.var[...] = parts["var"]
        stats[name] = state

    weights = ModelWeights(params, stats, version)
    if config is not None:
        expected = {name for name, _, _, _ in _parameter_specs(config)}
        if expected != set(params.keys()):
            raise NameMismatch(f"{path}: tensor names do not match the configuration")
        try:
            check_compatible(weights, config)
        except IncompatibleWeights as exc:
            raise NameMismatch(str(exc)) from exc
    return weights
