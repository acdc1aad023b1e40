"""Feature extraction network and classifier for band-selected patches.

A grouped 1x1 expansion lifts each selected band to its own group of
feature channels; two residual blocks combine grouped convolutions with a
per-band-group spatial attention gate; padding-free 3x3 convolutions shrink
the 5x5 trace to 3x3 and then 1x1; pooled features from the three depths
are concatenated and classified by two fully connected layers.
"""

from __future__ import annotations

import struct

import numpy as np

from . import selection as sel
from . import tensor as T
from .hsi import BadMagicError, FormatError, TruncatedError, VersionError
from .tensor import EPS_DEFAULT, Tensor, parameter

CHECKPOINT_MAGIC = b"ECDB"
CHECKPOINT_VERSION = 1


def _kaiming(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def bsa_attention(x: Tensor, gammas, betas, groups: int, eps: float = EPS_DEFAULT) -> Tensor:
    """Scale each position of each band group by its match to the group mean.

    Per group: pool the group's channel vectors over space, dot the pooled
    vector with every position, normalise the coefficients over positions
    with the group's affine pair, and gate the input through a sigmoid of
    the result.  Groups never mix.
    """
    c, h, w = x.shape
    if c % groups:
        raise ValueError(f"{c} channels not divisible into {groups} band groups")
    if len(gammas) != groups or len(betas) != groups:
        raise ValueError("one affine pair is required per band group")
    e = c // groups
    m = h * w
    v = x.data.reshape(groups, e, m)
    g = v.mean(axis=2)  # (groups, e) pooled vector per group
    coeff = np.einsum("kem,ke->km", v, g)
    mu = coeff.mean(axis=1, keepdims=True)
    centered = coeff - mu
    sigma = np.sqrt((centered**2).mean(axis=1, keepdims=True))
    denom = sigma + eps
    chat = centered / denom
    gam = np.array([float(t.data) for t in gammas], dtype=x.dtype)
    bet = np.array([float(t.data) for t in betas], dtype=x.dtype)
    gate = T._sigmoid_values(chat * gam[:, None] + bet[:, None])
    out = (v * gate[:, None, :]).reshape(c, h, w)

    def backward_fn(grad):
        gy = grad.reshape(groups, e, m)
        dgate = (gy * v).sum(axis=1)
        dv = gy * gate[:, None, :]
        da = dgate * gate * (1.0 - gate)
        dgam = (da * chat).sum(axis=1)
        dbet = da.sum(axis=1)
        dcoeff = (gam[:, None] / denom) * (da - da.mean(axis=1, keepdims=True))
        corr = (da * centered).sum(axis=1, keepdims=True)
        safe_sigma = np.where(sigma > 0, sigma, 1.0)
        dcoeff -= np.where(
            sigma > 0,
            (gam[:, None] * corr / (denom * denom * m * safe_sigma)) * centered,
            0.0,
        )
        dg = np.einsum("km,kem->ke", dcoeff, v)
        dv += dcoeff[:, None, :] * g[:, :, None]
        dv += dg[:, :, None] / m
        grads = [dv.reshape(c, h, w)]
        grads.extend(
            np.asarray(dgam[i], dtype=grad.dtype).reshape(gammas[i].shape)
            for i in range(groups)
        )
        grads.extend(
            np.asarray(dbet[i], dtype=grad.dtype).reshape(betas[i].shape)
            for i in range(groups)
        )
        return grads

    return T.record("bsa_attention", (x, *gammas, *betas), out, backward_fn)


class BsaBlock:
    """Residual block: grouped 3x3 conv, relu, band-specific attention, skip add."""

    def __init__(self, channels, groups, rng, dtype, eps=EPS_DEFAULT):
        e = channels // groups
        self.kernel = parameter(_kaiming(rng, (channels, e, 3, 3), e * 9), dtype)
        self.bias = parameter(np.zeros(channels), dtype)
        self.gammas = [parameter(np.asarray(1.0)) for _ in range(groups)]
        self.betas = [parameter(np.asarray(0.0)) for _ in range(groups)]
        for t in self.gammas + self.betas:
            t.data = t.data.astype(dtype)
        self.groups = groups
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        y = T.add_channel_bias(T.conv2d(x, self.kernel, groups=self.groups, pad="same"), self.bias)
        y = T.relu(y)
        y = bsa_attention(y, self.gammas, self.betas, self.groups, self.eps)
        return T.add(x, y)


class SelectionHead:
    """Learnable state of the band-selection module."""

    def __init__(self, bands, positions, rng, dtype, eps=EPS_DEFAULT):
        hidden = sel.hidden_width(bands)
        self.diffusion = parameter(
            np.eye(positions) + rng.normal(0.0, 0.01, (positions, positions)), dtype
        )
        self.w0 = parameter(_kaiming(rng, (bands, hidden), bands), dtype)
        self.b0 = parameter(np.zeros((1, hidden)), dtype)
        self.w1 = parameter(_kaiming(rng, (hidden, bands), hidden), dtype)
        self.b1 = parameter(np.zeros((1, bands)), dtype)
        self.gamma = parameter(np.asarray(1.0, dtype=dtype))
        self.beta = parameter(np.asarray(0.0, dtype=dtype))
        self.eps = eps


class EcdbsModel:
    """All learnable parameters plus the frozen clustering of one dataset."""

    def __init__(
        self,
        bands,
        clusters,
        a_hat,
        assignment,
        expansion=3,
        patch_size=5,
        hidden=64,
        knn=5,
        seed=0,
        similarity_metric="l2",
        eps=EPS_DEFAULT,
        dtype=np.float32,
    ):
        a_hat = np.asarray(a_hat, dtype=np.float64)
        assignment = np.asarray(assignment, dtype=np.float64)
        if a_hat.shape != (bands, bands):
            raise ValueError(f"adjacency shape {a_hat.shape} does not match {bands} bands")
        if assignment.shape != (clusters, bands):
            raise ValueError(
                f"assignment shape {assignment.shape} does not match {clusters}x{bands}"
            )
        if patch_size % 2 == 0 or patch_size < 5:
            raise ValueError(f"patch size must be odd and >= 5, got {patch_size}")
        if similarity_metric not in ("l2", "l1"):
            raise ValueError(f"similarity metric must be 'l2' or 'l1', got {similarity_metric!r}")
        self.bands = bands
        self.clusters = clusters
        self.expansion = expansion
        self.patch_size = patch_size
        self.hidden = hidden
        self.knn = knn
        self.seed = seed
        self.similarity_metric = similarity_metric
        self.eps = eps
        self.dtype = np.dtype(dtype)
        self.a_hat = a_hat
        self.assignment = assignment
        self._a_hat_tensor = T.constant(a_hat.astype(self.dtype))

        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1217]))
        m = patch_size * patch_size
        channels = expansion * clusters
        self.select = SelectionHead(bands, m, rng, self.dtype, eps)
        self.expand_kernel = parameter(_kaiming(rng, (channels, 1, 1, 1), 1), self.dtype)
        self.expand_bias = parameter(np.zeros(channels), self.dtype)
        self.block1 = BsaBlock(channels, clusters, rng, self.dtype, eps)
        self.reduce1_kernel = parameter(
            _kaiming(rng, (channels, channels, 3, 3), channels * 9), self.dtype
        )
        self.reduce1_bias = parameter(np.zeros(channels), self.dtype)
        self.block2 = BsaBlock(channels, clusters, rng, self.dtype, eps)
        self.reduce2_kernel = parameter(
            _kaiming(rng, (channels, channels, 3, 3), channels * 9), self.dtype
        )
        self.reduce2_bias = parameter(np.zeros(channels), self.dtype)
        fused = 3 * channels
        self.fc1_weight = parameter(_kaiming(rng, (fused, hidden), fused), self.dtype)
        self.fc1_bias = parameter(np.zeros((1, hidden)), self.dtype)
        self.fc2_weight = parameter(_kaiming(rng, (hidden, 2), hidden), self.dtype)
        self.fc2_bias = parameter(np.zeros((1, 2)), self.dtype)
        # dataset-mean band importance; refreshed each epoch, drives hardening
        self.band_weights = np.full(bands, 0.5, dtype=np.float64)

    # -- parameter bookkeeping ------------------------------------------------

    def parameters(self):
        """Ordered name -> Tensor map of every learnable array."""
        params = {
            "select.diffusion": self.select.diffusion,
            "select.w0": self.select.w0,
            "select.b0": self.select.b0,
            "select.w1": self.select.w1,
            "select.b1": self.select.b1,
            "select.gamma": self.select.gamma,
            "select.beta": self.select.beta,
            "expand.kernel": self.expand_kernel,
            "expand.bias": self.expand_bias,
        }
        for tag, block in (("block1", self.block1), ("block2", self.block2)):
            params[f"{tag}.kernel"] = block.kernel
            params[f"{tag}.bias"] = block.bias
            for i, t in enumerate(block.gammas):
                params[f"{tag}.gamma.{i}"] = t
            for i, t in enumerate(block.betas):
                params[f"{tag}.beta.{i}"] = t
        params.update(
            {
                "reduce1.kernel": self.reduce1_kernel,
                "reduce1.bias": self.reduce1_bias,
                "reduce2.kernel": self.reduce2_kernel,
                "reduce2.bias": self.reduce2_bias,
                "fc1.weight": self.fc1_weight,
                "fc1.bias": self.fc1_bias,
                "fc2.weight": self.fc2_weight,
                "fc2.bias": self.fc2_bias,
            }
        )
        return params

    def count_parameters(self) -> int:
        return count_parameters(self.parameters().values())

    def zero_grad(self):
        for t in self.parameters().values():
            t.zero_grad()

    # -- forward pieces --------------------------------------------------------

    def patch_tensor(self, patch) -> Tensor:
        return T.constant(np.asarray(patch, dtype=self.dtype))

    def band_weight_forward(self, x: Tensor) -> Tensor:
        """Per-patch band importance weights in (0,1)."""
        bands, h, w = x.shape
        flat = T.reshape(x, (bands, h * w))
        x_bar = sel.diffuse(flat, self._a_hat_tensor, self.select.diffusion)
        s = sel.similarity_vector(x_bar, metric=self.similarity_metric)
        return sel.band_weights(s, self.select)

    def classify(self, x: Tensor, selection_matrix: Tensor):
        """Selected-band network: returns (class probabilities, depth taps)."""
        chi = sel.apply_selection(selection_matrix, x)
        feat = T.add_channel_bias(
            T.conv2d(chi, self.expand_kernel, groups=self.clusters, pad="none"),
            self.expand_bias,
        )
        tap1 = self.block1.forward(feat)
        r1 = T.add_channel_bias(
            T.conv2d(tap1, self.reduce1_kernel, pad="none"), self.reduce1_bias
        )
        tap2 = self.block2.forward(r1)
        tap3 = T.add_channel_bias(
            T.conv2d(tap2, self.reduce2_kernel, pad="none"), self.reduce2_bias
        )
        fused = T.concat(
            (T.global_avg_pool(tap1), T.global_avg_pool(tap2), T.global_avg_pool(tap3))
        )
        row = T.reshape(fused, (1, fused.shape[0]))
        h1 = T.add(T.matmul(row, self.fc1_weight), self.fc1_bias)
        logits = T.add(T.matmul(h1, self.fc2_weight), self.fc2_bias)
        probs = T.softmax(T.reshape(logits, (2,)), temperature=1.0)
        taps = {"block1": tap1, "block2": tap2, "final": tap3, "fused": fused}
        return probs, taps

    def forward(self, patch, tau: float):
        """Full single-patch pass: soft selection at temperature tau."""
        x = patch if isinstance(patch, Tensor) else self.patch_tensor(patch)
        w = self.band_weight_forward(x)
        e = sel.intra_cluster_softmax(w, self.assignment, tau)
        return self.classify(x, e)

    def hardened_selection(self):
        """Exact one-band-per-cluster gather from the stored band weights."""
        masked = np.where(self.assignment > 0, self.band_weights[None, :], -np.inf)
        return sel.harden(masked)

    def infer(self, patch):
        """Inference with the hardened selection; returns the probability vector."""
        hard, _ = self.hardened_selection()
        x = self.patch_tensor(patch)
        probs, _ = self.classify(x, T.constant(hard.astype(self.dtype)))
        return probs.data


def count_parameters(tensors) -> int:
    """Exact count of learnable scalars."""
    return int(sum(t.size for t in tensors))


# ---------------------------------------------------------------------------
# checkpoint format


def save_checkpoint(model: EcdbsModel, path) -> None:
    """Write magic, version, config block, frozen rasters, named f32 blobs."""
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<H", CHECKPOINT_VERSION)
    out += struct.pack(
        "<7I",
        model.bands,
        model.clusters,
        model.expansion,
        model.patch_size,
        model.hidden,
        model.knn,
        model.seed,
    )
    out += model.assignment.astype("<f4").tobytes()
    out += model.a_hat.astype("<f4").tobytes()
    blobs = dict(model.parameters())
    payload_arrays = {name: t.data for name, t in blobs.items()}
    payload_arrays["state.band_weights"] = model.band_weights
    for name, arr in payload_arrays.items():
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded))
        out += encoded
        out += struct.pack("<I", arr.size)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_checkpoint(path, similarity_metric="l2", eps=EPS_DEFAULT, dtype=np.float32) -> EcdbsModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 6:
        raise TruncatedError(f"{path}: file shorter than the checkpoint header")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    (version,) = struct.unpack("<H", raw[4:6])
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    offset = 6
    if len(raw) < offset + 28:
        raise TruncatedError(f"{path}: truncated config block")
    bands, clusters, expansion, patch_size, hidden, knn, seed = struct.unpack(
        "<7I", raw[offset : offset + 28]
    )
    offset += 28

    def take_f32(count, what):
        nonlocal offset
        nbytes = count * 4
        if len(raw) < offset + nbytes:
            raise TruncatedError(f"{path}: truncated {what}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        offset += nbytes
        return arr

    assignment = take_f32(clusters * bands, "assignment raster").reshape(clusters, bands)
    a_hat = take_f32(bands * bands, "adjacency raster").reshape(bands, bands)
    model = EcdbsModel(
        bands,
        clusters,
        a_hat.astype(np.float64),
        assignment.astype(np.float64),
        expansion=expansion,
        patch_size=patch_size,
        hidden=hidden,
        knn=knn,
        seed=seed,
        similarity_metric=similarity_metric,
        eps=eps,
        dtype=dtype,
    )
    params = model.parameters()
    seen = set()
    while offset < len(raw):
        if len(raw) < offset + 2:
            raise TruncatedError(f"{path}: truncated blob header")
        (name_len,) = struct.unpack("<H", raw[offset : offset + 2])
        offset += 2
        if len(raw) < offset + name_len + 4:
            raise TruncatedError(f"{path}: truncated blob header")
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (count,) = struct.unpack("<I", raw[offset : offset + 4])
        offset += 4
        values = take_f32(count, f"blob {name}")
        if name == "state.band_weights":
            if count != bands:
                raise FormatError(f"{path}: band-weight blob holds {count} values, expected {bands}")
            model.band_weights = values.astype(np.float64).copy()
        elif name in params:
            target = params[name]
            if count != target.size:
                raise FormatError(
                    f"{path}: blob {name} holds {count} values, expected {target.size}"
                )
            target.data = values.astype(model.dtype).reshape(target.shape).copy()
        else:
            raise FormatError(f"{path}: unknown parameter blob {name!r}")
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise FormatError(f"{path}: checkpoint is missing blobs {sorted(missing)}")
    return model
