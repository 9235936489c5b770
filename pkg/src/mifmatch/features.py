"""Keypoints, base descriptors and dense semantic feature maps."""
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ._validation import check_image, check_points
from .exceptions import NoKeypoints, ShapeMismatch
from .io import check_finite, load_tensor, read_image, require_shape

PATCH_SIZE = 8
ROLES = ("base", "latent", "refined", "invariant")


@dataclass
class KeypointSet:
    coords: np.ndarray
    scores: np.ndarray
    image_size: tuple

    def __post_init__(self):
        self.coords = check_points(self.coords, "coords")
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(self.scores) != len(self.coords):
            raise ShapeMismatch("scores and coords differ in length")
        w, h = self.image_size
        c = self.coords
        if len(c) and (np.any(c < 0) or np.any(c[:, 0] >= w) or np.any(c[:, 1] >= h)):
            raise ValueError("keypoints must lie inside the image")

    def __len__(self):
        return len(self.coords)

    def subset(self, idx):
        return KeypointSet(self.coords[idx], self.scores[idx], self.image_size)


@dataclass
class FeatureSet:
    descriptors: np.ndarray
    role: str
    keypoints: KeypointSet

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.descriptors.ndim != 2 or len(self.descriptors) != len(self.keypoints):
            raise ShapeMismatch(
                f"descriptors {self.descriptors.shape} vs {len(self.keypoints)} keypoints"
            )
        check_finite(self.descriptors, "descriptors")

    @property
    def dim(self):
        return self.descriptors.shape[1]


@dataclass
class DenseFeatureMap:
    data: np.ndarray
    stride: float = 1.0
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) <= 0:
            raise ShapeMismatch(f"dense map must be H x W x D, got {self.data.shape}")


def _harris_window(sigma=1.0, radius=2):
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g /= g.sum()
    return g


def harris_response(image, k=0.04):
    """Harris corner measure from Sobel gradients and a 5x5 Gaussian window (reflect borders)."""
    img = check_image(image)
    ix = ndimage.sobel(img, axis=1, mode="reflect") / 8.0
    iy = ndimage.sobel(img, axis=0, mode="reflect") / 8.0
    g = _harris_window()
    sxx = ndimage.correlate1d(ndimage.correlate1d(ix * ix, g, axis=0, mode="reflect"), g, axis=1, mode="reflect")
    syy = ndimage.correlate1d(ndimage.correlate1d(iy * iy, g, axis=0, mode="reflect"), g, axis=1, mode="reflect")
    sxy = ndimage.correlate1d(ndimage.correlate1d(ix * iy, g, axis=0, mode="reflect"), g, axis=1, mode="reflect")
    return sxx * syy - sxy**2 - k * (sxx + syy) ** 2


def nms_select(response, max_kpts, nms_radius, rel_threshold=1e-3):
    """Greedy radius suppression over local maxima; returns (rows, cols)."""
    peak = response.max()
    if not np.isfinite(peak) or peak <= 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    local_max = response == ndimage.maximum_filter(response, size=3, mode="nearest")
    cand = np.flatnonzero(local_max & (response > rel_threshold * peak))
    vals = response.ravel()[cand]
    # ties resolve toward the lower flat index
    order = cand[np.lexsort((cand, -vals))]
    h, w = response.shape
    rows, cols = np.divmod(order, w)
    keep_r, keep_c = [], []
    r2 = float(nms_radius) ** 2
    for r, c in zip(rows, cols):
        if len(keep_r) >= max_kpts:
            break
        if keep_r and nms_radius > 0:
            kr = np.asarray(keep_r)
            kc = np.asarray(keep_c)
            if np.any((kr - r) ** 2 + (kc - c) ** 2 < r2):
                continue
        keep_r.append(r)
        keep_c.append(c)
    return np.asarray(keep_r, dtype=np.int64), np.asarray(keep_c, dtype=np.int64)


def patch_descriptors(image, coords, size=PATCH_SIZE):
    """Flattened, L2-normalised ``size x size`` patches, zero-padded at the border."""
    img = check_image(image)
    half = size // 2
    padded = np.pad(img, half, mode="constant")
    xs = np.round(coords[:, 0]).astype(np.int64)
    ys = np.round(coords[:, 1]).astype(np.int64)
    offs = np.arange(size) - half
    rr = ys[:, None, None] + offs[None, :, None] + half
    cc = xs[:, None, None] + offs[None, None, :] + half
    desc = padded[rr, cc].reshape(len(coords), size * size)
    norms = np.linalg.norm(desc, axis=1, keepdims=True)
    flat = norms[:, 0] <= 1e-12
    desc[flat] = 1.0
    norms[flat] = size
    return desc / norms


def detect_keypoints_synthetic(image, max_kpts=512, nms_radius=4):
    """Harris corners + radius NMS + 8x8 patch descriptors (64-D, unit norm)."""
    img = check_image(image)
    if max_kpts < 1:
        raise ValueError("max_kpts must be >= 1")
    resp = harris_response(img)
    rows, cols = nms_select(resp, max_kpts, nms_radius)
    if len(rows) == 0:
        raise NoKeypoints("corner response is flat")
    coords = np.stack([cols, rows], axis=1).astype(np.float64)
    scores = np.clip(resp[rows, cols] / resp.max(), 0.0, 1.0)
    h, w = img.shape
    kpts = KeypointSet(coords, scores, (w, h))
    return kpts, FeatureSet(patch_descriptors(img, coords), "base", kpts)


def semantic_channels(image, depth=3, base_sigma=1.0):
    """Contrast-robust multi-scale channels, ``H x W x 2*depth``.

    Channel ``2l`` is the gradient magnitude of the level-``l`` blur and
    ``2l+1`` the rectified band-pass between levels ``l`` and ``l+1``.
    Both are unchanged by intensity inversion.
    """
    img = check_image(image)
    if depth < 1:
        raise ValueError("depth must be >= 1")
    sigmas = [base_sigma * 2.0**lvl for lvl in range(depth + 1)]
    blurred = [ndimage.gaussian_filter(img, s, mode="reflect") for s in sigmas]
    chans = []
    for lvl in range(depth):
        b = blurred[lvl]
        gy, gx = np.gradient(b)
        # scale-normalised so coarse levels are not swamped
        chans.append(np.hypot(gx, gy) * sigmas[lvl])
        chans.append(np.abs(b - blurred[lvl + 1]))
    return np.stack(chans, axis=-1)


def projection_matrix(in_dim, out_dim, proj_seed):
    rng = np.random.default_rng(proj_seed)
    return rng.standard_normal((in_dim, out_dim)) / np.sqrt(in_dim)


def synthetic_semantic_map(image, depth=3, proj_seed=0, out_dim=64, eps=1e-3):
    """Deterministic stand-in for a frozen generative-model feature map.

    Per-pixel channel vectors are L2-normalised (removes local contrast
    scale such as a gamma change) and projected by a seeded random matrix.
    """
    chans = semantic_channels(image, depth)
    norm = np.linalg.norm(chans, axis=-1, keepdims=True)
    chans = chans / (norm + eps * (norm.max() + 1e-12))
    data = chans @ projection_matrix(chans.shape[-1], out_dim, proj_seed)
    return DenseFeatureMap(
        data,
        stride=1.0,
        provenance={"provider": "synthetic", "depth": depth, "proj_seed": proj_seed, "out_dim": out_dim},
    )


def sample_dense_at_keypoints(fmap, kpts):
    """Bilinear sampling with pixel-centre alignment and border clamping."""
    data = fmap.data
    hm, wm, _ = data.shape
    u = (kpts.coords[:, 0] + 0.5) / fmap.stride - 0.5
    v = (kpts.coords[:, 1] + 0.5) / fmap.stride - 0.5
    u = np.clip(u, 0.0, wm - 1.0)
    v = np.clip(v, 0.0, hm - 1.0)
    u0 = np.clip(np.floor(u).astype(np.int64), 0, max(wm - 2, 0))
    v0 = np.clip(np.floor(v).astype(np.int64), 0, max(hm - 2, 0))
    u1 = np.minimum(u0 + 1, wm - 1)
    v1 = np.minimum(v0 + 1, hm - 1)
    du = (u - u0)[:, None]
    dv = (v - v0)[:, None]
    out = (
        data[v0, u0] * (1 - du) * (1 - dv)
        + data[v0, u1] * du * (1 - dv)
        + data[v1, u0] * (1 - du) * dv
        + data[v1, u1] * du * dv
    )
    return FeatureSet(out, "latent", kpts)


def load_keypoints_and_features(entry, suffix=""):
    """Build validated sets from a manifest entry's ``kpts``/``desc`` tensor files.

    ``suffix`` selects the second image of a pair entry (``"_b"``).
    """
    image_key, kpts_key, desc_key = "image" + suffix, "kpts" + suffix, "desc" + suffix
    if kpts_key not in entry or desc_key not in entry:
        raise KeyError(f"entry lacks {kpts_key!r}/{desc_key!r}")
    coords = load_tensor(entry[kpts_key]).astype(np.float64)
    desc = load_tensor(entry[desc_key]).astype(np.float64)
    check_finite(coords, kpts_key)
    check_finite(desc, desc_key)
    require_shape(coords, 2, kpts_key, ncols=2)
    require_shape(desc, 2, desc_key)
    if len(desc) != len(coords):
        raise ShapeMismatch(f"{len(coords)} keypoints but {len(desc)} descriptors")
    h, w = read_image(entry[image_key]).shape
    kpts = KeypointSet(coords, np.ones(len(coords)), (w, h))
    return kpts, FeatureSet(desc, "base", kpts)


def load_semantic_map(path, provenance=None):
    data = load_tensor(path).astype(np.float64)
    check_finite(data, "semantic_map")
    meta = {"provider": "file", "path": str(path)}
    meta.update(provenance or {})
    stride = float(meta.get("stride", 1.0))
    return DenseFeatureMap(data, stride=stride, provenance=meta)
