"""Input validation helpers shared by the estimators and pipeline stages."""
import numpy as np

from .exceptions import NonFiniteData, ShapeMismatch


def check_image(image, min_size=1):
    """Return ``image`` as a 2-D float64 array in [0, 1].

    RGB inputs are converted to luminance; uint8 inputs are rescaled.
    """
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    else:
        img = img.astype(np.float64, copy=False)
    if img.ndim == 3:
        if img.shape[2] == 1:
            img = img[..., 0]
        else:
            img = img[..., :3] @ np.array([0.299, 0.587, 0.114])
    if img.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D grayscale image, got shape {img.shape}")
    if min(img.shape) < min_size:
        raise ShapeMismatch(f"image {img.shape} smaller than {min_size} px")
    if not np.all(np.isfinite(img)):
        raise NonFiniteData("image contains non-finite values")
    return img


def check_points(pts, name="points"):
    pts = np.asarray(pts, dtype=np.float64)
    if pts.size == 0:
        return pts.reshape(0, 2)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ShapeMismatch(f"{name} must be N x 2, got {pts.shape}")
    return pts


def check_matrix(x, name="array", ncols=None, allow_empty=False):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {x.shape}")
    if ncols is not None and x.shape[1] != ncols:
        raise ShapeMismatch(f"{name} must have {ncols} columns, got {x.shape[1]}")
    if not allow_empty and x.shape[0] == 0:
        raise ShapeMismatch(f"{name} is empty")
    if not np.all(np.isfinite(x)):
        raise NonFiniteData(f"{name} contains non-finite values")
    return x


def check_rng(rng_state):
    """Accept an int seed, a SeedSequence, or a Generator; never share a global RNG."""
    if isinstance(rng_state, np.random.Generator):
        return rng_state
    return np.random.default_rng(rng_state)
