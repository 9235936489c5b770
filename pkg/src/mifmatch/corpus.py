"""Procedural grayscale images: smooth textures, blobs and vessel-like curves."""
import cv2
import numpy as np
from scipy import ndimage


def _vessel_layer(size, rng, n_curves):
    layer = np.zeros((size, size), dtype=np.float32)
    for _ in range(n_curves):
        n_pts = rng.integers(20, 60)
        pos = rng.uniform(0, size, size=2)
        heading = rng.uniform(0, 2 * np.pi)
        step = size / 40.0
        pts = [pos.copy()]
        for _ in range(n_pts):
            heading += rng.normal(0, 0.35)
            pos = pos + step * np.array([np.cos(heading), np.sin(heading)])
            pts.append(pos.copy())
        poly = np.round(np.array(pts) * 16).astype(np.int32)
        thickness = int(rng.integers(1, 4))
        cv2.polylines(layer, [poly], False, float(rng.uniform(0.5, 1.0)), thickness, cv2.LINE_AA, shift=4)
    return ndimage.gaussian_filter(layer, 0.7)


def _blob_layer(size, rng, n_blobs):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    layer = np.zeros((size, size))
    for _ in range(n_blobs):
        cx, cy = rng.uniform(0, size, size=2)
        sx, sy = rng.uniform(size / 60, size / 18, size=2)
        theta = rng.uniform(0, np.pi)
        c, s = np.cos(theta), np.sin(theta)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        layer += rng.choice([-1.0, 1.0]) * rng.uniform(0.3, 1.0) * np.exp(-0.5 * ((u / sx) ** 2 + (v / sy) ** 2))
    return layer


def procedural_image(size=256, seed=0):
    """One deterministic synthetic image in [0, 1]."""
    rng = np.random.default_rng(seed)
    coarse = ndimage.gaussian_filter(rng.standard_normal((size, size)), size / 12)
    coarse /= np.abs(coarse).max() + 1e-12
    fine = ndimage.gaussian_filter(rng.standard_normal((size, size)), 1.5)
    fine /= np.abs(fine).max() + 1e-12
    img = 0.35 * coarse + 0.08 * fine
    img += 0.5 * _blob_layer(size, rng, int(rng.integers(8, 20)))
    img += rng.choice([-1.0, 1.0]) * 0.7 * _vessel_layer(size, rng, int(rng.integers(6, 14)))
    img -= img.min()
    img /= img.max() + 1e-12
    return 0.05 + 0.9 * img


def procedural_corpus(n, size=256, seed=0):
    seeds = np.random.SeedSequence(seed).spawn(n)
    return [procedural_image(size, s) for s in seeds]
