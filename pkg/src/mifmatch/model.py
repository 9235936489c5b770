"""The full network: latent aggregation, hybrid aggregation stack, matchability heads."""
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .cha import ChaStack
from .features import (
    FeatureSet,
    KeypointSet,
    detect_keypoints_synthetic,
    load_keypoints_and_features,
    load_semantic_map,
    sample_dense_at_keypoints,
    synthetic_semantic_map,
)
from .lfa import LatentAggregator
from .matcher import MatchabilityHead, dual_softmax, score_matrix


@dataclass
class ImageInputs:
    """Everything the network consumes for one image."""

    keypoints: KeypointSet
    base: FeatureSet
    latent: FeatureSet

    def tensors(self, dtype=torch.float32):
        return {
            "coords": torch.as_tensor(self.keypoints.coords, dtype=dtype),
            "base": torch.as_tensor(self.base.descriptors, dtype=dtype),
            "latent": torch.as_tensor(self.latent.descriptors, dtype=dtype),
            "image_size": self.keypoints.image_size,
        }


def extract_inputs(image, max_kpts=512, nms_radius=4, semantic_depth=3, semantic_dim=64, proj_seed=0):
    """Built-in providers: Harris keypoints/patches and the synthetic semantic map."""
    kpts, base = detect_keypoints_synthetic(image, max_kpts=max_kpts, nms_radius=nms_radius)
    fmap = synthetic_semantic_map(image, depth=semantic_depth, proj_seed=proj_seed, out_dim=semantic_dim)
    return ImageInputs(kpts, base, sample_dense_at_keypoints(fmap, kpts))


def inputs_from_entry(entry, suffix="", image=None, **provider_kw):
    """Use file-backed keypoints/descriptors/maps where the manifest names them."""
    if ("kpts" + suffix) in entry:
        kpts, base = load_keypoints_and_features(entry, suffix)
    else:
        kpts, base = detect_keypoints_synthetic(
            image, max_kpts=provider_kw.get("max_kpts", 512), nms_radius=provider_kw.get("nms_radius", 4)
        )
    if ("semantic_map" + suffix) in entry:
        fmap = load_semantic_map(entry["semantic_map" + suffix])
        w = kpts.image_size[0]
        fmap.stride = w / fmap.data.shape[1]
    else:
        fmap = synthetic_semantic_map(
            image,
            depth=provider_kw.get("semantic_depth", 3),
            proj_seed=provider_kw.get("proj_seed", 0),
            out_dim=provider_kw.get("semantic_dim", 64),
        )
    return ImageInputs(kpts, base, sample_dense_at_keypoints(fmap, kpts))


class MIFNet(nn.Module):
    def __init__(self, base_dim=64, latent_dim=64, dim=128, n_layers=9):
        super().__init__()
        self.lfa = LatentAggregator(latent_dim, dim)
        self.cha = ChaStack(base_dim, dim, n_layers)
        self.heads = nn.ModuleList(MatchabilityHead(dim) for _ in range(n_layers))

    @property
    def n_layers(self):
        return self.cha.n_layers

    def forward(self, a, b):
        """``a``/``b`` are dicts from :meth:`ImageInputs.tensors`.

        Returns refined latent features and every layer's invariant features.
        """
        ra, rb = self.lfa(a["latent"], b["latent"])
        fa = self.cha.initial(ra, a["base"], a["coords"], a["image_size"])
        fb = self.cha.initial(rb, b["base"], b["coords"], b["image_size"])
        layers = self.cha(fa, fb)
        return {"refined": (ra, rb), "layers": layers}

    @torch.no_grad()
    def assign(self, a, b, layer=-1):
        """Dual-softmax probabilities and matchabilities from one layer (default: last)."""
        out = self(a, b)
        fa, fb = out["layers"][layer]
        head = self.heads[layer]
        p = dual_softmax(score_matrix(fa, fb))
        return p.double().numpy(), head(fa).double().numpy(), head(fb).double().numpy(), fa, fb

    def named_arrays(self):
        return {name: p.detach().cpu().numpy().astype(np.float32) for name, p in self.state_dict().items()}

    def load_arrays(self, arrays):
        state = {name: torch.as_tensor(np.asarray(v)) for name, v in arrays.items()}
        self.load_state_dict(state)
