"""Cumulative hybrid aggregation: positional encoding, initial fusion, layer stack."""
import torch
from torch import nn

from .exceptions import ShapeMismatch
from .lfa import AttentionUnit, _mlp


def normalize_coords(coords, image_size):
    """Map pixel coordinates to [-1, 1]^2; the image centre goes to (0, 0)."""
    w, h = image_size
    half = coords.new_tensor([max(w - 1, 1) / 2.0, max(h - 1, 1) / 2.0])
    return (coords - half) / half


class PositionalEncoder(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.mlp = _mlp(2, dim, dim)

    def forward(self, coords, image_size):
        return self.mlp(normalize_coords(coords, image_size))


def encode_positions(coords, image_size, encoder):
    return encoder(coords, image_size)


def fuse_initial(refined, base_adapted, pe):
    """(PE + F_r) + (PE + MLP(F_b)); the positional term enters twice."""
    if refined.shape != base_adapted.shape or refined.shape != pe.shape:
        raise ShapeMismatch(
            f"fusion inputs disagree: {tuple(refined.shape)}, {tuple(base_adapted.shape)}, {tuple(pe.shape)}"
        )
    return (pe + refined) + (pe + base_adapted)


class ChaStack(nn.Module):
    def __init__(self, base_dim, dim, n_layers=9):
        super().__init__()
        if n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        self.base_adapter = _mlp(base_dim, dim, dim)
        self.pos_encoder = PositionalEncoder(dim)
        self.layers = nn.ModuleList(
            nn.ModuleList([AttentionUnit(dim, "self"), AttentionUnit(dim, "cross")]) for _ in range(n_layers)
        )

    @property
    def n_layers(self):
        return len(self.layers)

    def initial(self, refined, base, coords, image_size):
        pe = self.pos_encoder(coords, image_size)
        return fuse_initial(refined, self.base_adapter(base), pe)

    def forward(self, fm_a, fm_b):
        return run_stack(fm_a, fm_b, self)


def run_stack(fm_a, fm_b, stack):
    """Per layer: self update on each image, then cross update against the other.

    Returns the list of ``(F_A, F_B)`` after every layer.
    """
    outputs = []
    for self_unit, cross_unit in stack.layers:
        fm_a = self_unit(fm_a, fm_a)
        fm_b = self_unit(fm_b, fm_b)
        fm_a, fm_b = cross_unit(fm_a, fm_b), cross_unit(fm_b, fm_a)
        outputs.append((fm_a, fm_b))
    return outputs
