"""Self-supervised pair synthesis, losses and the optimisation loop."""
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import cv2
import numpy as np
import torch

from ._validation import check_image
from .exceptions import DegenerateCluster, NoKeypoints, NonFiniteLoss
from .geometry import CorrespondenceLabels, HomographyConfig, label_correspondences, sample_homography
from .gmm import fit_gmm
from .io import load_checkpoint, read_image, read_manifest, save_checkpoint
from .lfa import loss_inter, loss_intra, weighted_means
from .matcher import log_dual_softmax, score_matrix
from .model import ImageInputs, MIFNet, extract_inputs

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass
class PhotometricConfig:
    brightness_range: tuple = (-0.2, 0.2)
    contrast_range: tuple = (0.8, 1.25)
    noise_sigma: float = 0.01


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 2
    epochs: int = 15
    lambda_lfa: float = 2.0
    gmm_k: int = 5
    layers: int = 9
    feature_dim: int = 128
    homography: HomographyConfig = field(default_factory=HomographyConfig)
    photometric: PhotometricConfig = field(default_factory=PhotometricConfig)
    seed: int = 0
    correspondence_threshold_px: float = 3.0
    image_size: int = 512
    max_kpts: int = 512
    nms_radius: int = 4
    semantic_depth: int = 3
    semantic_dim: int = 64
    proj_seed: int = 0
    gmm_max_iters: int = 100
    gmm_tol: float = 1e-3

    def __post_init__(self):
        if isinstance(self.homography, dict):
            self.homography = HomographyConfig.from_dict(self.homography)
        if isinstance(self.photometric, dict):
            self.photometric = PhotometricConfig(**{k: tuple(v) if isinstance(v, list) else v
                                                    for k, v in self.photometric.items()})
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.lambda_lfa < 0:
            raise ValueError("lambda_lfa must be >= 0")
        if self.gmm_k < 1 or self.layers < 1 or self.batch_size < 1:
            raise ValueError("gmm_k, layers and batch_size must be >= 1")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise KeyError(f"unknown config key: {key!r}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["homography"] = self.homography.to_dict()
        d["photometric"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["photometric"].items()}
        return d

    def hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def provider_kwargs(self):
        return dict(max_kpts=self.max_kpts, nms_radius=self.nms_radius, semantic_depth=self.semantic_depth,
                    semantic_dim=self.semantic_dim, proj_seed=self.proj_seed)


@dataclass
class TrainingSample:
    image_a: np.ndarray
    image_b: np.ndarray
    h_ab: np.ndarray
    inputs_a: ImageInputs
    inputs_b: ImageInputs
    labels: CorrespondenceLabels


def warp_image(image, h, size=None):
    """Warp with reflection outside the source image."""
    h_img, w_img = image.shape
    w, hh = size or (w_img, h_img)
    return cv2.warpPerspective(image.astype(np.float32), np.asarray(h, dtype=np.float64), (w, hh),
                               flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT_101).astype(np.float64)


def photometric_jitter(image, cfg, rng):
    b = rng.uniform(*cfg.brightness_range)
    lo, hi = cfg.contrast_range
    c = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    out = (image - 0.5) * c + 0.5 + b
    if cfg.noise_sigma > 0:
        out = out + rng.normal(0.0, cfg.noise_sigma, size=image.shape)
    return np.clip(out, 0.0, 1.0)


def synthesize_pair(image, cfg, rng_state):
    """Original image, its warped + photometrically jittered copy, inputs and GT labels."""
    img = check_image(image, min_size=64)
    rng = np.random.default_rng(rng_state)
    h, w = img.shape
    h_ab = sample_homography(cfg.homography, (w, h), rng)
    img_b = photometric_jitter(warp_image(img, h_ab), cfg.photometric, rng)
    inputs_a = extract_inputs(img, **cfg.provider_kwargs())
    inputs_b = extract_inputs(img_b, **cfg.provider_kwargs())
    labels = label_correspondences(inputs_a.keypoints.coords, inputs_b.keypoints.coords, h_ab,
                                   cfg.correspondence_threshold_px)
    return TrainingSample(img, img_b, h_ab, inputs_a, inputs_b, labels)


def _clamped(log_value, lo, hi):
    # value is clamped, gradient passes straight through
    return log_value + (log_value.clamp(lo, hi) - log_value).detach()


def match_loss(p, sigma_a, sigma_b, labels, log_p=None, logit_a=None, logit_b=None):
    """-mean log P over GT matches - mean log(1 - sigma) over unmatched points.

    Probabilities are clamped to [1e-7, 1 - 1e-7].  Log-space inputs may be
    passed for numerical accuracy; they give identical values.
    """
    lo, hi = math.log(PROB_CLAMP), math.log1p(-PROB_CLAMP)
    ref = p if p is not None else log_p
    total = ref.new_zeros(())
    m = labels.matches
    if len(m):
        lp = log_p if log_p is not None else torch.log(p.clamp_min(1e-300))
        ii = torch.as_tensor(m[:, 0])
        jj = torch.as_tensor(m[:, 1])
        total = total - _clamped(lp[ii, jj], lo, hi).mean()
    for idx, sigma, logit in ((labels.unmatched_a, sigma_a, logit_a), (labels.unmatched_b, sigma_b, logit_b)):
        if len(idx) == 0:
            continue
        idx = torch.as_tensor(idx)
        if logit is not None:
            log_not = torch.nn.functional.logsigmoid(-logit[idx])
        else:
            log_not = torch.log1p(-sigma[idx].clamp(max=1.0 - 1e-300))
        total = total - _clamped(log_not, lo, hi).mean()
    return total


def lfa_terms(refined, model):
    """(intra, inter) for one image, means recomputed differentiably."""
    intra = loss_intra(refined, model)
    inter = loss_inter(weighted_means(refined, model.responsibilities))
    return intra, inter


def fit_lfa_state(refined_pair, cfg, seed):
    """Run EM on the detached, unit-normalised refined features of both images."""
    state = []
    for offset, r in enumerate(refined_pair):
        rn = torch.nn.functional.normalize(r, dim=-1)
        k = min(cfg.gmm_k, len(rn))
        try:
            gmm = fit_gmm(rn.detach().double().numpy(), k, cfg.gmm_max_iters, cfg.gmm_tol, seed + offset)
        except DegenerateCluster as exc:
            log.warning("skipping mixture loss for one image: %s", exc)
            gmm = None
        state.append((rn, gmm))
    return state


def total_loss(per_layer_outputs, heads, labels, lfa_state, cfg):
    """Mean per-layer match loss plus lambda * (intra - inter) summed over both images."""
    layer_losses = []
    for (fa, fb), head in zip(per_layer_outputs, heads):
        lp = log_dual_softmax(score_matrix(fa, fb))
        layer_losses.append(
            match_loss(None, None, None, labels, log_p=lp, logit_a=head.logits(fa), logit_b=head.logits(fb))
        )
    l_match = torch.stack(layer_losses).mean()
    l_intra = l_match.new_zeros(())
    l_inter = l_match.new_zeros(())
    for feats, gmm in lfa_state:
        if gmm is None:
            continue
        intra, inter = lfa_terms(feats, gmm)
        l_intra = l_intra + intra
        l_inter = l_inter + inter
    total = l_match + cfg.lambda_lfa * (l_intra - l_inter)
    breakdown = {
        "l_match": float(l_match.detach()),
        "l_intra": float(l_intra.detach()),
        "l_inter": float(l_inter.detach()),
        "total": float(total.detach()),
        "per_layer": [float(v.detach()) for v in layer_losses],
    }
    return total, breakdown


def sample_loss(model, sample, cfg, seed):
    a = sample.inputs_a.tensors()
    b = sample.inputs_b.tensors()
    out = model(a, b)
    state = fit_lfa_state(out["refined"], cfg, seed)
    return total_loss(out["layers"], model.heads, sample.labels, state, cfg)


def build_model(cfg, base_dim=64):
    torch.manual_seed(cfg.seed)
    return MIFNet(base_dim=base_dim, latent_dim=cfg.semantic_dim, dim=cfg.feature_dim, n_layers=cfg.layers)


def _load_images(source, size):
    if isinstance(source, (str, Path)):
        images = [read_image(e["image"]) for e in read_manifest(source)]
    else:
        images = [check_image(im) for im in source]
    out = []
    for im in images:
        if size and im.shape != (size, size):
            im = cv2.resize(im, (size, size), interpolation=cv2.INTER_AREA)
        out.append(im)
    return out


def checkpoint_payload(model, cfg, optimizer=None, epoch=None, base_dim=64):
    tensors = {f"model.{k}": v for k, v in model.named_arrays().items()}
    meta = {"C": cfg.feature_dim, "L": cfg.layers, "K": cfg.gmm_k, "seed": cfg.seed,
            "config_hash": cfg.hash(), "config": cfg.to_dict(), "base_dim": base_dim}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if st:
                    tensors[f"adam.{names[id(p)]}.m"] = st["exp_avg"].numpy()
                    tensors[f"adam.{names[id(p)]}.v"] = st["exp_avg_sq"].numpy()
                    meta.setdefault("adam_step", int(st["step"]))
    if epoch is not None:
        meta["epoch"] = epoch
    return tensors, meta


def load_model(path):
    tensors, meta = load_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    model = MIFNet(base_dim=meta.get("base_dim", 64), latent_dim=cfg.semantic_dim, dim=cfg.feature_dim,
                   n_layers=cfg.layers)
    model.load_arrays({k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")})
    model.eval()
    return model, cfg, meta, tensors


def _restore_adam(optimizer, model, tensors, step):
    for name, p in model.named_parameters():
        m = tensors.get(f"adam.{name}.m")
        if m is None:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(step)),
            "exp_avg": torch.as_tensor(m).clone(),
            "exp_avg_sq": torch.as_tensor(tensors[f"adam.{name}.v"]).clone(),
        }


def train(source, cfg, out_dir=None, resume=None, log_path=None, callback=None):
    """Train on single images (manifest path or array list); returns the model.

    Writes ``epoch_XXX.ckpt`` and ``model.ckpt`` into ``out_dir`` when given,
    and one JSON line per optimiser step to ``log_path``.
    """
    torch.use_deterministic_algorithms(True)
    images = _load_images(source, cfg.image_size)
    if not images:
        raise ValueError("training set is empty")
    model = build_model(cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    start_epoch = 0
    if resume is not None:
        _, _, meta, tensors = load_model(resume)
        model.load_arrays({k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")})
        _restore_adam(optimizer, model, tensors, meta.get("adam_step", 0))
        start_epoch = meta.get("epoch", 0)
    model.train()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_fh = open(log_path, "a" if resume else "w") if log_path else None
    history = []
    steps_per_epoch = math.ceil(len(images) / cfg.batch_size)
    try:
        for epoch in range(start_epoch, cfg.epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(images))
            for bi in range(steps_per_epoch):
                step = epoch * steps_per_epoch + bi
                batch = order[bi * cfg.batch_size : (bi + 1) * cfg.batch_size]
                losses, parts = [], []
                for idx in batch:
                    try:
                        sample = synthesize_pair(images[idx], cfg, [cfg.seed, epoch, int(idx)])
                    except NoKeypoints as exc:
                        log.warning("skipping image %d: %s", idx, exc)
                        continue
                    loss, br = sample_loss(model, sample, cfg, seed=cfg.seed + step)
                    losses.append(loss)
                    parts.append(br)
                if not losses:
                    continue
                loss = torch.stack(losses).mean()
                if not torch.isfinite(loss):
                    raise NonFiniteLoss(step, float(loss.detach()))
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                rec = {"step": step, "epoch": epoch, "total": float(loss.detach())}
                for key in ("l_match", "l_intra", "l_inter"):
                    rec[key] = float(np.mean([p[key] for p in parts]))
                history.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                if callback:
                    callback(rec)
            if out_dir is not None:
                tensors, meta = checkpoint_payload(model, cfg, optimizer, epoch + 1)
                save_checkpoint(out_dir / f"epoch_{epoch + 1:03d}.ckpt", tensors, meta)
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    if out_dir is not None:
        tensors, meta = checkpoint_payload(model, cfg, optimizer, cfg.epochs)
        save_checkpoint(out_dir / "model.ckpt", tensors, meta)
    model.history = history
    return model
