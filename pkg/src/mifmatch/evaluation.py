"""Registration protocols, pseudo-modality pairs and benchmark reports."""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from ._validation import check_image, check_points
from .exceptions import EmptyEvaluation, EstimationFailed, InsufficientMatches, MifError, PointAtInfinity
from .geometry import (
    HomographyConfig,
    estimate_homography,
    homography_error,
    homography_from_list,
    homography_to_list,
    sample_homography,
    warp_points,
)
from .io import load_tensor, read_image, read_manifest
from .matcher import extract_matches, knn_ratio_match, lowe_ratios
from .model import extract_inputs, inputs_from_entry
from .training import warp_image

log = logging.getLogger(__name__)

REPORT_SCHEMA = 1
CORRECT_PX = 3.0
# Trained matchability collapses toward zero for every point (the unmatched
# term is the only one acting on it), so the pipeline keeps every mutual
# argmax by default.  ``extract_matches`` itself keeps the stricter defaults.
PIPELINE_P_THRESHOLD = 0.0
PIPELINE_MIN_MATCHABILITY = 0.0


@dataclass(frozen=True)
class RetinalProtocolConfig:
    eval_size: tuple = (768, 768)
    rmse_success: float = 10.0
    mae_success: float = 20.0
    min_matches: int = 4

    def __post_init__(self):
        if self.rmse_success <= 0 or self.mae_success <= 0 or self.min_matches < 1:
            raise ValueError("protocol thresholds must be positive")


@dataclass(frozen=True)
class RemoteProtocolConfig:
    h_err_success: float = 5.0
    perturbation: HomographyConfig = field(
        default_factory=lambda: HomographyConfig((-20.0, 20.0), (0.8, 1.2), 0.2, (0.0, 0.0))
    )
    min_matches: int = 4

    def __post_init__(self):
        if self.h_err_success <= 0:
            raise ValueError("h_err_success must be positive")


@dataclass
class PairReport:
    pair_id: str = ""
    rmse: float = None
    mae: float = None
    h_err: float = None
    n_matches: int = 0
    n_correct: int = 0
    n_keypoints_overlap: int = 0
    success: bool = False
    error: str = None


def rmse_mae(pred_h, gt_points):
    """RMSE and maximum Euclidean error of ``pred_h``-warped annotations.

    ``gt_points`` is ``(K, 4)`` rows ``(ax, ay, bx, by)`` or a pair of ``(K, 2)`` arrays.
    """
    a, b = _split_gt(gt_points)
    if len(a) == 0:
        raise ValueError("need at least one annotated point pair")
    err = np.sqrt(((warp_points(pred_h, a) - b) ** 2).sum(axis=1))
    return float(np.sqrt(np.mean(err**2))), float(err.max())


def _split_gt(gt_points):
    if isinstance(gt_points, (tuple, list)) and len(gt_points) == 2:
        return check_points(gt_points[0]), check_points(gt_points[1])
    g = np.asarray(gt_points, dtype=np.float64).reshape(-1, 4)
    return g[:, :2], g[:, 2:]


def retinal_success(report, cfg):
    return (
        report.n_matches >= cfg.min_matches
        and report.rmse is not None
        and report.rmse < cfg.rmse_success
        and report.mae < cfg.mae_success
    )


def retinal_srr(reports, cfg=RetinalProtocolConfig()):
    if not reports:
        raise EmptyEvaluation("no reports to aggregate")
    return sum(retinal_success(r, cfg) for r in reports) / len(reports)


def retinal_means(reports, cfg=RetinalProtocolConfig()):
    """Dataset mean RMSE/MAE, skipping pairs below the match minimum."""
    kept = [r for r in reports if r.n_matches >= cfg.min_matches and r.rmse is not None]
    if not kept:
        return None, None
    return float(np.mean([r.rmse for r in kept])), float(np.mean([r.mae for r in kept]))


def matching_score(reports):
    """Mean over pairs of correct matches / keypoints in the overlap (0 for an empty overlap)."""
    if not reports:
        raise EmptyEvaluation("no reports to aggregate")
    ms = []
    for r in reports:
        if r.n_keypoints_overlap == 0:
            log.warning("pair %s has no keypoints in the overlap; matching score 0", r.pair_id)
            ms.append(0.0)
        else:
            ms.append(r.n_correct / r.n_keypoints_overlap)
    return float(np.mean(ms))


def remote_srr_and_ms(reports, cfg=RemoteProtocolConfig()):
    if not reports:
        raise EmptyEvaluation("no reports to aggregate")
    ok = [r.h_err is not None and r.h_err < cfg.h_err_success for r in reports]
    return sum(ok) / len(reports), matching_score(reports)


def pseudo_modality(image, kind="invert_gamma", gamma=1.5, blur_sigma=2.0, speckle=0.2, seed=0):
    """Nonlinear intensity change standing in for a second imaging modality."""
    img = check_image(image)
    if kind == "none":
        return img.copy()
    if kind == "invert_gamma":
        return np.clip(1.0 - img, 0.0, 1.0) ** gamma
    if kind == "blur_noise":
        rng = np.random.default_rng(seed)
        blurred = ndimage.gaussian_filter(img, blur_sigma, mode="reflect")
        return np.clip(blurred * (1.0 + speckle * rng.standard_normal(img.shape)), 0.0, 1.0)
    raise ValueError(f"unknown pseudo-modality {kind!r}")


def control_grid(image_size, n=5, margin=0.1):
    w, h = image_size
    xs = np.linspace(margin * (w - 1), (1 - margin) * (w - 1), n)
    ys = np.linspace(margin * (h - 1), (1 - margin) * (h - 1), n)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def _scale_h(h, sx, sy):
    s = np.diag([sx, sy, 1.0])
    return s @ h @ np.linalg.inv(s)


# --------------------------------------------------------------------------- pairs


@dataclass
class EvalPair:
    pair_id: str
    image_a: np.ndarray
    image_b: np.ndarray
    h_gt: np.ndarray = None
    gt_points: np.ndarray = None
    entry: dict = None


def synthetic_pairs(images, perturbation, kind="invert_gamma", seed=0, gamma=1.5):
    """Warp each image by a sampled homography, then apply the pseudo-modality to B."""
    pairs = []
    for i, img in enumerate(images):
        img = check_image(img)
        h, w = img.shape
        rng = np.random.default_rng([seed, i])
        h_gt = sample_homography(perturbation, (w, h), rng)
        img_b = pseudo_modality(warp_image(img, h_gt), kind, gamma=gamma, seed=int(rng.integers(2**31)))
        a_pts = control_grid((w, h))
        gt = np.concatenate([a_pts, warp_points(h_gt, a_pts)], axis=1)
        pairs.append(EvalPair(f"synthetic-{i:04d}", img, img_b, h_gt, gt))
    return pairs


def manifest_pairs(path, perturbation, kind="invert_gamma", seed=0):
    """Pairs from a manifest: entries with ``image_b`` are real pairs, others are synthesised."""
    pairs = []
    for i, entry in enumerate(read_manifest(path)):
        img_a = read_image(entry["image"])
        if "image_b" in entry:
            h_gt = homography_from_list(entry["pair_homography"]) if "pair_homography" in entry else None
            gt = load_tensor(entry["gt_points"]).astype(np.float64) if "gt_points" in entry else None
            if gt is None and h_gt is not None:
                a_pts = control_grid(img_a.shape[::-1])
                gt = np.concatenate([a_pts, warp_points(h_gt, a_pts)], axis=1)
            pairs.append(EvalPair(entry.get("id", f"pair-{i:04d}"), img_a, read_image(entry["image_b"]), h_gt, gt, entry))
        else:
            pairs.extend(
                EvalPair(p.pair_id.replace("synthetic", f"entry-{i:04d}"), p.image_a, p.image_b, p.h_gt, p.gt_points, entry)
                for p in synthetic_pairs([img_a], perturbation, kind, seed=seed + i)
            )
    return pairs


# --------------------------------------------------------------------------- matching


@dataclass
class PairMatches:
    kpts_a: np.ndarray
    kpts_b: np.ndarray
    matches: list
    ratios: np.ndarray = None
    size_a: tuple = None
    size_b: tuple = None


def match_pair(image_a, image_b, matcher="base_knn", model=None, provider_kw=None, ratio=0.75,
               p_threshold=PIPELINE_P_THRESHOLD, min_matchability=PIPELINE_MIN_MATCHABILITY, entry=None):
    """Detect, describe and match one pair; returns :class:`PairMatches`."""
    provider_kw = provider_kw or {}
    if entry is not None and "image_b" in entry:
        in_a = inputs_from_entry(entry, "", image_a, **provider_kw)
        in_b = inputs_from_entry(entry, "_b", image_b, **provider_kw)
    else:
        in_a = extract_inputs(image_a, **provider_kw)
        in_b = extract_inputs(image_b, **provider_kw)
    ka, kb = in_a.keypoints, in_b.keypoints
    if matcher == "base_knn":
        da, db = in_a.base.descriptors, in_b.base.descriptors
        matches = knn_ratio_match(da, db, ratio) if len(db) >= 2 else []
        ratios = lowe_ratios(da, db) if len(db) >= 2 else np.zeros(0)
    elif matcher == "mif":
        if model is None:
            raise ValueError("the mif matcher needs a trained model")
        p, sa, sb, fa, fb = model.assign(in_a.tensors(), in_b.tensors())
        matches = extract_matches(p, sa, sb, p_threshold, min_matchability)
        fa = fa.double().numpy()
        fb = fb.double().numpy()
        ratios = lowe_ratios(fa, fb) if len(fb) >= 2 else np.zeros(0)
    else:
        raise ValueError(f"unknown matcher {matcher!r}")
    return PairMatches(ka.coords, kb.coords, matches, ratios, ka.image_size, kb.image_size)


def _correct_mask(pm, h_gt):
    if not pm.matches or h_gt is None:
        return np.zeros(len(pm.matches), dtype=bool)
    idx = np.array([(i, j) for i, j, _ in pm.matches])
    try:
        proj = warp_points(h_gt, pm.kpts_a[idx[:, 0]])
    except PointAtInfinity:
        return np.zeros(len(idx), dtype=bool)
    return np.sqrt(((proj - pm.kpts_b[idx[:, 1]]) ** 2).sum(axis=1)) <= CORRECT_PX


def _overlap_count(pm, h_gt):
    if h_gt is None or len(pm.kpts_a) == 0:
        return 0
    homog = pm.kpts_a @ h_gt[:, :2].T + h_gt[:, 2]
    ok = np.abs(homog[:, 2]) > 1e-12
    proj = homog[ok, :2] / homog[ok, 2:3]
    w, h = pm.size_b
    return int(np.sum((proj[:, 0] >= 0) & (proj[:, 0] < w) & (proj[:, 1] >= 0) & (proj[:, 1] < h)))


def score_pair(pair, pm, protocol, cfg, seed):
    """Estimate a homography from the matches and fill a :class:`PairReport`."""
    rep = PairReport(pair_id=pair.pair_id, n_matches=len(pm.matches))
    correct = _correct_mask(pm, pair.h_gt)
    rep.n_correct = int(correct.sum())
    rep.n_keypoints_overlap = _overlap_count(pm, pair.h_gt)
    if len(pm.matches) < cfg.min_matches:
        rep.error = "InsufficientMatches"
        return rep, None
    idx = np.array([(i, j) for i, j, _ in pm.matches])
    try:
        h_pred, _ = estimate_homography(pm.kpts_a[idx[:, 0]], pm.kpts_b[idx[:, 1]], rng_state=seed)
    except (EstimationFailed, InsufficientMatches) as exc:
        rep.error = type(exc).__name__
        return rep, None
    if protocol == "retinal":
        if pair.gt_points is not None:
            w, h = pm.size_a
            sx, sy = cfg.eval_size[0] / w, cfg.eval_size[1] / h
            a, b = _split_gt(pair.gt_points)
            try:
                rep.rmse, rep.mae = rmse_mae(_scale_h(h_pred, sx, sy), (a * [sx, sy], b * [sx, sy]))
            except PointAtInfinity:
                rep.error = "PointAtInfinity"
        rep.success = bool(retinal_success(rep, cfg))
    else:
        if pair.h_gt is not None:
            rep.h_err = homography_error(pair.h_gt, h_pred)
            rep.success = bool(rep.h_err < cfg.h_err_success)
    return rep, h_pred


def evaluate_pairs(pairs, protocol="retinal", cfg=None, matcher="base_knn", model=None, provider_kw=None,
                   seed=0, jobs=1, rmse_thresholds=(1, 3, 5, 10), match_kw=None):
    """Score every pair; per-pair failures are recorded, never raised."""
    if not pairs:
        raise EmptyEvaluation("no pairs to evaluate")
    if cfg is None:
        cfg = RetinalProtocolConfig() if protocol == "retinal" else RemoteProtocolConfig()

    def run(k):
        pair = pairs[k]
        try:
            pm = match_pair(pair.image_a, pair.image_b, matcher, model, provider_kw, entry=pair.entry,
                            **(match_kw or {}))
        except MifError as exc:
            return PairReport(pair_id=pair.pair_id, error=type(exc).__name__), None, None
        rep, h_pred = score_pair(pair, pm, protocol, cfg, [seed, k])
        return rep, pm, h_pred

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            results = list(ex.map(run, range(len(pairs))))
    else:
        results = [run(k) for k in range(len(pairs))]
    reports = [r[0] for r in results]
    summary = aggregate(reports, protocol, cfg, rmse_thresholds)
    return reports, summary, results


def aggregate(reports, protocol, cfg, rmse_thresholds=(1, 3, 5, 10)):
    if protocol == "retinal":
        mean_rmse, mean_mae = retinal_means(reports, cfg)
        sweep = {}
        for t in rmse_thresholds:
            c = RetinalProtocolConfig(cfg.eval_size, float(t), cfg.mae_success, cfg.min_matches)
            sweep[str(t)] = retinal_srr(reports, c)
        return {"srr": retinal_srr(reports, cfg), "mean_rmse": mean_rmse, "mean_mae": mean_mae,
                "ms": matching_score(reports), "srr_by_rmse_threshold": sweep, "n_pairs": len(reports)}
    srr, ms = remote_srr_and_ms(reports, cfg)
    errs = [r.h_err for r in reports if r.h_err is not None]
    return {"srr": srr, "ms": ms, "mean_h_err": float(np.mean(errs)) if errs else None, "n_pairs": len(reports)}


def write_report(path, reports, summary, meta):
    doc = {"schema": REPORT_SCHEMA, "meta": meta, "summary": summary, "pairs": [asdict(r) for r in reports]}
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1))
    return doc


# --------------------------------------------------------------------------- plots


def plot_matches(path, image_a, image_b, pm, h_gt=None, max_lines=200):
    """Side-by-side view; green lines are within 3 px of the GT reprojection, red are not."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    correct = _correct_mask(pm, h_gt)
    ha, wa = image_a.shape
    hb, wb = image_b.shape
    canvas = np.ones((max(ha, hb), wa + wb))
    canvas[:ha, :wa] = image_a
    canvas[:hb, wa:] = image_b
    fig, ax = plt.subplots(figsize=(8, 4), dpi=100)
    ax.imshow(canvas, cmap="gray", vmin=0, vmax=1)
    for k, (i, j, _) in enumerate(pm.matches[:max_lines]):
        xa, ya = pm.kpts_a[i]
        xb, yb = pm.kpts_b[j]
        color = "lime" if (h_gt is None or correct[k]) else "red"
        ax.plot([xa, xb + wa], [ya, yb], color=color, linewidth=0.6)
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return correct


def plot_ratio_histogram(path, ratio_sets, bins=20):
    """Overlaid Lowe-ratio histograms, one per labelled ratio array."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
    for label, ratios in ratio_sets.items():
        ax.hist(np.asarray(ratios), bins=bins, range=(0, 1), alpha=0.55, label=label)
    ax.axvline(0.75, color="k", linestyle="--", linewidth=0.8)
    ax.set_xlabel("nearest / second-nearest distance")
    ax.set_ylabel("count")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def run_benchmark(pairs, protocol="retinal", matcher="base_knn", model=None, provider_kw=None, seed=0,
                  cfg=None, out=None, plots=None, n_vis=4, jobs=1, meta=None, rmse_thresholds=(1, 3, 5, 10),
                  match_kw=None):
    """Evaluate ``pairs`` and optionally write the JSON report and plots."""
    reports, summary, results = evaluate_pairs(pairs, protocol, cfg, matcher, model, provider_kw, seed, jobs,
                                               rmse_thresholds, match_kw)
    meta = dict(meta or {})
    meta.update({"protocol": protocol, "matcher": matcher, "seed": seed})
    if out is not None:
        write_report(out, reports, summary, meta)
    if plots is not None:
        plots = Path(plots)
        plots.mkdir(parents=True, exist_ok=True)
        all_ratios = []
        for k, (pair, (rep, pm, h_pred)) in enumerate(zip(pairs, results)):
            if pm is None:
                continue
            all_ratios.append(pm.ratios)
            if k < n_vis:
                plot_matches(plots / f"{pair.pair_id}_matches.png", pair.image_a, pair.image_b, pm, pair.h_gt)
        if all_ratios:
            plot_ratio_histogram(plots / "lowe_ratio_hist.png", {matcher: np.concatenate(all_ratios)})
    return reports, summary


def perturbation_for(protocol, rotation=None):
    """Default test-time perturbation, optionally overriding the rotation half-range."""
    if protocol == "remote":
        base = RemoteProtocolConfig().perturbation
    else:
        base = HomographyConfig((0.0, 0.0), (1.0, 1.0), 0.0, (0.0, 0.0))
    if rotation is None:
        return base
    return HomographyConfig((-rotation, rotation), base.scale_range, base.perspective_distortion,
                            base.translation_range, base.seed)


__all__ = [
    "RetinalProtocolConfig", "RemoteProtocolConfig", "PairReport", "rmse_mae", "retinal_srr",
    "remote_srr_and_ms", "pseudo_modality", "run_benchmark", "synthetic_pairs", "manifest_pairs",
    "homography_to_list",
]
