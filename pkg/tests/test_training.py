import json
import math

import numpy as np
import pytest
import torch

from mifmatch.corpus import procedural_corpus
from mifmatch.exceptions import NonFiniteLoss
from mifmatch.geometry import CorrespondenceLabels, HomographyConfig, warp_points
from mifmatch.gmm import fit_gmm
from mifmatch.lfa import loss_inter, loss_intra, weighted_means
from mifmatch.matcher import dual_softmax, log_dual_softmax, score_matrix
from mifmatch import training
from mifmatch.model import MIFNet
from mifmatch.training import (
    PhotometricConfig,
    TrainConfig,
    build_model,
    match_loss,
    sample_loss,
    synthesize_pair,
    total_loss,
    train,
)


def tiny_cfg(**kw):
    base = dict(image_size=64, max_kpts=24, feature_dim=16, layers=2, semantic_dim=8, gmm_k=2, epochs=1,
                batch_size=2, lr=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def labels(matches, ua, ub):
    return CorrespondenceLabels(
        np.asarray(matches, dtype=np.int64).reshape(-1, 2), np.asarray(ua, dtype=np.int64),
        np.asarray(ub, dtype=np.int64), 3.0
    )


def oracle_match_loss(p, sa, sb, lab):
    clamp = lambda v: min(max(v, 1e-7), 1 - 1e-7)
    total = 0.0
    if len(lab.matches):
        total -= np.mean([math.log(clamp(p[i][j])) for i, j in lab.matches])
    if len(lab.unmatched_a):
        total -= np.mean([math.log(1 - clamp(sa[i])) for i in lab.unmatched_a])
    if len(lab.unmatched_b):
        total -= np.mean([math.log(1 - clamp(sb[j])) for j in lab.unmatched_b])
    return total


@pytest.fixture(scope="module")
def images():
    return procedural_corpus(4, size=64, seed=21)


# config


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.batch_size, cfg.epochs, cfg.lambda_lfa, cfg.gmm_k, cfg.layers) == (1e-4, 2, 15, 2.0, 5, 9)
    for bad in (dict(lr=-1), dict(lambda_lfa=-0.1), dict(gmm_k=0), dict(layers=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(KeyError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})


def test_config_round_trip_and_hash():
    cfg = tiny_cfg(homography={"rotation_range": [-10, 10]})
    again = TrainConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
    assert again.hash() == cfg.hash()
    assert tiny_cfg(seed=1).hash() != cfg.hash()


# synthesize_pair


def still_cfg():
    return tiny_cfg(homography=HomographyConfig.zero(),
                    photometric=PhotometricConfig((0.0, 0.0), (1.0, 1.0), 0.0))


def test_identity_pair(images):
    s = synthesize_pair(images[0], still_cfg(), 0)
    np.testing.assert_array_equal(s.h_ab, np.eye(3))
    np.testing.assert_allclose(s.image_b, s.image_a, atol=1e-6)
    n = len(s.inputs_a.keypoints)
    np.testing.assert_array_equal(s.labels.matches, np.stack([np.arange(n)] * 2, axis=1))


def test_synthesis_deterministic(images):
    cfg = tiny_cfg()
    a = synthesize_pair(images[1], cfg, [3, 4])
    b = synthesize_pair(images[1], cfg, [3, 4])
    np.testing.assert_array_equal(a.image_b, b.image_b)
    np.testing.assert_array_equal(a.labels.matches, b.labels.matches)
    np.testing.assert_array_equal(a.inputs_b.latent.descriptors, b.inputs_b.latent.descriptors)


def test_labels_agree_with_bruteforce(images):
    s = synthesize_pair(images[2], tiny_cfg(), 11)
    ka, kb = s.inputs_a.keypoints.coords, s.inputs_b.keypoints.coords
    wa = warp_points(s.h_ab, ka)
    expected = []
    for i in range(len(ka)):
        j = min(range(len(kb)), key=lambda t: np.hypot(*(wa[i] - kb[t])))
        back = min(range(len(ka)), key=lambda t: np.hypot(*(wa[t] - kb[j])))
        if back == i and np.hypot(*(wa[i] - kb[j])) <= 3.0:
            expected.append((i, j))
    assert sorted(map(tuple, s.labels.matches.tolist())) == expected


def test_too_small_image_rejected():
    with pytest.raises(Exception):
        synthesize_pair(np.random.default_rng(0).uniform(size=(32, 32)), tiny_cfg(), 0)


# match_loss


def test_uniform_single_match():
    p = dual_softmax(torch.zeros(2, 2, dtype=torch.float64))
    loss = match_loss(p, torch.zeros(2), torch.zeros(2), labels([[0, 0]], [], []))
    assert float(loss) == pytest.approx(1.386294, abs=1e-6)
    assert float(loss) == pytest.approx(-math.log(0.25), abs=1e-12)


def test_saturated_loss_near_zero():
    p = torch.eye(3, dtype=torch.float64)
    sa = torch.tensor([0.0, 0.0, 0.0, 0.0], dtype=torch.float64)
    loss = match_loss(p, sa, sa, labels([[0, 0], [1, 1], [2, 2]], [3], [3]))
    assert 0 <= float(loss) < 1e-6


def test_loss_matches_oracle_and_is_nonnegative():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = dual_softmax(torch.tensor(rng.normal(0, 3, size=(4, 5))))
        sa, sb = torch.tensor(rng.uniform(size=4)), torch.tensor(rng.uniform(size=5))
        lab = labels([[0, 1], [2, 3]], [1, 3], [0, 2, 4])
        got = float(match_loss(p, sa, sb, lab))
        assert got == pytest.approx(oracle_match_loss(p.numpy(), sa.numpy(), sb.numpy(), lab), rel=1e-12)
        assert got >= 0


def test_empty_sets_contribute_zero():
    p = torch.full((2, 2), 0.3, dtype=torch.float64)
    assert float(match_loss(p, torch.zeros(2), torch.zeros(2), labels([], [], []))) == 0.0


def test_loss_decreases_with_match_probability():
    base = torch.full((3, 3), 0.1, dtype=torch.float64)
    sig = torch.full((3,), 0.2, dtype=torch.float64)
    lab = labels([[0, 0], [1, 2]], [2], [1])
    prev = float(match_loss(base, sig, sig, lab))
    for v in (0.2, 0.4, 0.8):
        p = base.clone()
        p[1, 2] = v
        cur = float(match_loss(p, sig, sig, lab))
        assert cur < prev
        prev = cur


def test_log_space_inputs_agree():
    rng = np.random.default_rng(1)
    s = torch.tensor(rng.normal(size=(4, 4)))
    la, lb = torch.tensor(rng.normal(size=4)), torch.tensor(rng.normal(size=4))
    lab = labels([[0, 0], [1, 2]], [2, 3], [1, 3])
    plain = match_loss(dual_softmax(s), torch.sigmoid(la), torch.sigmoid(lb), lab)
    logs = match_loss(None, None, None, lab, log_p=log_dual_softmax(s), logit_a=la, logit_b=lb)
    assert float(plain) == pytest.approx(float(logs), rel=1e-10)


def test_match_loss_gradient_finite_differences():
    rng = np.random.default_rng(2)
    s = torch.tensor(rng.normal(size=(3, 4)), requires_grad=True)
    sa = torch.tensor(rng.uniform(0.1, 0.9, size=3), requires_grad=True)
    sb = torch.tensor(rng.uniform(0.1, 0.9, size=4), requires_grad=True)
    lab = labels([[0, 1], [2, 0]], [1], [2, 3])
    assert torch.autograd.gradcheck(
        lambda x, a, b: match_loss(dual_softmax(x), a, b, lab), (s, sa, sb), eps=1e-6, atol=1e-8, rtol=1e-3
    )


def test_loss_invariant_to_reindexing():
    rng = np.random.default_rng(3)
    p = torch.tensor(rng.uniform(0.01, 0.5, size=(4, 5)))
    sa, sb = torch.tensor(rng.uniform(size=4)), torch.tensor(rng.uniform(size=5))
    lab = labels([[0, 1], [2, 4]], [1, 3], [0, 2, 3])
    pa, pb = rng.permutation(4), rng.permutation(5)
    inv_a, inv_b = np.argsort(pa), np.argsort(pb)
    p2 = p[pa][:, pb]
    lab2 = labels([[inv_a[i], inv_b[j]] for i, j in lab.matches], inv_a[lab.unmatched_a], inv_b[lab.unmatched_b])
    assert float(match_loss(p2, sa[pa], sb[pb], lab2)) == pytest.approx(float(match_loss(p, sa, sb, lab)), rel=1e-12)


# total_loss


def toy_setup(seed=0, layers=2):
    torch.manual_seed(seed)
    model = MIFNet(base_dim=4, latent_dim=4, dim=8, n_layers=layers).double()
    rng = np.random.default_rng(seed)
    a = {"coords": torch.tensor(rng.uniform(0, 31, size=(6, 2))), "base": torch.tensor(rng.normal(size=(6, 4))),
         "latent": torch.tensor(rng.normal(size=(6, 4))), "image_size": (32, 32)}
    b = {"coords": torch.tensor(rng.uniform(0, 31, size=(6, 2))), "base": torch.tensor(rng.normal(size=(6, 4))),
         "latent": torch.tensor(rng.normal(size=(6, 4))), "image_size": (32, 32)}
    lab = labels([[0, 2], [1, 0], [3, 3]], [2, 4, 5], [1, 4, 5])
    return model, a, b, lab


def frozen_state(model, a, b, k=2):
    refined = model(a, b)["refined"]
    return [fit_gmm(torch.nn.functional.normalize(r, dim=-1).detach().numpy(), k, seed=i)
            for i, r in enumerate(refined)]


def loss_with_frozen_gmms(model, a, b, lab, gmms, cfg):
    out = model(a, b)
    state = [(torch.nn.functional.normalize(r, dim=-1), g) for r, g in zip(out["refined"], gmms)]
    return total_loss(out["layers"], model.heads, lab, state, cfg)


def test_total_loss_lambda_zero_is_mean_match():
    model, a, b, lab = toy_setup()
    cfg = TrainConfig(lambda_lfa=0.0, gmm_k=2, layers=2, feature_dim=8)
    total, br = loss_with_frozen_gmms(model, a, b, lab, frozen_state(model, a, b), cfg)
    assert float(total.detach()) == pytest.approx(np.mean(br["per_layer"]), rel=1e-12)
    assert br["l_match"] == pytest.approx(np.mean(br["per_layer"]), rel=1e-12)


def test_total_loss_zero_network_is_finite():
    model, a, b, lab = toy_setup()
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    cfg = TrainConfig(gmm_k=2, layers=2, feature_dim=8)
    total, _ = sample_like(model, a, b, lab, cfg)
    assert math.isfinite(float(total.detach()))


def sample_like(model, a, b, lab, cfg):
    out = model(a, b)
    state = training.fit_lfa_state(out["refined"], cfg, 0)
    return total_loss(out["layers"], model.heads, lab, state, cfg)


def test_total_loss_recomputed_from_parts():
    model, a, b, lab = toy_setup(1)
    cfg = TrainConfig(lambda_lfa=2.0, gmm_k=2, layers=2, feature_dim=8)
    gmms = frozen_state(model, a, b)
    total, br = loss_with_frozen_gmms(model, a, b, lab, gmms, cfg)
    with torch.no_grad():
        out = model(a, b)
        per_layer = []
        for (fa, fb), head in zip(out["layers"], model.heads):
            p = dual_softmax(score_matrix(fa, fb)).numpy()
            per_layer.append(oracle_match_loss(p, head(fa).numpy(), head(fb).numpy(), lab))
        lfa = 0.0
        for r, g in zip(out["refined"], gmms):
            rn = torch.nn.functional.normalize(r, dim=-1)
            lfa += float(loss_intra(rn, g)) - float(loss_inter(weighted_means(rn, g.responsibilities)))
    expected = (per_layer[0] + per_layer[1]) / 2 + 2.0 * lfa
    assert float(total.detach()) == pytest.approx(expected, rel=1e-9)
    assert br["l_intra"] - br["l_inter"] == pytest.approx(lfa, rel=1e-9)


def test_total_loss_gradient_finite_differences():
    model, a, b, lab = toy_setup(2)
    cfg = TrainConfig(lambda_lfa=2.0, gmm_k=2, layers=2, feature_dim=8)
    gmms = frozen_state(model, a, b)
    model.zero_grad()
    loss_with_frozen_gmms(model, a, b, lab, gmms, cfg)[0].backward()
    rng = np.random.default_rng(0)
    h = 1e-4
    for group in ("lfa", "cha", "heads"):
        params = [p for n, p in model.named_parameters() if n.startswith(group)]
        analytic, numeric = [], []
        for p in params:
            flat = p.data.view(-1)
            for idx in rng.choice(flat.numel(), size=min(4, flat.numel()), replace=False):
                old = flat[idx].item()
                with torch.no_grad():
                    flat[idx] = old + h
                    up = float(loss_with_frozen_gmms(model, a, b, lab, gmms, cfg)[0])
                    flat[idx] = old - h
                    down = float(loss_with_frozen_gmms(model, a, b, lab, gmms, cfg)[0])
                    flat[idx] = old
                numeric.append((up - down) / (2 * h))
                analytic.append(p.grad.view(-1)[idx].item())
        analytic, numeric = np.array(analytic), np.array(numeric)
        rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
        assert rel < 1e-2, group


# train


def test_overfit_single_sample(images):
    cfg = tiny_cfg(lr=1e-3)
    sample = synthesize_pair(images[0], cfg, 0)
    model = build_model(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    losses = []
    for step in range(200):
        loss, _ = sample_loss(model, sample, cfg, seed=step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    avg = np.convolve(losses, np.ones(20) / 20, mode="valid")
    assert avg[-1] < avg[0]


def test_zero_lr_leaves_parameters(images):
    cfg = tiny_cfg(lr=0.0)
    before = build_model(cfg).named_arrays()
    model = train(images, cfg)
    after = model.named_arrays()
    for k in before:
        np.testing.assert_array_equal(before[k], after[k])
    sample = synthesize_pair(images[0], cfg, 0)
    assert float(sample_loss(model, sample, cfg, 0)[0].detach()) == float(sample_loss(model, sample, cfg, 0)[0].detach())


def test_same_seed_identical_checkpoints(images, tmp_path):
    cfg = tiny_cfg()
    train(images, cfg, out_dir=tmp_path / "r1", log_path=tmp_path / "r1.jsonl")
    train(images, cfg, out_dir=tmp_path / "r2", log_path=tmp_path / "r2.jsonl")
    assert (tmp_path / "r1" / "model.ckpt").read_bytes() == (tmp_path / "r2" / "model.ckpt").read_bytes()
    assert (tmp_path / "r1.jsonl").read_bytes() == (tmp_path / "r2.jsonl").read_bytes()
    lines = (tmp_path / "r1.jsonl").read_text().splitlines()
    assert len(lines) == 2
    rec = json.loads(lines[0])
    assert set(rec) >= {"step", "l_match", "l_intra", "l_inter", "total"}


def test_resume_matches_uninterrupted(images, tmp_path):
    cfg2 = tiny_cfg(epochs=2)
    train(images, cfg2, out_dir=tmp_path / "full")
    train(images, tiny_cfg(epochs=2), out_dir=tmp_path / "resumed", resume=tmp_path / "full" / "epoch_001.ckpt")
    assert (tmp_path / "full" / "model.ckpt").read_bytes() == (tmp_path / "resumed" / "model.ckpt").read_bytes()


def test_non_finite_loss_aborts(images, monkeypatch):
    def bad(model, sample, cfg, seed):
        return torch.tensor(float("nan"), requires_grad=True), {"l_match": 0, "l_intra": 0, "l_inter": 0}

    monkeypatch.setattr(training, "sample_loss", bad)
    with pytest.raises(NonFiniteLoss) as err:
        train(images, tiny_cfg())
    assert err.value.batch_id == 0


def test_empty_training_set():
    with pytest.raises(ValueError):
        train([], tiny_cfg())
