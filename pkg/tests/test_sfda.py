import builtins
import copy
import math
from pathlib import Path

import numpy as np
import pytest
import torch

from starmt.datagen import VideoDataset
from starmt.detector import DetectorConfig, TinyVOD, to_tensor
from starmt.sfda import (SRS, TRS, AdaptationConfig, AugmentConfig, EntropyTrace, PseudoLabelError,
                         TeacherStudent, adapt, augment_pair, baseline_basic_mt, baseline_pseudo_label,
                         certainty_weighted_cls_loss, ema_update, mask_frames, mean_self_entropy,
                         oracle_finetune, select_checkpoint, srs_loss, stage_of, transform_boxes, trs_loss,
                         warp_frames)

SMALL = dict(total_iters=12, tau=3, k=5, frames_per_sequence=4, entropy_window=2, lr=1e-2, lr_min=1e-3,
             tam_iters=20, tam_lr=1e-2)


def _params(model):
    return {n: p.detach().clone() for n, p in model.named_parameters()}


# ---------------------------------------------------------------- EMA


def _pair(tiny_model, alpha):
    ts = TeacherStudent.from_source(tiny_model, alpha)
    with torch.no_grad():
        for p in ts.student.parameters():
            p.add_(torch.randn_like(p))
    return ts


def test_ema_alpha_one_keeps_teacher(tiny_model):
    ts = _pair(tiny_model, 1.0)
    before = _params(ts.teacher)
    ema_update(ts)
    for n, p in ts.teacher.named_parameters():
        assert torch.equal(p, before[n])


def test_ema_alpha_zero_copies_student(tiny_model):
    ts = _pair(tiny_model, 0.0)
    ema_update(ts)
    for (n, pt), ps in zip(ts.teacher.named_parameters(), ts.student.parameters()):
        assert torch.equal(pt, ps), n


def test_ema_closed_form_with_fixed_student(tiny_model):
    alpha, n = 0.9, 25
    ts = _pair(tiny_model, alpha)
    theta0, theta_s = _params(ts.teacher), _params(ts.student)
    for _ in range(n):
        ema_update(ts)
    for name, p in ts.teacher.named_parameters():
        expect = alpha ** n * theta0[name] + (1 - alpha ** n) * theta_s[name]
        assert torch.allclose(p, expect, atol=1e-5)


def test_ema_backbone_only_leaves_tam(tiny_model):
    ts = _pair(tiny_model, 0.5)
    before = _params(ts.teacher)
    ema_update(ts, "backbone_only")
    for n, p in ts.teacher.named_parameters():
        assert torch.equal(p, before[n]) == n.startswith("tam.")


def test_ema_rejects_bad_alpha_and_scope(tiny_model):
    with pytest.raises(ValueError):
        TeacherStudent.from_source(tiny_model, 1.5)
    with pytest.raises(ValueError):
        ema_update(TeacherStudent.from_source(tiny_model, 0.5), "head")


# ---------------------------------------------------------------- losses


def test_cls_loss_hand_case():
    loss = certainty_weighted_cls_loss(torch.tensor([[1.0, 0.0]]), torch.tensor([[0.8, 0.2]]),
                                       torch.tensor([0.5]))
    assert loss.item() == pytest.approx(0.1116, abs=1e-4)
    assert loss.item() == pytest.approx(-0.5 * 0.5 * 2 * math.log(0.8), abs=1e-6)


def test_bce_identical_half_scores_is_ln2():
    s = torch.full((3, 4), 0.5)
    out = trs_loss(torch.zeros(2, 5), torch.zeros(2, 5), s, s)
    assert out["bce"].item() == pytest.approx(math.log(2), abs=1e-6)
    assert out["mse"].item() == 0.0


def test_extreme_scores_are_clamped():
    out = trs_loss(torch.zeros(1, 2), torch.zeros(1, 2), torch.tensor([[1.0]]), torch.tensor([[0.0]]))
    assert math.isfinite(out["bce"].item())
    assert out["bce"].item() == pytest.approx(-math.log(1e-7), rel=1e-3)


def test_srs_total_is_sum_of_terms():
    g = torch.Generator().manual_seed(0)
    f_t, f_s = torch.randn(2, 3, 4, 4, generator=g), torch.randn(2, 3, 4, 4, generator=g)
    y_t, s_s = torch.rand(1, 2, generator=g), torch.rand(1, 2, generator=g)
    p = torch.rand(1, generator=g)
    out = srs_loss(f_t, f_s, y_t, s_s, p, gamma=0.2)
    mse = ((f_s - f_t) ** 2).mean()
    bce = -(y_t * s_s.log() + (1 - y_t) * (1 - s_s).log()).mean()
    cls = (p * -(y_t * s_s.log() + (1 - y_t) * (1 - s_s).log()).mean(1)).mean()
    assert out["total"].item() == pytest.approx((mse + bce + 0.2 * cls).item(), abs=1e-6)


def test_loss_term_selection():
    f = torch.ones(1, 2)
    s = torch.full((1, 2), 0.3)
    out = srs_loss(f, f * 2, s, s, torch.ones(1), terms=("mse",))
    assert out["total"].item() == pytest.approx(1.0)
    assert out["bce"].item() == 0.0 and out["cls"].item() == 0.0


# ---------------------------------------------------------------- schedule


@pytest.mark.parametrize("tau", [1, 50, 100, 200, 500])
def test_stage_of_matches_interval_formula(tau):
    its = np.arange(10 * tau)
    expect = np.where((its // tau) % 2 == 0, TRS, SRS)
    got = np.array([stage_of(int(i), tau) for i in its])
    assert (got == expect).all()
    # every block [2k tau, 2k tau + tau) is TRS
    for k in range(5):
        assert all(stage_of(i, tau) == TRS for i in range(2 * k * tau, 2 * k * tau + tau))
    flip = np.flatnonzero(got[1:] != got[:-1]) + 1
    assert (flip % tau == 0).all() and len(flip) == 9


def test_stage_order_can_start_with_srs():
    assert stage_of(0, 10, SRS) == SRS and stage_of(10, 10, SRS) == TRS
    with pytest.raises(ValueError):
        stage_of(-1, 10)
    with pytest.raises(ValueError):
        stage_of(0, 0)


def test_mask_frames_counts(rng):
    assert mask_frames(8, 0, rng).tolist() == list(range(8))
    for r, n_keep in [(25, 6), (50, 4), (75, 2), (12.5, 7), (12.4, 8)]:
        keep = mask_frames(8, r, rng)
        assert len(keep) == n_keep and (np.diff(keep) > 0).all()
    assert len(mask_frames(1, 75, rng)) == 1
    with pytest.raises(ValueError):
        mask_frames(8, 80, rng)


# ---------------------------------------------------------------- entropy


def test_entropy_values():
    assert mean_self_entropy(np.array([[0.0, 1.0], [1.0, 0.0]])) == 0.0
    assert mean_self_entropy(np.full((3, 4), 0.5)) == pytest.approx(0.5 * math.log(2), abs=1e-4)
    assert mean_self_entropy(np.full((3, 4), 0.5)) == pytest.approx(0.3466, abs=1e-4)
    assert mean_self_entropy(np.full((2, 2), 1 / math.e)) == pytest.approx(0.3679, abs=1e-4)
    with pytest.raises(ValueError):
        mean_self_entropy(np.zeros((0, 4)))


def _trace(values, window):
    tr = EntropyTrace(window=window)
    for i, v in enumerate(values):
        tr.append(i, v)
    return tr


def test_select_monotone_and_v_shapes():
    assert select_checkpoint(_trace(np.linspace(1, 0, 50), 5)) == 49
    v = np.abs(np.arange(60) - 30) / 30.0
    sel = select_checkpoint(_trace(v, 1))
    assert sel == 30


def test_select_first_of_two_dips():
    its = np.arange(10000)
    h = 0.4 - 0.10 * np.exp(-((its - 2000) / 300.0) ** 2) - 0.12 * np.exp(-((its - 8000) / 300.0) ** 2)
    tr = _trace(h, 100)
    sm = tr.smoothed()
    assert sm[2000:2101].min() == pytest.approx(0.30, abs=2e-3)
    assert sm.min() == pytest.approx(0.28, abs=2e-3)
    first = select_checkpoint(tr, snapshot_every=100)
    assert abs(first - 2000) <= 100 and first % 100 == 0
    glob = select_checkpoint(tr, snapshot_every=100, rule="global_min")
    assert abs(glob - 8000) <= 100


def test_select_short_trace_uses_raw_global_min():
    assert select_checkpoint(_trace([0.3, 0.1, 0.2], 100)) == 1
    with pytest.raises(ValueError):
        select_checkpoint(EntropyTrace())


def test_trace_rejects_non_increasing_iterations():
    tr = EntropyTrace()
    tr.append(3, 0.1)
    with pytest.raises(ValueError):
        tr.append(3, 0.2)


# ---------------------------------------------------------------- augmentation


def test_identity_augmentation(rng):
    frames = rng.random((3, 16, 16, 3)).astype(np.float32)
    weak, strong, rec = augment_pair(frames, rng, AugmentConfig.identity())
    assert torch.equal(weak, to_tensor(frames)) and torch.equal(strong, to_tensor(frames))
    assert np.array_equal(rec.matrix, np.eye(3)) and rec.erase_box is None


def test_views_share_geometry(rng):
    frames = np.zeros((2, 32, 32, 3), np.float32)
    frames[:, 10:14, 4:8] = 1.0
    cfg = AugmentConfig(flip_prob=1.0, perspective=0.0, weak_jitter=0.0, strong_jitter=0.0, erase_prob=0.0)
    weak, strong, rec = augment_pair(frames, rng, cfg)
    assert torch.equal(weak, strong)
    box = transform_boxes(np.array([4, 10, 8, 14]), rec.matrix)[0]
    assert box.tolist() == pytest.approx([24, 10, 28, 14])
    assert weak[:, :, 10:14, 24:28].min() == 1.0


def test_warp_inverse_round_trip(rng):
    from starmt.sfda.augment import homography
    src = np.array([[0, 0], [32, 0], [32, 32], [0, 32]], dtype=np.float64)
    M = homography(src, src + rng.uniform(-1.5, 1.5, size=(4, 2)))
    x = torch.from_numpy(np.kron(rng.random((1, 3, 4, 4)), np.ones((8, 8)))).float()
    back = warp_frames(warp_frames(x, M), np.linalg.inv(M))
    inner = (slice(None), slice(None), slice(4, 28), slice(4, 28))
    assert (back - x)[inner].abs().mean() < 0.05


def test_erase_area_fraction():
    rng = np.random.default_rng(1)
    frames = np.full((2, 48, 48, 3), 0.5, np.float32)
    cfg = AugmentConfig(flip_prob=0.0, perspective=0.0, weak_jitter=0.0, strong_jitter=0.0)
    for _ in range(30):
        weak, strong, rec = augment_pair(frames, rng, cfg)
        x1, y1, x2, y2 = rec.erase_box
        assert 0.02 <= (x2 - x1) * (y2 - y1) / 48 ** 2 <= 0.15
        changed = (strong != weak).any(dim=1)
        assert not changed[:, :y1].any() and not changed[:, y2:].any()
        assert torch.equal(strong[0, :, y1:y2, x1:x2], strong[1, :, y1:y2, x1:x2])


def test_jitter_bounds(rng):
    for _ in range(50):
        _, _, rec = augment_pair(np.zeros((1, 8, 8, 3), np.float32), rng)
        assert all(0.9 <= v <= 1.1 for v in rec.weak_color)
        assert all(0.6 <= v <= 1.4 for v in rec.strong_color)


# ---------------------------------------------------------------- adaptation loop


def test_zero_iterations_returns_source(tiny_model, small_dataset):
    res = adapt(tiny_model, small_dataset, AdaptationConfig(total_iters=0))
    for (n, p), q in zip(res.model.named_parameters(), tiny_model.parameters()):
        assert torch.equal(p, q), n
    assert res.selected_iter is None and len(res.trace) == 0


def test_config_validation():
    with pytest.raises(ValueError):
        AdaptationConfig(tau=10, total_iters=15).validate()
    with pytest.raises(ValueError):
        AdaptationConfig(mask_range=(0, 90)).validate()
    with pytest.raises(ValueError):
        AdaptationConfig(loss_terms=("mse", "kl")).validate()
    cfg = AdaptationConfig.from_dict({"mask_range": [0, 50], "augment": {"strong_jitter": 0.2}})
    assert cfg.mask_range == (0, 50) and cfg.augment.strong_jitter == 0.2


def test_adapt_is_deterministic_and_selects_a_snapshot(tiny_model, small_dataset, tmp_path):
    cfg = AdaptationConfig(**SMALL)
    a = adapt(tiny_model, small_dataset, cfg, out_dir=tmp_path / "a")
    b = adapt(tiny_model, small_dataset, cfg, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert a.selected_iter in a.snapshots and sorted(a.snapshots) == list(range(0, 12, 2))
    for p, q in zip(a.model.state_dict().values(), a.teacher_at(a.selected_iter).state_dict().values()):
        assert torch.equal(p, q)
    assert [r["stage"] for r in a.records] == [stage_of(i, 3) for i in range(12)]


class _TeacherSpy:
    """Records teacher TAM bytes at every iteration and any teacher gradient."""

    def __init__(self, monkeypatch):
        import sys
        mod = sys.modules["starmt.sfda.adapt"]  # the package re-exports a function of the same name
        self.tam, self.grads = [], []
        real = mod.ema_update

        def spy(ts, scope="all"):
            out = real(ts, scope)
            self.tam.append((scope, [p.detach().numpy().tobytes() for p in ts.teacher.tam.parameters()]))
            self.grads.extend(p.grad for p in ts.teacher.parameters() if p.grad is not None)
            self.grads.extend(p for p in ts.teacher.parameters() if p.requires_grad)
            return out
        monkeypatch.setattr(mod, "ema_update", spy)


def test_srs_keeps_teacher_tam_and_teacher_has_no_grads(tiny_model, small_dataset, monkeypatch):
    spy = _TeacherSpy(monkeypatch)
    cfg = AdaptationConfig(**{**SMALL, "alpha": 0.5})
    adapt(tiny_model, small_dataset, cfg)
    assert not spy.grads
    stages = [stage_of(i, 3) for i in range(12)]
    assert [s for s, _ in spy.tam] == ["all" if st == TRS else "backbone_only" for st in stages]
    # the TAM after the last TRS step of a block survives unchanged through the whole SRS block
    for i, st in enumerate(stages):
        if st == SRS:
            assert spy.tam[i][1] == spy.tam[i - 1][1]
    trs_changes = [spy.tam[i][1] != spy.tam[i - 1][1] for i in range(1, 12) if stages[i] == TRS]
    assert any(trs_changes)


def test_basic_mt_matches_star_mt_during_first_trs_block(tiny_model, small_dataset):
    cfg = AdaptationConfig(**SMALL)
    star = adapt(tiny_model, small_dataset, cfg)
    basic = baseline_basic_mt(tiny_model, small_dataset, cfg)
    assert star.records[:3] == basic.records[:3]
    assert star.records[3]["stage"] == SRS and basic.records[3]["stage"] == TRS
    assert all(r["stage"] == TRS for r in basic.records)


def test_adapt_with_alpha_zero_and_frame_windows(tiny_model, small_dataset):
    cfg = AdaptationConfig(**{**SMALL, "alpha": 0.0, "frames_per_sequence": 2})
    res = adapt(tiny_model, small_dataset, cfg)
    assert np.isfinite([r["loss_total"] for r in res.records]).all()


# ---------------------------------------------------------------- TAM-only baselines


def _backbone_tensors(model):
    return [t.detach().clone() for n, t in model.state_dict().items() if not n.startswith("tam.")]


def test_pseudo_label_thresholds(tiny_model, small_dataset):
    with pytest.raises(PseudoLabelError):
        baseline_pseudo_label(tiny_model, small_dataset, AdaptationConfig(**{**SMALL, "pl_threshold": 1.0}))
    res = baseline_pseudo_label(tiny_model, small_dataset, AdaptationConfig(**{**SMALL, "pl_threshold": 0.0}))
    n_train = len(VideoDataset(small_dataset, "train"))
    T = small_dataset.gen_config["T"]
    assert res.model.meta["n_pseudo_labels"] == n_train * T * SMALL["k"]


@pytest.mark.parametrize("stats", ["source", "target"])
def test_tam_only_baselines_freeze_backbone_parameters(tiny_model, small_dataset, stats):
    cfg = AdaptationConfig(**{**SMALL, "pl_threshold": 0.0, "baseline_norm_stats": stats})
    src_params = {n: p.detach().clone() for n, p in tiny_model.named_parameters()}
    for fn in (baseline_pseudo_label, oracle_finetune):
        res = fn(tiny_model, small_dataset, cfg)
        moved = [n for n, p in res.model.named_parameters() if not torch.equal(p, src_params[n])]
        assert moved and all(n.startswith("tam.") for n in moved)
        buffers_same = all(torch.equal(a, b) for a, b in zip(_backbone_tensors(res.model),
                                                                 _backbone_tensors(tiny_model)))
        assert buffers_same == (stats == "source")


def test_oracle_loss_decreases_and_needs_labels(tiny_model, small_dataset):
    res = oracle_finetune(tiny_model, small_dataset, AdaptationConfig(**{**SMALL, "tam_iters": 60}))
    curve = [r["tam_loss"] for r in res.records]
    assert np.mean(curve[-10:]) < np.mean(curve[:10])
    with pytest.raises(ValueError):
        oracle_finetune(tiny_model, VideoDataset(small_dataset, "train", with_labels=False))


# ---------------------------------------------------------------- label blindness


@pytest.fixture
def label_opens(monkeypatch):
    opened = []
    real_open, real_read = builtins.open, Path.read_text

    def spy_open(file, *a, **kw):
        if Path(str(file)).name == "labels.json":
            opened.append(str(file))
        return real_open(file, *a, **kw)

    def spy_read(self, *a, **kw):
        if self.name == "labels.json":
            opened.append(str(self))
        return real_read(self, *a, **kw)

    monkeypatch.setattr(builtins, "open", spy_open)
    monkeypatch.setattr(Path, "read_text", spy_read)
    monkeypatch.setattr(Path, "open", lambda self, *a, **kw: spy_open(self, *a, **kw))
    return opened


def test_spy_sees_labelled_loading(small_dataset, label_opens):
    list(VideoDataset(small_dataset, "train"))
    assert label_opens


@pytest.mark.parametrize("fn", [adapt, baseline_basic_mt, baseline_pseudo_label])
def test_label_blind_methods(fn, tiny_model, small_dataset, label_opens):
    cfg = AdaptationConfig(**{**SMALL, "pl_threshold": 0.0})
    fn(tiny_model, small_dataset, cfg)
    fn(tiny_model, VideoDataset(small_dataset, "train", with_labels=True), cfg)
    assert label_opens == []
