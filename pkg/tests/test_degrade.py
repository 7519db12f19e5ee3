import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from starmt.datagen import DatasetManifest, VideoSequence, generate_sequence, GenConfig
from starmt.degrade import (DegradationSpec, add_gaussian_noise, apply_haze, apply_turbulence, degrade_dataset,
                            load_degradation, sample_degradation_spec, turbulence_fields)


def _const_seq(value, T=4, H=64, W=64, depth=1.0):
    return VideoSequence("c", np.full((T, H, W, 3), value, np.float32), np.full((T, H, W), depth, np.float32), [])


@pytest.fixture(scope="module")
def seq():
    return generate_sequence(GenConfig(), 21)


def test_zero_severity_is_bit_exact_identity(seq):
    assert np.array_equal(add_gaussian_noise(seq, 0.0, 1).frames, seq.frames)
    assert np.array_equal(apply_haze(seq, 0.0).frames, seq.frames)
    assert np.array_equal(apply_turbulence(seq, 0.0, 0.9, 1).frames, seq.frames)


def test_noise_moments_on_constant_frame():
    s = _const_seq(0.5)
    out = add_gaussian_noise(s, 0.1, 3).frames.astype(np.float64)
    n = out.size
    assert abs(out.mean() - 0.5) < 3 * 0.1 / math.sqrt(n)
    assert abs(out.std() - 0.1) < 0.05 * 0.1


def test_noise_is_seeded_and_clipped(seq):
    a = add_gaussian_noise(seq, 0.2, 9).frames
    assert np.array_equal(a, add_gaussian_noise(seq, 0.2, 9).frames)
    assert not np.array_equal(a, add_gaussian_noise(seq, 0.2, 10).frames)
    assert a.min() >= 0 and a.max() <= 1
    assert add_gaussian_noise(seq, 0.2, 9).labels == seq.labels


def test_haze_hand_case():
    out = apply_haze(_const_seq(0.2, T=1, H=8, W=8, depth=1.0), beta=1.0, A=1.0).frames
    assert out[0, 0, 0, 0] == pytest.approx(0.2 * math.exp(-1) + 1 - math.exp(-1), abs=1e-6)
    assert out[0, 0, 0, 0] == pytest.approx(0.7057, abs=1e-4)


def test_haze_needs_depth(seq):
    with pytest.raises(ValueError):
        apply_haze(VideoSequence("x", seq.frames, None, []), 1.0)


@given(st.floats(0, 0.99), st.floats(0.05, 1.0), st.floats(0, 2), st.floats(0, 2))
@settings(max_examples=200, deadline=None)
def test_haze_monotone_in_beta_and_depth(i, d, b1, b2):
    lo, hi = sorted((b1, b2))
    s = _const_seq(i, T=1, H=1, W=1, depth=d)
    a = apply_haze(s, lo).frames[0, 0, 0, 0]
    b = apply_haze(s, hi).frames[0, 0, 0, 0]
    assert b >= a - 1e-6
    near = apply_haze(_const_seq(i, T=1, H=1, W=1, depth=d * 0.5), hi).frames[0, 0, 0, 0]
    assert b >= near - 1e-6


def test_turbulence_lag1_autocorrelation():
    disp, _ = turbulence_fields(60, 32, 32, strength=2.0, temporal_corr=0.9, seed=0)
    x = disp[:, 0].reshape(60, -1)
    a, b = x[:-1].ravel(), x[1:].ravel()
    assert a.size >= 1000
    r = np.corrcoef(a, b)[0, 1]
    assert abs(r - 0.9) <= 0.05


def test_turbulence_displacement_scale():
    disp, blur = turbulence_fields(40, 48, 48, strength=2.0, temporal_corr=0.5, seed=1)
    assert np.mean(np.abs(disp)) == pytest.approx(2.0 * math.sqrt(2 / math.pi), rel=0.1)
    assert np.sqrt(np.mean(disp ** 2)) == pytest.approx(2.0, rel=0.1)
    assert blur.min() >= 0 and blur.max() <= 1.0


def test_turbulence_preserves_shape_labels_and_range(seq):
    out = apply_turbulence(seq, 2.0, 0.9, 4)
    assert out.frames.shape == seq.frames.shape
    assert out.labels == seq.labels
    assert out.frames.min() >= 0 and out.frames.max() <= 1
    assert np.array_equal(out.frames, apply_turbulence(seq, 2.0, 0.9, 4).frames)


def test_turbulence_mean_over_seeds_approaches_blurred_original():
    # a vertical edge: its average over many random warps is a smoothed edge
    frames = np.zeros((1, 32, 32, 3), np.float32)
    frames[..., 16:, :] = 1.0
    s = VideoSequence("e", frames, None, [])
    mean = np.mean([apply_turbulence(s, 1.5, 0.0, k).frames[0, ..., 0] for k in range(60)], axis=0)
    profile = mean.mean(axis=0)
    assert profile[2] < 0.1 and profile[-3] > 0.9
    assert np.all(np.diff(profile) > -0.05)
    assert 0.3 < profile[15:17].mean() < 0.7


def test_sampled_noise_severity_range():
    rng = np.random.default_rng(0)
    sig = np.array([sample_degradation_spec("noise", rng).params["sigma"] for _ in range(10_000)])
    assert sig.min() >= 10 / 255 and sig.max() <= 50 / 255
    assert sig.mean() == pytest.approx(30 / 255, rel=0.01)
    assert 10 / 255 == pytest.approx(0.0392, abs=1e-4) and 50 / 255 == pytest.approx(0.196, abs=1e-3)


def test_sampled_haze_and_turbulence_ranges():
    rng = np.random.default_rng(1)
    betas = [sample_degradation_spec("haze", rng).params["beta"] for _ in range(2000)]
    assert min(betas) >= 0.5 and max(betas) <= 1.5
    tur = [sample_degradation_spec("turbulence", rng).params for _ in range(2000)]
    assert all(1.0 <= p["strength"] <= 3.0 and 0 <= p["temporal_corr"] < 1 for p in tur)


def test_spec_sampling_is_deterministic_and_validated():
    a = sample_degradation_spec("noise", np.random.default_rng(5))
    b = sample_degradation_spec("noise", np.random.default_rng(5))
    assert a == b
    with pytest.raises(ValueError):
        sample_degradation_spec("rain", np.random.default_rng(0))
    with pytest.raises(ValueError):
        DegradationSpec("noise", {"sigma": -1.0})
    with pytest.raises(ValueError):
        DegradationSpec("turbulence", {"strength": 1.0, "temporal_corr": 1.0})


@pytest.mark.parametrize("kind", ["noise", "haze", "turbulence"])
def test_degrade_dataset(small_dataset, tmp_path, kind):
    out = degrade_dataset(small_dataset, kind, 3, tmp_path / kind)
    again = degrade_dataset(small_dataset, kind, 3, tmp_path / f"{kind}_2")
    specs = []
    for split, sid in small_dataset.all_sequences():
        src, dst = small_dataset.seq_dir(split, sid), out.seq_dir(split, sid)
        assert (src / "labels.json").read_bytes() == (dst / "labels.json").read_bytes()
        for f in sorted((dst / "frames").iterdir()):
            assert f.read_bytes() == (again.seq_dir(split, sid) / "frames" / f.name).read_bytes()
        spec = load_degradation(out, split, sid)
        assert spec.kind == kind
        specs.append(json.dumps(spec.params, sort_keys=True))
    assert len(set(specs)) == len(specs)
    assert DatasetManifest.load(tmp_path / kind).degradation == kind
    with pytest.raises(FileExistsError):
        degrade_dataset(small_dataset, kind, 3, tmp_path / kind)
