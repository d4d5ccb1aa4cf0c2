import json

import numpy as np
import pytest

from spectmamba.cfp import cfp_from_audio, HOP_SECONDS, SAMPLE_RATE, hz_to_f0_class, read_track, read_wav
from spectmamba.errors import ConfigError
from spectmamba.synth import (SynthSpec, export_corpus, f0_trajectory, synth_clip, synth_corpus)


def test_constant_tone_labels_and_energy():
    spec = SynthSpec(seconds=1.0, f0_hz=440.0, onset=0.25, offset=0.75)
    clip, labels = synth_clip(spec)
    assert clip.samples.size == SAMPLE_RATE and labels.f0_class.size == 100
    assert np.all(labels.f0_class[:25] == 0) and np.all(labels.f0_class[75:] == 0)
    assert np.all(labels.f0_class[25:75] == hz_to_f0_class(440.0))
    assert np.abs(clip.samples[: int(0.2 * SAMPLE_RATE)]).max() == 0
    spectrum = np.abs(np.fft.rfft(clip.samples))
    assert abs(spectrum.argmax() - 440) <= 1


def test_constant_tone_cfp_peak():
    clip, labels = synth_clip(SynthSpec(seconds=1.0, f0_hz=440.0))
    assert np.all(labels.f0_class == 231)
    peaks = cfp_from_audio(clip).data[2].argmax(axis=0)
    # 440 Hz sits at fractional bin 229.63, so the one-bin tolerance of the CFP checks applies
    assert np.mean(np.abs(peaks - 230) <= 1) >= 0.95


def test_zero_depth_vibrato_is_constant():
    a = synth_clip(SynthSpec(family="vibrato", f0_hz=300.0, vibrato_depth_cents=0.0))
    b = synth_clip(SynthSpec(family="constant", f0_hz=300.0))
    np.testing.assert_array_equal(a[0].samples, b[0].samples)
    np.testing.assert_array_equal(a[1].f0_hz, b[1].f0_hz)


def test_glide_and_vibrato_trajectories():
    t = np.array([0.0, 0.5, 1.0])
    glide = SynthSpec(family="glide", f0_hz=200.0, glide_to_hz=400.0)
    np.testing.assert_allclose(f0_trajectory(glide, t), [200.0, 200 * 2 ** 0.5, 400.0])
    vib = SynthSpec(family="vibrato", f0_hz=300.0, vibrato_depth_cents=50.0)
    cents = 1200 * np.log2(f0_trajectory(vib, np.linspace(0, 1, 1000)) / 300.0)
    assert np.abs(cents).max() == pytest.approx(50.0, abs=0.1)


def test_invalid_specs():
    with pytest.raises(ConfigError):
        synth_clip(SynthSpec(f0_hz=20.0))
    with pytest.raises(ConfigError):
        synth_clip(SynthSpec(family="warble"))
    with pytest.raises(ConfigError):
        SynthSpec.from_dict({"pitch": 3})


def test_corpus_is_deterministic_and_varied():
    a = synth_corpus(4, 0.5, seed=3)
    b = synth_corpus(4, 0.5, seed=3)
    for (sa, ca, la), (sb, cb, lb) in zip(a, b):
        assert sa == sb
        np.testing.assert_array_equal(ca.samples, cb.samples)
        np.testing.assert_array_equal(la.f0_class, lb.f0_class)
    assert len({s.f0_hz for s, _, _ in a}) == 4
    assert np.abs(a[0][1].samples).max() <= 0.9 + 1e-12


def test_export_corpus(tmp_path):
    corpus = synth_corpus(2, 0.5, seed=4)
    manifest = export_corpus(tmp_path, corpus)
    doc = json.loads(manifest.read_text())
    assert [e["audio"] for e in doc["entries"]] == ["clip_0000.wav", "clip_0001.wav"]
    clip = read_wav(tmp_path / "clip_0000.wav")
    np.testing.assert_allclose(clip.samples, corpus[0][1].samples, atol=1e-7)
    t, f = read_track(tmp_path / "clip_0000.csv")
    np.testing.assert_allclose(t, np.arange(50) * HOP_SECONDS)
    np.testing.assert_allclose(f, corpus[0][2].f0_hz, atol=5e-4)  # 3 decimals on disk
    unl = export_corpus(tmp_path / "u", corpus, labeled=False)
    assert all("labels" not in e for e in json.loads(unl.read_text())["entries"])
