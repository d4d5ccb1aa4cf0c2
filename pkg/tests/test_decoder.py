import math

import numpy as np
import pytest

from spectmamba import autodiff as ad
from spectmamba.autodiff import Tensor, gradcheck
from spectmamba.cfp import (N_F0_CLASSES, N_NOTE_CLASSES, f0_class_to_hz, hz_to_f0_class,
                            note_of_f0_class)
from spectmamba.decoder import (NOTE_OF_CLASS, PredictionMaps, decode, decode_contour, expand_note,
                                heads, init_decoder, read_contour_csv, refine, supervised_loss,
                                write_contour_csv)
from spectmamba.errors import ValidationError
from spectmamba.metrics import hz_to_cents


def params64(d=8, note_decoder=True):
    return init_decoder(d, np.random.default_rng(0), np.float64, note_decoder)


def test_head_shapes_and_zero_weights():
    p = params64()
    enc = Tensor(np.random.default_rng(1).standard_normal((2, 5, 8)))
    f0, note = heads(enc, p)
    assert f0.shape == (2, 5, N_F0_CLASSES) and note.shape == (2, 5, N_NOTE_CLASSES)
    for name in list(p):
        if name.endswith("out.weight"):
            p[name] = Tensor(np.zeros_like(p[name].data))
        if name.endswith("out.bias"):
            p[name] = Tensor(np.arange(p[name].shape[0], dtype=np.float64))
    f0, note = heads(enc, p)
    np.testing.assert_array_equal(f0.data, np.broadcast_to(np.arange(321.0), f0.shape))
    np.testing.assert_array_equal(note.data, np.broadcast_to(np.arange(65.0), note.shape))


def test_expand_note_one_hot():
    note = np.zeros(N_NOTE_CLASSES)
    note[1] = 1.0
    out = expand_note(Tensor(note)).data
    assert np.flatnonzero(out).tolist() == [1, 2, 3, 4, 5]


def test_expand_note_exhaustive():
    assert N_NOTE_CLASSES - 1 == 64 == 320 // 5
    eye = expand_note(Tensor(np.eye(N_NOTE_CLASSES))).data   # row v = expansion of note v
    for v in range(N_NOTE_CLASSES):
        rows = set(np.flatnonzero(eye[v]).tolist())
        expected = {0} if v == 0 else set(range(5 * (v - 1) + 1, 5 * v + 1))
        assert rows == expected
    for c in range(N_F0_CLASSES):
        assert NOTE_OF_CLASS[c] == note_of_f0_class(c)


def test_refine_uniform_note_preserves_argmax():
    p = params64()
    p_f0 = np.random.default_rng(2).random(N_F0_CLASSES)
    out = refine(Tensor(np.zeros(N_F0_CLASSES)), Tensor(p_f0), p).data
    np.testing.assert_allclose(out, p_f0 / N_F0_CLASSES, atol=1e-15)
    assert out.argmax() == p_f0.argmax()


def test_refine_note_mass_concentrates():
    p = params64()
    note = np.zeros(N_NOTE_CLASSES)
    note[3] = 50.0
    p_f0 = np.random.default_rng(3).random(N_F0_CLASSES) + 0.5
    out = refine(expand_note(Tensor(note)), Tensor(p_f0), p).data
    inside = np.arange(11, 16)
    np.testing.assert_allclose(out[inside], p_f0[inside] / 5, rtol=1e-12)
    outside = np.setdiff1d(np.arange(N_F0_CLASSES), inside)
    assert np.abs(out[outside]).max() < 1e-15


def test_decode_shapes_and_ablation():
    enc = Tensor(np.random.default_rng(4).standard_normal((1, 6, 8)))
    maps = decode(enc, params64())
    assert maps.p_f0_refined.shape == (1, 6, N_F0_CLASSES)
    assert maps.p_note_expanded.shape == (1, 6, N_F0_CLASSES)
    plain_params = params64(note_decoder=False)
    assert not any(k.startswith(("note_head", "refine")) for k in plain_params)
    plain = decode(enc, plain_params)
    assert plain.p_note is None and plain.f0_logits is plain.p_f0


def test_supervised_loss_examples():
    f0c = np.array([[231, 0, 5]])
    nc = note_of_f0_class(f0c)
    peaked_f0 = np.eye(N_F0_CLASSES)[f0c] * 50.0
    peaked_note = np.eye(N_NOTE_CLASSES)[nc] * 50.0
    maps = PredictionMaps(Tensor(peaked_f0), Tensor(peaked_note), None, Tensor(peaked_f0))
    loss, parts = supervised_loss(maps, f0c, nc)
    assert loss.item() < 1e-5 and set(parts) == {"f0", "note"}

    uniform = PredictionMaps(Tensor(np.zeros((1, 3, 321))), Tensor(np.zeros((1, 3, 65))), None,
                             Tensor(np.zeros((1, 3, 321))))
    loss, _ = supervised_loss(uniform, f0c, nc)
    assert loss.item() == pytest.approx(math.log(321) + math.log(65), abs=1e-12)
    assert loss.item() == pytest.approx(9.9458, abs=1e-4)


def test_supervised_loss_rejects_mismatch():
    maps = PredictionMaps(Tensor(np.zeros((1, 3, 321))))
    with pytest.raises(ValidationError):
        supervised_loss(maps, np.zeros((1, 4), int), None)
    with pytest.raises(ValidationError):
        supervised_loss(maps, np.full((1, 3), 400), None)


def test_decoder_gradcheck():
    p = params64(d=4)
    names = list(p)
    enc = np.random.default_rng(5).standard_normal((1, 3, 4))
    f0c = np.array([[0, 120, 231]])
    nc = note_of_f0_class(f0c)

    def fn(enc_t, *tensors):
        return supervised_loss(decode(enc_t, dict(zip(names, tensors))), f0c, nc)[0]

    inputs = [enc] + [p[n].data for n in names]
    assert gradcheck(fn, inputs, eps=1e-4, max_entries=200, directions=2) < 1e-4


def test_decode_contour_examples():
    logits = np.zeros((3, N_F0_CLASSES))
    logits[0, 231] = 1.0
    logits[1, 0] = 1.0
    logits[2, 1] = 1.0
    voiced, f0 = decode_contour(logits)
    assert voiced.tolist() == [True, False, True]
    assert abs(1200 * math.log2(f0[0] / 440.0)) <= 10.0
    assert f0[1] == 0.0 and f0[2] == 31.0
    silent = decode_contour(np.eye(N_F0_CLASSES)[np.zeros(5, int)])[1]
    assert np.all(silent == 0)


def test_quantize_decode_round_trip():
    f = np.exp(np.random.default_rng(6).uniform(np.log(32), np.log(1200), 500))
    classes = hz_to_f0_class(f)
    _, back = decode_contour(np.eye(N_F0_CLASSES)[classes])
    assert np.abs(hz_to_cents(back) - hz_to_cents(f)).max() <= 10.0 + 10.0


def test_contour_csv(tmp_path):
    f0 = np.array([0.0, 220.0, 440.5, 0.0])
    write_contour_csv(tmp_path / "c.csv", f0)
    t, back = read_contour_csv(tmp_path / "c.csv")
    np.testing.assert_allclose(t, [0.0, 0.01, 0.02, 0.03])
    np.testing.assert_array_equal(back, f0)
    assert f0_class_to_hz(231) == pytest.approx(31 * 2 ** (230 / 60))
