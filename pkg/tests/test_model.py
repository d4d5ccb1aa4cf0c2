import numpy as np
import pytest

from spectmamba import autodiff as ad
from spectmamba.model import SpectMamba, chunk_owner, chunk_starts, stitch_chunks
from spectmamba.optim import AdamState, adam_step
from spectmamba.decoder import supervised_loss

from conftest import desk_config, tiny_encoder


def test_chunk_layout():
    assert chunk_starts(10, 16) == [0]
    starts = chunk_starts(40, 16)
    assert starts[:3] == [0, 8, 16] and starts[-1] == 24
    owner = chunk_owner(40, starts, 16)
    assert owner[0] == 0 and owner[-1] == len(starts) - 1
    # every frame is owned by a chunk that contains it
    for f, o in enumerate(owner):
        assert starts[o] <= f < starts[o] + 16


def test_single_chunk_equals_whole_clip():
    cfg = tiny_encoder(max_frames=32)
    model = SpectMamba.init(cfg, np.random.default_rng(0), np.float64)
    x = np.random.default_rng(1).random((3, 320, 20))
    with ad.no_grad():
        whole = model(x[None]).f0_logits.data[0]
    np.testing.assert_array_equal(model.f0_logits(x), whole)


@pytest.mark.parametrize("frames", [17, 24, 40])
def test_stitched_frames_equal_owner_pass(frames):
    size = 16
    cfg = tiny_encoder(max_frames=size)
    model = SpectMamba.init(cfg, np.random.default_rng(0), np.float64)
    x = np.random.default_rng(2).random((3, 320, frames))
    out = model.f0_logits(x)
    starts = chunk_starts(frames, size)
    owner = chunk_owner(frames, starts, size)
    with ad.no_grad():
        passes = [model(x[None, ..., s:s + size]).f0_logits.data[0] for s in starts]
    for f in range(frames):
        np.testing.assert_array_equal(out[f], passes[owner[f]][f - starts[owner[f]]])
    assert out.shape == (frames, 321)
    np.testing.assert_array_equal(stitch_chunks(passes, starts, frames, size), out)


def test_one_clip_loss_decreases_monotonically(labeled_items):
    cfg = desk_config()
    model = SpectMamba.init(cfg.encoder, np.random.default_rng(0))
    item = labeled_items[0]
    x = item.feature.data[None]
    state = AdamState()
    losses = []
    for _ in range(50):
        loss, _ = supervised_loss(model(x), item.labels.f0_class[None], item.labels.note_class[None])
        grads = ad.backward(loss, model.params)
        state = adam_step(model.params, grads, state)
        losses.append(loss.item())
    assert min(losses) >= 0
    assert all(b < a for a, b in zip(losses, losses[1:]))
