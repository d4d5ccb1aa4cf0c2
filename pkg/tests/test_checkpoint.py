import numpy as np
import pytest

from spectmamba import checkpoint as ck
from spectmamba.cbr import ConfidenceState
from spectmamba.errors import AudioIOError, ValidationError
from spectmamba.optim import AdamState


def sample_checkpoint():
    rng = np.random.default_rng(0)
    params = {"a.weight": rng.standard_normal((3, 4)).astype(np.float32),
              "b": rng.standard_normal(5).astype(np.float32)}
    adam = AdamState(7, {k: v * 0.1 for k, v in params.items()},
                     {k: v * v for k, v in params.items()})
    return ck.Checkpoint(params, {"encoder": {"d_model": 4}}, ConfidenceState(0.97, 0.96, 0.999, 7),
                         adam, step=7)


def test_round_trip_is_bitwise(tmp_path):
    c = sample_checkpoint()
    ck.save(tmp_path / "c.bin", c)
    back = ck.load(tmp_path / "c.bin")
    for k, v in c.params.items():
        assert back.params[k].tobytes() == v.tobytes()
        assert back.adam.m[k].tobytes() == c.adam.m[k].tobytes()
    assert back.config == c.config and back.confidence == c.confidence
    assert back.step == 7 and back.adam.step == 7
    assert ck.to_bytes(back) == ck.to_bytes(c)


def test_corrupt_files(tmp_path):
    raw = ck.to_bytes(sample_checkpoint())
    with pytest.raises(ValidationError, match="magic"):
        ck.from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValidationError):
        ck.from_bytes(raw[:8])
    with pytest.raises(ValidationError, match="too short"):
        ck.from_bytes(raw[:-4])
    with pytest.raises(AudioIOError):
        ck.load(tmp_path / "nope.bin")
