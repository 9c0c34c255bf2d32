import numpy as np
import pytest

from selfdistill import container
from selfdistill.errors import FormatError


def test_roundtrip_and_byte_stability(tmp_path):
    header = {"b": 1, "a": [1, 2]}
    sections = {"s": {"x": np.arange(6, dtype=np.float64).reshape(2, 3), "y": np.array([3, 1], dtype=np.int64)}}
    blob = container.dumps(header, sections)
    assert blob[:8] == b"SDISTIL1"
    assert container.dumps(header, sections) == blob
    h, s = container.loads(blob)
    assert h["a"] == [1, 2]
    assert s["s"]["x"].dtype == np.float32 and s["s"]["y"].dtype == np.uint32
    np.testing.assert_array_equal(s["s"]["x"], sections["s"]["x"])
    digest = container.save(tmp_path / "c.bin", header, sections)
    assert digest == container.sha256_file(tmp_path / "c.bin")


def test_corrupt_payloads_raise():
    blob = container.dumps({}, {"s": {"x": np.zeros(4)}})
    with pytest.raises(FormatError):
        container.loads(b"WRONGMAG" + blob[8:])
    with pytest.raises(FormatError):
        container.loads(blob[:-3])
