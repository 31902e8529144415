import numpy as np
import pytest
import torch

from debiaslab.errors import SchemaError
from debiaslab.model import SmallCNN, WEIGHTS_MAGIC, config_hash, load_weights, save_weights


class TestSmallCNN:
    def test_shapes(self):
        model = SmallCNN()
        x = torch.rand(4, 3, 64, 64)
        assert model.spatial_activations(x).shape == (4, 64, 8, 8)
        assert model.features(x).shape == (4, 64)
        assert model(x).shape == (4, 2)

    def test_head_mask_zeroes_features(self):
        model = SmallCNN()
        z = torch.rand(2, 64)
        mask = torch.zeros(2, 64)
        out = model.head_forward(z, mask)
        expected = model.head(torch.zeros(2, 64))
        assert torch.allclose(out, expected)

    def test_forward_composes(self):
        model = SmallCNN()
        x = torch.rand(3, 3, 32, 32)
        assert torch.allclose(model(x), model.head_forward(model.features(x)))


class TestWeightsIO:
    def test_roundtrip_exact(self, tmp_path):
        torch.manual_seed(0)
        model = SmallCNN()
        path = save_weights(model, tmp_path / "w.bin", meta={"note": "x"})
        clone = SmallCNN()
        meta = load_weights(clone, path)
        assert meta == {"note": "x"}
        for a, b in zip(model.state_dict().values(), clone.state_dict().values()):
            assert torch.equal(a, b)

    def test_deterministic_bytes(self, tmp_path):
        torch.manual_seed(1)
        model = SmallCNN()
        p1 = save_weights(model, tmp_path / "a.bin", meta={"k": 1})
        p2 = save_weights(model, tmp_path / "b.bin", meta={"k": 1})
        assert p1.read_bytes() == p2.read_bytes()

    def test_magic_checked(self, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(SchemaError):
            load_weights(SmallCNN(), bad)

    def test_magic_prefix(self, tmp_path):
        torch.manual_seed(2)
        path = save_weights(SmallCNN(), tmp_path / "w.bin")
        assert path.read_bytes().startswith(WEIGHTS_MAGIC)


class TestConfigHash:
    def test_stable_and_order_independent(self):
        assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
        assert config_hash({"a": 1}) != config_hash({"a": 2})
        assert len(config_hash({})) == 16
