import pytest
import torch

from boundaryseg.checkpoints import (MANIFEST_SUFFIX, ManifestMismatchError,
                                     load_checkpoint, manifest_hash,
                                     restore_model, save_checkpoint)
from boundaryseg.model import Architecture, SegmentationModel
from boundaryseg.prednet import PredNetConfig

from conftest import TINY_CONFIG


def make_model(seed=0, config=TINY_CONFIG):
    torch.manual_seed(seed)
    return SegmentationModel(Architecture.EDS_RRM_OURS, config)


class TestSaveLoad:
    def test_round_trip_parameters(self, tmp_path):
        model = make_model()
        path = save_checkpoint(tmp_path / "m.pt", model, step=7)
        restored, payload = restore_model(path)
        assert payload["step"] == 7
        assert restored.architecture is Architecture.EDS_RRM_OURS
        assert restored.config == TINY_CONFIG
        for name, tensor in model.state_dict().items():
            assert torch.equal(tensor, restored.state_dict()[name]), name

    def test_manifest_sidecar_written(self, tmp_path):
        model = make_model()
        path = save_checkpoint(tmp_path / "m.pt", model)
        manifest = (tmp_path / ("m.pt" + MANIFEST_SUFFIX)).read_text().splitlines()
        assert manifest[0].startswith("config_hash ")
        names = {line.split(" ", 1)[0] for line in manifest[1:]}
        assert names == set(model.state_dict().keys())

    def test_optimizer_state_round_trip(self, tmp_path):
        model = make_model()
        opt = torch.optim.Adam(model.parameters(), lr=1e-4)
        out = sum(o.sum() for o in model(torch.randn(1, 3, 64, 64)))
        out.backward()
        opt.step()
        path = save_checkpoint(tmp_path / "m.pt", model, step=1, optimizer=opt)
        payload = load_checkpoint(path)
        assert "optimizer" in payload
        opt2 = torch.optim.Adam(model.parameters(), lr=1e-4)
        opt2.load_state_dict(payload["optimizer"])
        assert opt2.state_dict()["param_groups"] == opt.state_dict()["param_groups"]

    def test_manifest_hash_tracks_content(self, tmp_path):
        a = save_checkpoint(tmp_path / "a.pt", make_model())
        b = save_checkpoint(tmp_path / "b.pt", make_model(
            config=PredNetConfig(input_conv_filters=16,
                                 encoder_stage_blocks=(1,) * 6,
                                 encoder_stage_filters=(16,) * 6,
                                 bridge_filters=16)))
        assert manifest_hash(a) == manifest_hash(tmp_path / "a.pt")
        assert manifest_hash(a) != manifest_hash(b)


class TestRestoreValidation:
    def test_shape_mismatch_lists_offenders(self, tmp_path):
        model = make_model()
        path = save_checkpoint(tmp_path / "m.pt", model)
        payload = load_checkpoint(path)
        payload["model"]["prediction.inconv.weight"] = torch.randn(4, 3, 3, 3)
        torch.save(payload, path)
        with pytest.raises(ManifestMismatchError, match="prediction.inconv.weight"):
            restore_model(path)

    def test_missing_parameter_detected(self, tmp_path):
        model = make_model()
        path = save_checkpoint(tmp_path / "m.pt", model)
        payload = load_checkpoint(path)
        del payload["model"]["prediction.inconv.weight"]
        torch.save(payload, path)
        with pytest.raises(ManifestMismatchError, match="missing parameter"):
            restore_model(path)

    def test_unexpected_parameter_detected(self, tmp_path):
        model = make_model()
        path = save_checkpoint(tmp_path / "m.pt", model)
        payload = load_checkpoint(path)
        payload["model"]["prediction.ghost.weight"] = torch.randn(2, 2)
        torch.save(payload, path)
        with pytest.raises(ManifestMismatchError, match="unexpected parameter"):
            restore_model(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            restore_model(tmp_path / "nope.pt")
