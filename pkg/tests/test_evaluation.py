import inspect
import json

import numpy as np
import pytest
import torch

from debiaslab.errors import ValidationError
from debiaslab.evaluation import (
    SweepConfig,
    SweepResult,
    artifact_prevalence,
    evaluate_external,
    reference_sweep_preset,
    predict_dataset,
    predict_tta,
    run_trap_sweep,
    scorecam,
)
from debiaslab.manifest import ARTIFACT_NAMES
from debiaslab.model import SmallCNN
from debiaslab.training import TrainConfig, load_images


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return SmallCNN()


@pytest.fixture(scope="module")
def eval_images(small_dataset):
    _, _, manifest = small_dataset
    ids = manifest.ids()[:24]
    return ids, load_images(manifest, ids)


class TestPredictTta:
    def test_defaults_to_fifty_replicas(self):
        assert inspect.signature(predict_tta).parameters["n_replicas"].default == 50

    def test_no_augment_replicas_collapse(self, model, eval_images):
        _, images = eval_images
        batch = list(images.values())
        one = predict_tta(model, batch, n_replicas=1, augment=False)
        many = predict_tta(model, batch, n_replicas=4, augment=False)
        assert np.allclose(one, many)
        with torch.no_grad():
            direct = torch.softmax(model(torch.stack(batch)), dim=1)[:, 1].numpy()
        assert np.allclose(one, direct, atol=1e-6)

    def test_augmented_deterministic_per_seed(self, model, eval_images):
        _, images = eval_images
        batch = list(images.values())
        a = predict_tta(model, batch, n_replicas=3, augment=True, seed=1)
        b = predict_tta(model, batch, n_replicas=3, augment=True, seed=1)
        c = predict_tta(model, batch, n_replicas=3, augment=True, seed=2)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert (a >= 0).all() and (a <= 1).all()

    def test_replica_count_validated(self, model, eval_images):
        _, images = eval_images
        with pytest.raises(ValidationError):
            predict_tta(model, list(images.values()), n_replicas=0)

    def test_batching_invariant(self, model, eval_images):
        _, images = eval_images
        batch = list(images.values())
        a = predict_tta(model, batch, n_replicas=1, augment=False, batch_size=5)
        b = predict_tta(model, batch, n_replicas=1, augment=False, batch_size=128)
        assert np.allclose(a, b, atol=1e-6)

    def test_replica_averaging_reduces_seed_variance(self, model, eval_images):
        _, images = eval_images
        batch = list(images.values())[:8]
        single = np.stack(
            [predict_tta(model, batch, n_replicas=1, augment=True, seed=s) for s in range(12)]
        )
        averaged = np.stack(
            [predict_tta(model, batch, n_replicas=10, augment=True, seed=s) for s in range(12)]
        )
        assert averaged.std(axis=0).mean() < single.std(axis=0).mean()


class TestPredictDataset:
    def test_alignment_and_provenance(self, model, small_dataset, eval_images):
        _, _, manifest = small_dataset
        ids, images = eval_images
        ps = predict_dataset(model, manifest, ids=ids, n_replicas=2, images=images, seed=3)
        assert ps.ids == tuple(ids)
        assert np.array_equal(ps.labels, manifest.labels(ids))
        assert ps.provenance["tta_replicas"] == 2


class _StubCamModel:
    """Fixed spatial activations plus a transparent scoring rule, so the
    channel-weighting arithmetic can be recomputed by hand."""

    def __init__(self, acts, bias=0.0):
        self.acts = acts
        self.bias = bias

    def eval(self):
        return self

    def spatial_activations(self, x):
        return self.acts.unsqueeze(0)

    def __call__(self, x):
        score = x.sum(dim=(1, 2, 3)) + self.bias
        return torch.stack([torch.zeros_like(score), score], dim=1)


class TestScoreCam:
    @staticmethod
    def _oracle_map(model, image):
        """Recompute the map with explicit numpy loops over channels."""
        up = (
            torch.nn.functional.interpolate(
                model.acts.unsqueeze(0), size=image.shape[1:], mode="bilinear",
                align_corners=False,
            )[0]
            .numpy()
        )
        scores = []
        for channel in up:
            span = channel.max() - channel.min()
            norm = (channel - channel.min()) / span if span > 0 else np.zeros_like(channel)
            masked = image.numpy() * norm[None]
            scores.append(masked.sum() + model.bias)
        exp = np.exp(np.array(scores) - max(scores))
        weights = exp / exp.sum()
        grid = np.maximum(sum(w * c for w, c in zip(weights, up)), 0.0)
        return grid / grid.max() if grid.max() > 0 else grid

    def test_matches_brute_force_on_two_channels(self):
        torch.manual_seed(4)
        acts = torch.rand(2, 4, 4) * 2 - 0.5
        image = torch.rand(3, 16, 16)
        sal = scorecam(_StubCamModel(acts), image)
        assert np.allclose(sal.grid, self._oracle_map(_StubCamModel(acts), image), atol=1e-5)

    def test_single_channel_reduces_to_its_relu(self):
        acts = torch.rand(1, 4, 4) * 2 - 0.5
        image = torch.rand(3, 16, 16)
        sal = scorecam(_StubCamModel(acts), image)
        up = torch.nn.functional.interpolate(
            acts.unsqueeze(0), size=(16, 16), mode="bilinear", align_corners=False
        )[0, 0]
        expected = torch.relu(up)
        expected = (expected / expected.max()).numpy()
        assert np.allclose(sal.grid, expected, atol=1e-6)

    def test_invariant_to_uniform_score_shift(self):
        torch.manual_seed(5)
        acts = torch.rand(3, 4, 4)
        image = torch.rand(3, 16, 16)
        plain = scorecam(_StubCamModel(acts, bias=0.0), image)
        shifted = scorecam(_StubCamModel(acts, bias=100.0), image)
        assert np.allclose(plain.grid, shifted.grid, atol=1e-5)

    def test_map_properties(self, model, eval_images):
        _, images = eval_images
        image = next(iter(images.values()))
        sal = scorecam(model, image)
        assert sal.grid.shape == image.shape[1:]
        assert sal.grid.min() >= 0.0
        assert not sal.flat
        assert sal.grid.max() == pytest.approx(1.0)

    def test_flat_activations_flagged(self, eval_images):
        _, images = eval_images
        dead = SmallCNN()
        with torch.no_grad():
            for p in dead.parameters():
                p.zero_()
        sal = scorecam(dead, next(iter(images.values())))
        assert sal.flat
        assert (sal.grid == 0).all()

    def test_input_validation(self, model):
        with pytest.raises(ValidationError):
            scorecam(model, torch.rand(1, 3, 32, 32))


class TestEvaluateExternal:
    def test_report_fields(self, model, small_dataset, tmp_path):
        _, _, manifest = small_dataset
        external = manifest.subset(manifest.ids()[:30])
        report = evaluate_external(model, external, n_replicas=1, augment=False)
        assert report.n_samples == 30
        assert report.n_positive == int(external.labels().sum())
        assert 0.0 <= report.auc <= 1.0
        assert not report.noisecrop
        assert set(report.artifact_prevalence) == set(ARTIFACT_NAMES)

    def test_noisecrop_requires_workdir(self, model, small_dataset):
        _, _, manifest = small_dataset
        with pytest.raises(ValidationError):
            evaluate_external(model, manifest, with_noisecrop=True)

    def test_noisecrop_path(self, model, small_dataset, tmp_path):
        _, _, manifest = small_dataset
        external = manifest.subset(manifest.ids()[:16])
        report = evaluate_external(
            model, external, with_noisecrop=True, work_dir=tmp_path, n_replicas=1, augment=False
        )
        assert report.noisecrop
        assert (tmp_path / "noisecrop" / "manifest.csv").exists()


class TestSweepConfig:
    def test_reference_preset(self):
        preset = reference_sweep_preset()
        assert preset.n_seeds == 10
        assert preset.tta_replicas == 50
        assert reference_sweep_preset(n_seeds=2).n_seeds == 2


class TestSweepResult:
    def _cells(self):
        cells = []
        for seed, auc in enumerate((0.6, 0.7, 0.8)):
            cells.append(
                {"factor": 1.0, "method": "erm", "seed": seed,
                 "auc": {"original": auc, "noisecrop": auc + 0.1}}
            )
        return cells

    def test_aggregates_mean_and_stderr(self):
        result = SweepResult(cells=self._cells(), n_seeds=3)
        agg = result.aggregates()
        orig = agg[(1.0, "erm", "original")]
        values = np.array([0.6, 0.7, 0.8])
        assert orig["mean"] == pytest.approx(values.mean())
        assert orig["stderr"] == pytest.approx(values.std(ddof=1) / np.sqrt(3))
        assert orig["n_seeds"] == 3
        assert agg[(1.0, "erm", "noisecrop")]["mean"] == pytest.approx(0.8)

    def test_json_roundtrip(self):
        result = SweepResult(cells=self._cells(), n_seeds=3)
        back = SweepResult.from_json(result.to_json())
        assert back.cells == result.cells
        assert back.aggregates() == result.aggregates()
        payload = json.loads(result.to_json())
        assert "1.0|erm|original" in payload["aggregates"]


class TestRunTrapSweep:
    def test_tiny_sweep_layout(self, small_dataset, tmp_path):
        _, _, manifest = small_dataset
        config = SweepConfig(
            factors=(0.0, 1.0), methods=("erm",), n_seeds=1,
            tta_replicas=1, tta_augment=False, seed=5,
        )
        trains = {"erm": TrainConfig(max_epochs=1, batch_size=32, val_fraction=0.2)}
        result = run_trap_sweep(manifest, tmp_path, config, trains)
        assert result.failures == []
        assert len(result.cells) == 2
        for factor in (0.0, 1.0):
            cell_dir = tmp_path / f"factor_{factor}" / "erm" / "seed_0"
            assert (cell_dir / "result.json").exists()
            assert (cell_dir / "model.bin").exists()
        saved = SweepResult.from_json((tmp_path / "sweep_result.json").read_text())
        assert saved.cells == result.cells
        for cell in result.cells:
            assert set(cell["auc"]) == {"original", "noisecrop"}

    def test_cell_failures_collected(self, small_dataset, tmp_path):
        import dataclasses

        from debiaslab.manifest import DatasetManifest

        _, _, manifest = small_dataset
        records = tuple(
            dataclasses.replace(r, image_path="missing.png") for r in manifest.records
        )
        broken = DatasetManifest(records, name="broken", provenance=dict(manifest.provenance))
        config = SweepConfig(
            factors=(0.0,), methods=("erm",), n_seeds=1, tta_replicas=1, with_noisecrop=False
        )
        result = run_trap_sweep(broken, tmp_path, config)
        assert result.cells == []
        assert len(result.failures) == 1
        assert result.failures[0]["factor"] == 0.0
