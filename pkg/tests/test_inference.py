import numpy as np
import pytest

from mctloc import data, encoder, inference, studies
from mctloc.config import ModelConfig, TrainConfig

CFG = ModelConfig(num_classes=3, grid=4, embed_dim=16, heads=2, layers=3, image_size=32, fuse_layers=2)
SPEC = data.DatasetSpec(num_samples=6, eval_samples=6, image_size=32, min_size=8, max_size=14)


@pytest.fixture(scope="module")
def model():
    return encoder.init_params(CFG, 0)


@pytest.fixture(scope="module")
def eval_data():
    return data.generate(SPEC, "eval")


class TestLocalize:
    def test_all_kinds_in_unit_range(self, model, eval_data):
        res = inference.localize(eval_data.images, CFG, model, eval_data.labels)
        assert set(res) == set(inference.ALL_KINDS)
        for m in res.values():
            assert m.maps.shape == (6, 3, 4, 4)
            assert np.all((m.maps >= 0) & (m.maps <= 1))

    def test_absent_classes_zeroed(self, model, eval_data):
        res = inference.localize(eval_data.images, CFG, model, eval_data.labels)
        absent = eval_data.labels == 0
        for m in res.values():
            assert np.all(m.maps[absent] == 0)

    def test_prediction_filter(self, model, eval_data):
        res = inference.localize(eval_data.images, CFG, model)
        expected = inference.class_filter_from_scores(
            encoder.forward(eval_data.images, CFG, model).tokens.data[:, :3].mean(-1))
        np.testing.assert_array_equal(res["attention"].class_filter, expected)

    def test_refinement_with_zero_iterations_keeps_normalized_maps(self, model, eval_data):
        res = inference.localize(eval_data.images, CFG, model, eval_data.labels, iterations=0)
        np.testing.assert_allclose(res["refined"].maps, res["fused"].maps)

    def test_k_changes_attention_maps(self, model, eval_data):
        a = inference.localize(eval_data.images, CFG, model, eval_data.labels, k=1)["attention"].maps
        b = inference.localize(eval_data.images, CFG, model, eval_data.labels, k=3)["attention"].maps
        assert not np.array_equal(a, b)


class TestEvaluate:
    def test_reports(self, model, eval_data):
        reps = inference.evaluate(eval_data, CFG, model, kinds=("attention", "fused"), batch_size=4)
        assert set(reps) == {"attention", "fused"}
        for kind, rep in reps.items():
            assert 0 <= rep.miou <= 1 and 0 <= rep.fp <= 1 and 0 <= rep.fn <= 1
            assert rep.row()["kind"] == kind and rep.row()["k"] == 2

    def test_batch_size_independent(self, model, eval_data):
        a = inference.evaluate(eval_data, CFG, model, kinds=("refined",), batch_size=6)["refined"]
        b = inference.evaluate(eval_data, CFG, model, kinds=("refined",), batch_size=4)["refined"]
        assert a.miou == b.miou and a.pxap == b.pxap


@pytest.fixture(scope="module")
def setup(eval_data):
    return studies.StudySetup(data.generate(SPEC, "train"), eval_data, CFG, TrainConfig(epochs=1, batch_size=3))


class TestStudies:
    def test_k_sweep_rows(self, setup, model):
        rows = studies.k_sweep(setup, params=model, kinds=("attention",))
        assert [r["k"] for r in rows] == [1, 2, 3]

    def test_pipeline_rows(self, setup, model):
        rows = studies.pipeline_study(setup, params=model)
        assert [r["stage"] for r in rows] == ["attention", "+affinity", "+patchcam", "+patchcam+affinity"]

    def test_cct_depth_rows(self, setup):
        rows = studies.cct_depth_study(setup)
        assert [r["cct_layers"] for r in rows] == [0, 1, 2, 3]

    def test_pooling_rows(self, setup):
        rows = studies.pooling_study(setup, lambdas=(0.9,))
        assert [(r["pooling"], r["lambda"]) for r in rows] == [("gmp", ""), ("gap", ""), ("gwrp", 0.9)]

    def test_csv_stable(self, setup, model):
        rows = studies.k_sweep(setup, params=model)
        text = studies.rows_to_csv(rows)
        assert text == studies.rows_to_csv(studies.k_sweep(setup, params=model))
        assert text.splitlines()[0] == "k,kind,miou,fp,fn,piou,pxap"

    def test_unknown_study(self, setup):
        with pytest.raises(ValueError):
            studies.run("nope", setup)
