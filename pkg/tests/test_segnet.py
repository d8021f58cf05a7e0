import numpy as np
import pytest

from stationlab import segnet
from stationlab.errors import ConfigurationError, ContractViolation, TrainingDiverged
from stationlab.metrics import dice
from stationlab.phantom import config_from_dict, generate_case
from stationlab.pipeline import normalize_image

from helpers import small_phantom_dict


def small_case(seed=3, sigma=10.0):
    data = small_phantom_dict()
    data["noise_sigma"] = sigma
    if sigma == 0.0:
        pass
    cfg = config_from_dict(data)
    return cfg, generate_case(cfg, seed)


class TestBuildModel:
    def test_same_config_bitwise_identical(self):
        cfg = segnet.NetConfig(in_channels=1, class_count=3, seed=11)
        a = segnet.build_model(cfg)
        b = segnet.build_model(cfg)
        for pa, pb in zip(a.params, b.params):
            assert pa.data.tobytes() == pb.data.tobytes()

    def test_parameter_count_matches_schema_hand_count(self):
        # independent recount of the documented schema for depth 3, width 8
        cin, classes, w = 1, 5, [8, 16, 32]
        expected = w[0] * cin * 27 + w[0]                      # enc0
        for i in (1, 2):                                       # down + enc refine
            expected += w[i] * w[i - 1] * 27 + w[i]
            expected += w[i] * w[i] * 27 + w[i]
        for i in (1, 0):                                       # decoder fuse + refine
            expected += w[i] * (w[i] + w[i + 1]) + w[i]
            expected += w[i] * w[i] * 27 + w[i]
        expected += classes * w[0] + classes                   # head
        cfg = segnet.NetConfig(in_channels=cin, class_count=classes)
        model = segnet.build_model(cfg)
        assert cfg.parameter_count() == expected
        assert model.parameter_count() == expected

    def test_single_class_rejected(self):
        with pytest.raises(ConfigurationError):
            segnet.build_model(segnet.NetConfig(in_channels=1, class_count=1))

    def test_shallow_depth_rejected(self):
        with pytest.raises(ConfigurationError):
            segnet.build_model(segnet.NetConfig(in_channels=1, class_count=2, depth=1))


class TestForward:
    def test_output_shape_and_normalization(self):
        model = segnet.build_model(segnet.NetConfig(1, 4, seed=0))
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 8, 16, 16)).astype(np.float32)
        probs = segnet.forward(model, x).data
        assert probs.shape == (4, 8, 16, 16)
        np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-5)

    def test_bitwise_deterministic(self):
        model = segnet.build_model(segnet.NetConfig(1, 3, seed=5))
        x = np.random.default_rng(1).standard_normal((1, 8, 8, 8)).astype(np.float32)
        assert segnet.forward(model, x).data.tobytes() == \
            segnet.forward(model, x).data.tobytes()

    def test_indivisible_extent_rejected(self):
        model = segnet.build_model(segnet.NetConfig(1, 3, seed=5))
        with pytest.raises(ConfigurationError):
            segnet.forward(model, np.zeros((1, 6, 8, 8), dtype=np.float32))

    def test_wrong_channel_count_rejected(self):
        model = segnet.build_model(segnet.NetConfig(2, 3, seed=5))
        with pytest.raises(ContractViolation):
            segnet.forward(model, np.zeros((1, 8, 8, 8), dtype=np.float32))


class TestPredictLabels:
    def test_argmax(self):
        probs = np.zeros((3, 1, 1, 1), dtype=np.float32)
        probs[:, 0, 0, 0] = (0.2, 0.5, 0.3)
        assert segnet.labels_from_probs(probs)[0, 0, 0] == 1

    def test_tie_breaks_to_lowest_class(self):
        probs = np.zeros((2, 1, 1, 1), dtype=np.float32)
        probs[:, 0, 0, 0] = (0.5, 0.5)
        assert segnet.labels_from_probs(probs)[0, 0, 0] == 0

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(8)
        probs = rng.uniform(0.01, 1.0, size=(4, 3, 3, 3)).astype(np.float32)
        a = segnet.labels_from_probs(probs)
        b = segnet.labels_from_probs(np.log(probs) * 2.0 + 1.0)
        np.testing.assert_array_equal(a, b)


class TestTrain:
    def test_single_case_overfit(self):
        # noiseless single case: run-to-convergence sanity for the optimizer
        cfg, case = small_case(seed=4, sigma=0.0)
        img = normalize_image(case.image)
        target = case.station_labels.astype(np.int64)
        model = segnet.build_model(segnet.NetConfig(1, 5, seed=2))
        model = segnet.train(model, [("c0", img, target)], epochs=80, lr=1e-2, seed=7)
        pred = segnet.predict_labels(model, img)
        scores = [dice(pred == c, target == c) for c in range(1, 5)]
        assert float(np.mean(scores)) >= 0.95, scores

    def test_loss_trend_improves(self):
        cfg, _ = small_case()
        cases = [generate_case(cfg, s) for s in (11, 12, 13, 14)]
        dataset = [(c.case_id, normalize_image(c.image),
                    c.station_labels.astype(np.int64)) for c in cases]
        model = segnet.build_model(segnet.NetConfig(1, 5, seed=0))
        model = segnet.train(model, dataset, epochs=12, lr=3e-3, seed=21)
        assert np.mean(model.loss_log[-5:]) < np.mean(model.loss_log[:5])

    def test_loss_log_bitwise_deterministic(self):
        cfg, case = small_case()
        dataset = [("c0", normalize_image(case.image),
                    case.station_labels.astype(np.int64))]

        def run():
            model = segnet.build_model(segnet.NetConfig(1, 5, seed=6))
            segnet.train(model, dataset, epochs=4, lr=1e-3, seed=3)
            return np.asarray(model.loss_log, dtype=np.float64).tobytes()

        assert run() == run()

    def test_out_of_range_target_rejected(self):
        cfg, case = small_case()
        bad = np.full(case.station_labels.shape, 9, dtype=np.int64)
        model = segnet.build_model(segnet.NetConfig(1, 5, seed=6))
        with pytest.raises(ContractViolation):
            segnet.train(model, [("c0", normalize_image(case.image), bad)],
                         epochs=1)

    def test_empty_dataset_rejected(self):
        model = segnet.build_model(segnet.NetConfig(1, 5, seed=6))
        with pytest.raises(ContractViolation):
            segnet.train(model, [], epochs=1)

    def test_divergence_reports_epoch_and_case(self, monkeypatch):
        cfg, case = small_case()
        dataset = [("bad_case", normalize_image(case.image),
                    case.station_labels.astype(np.int64))]
        model = segnet.build_model(segnet.NetConfig(1, 5, seed=6))

        def nan_loss(probs, target, class_count, graph=None):
            from stationlab.numerics import Tensor
            return Tensor(np.asarray(np.nan, dtype=np.float32).reshape(()))

        monkeypatch.setattr(segnet.nm, "dice_ce_loss", nan_loss)
        with pytest.raises(TrainingDiverged, match="epoch 0.*bad_case"):
            segnet.train(model, dataset, epochs=1)

    def test_access_log_records_cases(self):
        cfg, case = small_case()
        dataset = [("c9", normalize_image(case.image),
                    case.station_labels.astype(np.int64))]
        model = segnet.build_model(segnet.NetConfig(1, 5, seed=6))
        log: set = set()
        segnet.train(model, dataset, epochs=1, access_log=log)
        assert log == {"c9"}


class TestCheckpointIO:
    def test_round_trip_preserves_predictions(self, tmp_path):
        cfg, case = small_case()
        img = normalize_image(case.image)
        model = segnet.build_model(segnet.NetConfig(1, 5, seed=9))
        model.loss_log = [2.0, 1.5]
        path = tmp_path / "model.ckpt"
        segnet.save_model(model, path)
        loaded = segnet.load_model(path)
        assert loaded.loss_log == [2.0, 1.5]
        np.testing.assert_array_equal(segnet.predict_labels(model, img),
                                      segnet.predict_labels(loaded, img))
        for a, b in zip(model.params, loaded.params):
            assert a.data.tobytes() == b.data.tobytes()
