import numpy as np
import pytest

from crnn import ctc, model as M, synth, training
from crnn.errors import ConfigError

DIGITS = ctc.Alphabet("0123456789")


class _StubModel:
    """Minimal stand-in exposing scores_batch and alphabet for metric tests."""

    def __init__(self, alphabet, per_sample_scores):
        self.alphabet = alphabet
        self._scores = per_sample_scores

    def scores_batch(self, images, train=False):
        n = images.shape[0]
        return self._scores[:n]


def one_hot_scores(path, alphabet, scale=40.0):
    scores = np.zeros((len(path), alphabet.num_classes))
    for t, index in enumerate(alphabet.path_to_indices(path)):
        scores[t, index] = scale
    return scores


class TestEvaluate:
    def test_perfect_predictions(self):
        alphabet = ctc.Alphabet("ab")
        scores = np.stack([
            one_hot_scores("a-b-", alphabet),
            one_hot_scores("bb--", alphabet),
        ])
        stub = _StubModel(alphabet, scores)
        images = np.zeros((2, 1, 32, 16), dtype=np.uint8)
        metrics = training.evaluate(stub, images, ["ab", "b"])
        assert metrics.sequence_accuracy == 1.0
        assert metrics.mean_edit_distance == 0.0
        assert metrics.mean_loss < 1e-6
        assert metrics.infeasible == 0

    def test_mixed_predictions(self):
        alphabet = ctc.Alphabet("ab")
        scores = np.stack([
            one_hot_scores("a---", alphabet),
            one_hot_scores("a-b-", alphabet),
        ])
        stub = _StubModel(alphabet, scores)
        images = np.zeros((2, 1, 32, 16), dtype=np.uint8)
        metrics = training.evaluate(stub, images, ["ab", "ab"])
        assert metrics.sequence_accuracy == 0.5
        assert metrics.mean_edit_distance == 0.5

    def test_infeasible_label_counted(self):
        alphabet = ctc.Alphabet("ab")
        scores = np.stack([one_hot_scores("ab", alphabet)])
        stub = _StubModel(alphabet, scores)
        images = np.zeros((1, 1, 32, 8), dtype=np.uint8)
        metrics = training.evaluate(stub, images, ["aaa"])
        assert metrics.infeasible == 1


class TestCheckTrainable:
    def _model(self):
        return M.Model(M.preset_simplified(DIGITS.labels), seed=0)

    def test_accepts_reasonable_labels(self):
        training.check_trainable(self._model(), ["123", "00", "9" * 8], 100)

    def test_rejects_overlong_labels(self):
        with pytest.raises(ConfigError):
            training.check_trainable(self._model(), ["1" * 25], 100)

    def test_rejects_foreign_symbols(self):
        with pytest.raises(ConfigError):
            training.check_trainable(self._model(), ["12x"], 100)


class TestTrainLoop:
    def test_smoke_run_writes_log_and_improves(self, tmp_path):
        synth.make_dataset(tmp_path / "ds", 30, DIGITS, seed=3,
                           params=synth.RenderParams(max_label_len=3))
        model = M.Model(M.preset_simplified(DIGITS.labels), seed=0)
        settings = training.TrainSettings(batch_size=8, epochs=2, eps=1e-4,
                                          clip_norm=1.0, seed=0)
        ckpt = tmp_path / "m.ckpt"
        log = tmp_path / "train.log.tsv"
        result = training.train(model, tmp_path / "ds", settings,
                                checkpoint_path=ckpt, log_path=log,
                                echo=lambda s: None)
        assert result.epochs_run == 2
        assert result.steps == 6
        assert len(result.history) == 2
        # CTC loss falls from its random-start level within two epochs
        assert result.history[1].train_loss < result.history[0].train_loss
        assert ckpt.exists()
        loaded = M.load(ckpt)
        assert loaded.model.parameter_count() == model.parameter_count()
        lines = log.read_text().splitlines()
        assert lines[0] == "epoch\tstep\ttrain_loss\tval_accuracy\tval_loss\tskipped"
        assert len(lines) == 3

    def test_max_steps_stops_early(self, tmp_path):
        synth.make_dataset(tmp_path / "ds", 30, DIGITS, seed=3,
                           params=synth.RenderParams(max_label_len=3))
        model = M.Model(M.preset_simplified(DIGITS.labels), seed=0)
        settings = training.TrainSettings(batch_size=8, epochs=50, max_steps=2,
                                          seed=0)
        result = training.train(model, tmp_path / "ds", settings,
                                echo=lambda s: None)
        assert result.steps == 2
        assert result.epochs_run == 1

    def test_infeasible_config_rejected_before_training(self, tmp_path):
        # Labels longer than the frame budget: error out before any step.
        params = synth.RenderParams(max_label_len=30)
        rows = synth.make_dataset(tmp_path / "ds", 20, DIGITS, seed=3,
                                  params=params, min_len=25)
        assert max(len(r.label) for r in rows) > 24
        model = M.Model(M.preset_simplified(DIGITS.labels), seed=0)
        with pytest.raises(ConfigError):
            training.train(model, tmp_path / "ds",
                           training.TrainSettings(epochs=1),
                           echo=lambda s: None)

    def test_deterministic_across_runs(self, tmp_path):
        synth.make_dataset(tmp_path / "ds", 20, DIGITS, seed=5,
                           params=synth.RenderParams(max_label_len=2))
        checkpoints = []
        for run in range(2):
            model = M.Model(M.preset_simplified(DIGITS.labels), seed=1)
            ckpt = tmp_path / f"run{run}.ckpt"
            training.train(
                model, tmp_path / "ds",
                training.TrainSettings(batch_size=8, epochs=1, seed=1),
                checkpoint_path=ckpt, echo=lambda s: None,
            )
            checkpoints.append(ckpt.read_bytes())
        assert checkpoints[0] == checkpoints[1]
