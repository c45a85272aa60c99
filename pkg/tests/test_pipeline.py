import numpy as np
import pytest

from feedbackseg.cli import main
from feedbackseg.data import GenParams
from feedbackseg.network import NetworkConfig, build_network, feedback_infer
from feedbackseg.pipeline import child_seed, run_ablation, segment_image, write_ablation
from feedbackseg.training import TrainConfig

SMALL = NetworkConfig((4, 4, 4, 4, 4, 4, 2))


@pytest.fixture(scope="module")
def net():
    return build_network(SMALL, seed=2)


def test_child_seed_is_stable_and_tag_dependent():
    assert child_seed(0, "a") == child_seed(0, "a")
    assert child_seed(0, "a") != child_seed(0, "b")
    assert child_seed(0, "a") != child_seed(1, "a")


class TestSegmentImage:
    def test_matches_direct_inference(self, net):
        img = np.random.default_rng(0).uniform(size=(1, 64, 64)).astype(np.float32)
        np.testing.assert_array_equal(segment_image(net, img, 1), feedback_infer(net, img, 1))

    @pytest.mark.parametrize("shape", [(37, 50), (64, 64), (100, 72)])
    def test_any_size(self, net, shape):
        img = np.random.default_rng(1).uniform(size=(1, *shape)).astype(np.float32)
        m = segment_image(net, img, "top1")
        assert m.shape == shape
        assert m.min() >= 0 and m.max() <= 1

    def test_tiled_path(self, net):
        img = np.random.default_rng(2).uniform(size=(1, 160, 160)).astype(np.float32)
        m = segment_image(net, img, 0, tile_size=64, tile_stride=32, max_side=64)
        assert m.shape == (160, 160)
        assert m.max() == pytest.approx(1) and m.min() == 0

    def test_refine_zero_image(self, net):
        assert not segment_image(net, np.zeros((1, 64, 64), np.float32), 1, refine=True).any()

    def test_topk_rejected(self, net):
        with pytest.raises(ValueError):
            segment_image(net, np.zeros((1, 64, 64), np.float32), "top2")


@pytest.fixture(scope="module")
def result():
    return run_ablation(seed=3, n_patches=48, n_tiles=2, tile_size=128, n_holdout=16,
                        net_config=SMALL,
                        train_config=TrainConfig(epochs=1, batch_size=16, seed=1))


class TestAblation:
    def test_fields(self, result):
        assert len(result.tile_f_plain) == len(result.tile_f_feedback) == 2
        assert 0 <= result.wins <= 2
        assert 0 <= result.accuracy <= 1
        assert result.reports["plain"].name == "no feedback"
        assert result.reports["feedback"].name == "feedback"
        assert [t.optimal_f for t in result.reports["feedback"].tiles] == result.tile_f_feedback

    def test_deterministic(self, result):
        again = run_ablation(seed=3, n_patches=48, n_tiles=2, tile_size=128, n_holdout=16,
                             net_config=SMALL,
                             train_config=TrainConfig(epochs=1, batch_size=16, seed=1))
        assert again.tile_f_feedback == result.tile_f_feedback
        assert again.reports["comparison"].to_text() == result.reports["comparison"].to_text()

    def test_written_outputs(self, result, tmp_path):
        write_ablation(result, tmp_path)
        for name in ("plain.report", "feedback.report", "comparison.txt", "comparison.report",
                     "summary.txt", "pr_plain.png", "pr_feedback.png", "comparison.png",
                     "training.png"):
            assert (tmp_path / name).stat().st_size > 0, name
        assert "feedback_wins = " in (tmp_path / "summary.txt").read_text()


def test_cli_ablation_small(tmp_path, capsys):
    assert main(["ablation", "--out", str(tmp_path), "--patches", "40", "--epochs", "1",
                 "--tiles", "1", "--tile-size", "64", "--no-figures"]) == 0
    assert "feedback >= plain on" in capsys.readouterr().out
    assert (tmp_path / "summary.txt").exists() and not (tmp_path / "comparison.png").exists()
