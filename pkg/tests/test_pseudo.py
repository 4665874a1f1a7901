import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import diode.detector as detector
from diode.detector import BBox, Detector, DetectorConfig
from diode.dilation import expand_model
from diode.errors import ProtocolError
from diode.pseudo import generate_pseudo, load_merged, merge_annotations, pseudo_quality, save_merged

from helpers import fake_outputs

CFG = DetectorConfig()
OLD_BOXES = [BBox(18, 18, 38, 38, 1), BBox(40, 4, 60, 26, 3)]


@pytest.fixture
def oracle_model(monkeypatch):
    """Old model whose raw outputs reproduce ``OLD_BOXES`` exactly."""
    model = Detector(CFG, (0, 1, 2, 3))

    def fake_forward(m, images, tasks=None):
        raw, _ = fake_outputs(CFG, OLD_BOXES, (0, 1, 2, 3))
        return raw

    monkeypatch.setattr(detector, "forward", fake_forward)
    return model


class TestGenerate:
    def test_oracle_identity(self, oracle_model):
        (boxes,) = generate_pseudo(oracle_model, np.zeros((1, 1, 64, 64)))
        got = sorted((b.x1, b.y1, b.x2, b.y2, b.class_id) for b in boxes)
        assert got == sorted((b.x1, b.y1, b.x2, b.y2, b.class_id) for b in OLD_BOXES)

    def test_scores_above_threshold(self, oracle_model):
        (boxes,) = generate_pseudo(oracle_model, np.zeros((1, 1, 64, 64)), conf_thresh=0.6)
        assert boxes and all(b.score >= 0.6 for b in boxes)

    @pytest.mark.parametrize("t", [0.0, 1.0, -0.1])
    def test_threshold_range(self, t):
        with pytest.raises(ValueError):
            generate_pseudo(Detector(CFG, (0, 1)), np.zeros((1, 1, 64, 64)), conf_thresh=t)

    def test_only_old_heads_are_run(self):
        m = Detector(CFG, (0, 1, 2, 3), seed=1)
        expand_model(m, 1, (4, 5))
        m.store["cls_head.1.bias"].data[:] = 20.0  # new head would fire everywhere
        imgs = np.random.default_rng(0).random((2, 1, 64, 64))
        out = generate_pseudo(m, imgs, conf_thresh=0.01, old_tasks=[0])
        assert all(b.class_id < 4 for boxes in out for b in boxes)


@pytest.fixture(scope="module")
def noisy_model():
    m = Detector(CFG, (0, 1, 2, 3), seed=3)
    # raise the class prior so a random model yields a spread of scores
    m.store["cls_head.0.bias"].data[:] = 1.0
    return m


@settings(max_examples=10, deadline=None)
@given(st.floats(0.05, 0.6), st.floats(0.05, 0.6))
def test_pseudo_sets_shrink_with_threshold(noisy_model, lo, hi):
    lo, hi = min(lo, hi), max(lo, hi)
    imgs = np.random.default_rng(7).random((2, 1, 64, 64))
    loose = generate_pseudo(noisy_model, imgs, conf_thresh=lo)
    strict = generate_pseudo(noisy_model, imgs, conf_thresh=hi)
    for a, b in zip(loose, strict):
        assert set(b) <= set(a)


class TestMerge:
    def test_empty_pseudo(self):
        gt = [BBox(0, 0, 9, 9, 4)]
        assert merge_annotations(gt, []).boxes == gt

    def test_empty_gt(self):
        ps = [BBox(0, 0, 9, 9, 0, 0.7), BBox(5, 5, 20, 20, 1, 0.6), BBox(1, 1, 3, 3, 0, 0.9)]
        assert len(merge_annotations([], ps)) == 3

    def test_overlap_across_classes_kept(self):
        gt, ps = [BBox(0, 0, 10, 10, 4)], [BBox(0, 0, 10, 10, 1, 0.8)]
        merged = merge_annotations(gt, ps)
        assert merged.boxes == gt + ps and merged.sources == ["gt", "pseudo"]

    def test_shared_class_rejected(self):
        with pytest.raises(ProtocolError):
            merge_annotations([BBox(0, 0, 10, 10, 1)], [BBox(0, 0, 10, 10, 1, 0.9)])

    def test_file_round_trip(self, tmp_path):
        sets = [
            merge_annotations([BBox(0, 0, 10, 10, 4)], [BBox(2, 2, 8, 8, 1, 0.75)], 0),
            merge_annotations([BBox(5, 5, 9, 9, 5)], [], 1),
        ]
        save_merged(sets, ["a.png", "b.png"], tmp_path / "m.json")
        text = (tmp_path / "m.json").read_text()
        assert '"source": "pseudo"' in text and '"score": 0.75' in text
        back = load_merged(tmp_path / "m.json")
        assert [s.boxes for s in back] == [s.boxes for s in sets]


box_lists = st.lists(
    st.builds(lambda x, y, c: BBox(x, y, x + 10, y + 10, c), st.integers(0, 40), st.integers(0, 40), st.integers(0, 7)),
    max_size=6,
)


@settings(max_examples=60, deadline=None)
@given(box_lists, box_lists)
def test_merge_is_lossless_and_ordered(gt, ps):
    gt = [b for b in gt if b.class_id >= 4]
    ps = [BBox(b.x1, b.y1, b.x2, b.y2, b.class_id, 0.9) for b in ps if b.class_id < 4]
    merged = merge_annotations(gt, ps)
    assert len(merged) == len(gt) + len(ps)
    assert merged.boxes[: len(gt)] == gt and merged.boxes[len(gt) :] == ps


class TestQuality:
    def test_perfect(self):
        truth = [[BBox(0, 0, 10, 10, 1), BBox(20, 20, 30, 30, 5)]]
        pseudo = [[BBox(0, 0, 10, 10, 1, 0.9)]]
        assert pseudo_quality(pseudo, truth, classes=(0, 1, 2, 3)) == (1.0, 1.0)

    def test_wrong_class_is_false_positive(self):
        truth = [[BBox(0, 0, 10, 10, 1)]]
        pseudo = [[BBox(0, 0, 10, 10, 2, 0.9), BBox(0, 0, 10, 10, 1, 0.8)]]
        assert pseudo_quality(pseudo, truth, classes=(0, 1, 2, 3)) == (1.0, 0.5)

    def test_missed_box(self):
        truth = [[BBox(0, 0, 10, 10, 1), BBox(40, 40, 50, 50, 0)]]
        assert pseudo_quality([[]], truth, classes=(0, 1)) == (0.0, 1.0)
