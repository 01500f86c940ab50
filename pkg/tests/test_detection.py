import numpy as np
import torch

from raygate.detection import DenseDetectionHead, nms
from raygate.metrics import box_iou


class TestNms:
    def test_keeps_best_of_overlapping_pair(self):
        boxes = np.array([[0, 0, 10, 10], [1, 1, 11, 11], [30, 30, 40, 40]], dtype=float)
        scores = np.array([0.9, 0.8, 0.7])
        assert nms(boxes, scores, 0.5) == [0, 2]

    def test_no_suppression_when_disjoint(self):
        boxes = np.array([[0, 0, 5, 5], [10, 10, 15, 15]], dtype=float)
        scores = np.array([0.5, 0.9])
        assert sorted(nms(boxes, scores, 0.5)) == [0, 1]


class TestTargets:
    def head(self, stride=8):
        torch.manual_seed(0)
        return DenseDetectionHead(in_channels=8, num_classes=12, stride=stride)

    def test_center_cells_positive(self):
        head = self.head()
        obj, cls, ltrb, pos = head.build_targets(
            (8, 8), [[16.0, 16.0, 48.0, 48.0]], [3], torch.device("cpu"), torch.float32)
        assert pos[4, 4]  # cell center (36, 36) inside box and near center
        assert cls[4, 4] == 2
        assert not pos[0, 0]
        # offsets live in stride units and are positive
        assert (ltrb[:, pos] > 0).all()

    def test_tiny_box_claims_nearest_cell(self):
        head = self.head()
        obj, cls, ltrb, pos = head.build_targets(
            (8, 8), [[2.0, 2.0, 5.0, 5.0]], [1], torch.device("cpu"), torch.float32)
        assert pos.sum() == 1
        assert pos[0, 0]

    def test_smaller_box_wins_overlap(self):
        head = self.head()
        big = [0.0, 0.0, 64.0, 64.0]
        small = [24.0, 24.0, 40.0, 40.0]
        obj, cls, ltrb, pos = head.build_targets(
            (8, 8), [big, small], [1, 2], torch.device("cpu"), torch.float32)
        assert cls[4, 4] == 1  # the small box's category


class TestDecode:
    def test_boxes_valid_and_within_bounds(self):
        torch.manual_seed(1)
        head = DenseDetectionHead(in_channels=8, num_classes=12, stride=8)
        preds = (torch.randn(2, 1, 8, 8) * 3,
                 torch.randn(2, 12, 8, 8) * 3,
                 torch.randn(2, 4, 8, 8) * 2)
        for dets in head.decode(preds, image_size=64, score_floor=0.0):
            for d in dets:
                x1, y1, x2, y2 = d.box
                assert 0.0 <= x1 < x2 <= 64.0
                assert 0.0 <= y1 < y2 <= 64.0
                assert 0.0 <= d.score <= 1.0
                assert 1 <= d.category <= 12

    def test_score_floor_filters(self):
        torch.manual_seed(2)
        head = DenseDetectionHead(in_channels=8, num_classes=12, stride=8)
        preds = (torch.full((1, 1, 4, 4), -10.0),
                 torch.zeros(1, 12, 4, 4),
                 torch.zeros(1, 4, 4, 4))
        assert head.decode(preds, image_size=32, score_floor=0.05) == [[]]

    def test_max_detections_cap(self):
        torch.manual_seed(3)
        head = DenseDetectionHead(in_channels=8, num_classes=12, stride=8)
        preds = (torch.full((1, 1, 16, 16), 5.0),
                 torch.randn(1, 12, 16, 16),
                 torch.randn(1, 4, 16, 16))
        dets = head.decode(preds, image_size=128, score_floor=0.0,
                           nms_iou=0.9, max_detections=10)[0]
        assert len(dets) <= 10

    def test_nms_suppresses_duplicates(self):
        torch.manual_seed(4)
        head = DenseDetectionHead(in_channels=8, num_classes=12, stride=8)
        obj = torch.full((1, 1, 8, 8), 4.0)
        cls = torch.zeros(1, 12, 8, 8)
        cls[:, 0] = 5.0  # one dominant category everywhere
        box = torch.full((1, 4, 8, 8), 3.0)  # large overlapping boxes
        dets = head.decode((obj, cls, box), image_size=64, score_floor=0.05,
                           nms_iou=0.5)[0]
        for i, a in enumerate(dets):
            for b in dets[i + 1:]:
                if a.category == b.category:
                    assert box_iou(a.box, b.box) <= 0.5 + 1e-9

    def test_loss_runs_and_is_finite(self):
        torch.manual_seed(5)
        head = DenseDetectionHead(in_channels=8, num_classes=12, stride=8)
        feat = torch.randn(2, 8, 8, 8)
        preds = head(feat)
        annotations = [(np.array([[8.0, 8.0, 30.0, 30.0]]), np.array([2])),
                       (np.zeros((0, 4)), np.zeros(0, dtype=int))]
        loss = head.loss(preds, annotations)
        assert torch.isfinite(loss)
        loss.backward()
