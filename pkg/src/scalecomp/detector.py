"""End-to-end detector: proposals, cascade head, loss composition, training, inference.

The model is a two-stage pipeline: pyramid encoder -> (optional) scale
complement decoder fused back into the pyramid -> single-anchor proposal
network -> three-stage cascade head with rising IoU thresholds. The
contrastive complement branch runs per cascade stage during training only.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .contrast import (
    Assignment,
    ContrastiveComplement,
    assign_max_iou,
    contrastive_feature_loss,
    contrastive_label_loss,
    intra_category_select,
    ProposalFeatureBlock,
)
from .data import Annotation, Box, Dataset, ImageSample
from .encoder import FeaturePyramid, PyramidEncoder
from .errors import ConfigError, ShapeError, TrainingError
from .metrics import boxes_to_array, pairwise_iou
from .sampling import roi_align_pyramid
from .scale_complement import (
    ScaleComplementDecoder,
    ScaleTargetMap,
    fuse,
    make_scale_target,
    scale_comple_loss,
)

# Log-scale size deltas are clamped here when decoding predicted refinements,
# so early-training outliers cannot produce astronomically large boxes.
DELTA_CLAMP = 4.0


@dataclass
class Detection:
    box: Box
    category_id: int
    score: float


@dataclass
class LossBreakdown:
    l_cls: float
    l_reg: float
    l_contra_feat: float
    l_contra_label: float
    l_comple: float
    l_detect: float
    l_total: float

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def compute(cls, l_cls, l_reg, l_contra_feat, l_contra_label, l_comple, cfg):
        l_detect = l_cls + l_reg + l_contra_feat + l_contra_label
        return cls(
            l_cls=float(l_cls),
            l_reg=float(l_reg),
            l_contra_feat=float(l_contra_feat),
            l_contra_label=float(l_contra_label),
            l_comple=float(l_comple),
            l_detect=float(l_detect),
            l_total=float(total_loss(l_comple, l_detect, cfg)),
        )


@dataclass
class ModelConfig:
    channels: int = 32
    strides: tuple[int, ...] = (4, 8, 16)
    num_categories: int = 10
    branch_kernels: tuple[int, ...] = (3, 5, 7, 11)
    attention_heads: int = 4
    attention_points: int = 4
    contrast_heads: int = 4
    roi_size: int = 7
    anchor_scale: float = 2.5
    finest_scale: float = 16.0
    sigma_scale: float = 0.1
    sigma_min: float = 0.5
    use_cscl: bool = True
    use_iccl: bool = True


@dataclass
class TrainConfig:
    lambda_comple: float = 1.0
    lambda_detect: float = 0.3
    learning_rate: float = 0.01
    momentum: float = 0.9
    steps: int = 200
    batch_size: int = 4
    seed: int = 0
    cascade_stages: int = 3
    cascade_iou_thresholds: tuple[float, ...] = (0.5, 0.6, 0.7)
    num_proposals: int = 500
    nms_iou: float = 0.5
    score_threshold: float = 0.05
    grad_clip: float = 10.0
    cosine_decay: bool = True
    contrastive_per_stage: bool = True
    contrastive_positives_only: bool = False

    def validate(self):
        if self.lambda_comple <= 0 or self.lambda_detect <= 0:
            raise ConfigError("loss weights must be positive")
        if self.cascade_stages != len(self.cascade_iou_thresholds):
            raise ConfigError(
                f"{self.cascade_stages} stages but "
                f"{len(self.cascade_iou_thresholds)} IoU thresholds"
            )
        if any(b <= a for a, b in zip(self.cascade_iou_thresholds,
                                      self.cascade_iou_thresholds[1:])):
            raise ConfigError(
                f"cascade IoU thresholds must increase: {self.cascade_iou_thresholds}"
            )
        if self.num_proposals < 1 or self.steps < 1 or self.batch_size < 1:
            raise ConfigError("num_proposals, steps and batch_size must be >= 1")


# ---------------------------------------------------------------------------
# Box delta coding and NMS
# ---------------------------------------------------------------------------

def encode_deltas(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """(dx, dy, dw, dh) turning center-format src boxes into dst boxes."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 4)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 4)
    dx = (dst[:, 0] - src[:, 0]) / src[:, 2]
    dy = (dst[:, 1] - src[:, 1]) / src[:, 3]
    dw = np.log(dst[:, 2] / src[:, 2])
    dh = np.log(dst[:, 3] / src[:, 3])
    return np.stack([dx, dy, dw, dh], axis=1)


def decode_deltas(src: np.ndarray, deltas: np.ndarray,
                  clamp: float | None = None) -> np.ndarray:
    """Apply (dx, dy, dw, dh) refinements to center-format boxes."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    if clamp is not None:
        deltas = np.clip(deltas, -clamp, clamp)
    cx = src[:, 0] + deltas[:, 0] * src[:, 2]
    cy = src[:, 1] + deltas[:, 1] * src[:, 3]
    w = src[:, 2] * np.exp(deltas[:, 2])
    h = src[:, 3] * np.exp(deltas[:, 3])
    return np.stack([cx, cy, w, h], axis=1)


def clip_boxes(boxes: np.ndarray, width: float, height: float,
               min_size: float = 1e-2) -> np.ndarray:
    """Clip center-format boxes to the image rectangle, keeping positive size."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    x1 = np.clip(boxes[:, 0] - boxes[:, 2] / 2, 0, width)
    y1 = np.clip(boxes[:, 1] - boxes[:, 3] / 2, 0, height)
    x2 = np.clip(boxes[:, 0] + boxes[:, 2] / 2, 0, width)
    y2 = np.clip(boxes[:, 1] + boxes[:, 3] / 2, 0, height)
    w = np.maximum(x2 - x1, min_size)
    h = np.maximum(y2 - y1, min_size)
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, w, h], axis=1)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list[int]:
    """Greedy suppression: keep by descending score, drop overlaps > threshold."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores), kind="stable")
    keep: list[int] = []
    if len(order) == 0:
        return keep
    ious = pairwise_iou(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= ious[i] > iou_thresh
    return keep


# ---------------------------------------------------------------------------
# Proposal network
# ---------------------------------------------------------------------------

class ProposalNetwork(nn.Module):
    """Single-anchor objectness + box regression over every pyramid location."""

    def __init__(self, channels: int, anchor_scale: float = 2.5):
        super().__init__()
        self.anchor_scale = anchor_scale
        self.conv = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.objectness = nn.Conv2d(channels, 1, 1)
        self.box_deltas = nn.Conv2d(channels, 4, 1)
        nn.init.constant_(self.objectness.bias, -2.0)  # rare-positive prior

    def forward(self, pyramid: FeaturePyramid) -> list[tuple[Tensor, Tensor]]:
        out = []
        for lvl in pyramid.levels:
            x = self.conv(lvl.unsqueeze(0) if lvl.dim() == 3 else lvl)
            obj, deltas = self.objectness(x), self.box_deltas(x)
            if lvl.dim() == 3:
                obj, deltas = obj.squeeze(0), deltas.squeeze(0)
            out.append((obj, deltas))
        return out

    def anchors(self, pyramid: FeaturePyramid) -> list[np.ndarray]:
        """Center-format anchor array [H*W, 4] per level, in image pixels."""
        out = []
        for (h, w), stride in zip(pyramid.spatial_shapes(), pyramid.strides):
            ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
            cx = (xs.reshape(-1) + 0.5) * stride
            cy = (ys.reshape(-1) + 0.5) * stride
            side = np.full_like(cx, self.anchor_scale * stride, dtype=np.float64)
            out.append(np.stack([cx, cy, side, side], axis=1))
        return out


def _decode_learned_proposals(rpn_out, anchors, image_size, max_proposals,
                              pre_nms_iou: float = 0.7):
    """Decode per-level outputs into <= max_proposals boxes by objectness."""
    width, height = image_size
    all_scores = []
    all_boxes = []
    for (obj, deltas), anch in zip(rpn_out, anchors):
        scores = obj.detach().reshape(-1).double().cpu().numpy()
        d = deltas.detach().reshape(4, -1).T.double().cpu().numpy()
        all_scores.append(scores)
        all_boxes.append(decode_deltas(anch, d, clamp=DELTA_CLAMP))
    scores = np.concatenate(all_scores)
    boxes = clip_boxes(np.concatenate(all_boxes, axis=0), width, height)
    keep = nms(boxes, scores, pre_nms_iou)[:max_proposals]
    return boxes[keep]


def propose(pyramid: FeaturePyramid, model: "ComplementaryDetector",
            mode: str = "learned", gts: list[Annotation] | None = None,
            image_size: tuple[int, int] | None = None, max_proposals: int = 500,
            jitter: float = 0.1, copies: int = 1, seed: int = 0) -> list[Box]:
    """Generate proposal boxes.

    ``learned`` decodes the proposal network's top boxes; ``gt_jitter``
    produces deterministic jittered copies of the ground boxes (test
    scaffolding that isolates head behavior from proposal quality).
    """
    if mode == "learned":
        if image_size is None:
            h, w = pyramid.levels[0].shape[-2:]
            image_size = (w * pyramid.strides[0], h * pyramid.strides[0])
        rpn_out = model.proposal_net(pyramid)
        anchors = model.proposal_net.anchors(pyramid)
        arr = _decode_learned_proposals(rpn_out, anchors, image_size, max_proposals)
        return [Box(*row) for row in arr]
    if mode == "gt_jitter":
        if gts is None:
            raise ConfigError("gt_jitter proposals require ground truth boxes")
        rng = np.random.default_rng(seed)
        out = []
        for _ in range(copies):
            for ann in gts:
                b = ann.box
                dx, dy = rng.uniform(-jitter, jitter, 2)
                sw, sh = np.exp(rng.uniform(-jitter, jitter, 2))
                out.append(
                    Box(b.x_center + dx * b.width, b.y_center + dy * b.height,
                        b.width * sw, b.height * sh)
                )
        return out[:max_proposals]
    raise ConfigError(f"unknown proposal mode '{mode}'")


def _rpn_losses(rpn_out, anchors, gts: list[Annotation],
                pos_iou: float = 0.5, neg_iou: float = 0.4):
    """Objectness BCE + smooth-L1 box loss against anchor assignments."""
    obj_logits = torch.cat([o.reshape(-1) for o, _ in rpn_out])
    delta_pred = torch.cat([d.reshape(4, -1).T for _, d in rpn_out], dim=0)
    anchor_arr = np.concatenate(anchors, axis=0)
    if not gts:
        target = torch.zeros_like(obj_logits)
        return F.binary_cross_entropy_with_logits(obj_logits, target), obj_logits.new_zeros(())
    gt_arr = boxes_to_array([g.box for g in gts])
    ious = pairwise_iou(anchor_arr, gt_arr)
    max_iou = ious.max(axis=1)
    best_gt = ious.argmax(axis=1)
    pos = max_iou >= pos_iou
    # The best anchor of each gt is always positive and regresses to that gt.
    forced = ious.argmax(axis=0)
    pos[forced] = True
    best_gt[forced] = np.arange(len(gts))
    neg = (max_iou < neg_iou) & ~pos
    use = pos | neg
    target = torch.as_tensor(pos.astype(np.float32), dtype=obj_logits.dtype,
                             device=obj_logits.device)
    obj_loss = _balanced_bce(obj_logits[use], target[use])
    pos_idx = np.nonzero(pos)[0]
    delta_target = torch.as_tensor(
        encode_deltas(anchor_arr[pos_idx], gt_arr[best_gt[pos_idx]]),
        dtype=delta_pred.dtype, device=delta_pred.device,
    )
    reg_loss = F.smooth_l1_loss(delta_pred[torch.as_tensor(pos_idx)], delta_target)
    return obj_loss, reg_loss


def _balanced_bce(logits: Tensor, target: Tensor) -> Tensor:
    """BCE with the positive term upweighted to offset anchor imbalance."""
    num_pos = target.sum()
    if num_pos == 0:
        return F.binary_cross_entropy_with_logits(logits, target)
    num_neg = target.numel() - num_pos
    pos_weight = (num_neg / num_pos).clamp(1.0, 64.0)
    return F.binary_cross_entropy_with_logits(logits, target, pos_weight=pos_weight)


# ---------------------------------------------------------------------------
# Cascade head
# ---------------------------------------------------------------------------

class StageHead(nn.Module):
    """One cascade stage: classification feature block, logits and refinements."""

    def __init__(self, channels: int, num_categories: int):
        super().__init__()
        self.cls_conv = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.reg_conv = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.cls_fc = nn.Linear(channels, num_categories + 1)
        self.reg_fc = nn.Linear(channels, 4)
        # High background prior keeps untrained detections below any sane
        # score threshold.
        nn.init.zeros_(self.cls_fc.bias)
        with torch.no_grad():
            self.cls_fc.bias[num_categories] = 3.0
        nn.init.zeros_(self.reg_fc.weight)
        nn.init.zeros_(self.reg_fc.bias)

    def forward(self, blocks: Tensor):
        cls_blocks = self.cls_conv(blocks)
        logits = self.cls_fc(cls_blocks.mean(dim=(2, 3)))
        deltas = self.reg_fc(self.reg_conv(blocks).mean(dim=(2, 3)))
        return cls_blocks, logits, deltas


@dataclass
class StageOutput:
    boxes: np.ndarray        # [N, 4] stage input boxes, center format
    blocks: Tensor           # [N, C, P, P] pooled from the fused pyramid
    cls_blocks: Tensor       # [N, C, P, P]
    cls_logits: Tensor       # [N, K+1]
    deltas: Tensor           # [N, 4]
    refined: np.ndarray      # [N, 4] decoded refinements (detached, clipped)


def cascade_forward(fused: FeaturePyramid, proposals: list[Box],
                    model: "ComplementaryDetector",
                    image_size: tuple[int, int]) -> list[StageOutput]:
    """Run every cascade stage, refining boxes between stages."""
    if len(proposals) == 0:
        raise ShapeError("cascade head needs at least one proposal")
    width, height = image_size
    boxes = boxes_to_array(proposals)
    stages = []
    for head in model.cascade:
        blocks = roi_align_pyramid(fused, boxes, model.cfg.roi_size,
                                   model.cfg.finest_scale)
        cls_blocks, logits, deltas = head(blocks)
        refined = decode_deltas(boxes, deltas.detach().double().cpu().numpy(),
                                clamp=DELTA_CLAMP)
        refined = clip_boxes(refined, width, height)
        stages.append(
            StageOutput(boxes=boxes, blocks=blocks, cls_blocks=cls_blocks,
                        cls_logits=logits, deltas=deltas, refined=refined)
        )
        boxes = refined
    return stages


def detections_from_stage(stage: StageOutput, num_categories: int,
                          score_thresh: float = 0.0) -> list[Detection]:
    """Pre-NMS detections from one stage's scores and refined boxes."""
    scores = torch.softmax(stage.cls_logits.detach(), dim=1).double().cpu().numpy()
    out = []
    for c in range(num_categories):
        for i in range(len(stage.refined)):
            if scores[i, c] >= score_thresh:
                out.append(
                    Detection(box=Box(*stage.refined[i]), category_id=c,
                              score=float(scores[i, c]))
                )
    return out


def detect_loss(stages: list[StageOutput],
                stage_assignments: list[list[Assignment]],
                gts: list[Annotation], num_categories: int):
    """Per-stage classification CE and positive-box smooth-L1, stage-averaged."""
    cls_terms, reg_terms = [], []
    for stage, assignments in zip(stages, stage_assignments):
        logits = stage.cls_logits
        targets = torch.tensor(
            [a.category_id if a.is_positive else num_categories for a in assignments],
            dtype=torch.long, device=logits.device,
        )
        cls_terms.append(F.cross_entropy(logits, targets))
        pos_idx = [i for i, a in enumerate(assignments) if a.is_positive]
        if pos_idx:
            src = stage.boxes[pos_idx]
            dst = boxes_to_array([gts[assignments[i].gt_index].box for i in pos_idx])
            target = torch.as_tensor(encode_deltas(src, dst),
                                     dtype=stage.deltas.dtype,
                                     device=stage.deltas.device)
            reg_terms.append(F.smooth_l1_loss(stage.deltas[pos_idx], target))
        else:
            reg_terms.append(stage.cls_logits.new_zeros(()))
    l_cls = sum(cls_terms) / len(cls_terms)
    l_reg = sum(reg_terms) / len(reg_terms)
    return l_cls, l_reg


def total_loss(l_comple, l_detect, cfg: TrainConfig):
    """Weighted objective combining the complement and detection tasks."""
    for name, part in (("l_comple", l_comple), ("l_detect", l_detect)):
        value = float(part.detach()) if isinstance(part, Tensor) else float(part)
        if not math.isfinite(value):
            raise TrainingError(f"nonfinite loss part {name}={value}")
    return cfg.lambda_comple * l_comple + cfg.lambda_detect * l_detect


# ---------------------------------------------------------------------------
# Full model
# ---------------------------------------------------------------------------

class ComplementaryDetector(nn.Module):
    """Encoder, optional complement decoder, proposal net, cascade, contrast."""

    def __init__(self, cfg: ModelConfig, num_stages: int = 3):
        super().__init__()
        self.cfg = cfg
        self.encoder = PyramidEncoder(cfg.channels, cfg.strides)
        self.decoder = (
            ScaleComplementDecoder(
                cfg.channels, len(cfg.strides), cfg.branch_kernels,
                cfg.attention_heads, cfg.attention_points,
            )
            if cfg.use_cscl
            else None
        )
        self.proposal_net = ProposalNetwork(cfg.channels, cfg.anchor_scale)
        self.cascade = nn.ModuleList(
            [StageHead(cfg.channels, cfg.num_categories) for _ in range(num_stages)]
        )
        self.contrast = (
            ContrastiveComplement(cfg.channels, cfg.num_categories,
                                  cfg.contrast_heads)
            if cfg.use_iccl
            else None
        )

    def feature_pyramids(self, pixels: Tensor):
        """(raw pyramid, complement output or None, fused pyramid)."""
        raw = self.encoder(pixels)
        if self.decoder is None:
            return raw, None, raw
        complement = self.decoder(raw)
        return raw, complement, fuse(raw, complement)


def build_model(cfg: ModelConfig, seed: int = 0, num_stages: int = 3,
                dtype: torch.dtype = torch.float32) -> ComplementaryDetector:
    """Construct a detector with a seeded parameter initialization."""
    torch.manual_seed(seed)
    model = ComplementaryDetector(cfg, num_stages)
    if dtype != torch.float32:
        model = model.to(dtype)
    return model


def _pyramid_select(pyramid: FeaturePyramid, index: int) -> FeaturePyramid:
    return FeaturePyramid(levels=[lvl[index] for lvl in pyramid.levels],
                          strides=list(pyramid.strides))


def _scalar(value) -> float:
    return float(value.detach()) if isinstance(value, Tensor) else float(value)


def _contrastive_losses(model, stage, assignments, raw_pyr, cfg):
    """Teacher attention over one stage's proposals plus its two losses.

    Queries come from the raw encoder pyramid; keys/values reuse the stage's
    fused-pyramid blocks (pooled at the same boxes, so no second pooling).
    """
    blocks = [
        ProposalFeatureBlock(
            proposal_box=Box(*stage.boxes[i]),
            features=stage.cls_blocks[i],
            assigned_category=a.category_id,
            assigned_gt_index=a.gt_index,
            max_iou=a.max_iou,
        )
        for i, a in enumerate(assignments)
    ]
    groups = intra_category_select(blocks, model.cfg.num_categories)
    small = roi_align_pyramid(raw_pyr, stage.boxes, model.cfg.roi_size,
                              model.cfg.finest_scale)
    contra, logits = model.contrast(groups, small, stage.blocks)
    l_feat = contrastive_feature_loss(contra, stage.cls_blocks)
    l_label = contrastive_label_loss(logits, assignments, model.cfg.num_categories,
                                     cfg.contrastive_positives_only)
    return l_feat, l_label


def compute_losses(model: ComplementaryDetector, batch: list[ImageSample],
                   cfg: TrainConfig):
    """Forward pass over a batch returning (scalar loss tensor, LossBreakdown)."""
    if not batch:
        raise TrainingError("empty training batch")
    device = next(model.parameters()).device
    dtype = next(model.parameters()).dtype
    pixels = torch.stack(
        [torch.as_tensor(s.pixels, dtype=dtype, device=device) for s in batch]
    )
    raw, complement, fused = model.feature_pyramids(pixels)

    zero = pixels.new_zeros(())
    if complement is not None:
        shapes = raw.spatial_shapes()
        per_image = [
            make_scale_target(s, shapes, model.cfg.sigma_scale,
                              model.cfg.sigma_min, dtype=dtype)
            for s in batch
        ]
        target_levels = [
            torch.stack([t.levels[li] for t in per_image]).to(device)
            for li in range(len(shapes))
        ]
        l_comple = scale_comple_loss(complement.scale_maps,
                                     ScaleTargetMap(levels=target_levels))
    else:
        l_comple = zero

    l_cls_terms, l_reg_terms = [], []
    l_feat_terms, l_label_terms = [], []
    for bi, sample in enumerate(batch):
        raw_i = _pyramid_select(raw, bi)
        fused_i = _pyramid_select(fused, bi)
        rpn_out = model.proposal_net(fused_i)
        anchors = model.proposal_net.anchors(fused_i)
        rpn_obj, rpn_reg = _rpn_losses(rpn_out, anchors, sample.annotations)

        learned = _decode_learned_proposals(
            rpn_out, anchors, (sample.width, sample.height),
            max(cfg.num_proposals - len(sample.annotations), 1),
        )
        gt_arr = boxes_to_array([a.box for a in sample.annotations])
        proposals = [Box(*row) for row in gt_arr] + [Box(*row) for row in learned]
        proposals = proposals[: cfg.num_proposals]

        stages = cascade_forward(fused_i, proposals, model,
                                 (sample.width, sample.height))
        stage_assignments = [
            assign_max_iou([Box(*row) for row in st.boxes], sample.annotations,
                           pos_thresh=thresh)
            for st, thresh in zip(stages, cfg.cascade_iou_thresholds)
        ]
        head_cls, head_reg = detect_loss(stages, stage_assignments,
                                         sample.annotations,
                                         model.cfg.num_categories)
        l_cls_terms.append(head_cls + rpn_obj)
        l_reg_terms.append(head_reg + rpn_reg)

        if model.contrast is not None:
            pairs = (
                list(zip(stages, stage_assignments))
                if cfg.contrastive_per_stage
                else [(stages[-1], stage_assignments[-1])]
            )
            feats, labels = [], []
            for stage, assignments in pairs:
                l_feat, l_label = _contrastive_losses(
                    model, stage, assignments, raw_i, cfg
                )
                feats.append(l_feat)
                labels.append(l_label)
            l_feat_terms.append(sum(feats) / len(feats))
            l_label_terms.append(sum(labels) / len(labels))

    n = len(batch)
    l_cls = sum(l_cls_terms) / n
    l_reg = sum(l_reg_terms) / n
    l_contra_feat = sum(l_feat_terms) / n if l_feat_terms else zero
    l_contra_label = sum(l_label_terms) / n if l_label_terms else zero
    l_detect = l_cls + l_reg + l_contra_feat + l_contra_label
    l_total = total_loss(l_comple, l_detect, cfg)
    breakdown = LossBreakdown.compute(
        _scalar(l_cls), _scalar(l_reg), _scalar(l_contra_feat),
        _scalar(l_contra_label), _scalar(l_comple), cfg,
    )
    if not math.isfinite(breakdown.l_total):
        raise TrainingError(
            f"nonfinite loss: {breakdown.as_dict()}", breakdown=breakdown
        )
    return l_total, breakdown


def train_step(model: ComplementaryDetector, batch: list[ImageSample],
               optimizer: torch.optim.Optimizer, cfg: TrainConfig) -> LossBreakdown:
    """One SGD-with-momentum update on the full objective."""
    model.train()
    loss, breakdown = compute_losses(model, batch, cfg)
    optimizer.zero_grad()
    loss.backward()
    if cfg.grad_clip > 0:
        nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return breakdown


def train(model: ComplementaryDetector, dataset: Dataset, cfg: TrainConfig,
          log_path: str | Path | None = None,
          progress_every: int = 0) -> list[LossBreakdown]:
    """Seeded training loop; optionally appends one JSON line per step."""
    cfg.validate()
    if not dataset.samples:
        raise TrainingError("cannot train on an empty dataset")
    torch.manual_seed(cfg.seed)
    optimizer = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate,
                                momentum=cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    order: list[int] = []
    history = []
    log_fh = open(log_path, "w") if log_path else None
    try:
        for step in range(cfg.steps):
            if cfg.cosine_decay:
                lr = cfg.learning_rate * 0.5 * (1 + math.cos(math.pi * step / cfg.steps))
                for group in optimizer.param_groups:
                    group["lr"] = lr
            while len(order) < cfg.batch_size:
                order.extend(rng.permutation(len(dataset.samples)).tolist())
            batch = [dataset.samples[i] for i in order[: cfg.batch_size]]
            order = order[cfg.batch_size :]
            breakdown = train_step(model, batch, optimizer, cfg)
            history.append(breakdown)
            if log_fh:
                log_fh.write(json.dumps(breakdown.as_dict()) + "\n")
            if progress_every and (step + 1) % progress_every == 0:
                print(f"step {step + 1}/{cfg.steps}: l_total={breakdown.l_total:.4f}")
    finally:
        if log_fh:
            log_fh.close()
    return history


def infer(pixels, model: ComplementaryDetector, cfg: TrainConfig) -> list[Detection]:
    """Detect objects in one image ([3, H, W] pixels in [0, 1]).

    Annotations are never consulted: proposals are learned, the contrastive
    branch does not run, and duplicate candidates are removed by per-class NMS.
    """
    model.eval()
    with torch.no_grad():
        dtype = next(model.parameters()).dtype
        device = next(model.parameters()).device
        tensor = torch.as_tensor(pixels, dtype=dtype, device=device)
        if tensor.dim() != 3:
            raise ShapeError(f"expected [3, H, W] pixels, got {tuple(tensor.shape)}")
        height, width = tensor.shape[-2:]
        _raw, _complement, fused = model.feature_pyramids(tensor)
        proposals = propose(fused, model, mode="learned",
                            image_size=(width, height),
                            max_proposals=cfg.num_proposals)
        if not proposals:
            return []
        stages = cascade_forward(fused, proposals, model, (width, height))
        final = stages[-1]
        scores = torch.softmax(final.cls_logits, dim=1).double().cpu().numpy()
        out: list[Detection] = []
        for c in range(model.cfg.num_categories):
            col = scores[:, c]
            keep_mask = col >= cfg.score_threshold
            if not keep_mask.any():
                continue
            idx = np.nonzero(keep_mask)[0]
            kept = nms(final.refined[idx], col[idx], cfg.nms_iou)
            for k in kept:
                i = idx[k]
                out.append(Detection(box=Box(*final.refined[i]), category_id=c,
                                     score=float(col[i])))
        out.sort(key=lambda d: -d.score)
        return out
