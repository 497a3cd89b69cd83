"""Inter-scale contrastive complementation of proposal features.

Training-only branch: positive proposals are grouped by assigned category and
sorted by box area; each member attends to the strictly larger members of its
group (queries from the raw encoder blocks, keys/values from the fused
blocks), and the result distills into the detection head's classification
branch through a feature-consistency loss plus a label loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .data import Annotation, Box
from .errors import ShapeError
from .metrics import boxes_to_array, pairwise_iou

BACKGROUND = -1


@dataclass
class Assignment:
    """Result of max-IoU label assignment for one proposal."""

    gt_index: int | None
    category_id: int  # BACKGROUND when unassigned
    max_iou: float

    @property
    def is_positive(self) -> bool:
        return self.category_id != BACKGROUND


@dataclass
class ProposalFeatureBlock:
    proposal_box: Box
    features: Tensor  # [C, P, P]
    assigned_category: int
    assigned_gt_index: int | None
    max_iou: float


@dataclass
class CategoryGroups:
    """category_id -> proposal indices of its positives, area-ascending."""

    groups: dict[int, list[int]]


def assign_max_iou(proposals: list[Box], gts: list[Annotation],
                   pos_thresh: float = 0.5) -> list[Assignment]:
    """Assign each proposal the ground box of highest IoU, if above threshold.

    Ties go to the lowest ground-truth index; proposals below the threshold
    (or with no ground truth at all) become BACKGROUND with their max IoU kept.
    """
    if not gts:
        return [Assignment(None, BACKGROUND, 0.0) for _ in proposals]
    if not proposals:
        return []
    ious = pairwise_iou(boxes_to_array(proposals),
                        boxes_to_array([g.box for g in gts]))
    best = ious.argmax(axis=1)  # argmax takes the first (lowest) index on ties
    out = []
    for i, j in enumerate(best):
        max_iou = float(ious[i, j])
        if max_iou >= pos_thresh:
            out.append(Assignment(int(j), gts[j].category_id, max_iou))
        else:
            out.append(Assignment(None, BACKGROUND, max_iou))
    return out


def intra_category_select(blocks: list[ProposalFeatureBlock], num_categories: int) -> CategoryGroups:
    """Group positive proposals by category, each group sorted by area ascending.

    Backgrounds are excluded; ties in area keep proposal-index order.
    """
    groups: dict[int, list[int]] = {}
    for idx, block in enumerate(blocks):
        if block.assigned_category == BACKGROUND:
            continue
        if not 0 <= block.assigned_category < num_categories:
            raise ValueError(
                f"proposal {idx} assigned to unknown category {block.assigned_category}"
            )
        groups.setdefault(block.assigned_category, []).append(idx)
    for cat in groups:
        groups[cat].sort(key=lambda i: (blocks[i].proposal_box.area, i))
    return CategoryGroups(groups={cat: groups[cat] for cat in sorted(groups)})


class ContrastiveComplement(nn.Module):
    """Large-to-small attention within category groups plus a label head.

    For group member j (area-ascending order), the query is member j's raw
    encoder block and the keys/values are the fused-pyramid blocks of members
    j+1..end, so information only flows from strictly larger instances. The
    largest member of a group, singleton groups and background proposals pass
    through unchanged.
    """

    def __init__(self, channels: int, num_categories: int, num_heads: int = 4):
        super().__init__()
        self.channels = channels
        self.num_categories = num_categories
        self.attention = nn.MultiheadAttention(channels, num_heads, batch_first=True)
        self.label_head = nn.Linear(channels, num_categories + 1)

    def forward(self, groups: CategoryGroups, small_blocks: Tensor,
                large_blocks: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (contrastive blocks [N, C, P, P], logits [N, K+1])."""
        if small_blocks.shape != large_blocks.shape:
            raise ShapeError(
                f"block shapes differ: {tuple(small_blocks.shape)} vs "
                f"{tuple(large_blocks.shape)}"
            )
        n, c, p, _ = small_blocks.shape
        tok = p * p
        contra = small_blocks.clone()
        # Each member attends to the strictly larger members after it; the
        # batched call pads key rows, which is exact under the padding mask.
        tasks = [
            (idx, members[pos + 1 :])
            for members in groups.groups.values()
            for pos, idx in enumerate(members)
            if members[pos + 1 :]
        ]
        if tasks:
            max_keys = max(len(refs) for _, refs in tasks) * tok
            query = torch.stack(
                [small_blocks[idx].reshape(c, tok).T for idx, _ in tasks]
            )
            keys = small_blocks.new_zeros(len(tasks), max_keys, c)
            pad = torch.ones(len(tasks), max_keys, dtype=torch.bool,
                             device=small_blocks.device)
            for row, (_, refs) in enumerate(tasks):
                flat = torch.cat(
                    [large_blocks[r].reshape(c, tok).T for r in refs], dim=0
                )
                keys[row, : flat.shape[0]] = flat
                pad[row, : flat.shape[0]] = False
            attended, _ = self.attention(query, keys, keys,
                                         key_padding_mask=pad, need_weights=False)
            for row, (idx, _) in enumerate(tasks):
                contra[idx] = small_blocks[idx] + attended[row].T.reshape(c, p, p)
        logits = self.label_head(contra.mean(dim=(2, 3)))
        return contra, logits


def contrastive_forward(groups: CategoryGroups, small_blocks: Tensor,
                        large_blocks: Tensor, module: ContrastiveComplement):
    return module(groups, small_blocks, large_blocks)


def contrastive_feature_loss(contra, cls_branch) -> Tensor:
    """Mean squared gap between contrastive (teacher) and classification blocks.

    The contrastive side is detached: gradients only reach the classification
    branch. Empty input is defined as zero loss.
    """
    if len(contra) != len(cls_branch):
        raise ShapeError(f"{len(contra)} teacher blocks vs {len(cls_branch)} student blocks")
    if len(contra) == 0:
        return torch.zeros(())
    if isinstance(contra, Tensor) and isinstance(cls_branch, Tensor):
        if contra.shape != cls_branch.shape:
            raise ShapeError(
                f"teacher {tuple(contra.shape)} vs student {tuple(cls_branch.shape)}"
            )
        return ((contra.detach() - cls_branch) ** 2).mean()
    total = None
    for i, (teacher, student) in enumerate(zip(contra, cls_branch)):
        if teacher.shape != student.shape:
            raise ShapeError(
                f"block {i}: teacher {tuple(teacher.shape)} vs student "
                f"{tuple(student.shape)}"
            )
        term = ((teacher.detach() - student) ** 2).mean()
        total = term if total is None else total + term
    return total / len(contra)


def contrastive_label_loss(logits: Tensor, assignments: list[Assignment],
                           num_categories: int, positives_only: bool = False) -> Tensor:
    """Cross-entropy between contrastive logits and assigned categories.

    Background counts as class ``num_categories``; with ``positives_only`` the
    background rows are excluded from the mean.
    """
    if logits.shape[0] != len(assignments):
        raise ShapeError(f"{logits.shape[0]} logit rows vs {len(assignments)} assignments")
    targets = torch.tensor(
        [a.category_id if a.is_positive else num_categories for a in assignments],
        dtype=torch.long, device=logits.device,
    )
    if positives_only:
        keep = targets != num_categories
        if not keep.any():
            return logits.new_zeros(())
        logits, targets = logits[keep], targets[keep]
    return F.cross_entropy(logits, targets)
