"""Segmentation losses shared by the proxy heads and the segmentation U-Net."""
import torch
import torch.nn.functional as F

# Smoothing term added to numerator and denominator of every soft Dice ratio.
DICE_SMOOTH = 1e-5


def soft_dice_loss(logits: torch.Tensor, target: torch.Tensor, include_background: bool = False,
                   smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """
    1 - mean soft Dice over classes. `logits` (B, C, H, W), `target` integer labels (B, H, W).
    Sums run jointly over batch and pixels per class; class 0 is skipped unless `include_background`.
    """
    n_classes = logits.shape[1]
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(target.long(), n_classes).permute(0, 3, 1, 2).to(probs.dtype)
    dims = (0, 2, 3)
    intersection = (probs * onehot).sum(dims)
    denominator = probs.sum(dims) + onehot.sum(dims)
    dice = (2.0 * intersection + smooth) / (denominator + smooth)
    if not include_background:
        dice = dice[1:]
    return 1.0 - dice.mean()


def ce_dice_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean cross entropy plus foreground soft Dice loss."""
    return F.cross_entropy(logits, target.long()) + soft_dice_loss(logits, target)
