"""Token-matching knowledge distillation on a toy multimodal decoder."""

from .tensor import Tensor, Tape, backward, no_grad

__all__ = ["Tensor", "Tape", "backward", "no_grad"]
