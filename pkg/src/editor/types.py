from typing import NamedTuple, Tuple

import torch

from config.settings import DiffusionDefaults
from src.utils.exceptions import ShapeMismatchError


class EditPair(NamedTuple):
    """(source I, edited I_edited, text C_T); images are (H, W, 3) in [0, 1]."""

    source: torch.Tensor
    edited: torch.Tensor
    text: Tuple[int, ...]

    def validate(self) -> "EditPair":
        if self.source.shape != self.edited.shape:
            raise ShapeMismatchError(
                f"pair images differ in shape: {tuple(self.source.shape)} vs {tuple(self.edited.shape)}"
            )
        return self


class PriorItem(NamedTuple):
    """(frame I_d, base-model output I_edited*, text C_T*)."""

    frame: torch.Tensor
    generated: torch.Tensor
    text: Tuple[int, ...]

    def as_pair(self) -> EditPair:
        return EditPair(self.frame, self.generated, self.text)


def insert_v_token(tokens, v_token: int = DiffusionDefaults.V_TOKEN) -> Tuple[int, ...]:
    """Place the personalization token before the final content index."""
    tokens = tuple(int(t) for t in tokens)
    if not tokens:
        return (v_token,)
    return tokens[:-1] + (v_token,) + tokens[-1:]
