"""Edited-image buffer driving Stage-2 sampling."""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import torch

from src.utils.exceptions import InvalidArgumentError


@dataclass
class BufferEntry:
    image: torch.Tensor
    edit_count: int
    last_edit_iteration: int
    history: List[int] = field(default_factory=list)


class EditedImageBuffer:
    """frame_id -> latest edited image.

    ``frame_ids`` are the frames eligible for editing, in dataset order; the
    warm-up phase lasts until each of them has an entry. Keys are never
    removed; re-editing replaces the image and bumps ``edit_count``.
    """

    def __init__(
        self,
        keyframe_id: str,
        keyframe_image: torch.Tensor,
        frame_ids: Sequence[str],
        iteration: int = 0,
    ):
        if keyframe_id not in frame_ids:
            raise InvalidArgumentError(f"keyframe {keyframe_id} is not an editable frame")
        self.keyframe_id = keyframe_id
        self.frame_ids = list(frame_ids)
        self._order = {fid: i for i, fid in enumerate(self.frame_ids)}
        self._entries: Dict[str, BufferEntry] = {}
        self.timeline: List[Dict[str, object]] = []
        self.insert(keyframe_id, keyframe_image, iteration)

    def __contains__(self, frame_id: str) -> bool:
        return frame_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def keys(self) -> List[str]:
        """Buffered frame ids in dataset order."""
        return sorted(self._entries, key=self._order.__getitem__)

    def entry(self, frame_id: str) -> BufferEntry:
        return self._entries[frame_id]

    def get(self, frame_id: str) -> Optional[torch.Tensor]:
        entry = self._entries.get(frame_id)
        return None if entry is None else entry.image

    @property
    def warmup_over(self) -> bool:
        return len(self._entries) == len(self.frame_ids)

    def unedited(self) -> List[str]:
        return [fid for fid in self.frame_ids if fid not in self._entries]

    def insert(self, frame_id: str, image: torch.Tensor, iteration: int) -> BufferEntry:
        if frame_id not in self._order:
            raise InvalidArgumentError(f"frame {frame_id} is not editable")
        image = image.detach()
        entry = self._entries.get(frame_id)
        if entry is None:
            entry = BufferEntry(image, 1, iteration, [iteration])
            self._entries[frame_id] = entry
        else:
            entry.image = image
            entry.edit_count += 1
            entry.last_edit_iteration = iteration
            entry.history.append(iteration)
        self.timeline.append(
            {"iteration": iteration, "frame_id": frame_id, "edit_count": entry.edit_count, "size": len(self)}
        )
        return entry

    def edit_counts(self) -> Dict[str, int]:
        return {fid: self._entries[fid].edit_count for fid in self.keys()}
