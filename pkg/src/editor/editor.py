"""
Toy instruction-conditioned diffusion editor.

Training minimizes ||eps - eps_theta(z_t, t, I, C_T)||^2 with 5/5/5 percent
condition dropout; sampling combines three denoiser evaluations with separate
image and text guidance scales; personalization fine-tunes a copy on one edit
pair plus a prior-preservation term computed on frames edited by the frozen
base model.
"""

import copy
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field

from config.settings import DiffusionDefaults
from src.editor.augmentation import AffineAugmentor, augment_pair
from src.editor.denoiser import DenoiserNet, encode_text
from src.editor.schedule import NoiseSchedule, ancestral_step, forward_diffuse
from src.editor.types import EditPair, PriorItem
from src.utils.container import read_container, write_container
from src.utils.exceptions import InvalidArgumentError, SnapshotFormatError
from src.utils.logger import get_logger
from src.utils.monitoring import editor_steps

logger = get_logger(__name__)

CHECKPOINT_KIND = "editor"

# dropout cases drawn from one uniform per sample
KEEP_BOTH, DROP_IMAGE, DROP_TEXT, DROP_BOTH = 0, 1, 2, 3


class EditorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    timesteps: int = Field(DiffusionDefaults.TIMESTEPS, ge=1)
    beta_start: float = Field(DiffusionDefaults.BETA_START, gt=0)
    beta_end: float = Field(DiffusionDefaults.BETA_END, gt=0, lt=1)
    base_width: int = Field(DiffusionDefaults.BASE_WIDTH, ge=8)
    blocks: int = Field(DiffusionDefaults.BLOCKS, ge=1)
    time_embed_dim: int = Field(DiffusionDefaults.TIME_EMBED_DIM, ge=2)
    text_embed_dim: int = Field(DiffusionDefaults.TEXT_EMBED_DIM, ge=1)
    vocab_size: int = Field(DiffusionDefaults.VOCAB_SIZE, ge=3)

    learning_rate: float = Field(2e-4, gt=0)
    batch_size: int = Field(16, ge=1)
    finetune_learning_rate: float = Field(1e-4, gt=0)
    finetune_steps: int = Field(800, ge=0)
    prior_weight: float = Field(1.0, ge=0, description="Prior-preservation weight lambda")
    augment: bool = True
    augmentation: AffineAugmentor = Field(default_factory=AffineAugmentor)

    image_guidance: float = Field(DiffusionDefaults.IMAGE_GUIDANCE, ge=0)
    text_guidance: float = Field(DiffusionDefaults.TEXT_GUIDANCE, ge=0)
    sample_steps: int = Field(50, ge=1)


def dropout_case(u: Union[float, torch.Tensor]):
    """Map uniform draws to a dropout case: [0, .05) image, [.05, .10) text, [.10, .15) both."""
    u = torch.as_tensor(u)
    p_i, p_t, p_b = DiffusionDefaults.DROPOUT_IMAGE, DiffusionDefaults.DROPOUT_TEXT, DiffusionDefaults.DROPOUT_BOTH
    case = torch.full(u.shape, KEEP_BOTH, dtype=torch.long)
    case[u < p_i + p_t + p_b] = DROP_BOTH
    case[u < p_i + p_t] = DROP_TEXT
    case[u < p_i] = DROP_IMAGE
    return case


def combine_guidance(e_uncond, e_image, e_full, image_guidance: float, text_guidance: float):
    """e(0,0) + s_I (e(I,0) - e(0,0)) + s_T (e(I,C) - e(I,0))."""
    return e_uncond + image_guidance * (e_image - e_uncond) + text_guidance * (e_full - e_image)


class DiffusionEditor:
    def __init__(self, config: Optional[EditorConfig] = None, net: Optional[torch.nn.Module] = None, device="cpu"):
        self.config = config or EditorConfig()
        cfg = self.config
        self.device = device
        self.schedule = NoiseSchedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
        self.net = net if net is not None else DenoiserNet(
            base_width=cfg.base_width,
            blocks=cfg.blocks,
            time_embed_dim=cfg.time_embed_dim,
            text_embed_dim=cfg.text_embed_dim,
            vocab_size=cfg.vocab_size,
        )
        self.net.to(device)
        self.loss_history: List[float] = []

    # identity-latent hook: pixels in [0, 1] <-> latents in [-1, 1]
    def encode(self, images: torch.Tensor) -> torch.Tensor:
        x = torch.as_tensor(images, dtype=torch.float32, device=self.device)
        if x.dim() == 3:
            x = x.unsqueeze(0)
        return x.permute(0, 3, 1, 2) * 2 - 1

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        return ((latents + 1) / 2).permute(0, 2, 3, 1)

    def null_text(self, batch: int) -> torch.Tensor:
        return torch.full((batch, 1), DiffusionDefaults.NULL_TEXT, dtype=torch.long, device=self.device)

    def _text(self, conditions: Sequence[Sequence[int]]) -> torch.Tensor:
        return encode_text(conditions, device=self.device)

    def condition_dropout(self, batch: int, generator: torch.Generator = None) -> Tuple[torch.Tensor, torch.Tensor]:
        case = dropout_case(torch.rand(batch, generator=generator, dtype=torch.float64))
        drop_image = (case == DROP_IMAGE) | (case == DROP_BOTH)
        drop_text = (case == DROP_TEXT) | (case == DROP_BOTH)
        return drop_image.to(self.device), drop_text.to(self.device)

    def diffusion_loss(
        self,
        net: torch.nn.Module,
        x0: torch.Tensor,
        image: torch.Tensor,
        text: torch.Tensor,
        generator: torch.Generator = None,
        t: Optional[torch.Tensor] = None,
        noise: Optional[torch.Tensor] = None,
        dropout: bool = False,
    ) -> torch.Tensor:
        """Mean squared noise-prediction error on latents (B, 3, H, W)."""
        batch = x0.shape[0]
        if t is None:
            t = self.schedule.sample_timesteps(batch, generator)
        if noise is None:
            noise = torch.randn(x0.shape, generator=generator).to(x0)
        if dropout:
            drop_image, drop_text = self.condition_dropout(batch, generator)
            image = torch.where(drop_image[:, None, None, None], torch.zeros_like(image), image)
            null = torch.full_like(text, -1)
            null[:, 0] = DiffusionDefaults.NULL_TEXT
            text = torch.where(drop_text[:, None], null, text)

        z_t = forward_diffuse(self.schedule, x0, t, noise).to(x0.dtype)
        pred = net(z_t, t.to(self.device), image, text)
        return ((noise - pred) ** 2).mean()

    def train_base(self, pairs: Sequence[EditPair], steps: int, seed: int = 0) -> DenoiserNet:
        """Train the denoiser on (I, I_edited, C_T) triples."""
        if not pairs:
            raise InvalidArgumentError("base training needs a nonempty dataset")
        generator = torch.Generator().manual_seed(seed)
        sources = self.encode(torch.stack([p.source for p in pairs]))
        targets = self.encode(torch.stack([p.edited for p in pairs]))
        texts = self._text([p.text for p in pairs])

        optimizer = torch.optim.Adam(self.net.parameters(), lr=self.config.learning_rate)
        self.net.train()
        for step in range(steps):
            idx = torch.randint(0, len(pairs), (self.config.batch_size,), generator=generator)
            loss = self.diffusion_loss(
                self.net, targets[idx], sources[idx], texts[idx], generator=generator, dropout=True
            )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            self.loss_history.append(float(loss.detach()))
            editor_steps.labels(phase="base").inc()
            logger.debug("Editor base step", step=step, loss=self.loss_history[-1])
        self.net.eval()
        logger.info("Editor base training finished", steps=steps, final_loss=self.loss_history[-1] if steps else None)
        return self.net

    def finetune_loss(
        self,
        net: torch.nn.Module,
        pair: EditPair,
        prior: Optional[PriorItem],
        prior_weight: float,
        generator: torch.Generator = None,
        t: Optional[torch.Tensor] = None,
        noise: Optional[torch.Tensor] = None,
    ) -> Tuple[torch.Tensor, float, float]:
        """Pair term + lambda * prior term; ``t`` and ``noise`` (when given) are shared by both terms."""
        pair_term = self.diffusion_loss(
            net, self.encode(pair.edited), self.encode(pair.source), self._text([pair.text]),
            generator=generator, t=t, noise=noise,
        )
        total = pair_term
        prior_value = 0.0
        if prior is not None and prior_weight > 0:
            prior_term = self.diffusion_loss(
                net, self.encode(prior.generated), self.encode(prior.frame), self._text([prior.text]),
                generator=generator, t=t, noise=noise,
            )
            total = total + prior_weight * prior_term
            prior_value = float(prior_term.detach())
        return total, float(pair_term.detach()), prior_value

    def finetune(
        self,
        edit_pair: EditPair,
        prior_items: Sequence[PriorItem],
        prior_weight: Optional[float] = None,
        augmentor: Optional[AffineAugmentor] = None,
        steps: Optional[int] = None,
        seed: int = 0,
    ) -> "DiffusionEditor":
        """Return a personalized copy; this editor is left untouched."""
        lam = self.config.prior_weight if prior_weight is None else prior_weight
        steps = self.config.finetune_steps if steps is None else steps
        if lam < 0:
            raise InvalidArgumentError("prior weight must be non-negative")
        if lam > 0 and not prior_items:
            raise InvalidArgumentError("prior preservation needs at least one prior item")
        if DiffusionDefaults.V_TOKEN not in edit_pair.text:
            raise InvalidArgumentError("edit pair text must contain the personalization token")
        edit_pair.validate()

        tuned = copy.deepcopy(self)
        tuned.loss_history = []
        generator = torch.Generator().manual_seed(seed)
        rng = np.random.default_rng(seed)
        optimizer = torch.optim.Adam(tuned.net.parameters(), lr=self.config.finetune_learning_rate)

        tuned.net.train()
        for step in range(steps):
            pair = augment_pair(edit_pair, augmentor, rng=rng) if augmentor is not None else edit_pair
            prior = prior_items[int(rng.integers(len(prior_items)))] if (lam > 0 and prior_items) else None
            total, pair_value, prior_value = tuned.finetune_loss(tuned.net, pair, prior, lam, generator)
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            tuned.loss_history.append(pair_value)
            editor_steps.labels(phase="finetune").inc()
            logger.debug("Editor finetune step", step=step, pair_loss=pair_value, prior_loss=prior_value)
        tuned.net.eval()
        logger.info("Editor personalized", steps=steps, prior_weight=lam, augmented=augmentor is not None)
        return tuned

    def generate_prior_set(
        self, frames: Sequence[torch.Tensor], text: Sequence[int], n: int, seed: int = 0
    ) -> List[PriorItem]:
        """Edit ``n`` frames (cycled) with a frozen copy of this editor under ``text``."""
        if n <= 0:
            raise InvalidArgumentError("prior set size must be positive")
        if not frames:
            raise InvalidArgumentError("prior set needs at least one frame")
        frozen = copy.deepcopy(self)
        frozen.net.eval()
        items = []
        for i in range(n):
            frame = torch.as_tensor(frames[i % len(frames)], dtype=torch.float32)
            generated = frozen.sample_edit(frame, text, seed=seed + i)
            items.append(PriorItem(frame, generated, tuple(int(t) for t in text)))
        return items

    @torch.no_grad()
    def guided_noise(
        self,
        z: torch.Tensor,
        t: int,
        image: torch.Tensor,
        text: torch.Tensor,
        image_guidance: float,
        text_guidance: float,
    ) -> torch.Tensor:
        batch = z.shape[0]
        t_batch = torch.full((batch,), int(t), dtype=torch.long, device=self.device)
        null_text = self.null_text(batch)
        e_uncond = self.net(z, t_batch, torch.zeros_like(image), null_text)
        e_image = self.net(z, t_batch, image, null_text)
        e_full = self.net(z, t_batch, image, text)
        return combine_guidance(e_uncond, e_image, e_full, image_guidance, text_guidance)

    @torch.no_grad()
    def sample_edit(
        self,
        image: torch.Tensor,
        text: Sequence[int],
        image_guidance: Optional[float] = None,
        text_guidance: Optional[float] = None,
        steps: Optional[int] = None,
        seed: int = 0,
        mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Ancestral sampling from pure noise; returns an (H, W, 3) image clamped to [0, 1].

        With ``mask`` (H, W), pixels outside it follow the noised source at every step.
        """
        s_i = self.config.image_guidance if image_guidance is None else image_guidance
        s_t = self.config.text_guidance if text_guidance is None else text_guidance
        if s_i < 0 or s_t < 0:
            raise InvalidArgumentError("guidance scales must be non-negative")

        generator = torch.Generator().manual_seed(seed)
        source = self.encode(image)
        text_tensor = self._text([text])
        z = torch.randn(source.shape, generator=generator).to(source)
        keep = None
        if mask is not None:
            keep = torch.as_tensor(mask, dtype=source.dtype, device=self.device).reshape(1, 1, *source.shape[-2:])

        timesteps = self.schedule.sampling_timesteps(steps or self.config.sample_steps)
        for i, t in enumerate(timesteps):
            t_prev = timesteps[i + 1] if i + 1 < len(timesteps) else 0
            eps = self.guided_noise(z, t, source, text_tensor, s_i, s_t)
            noise = torch.randn(z.shape, generator=generator).to(z)
            z = ancestral_step(self.schedule, z, eps, t, t_prev, noise).to(source.dtype)
            if keep is not None:
                if t_prev == 0:
                    known = source
                else:
                    known = forward_diffuse(
                        self.schedule, source, t_prev, torch.randn(z.shape, generator=generator).to(z)
                    ).to(source.dtype)
                z = keep * z + (1 - keep) * known

        return self.decode(z)[0].clamp(0.0, 1.0)

    def save(self, path: Union[str, Path]) -> None:
        sections = {"meta": {"config": self.config.model_dump(), "net": self.net.config()}}
        for name, tensor in self.net.state_dict().items():
            sections[f"net/{name}"] = tensor.detach().cpu().numpy()
        write_container(path, CHECKPOINT_KIND, sections)
        logger.info("Editor checkpoint saved", path=str(path))

    @classmethod
    def load(cls, path: Union[str, Path], device="cpu") -> "DiffusionEditor":
        sections = read_container(path, expected_kind=CHECKPOINT_KIND)
        meta = sections.get("meta")
        if not isinstance(meta, dict):
            raise SnapshotFormatError(f"{path}: missing meta section")
        editor = cls(EditorConfig(**meta["config"]), DenoiserNet(**meta["net"]), device=device)
        state = {
            key[len("net/"):]: torch.from_numpy(np.array(value))
            for key, value in sections.items()
            if key.startswith("net/")
        }
        editor.net.load_state_dict(state)
        editor.net.eval()
        logger.info("Editor checkpoint loaded", path=str(path))
        return editor
