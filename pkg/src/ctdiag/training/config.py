from __future__ import annotations

from dataclasses import asdict, dataclass, fields


@dataclass
class TrainConfig:
    """Optimisation settings for one training stage.

    ``max_iters`` switches to an iteration budget: the epoch schedule is then
    stretched so that ``epochs`` epochs span exactly ``max_iters`` iterations.
    """

    stage: int = 1
    batch_size: int = 16
    epochs: int = 24
    max_iters: int | None = None
    lr: float = 1e-3
    lr_steps: tuple = (16, 22)
    lr_gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_iters: int = 500
    warmup_ratio: float = 0.001
    grad_clip: float = 35.0
    input_size: int = 512
    flip_prob: float = 0.5
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_beta: float = 1.0 / 9
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.lr_steps, list):
            self.lr_steps = tuple(self.lr_steps)
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.max_iters is not None and self.max_iters < 1:
            raise ValueError("max_iters must be positive")

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def lr_at(epoch: int, cfg: TrainConfig | None = None) -> float:
    """Step schedule: base rate, times ``lr_gamma`` at each epoch in ``lr_steps``."""
    cfg = cfg or TrainConfig()
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    drops = sum(1 for s in cfg.lr_steps if epoch >= s)
    return cfg.lr * cfg.lr_gamma ** drops
