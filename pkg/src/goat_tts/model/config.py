from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

from ..errors import ArgumentError
from ..toy_world.world import WorldConfig, text_vocab


def freeze_plan(M: int) -> tuple[int, int]:
    """Frozen foundational layers N = floor(M/2), tuned top layers K = M - N."""
    if not isinstance(M, int) or M < 2:
        raise ArgumentError(f"freeze_plan needs M >= 2, got {M!r}")
    n = M // 2
    return n, M - n


@dataclass(frozen=True)
class ModelConfig:
    M: int = 8
    N: int = -1               # -1: take freeze_plan(M)
    d_model: int = 64
    n_heads: int = 4
    context: int = 512
    query_capacity: int = 64  # stream starts at this absolute position
    G: int = 4                # speech tokens per backbone step
    lookahead: int = 4        # text items buffered before the first speech group
    speech_per_text: int = 2  # speech tokens per text token in the interleaved layout
    V_t: int = 43
    V_s: int = 257
    F: int = 16
    enc_channels: int = 32
    enc_layers: int = 2
    enc_heads: int = 2
    enc_stride: int = 2
    enc_max_len: int = 256
    proj_channels: int = 64
    proj_kernel: int = 3
    head_std: float = 0.02
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        n = self.M // 2 if self.N == -1 else self.N
        object.__setattr__(self, "N", n)
        if self.M < 2 or not 0 <= n <= self.M:
            raise ArgumentError(f"bad layer split M={self.M}, N={n}")
        if self.G < 1:
            raise ArgumentError("G must be >= 1")
        if self.d_model % self.n_heads or self.enc_channels % self.enc_heads:
            raise ArgumentError("model width must be divisible by the head count")
        if self.lookahead < 1:
            raise ArgumentError("lookahead must be >= 1")

    @property
    def K(self) -> int:
        return self.M - self.N

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in known:
                raise ArgumentError(f"unknown model config key {k!r}")
            kw[k] = float(v) if k in ("head_std", "init_std") else int(v)
        return cls(**kw)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        from ..config import parse_kv
        return cls.from_dict(parse_kv(text))

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


def config_for_world(world: WorldConfig, **overrides) -> ModelConfig:
    vocab = text_vocab(world)
    base = dict(V_t=vocab.size, V_s=world.V_s, F=world.F, speech_per_text=world.frames_per_token)
    base.update(overrides)
    return ModelConfig(**base)
