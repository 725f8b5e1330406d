"""
Model configuration and the network error type
"""
from dataclasses import asdict, dataclass


class NetworkError(Exception):
    """Raised for shape, label and EMA misuse of the unified model"""

    def __init__(self, message, operation=None, expected=None, actual=None):
        self.message = message
        self.operation = operation
        self.expected = expected
        self.actual = actual

        detail = ""
        if operation is not None:
            detail += f" in {operation}"
        if expected is not None or actual is not None:
            detail += f" (expected {expected}, got {actual})"

        super().__init__(f"{message}{detail}")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    channels: int = 1
    patch_size: int = 4
    trunk_layers: int = 2
    hidden_dim: int = 64
    attention_heads: int = 4
    latent_dim: int = 8
    register_count: int = 4
    class_count: int = 10
    time_embed_dim: int = 32
    mlp_ratio: int = 2
    teacher_dim: int = 16
    init_std: float = 0.02

    def __post_init__(self):
        if self.image_size < 1 or self.patch_size < 1 or self.image_size % self.patch_size:
            raise NetworkError(
                "image size must be a positive multiple of the patch size",
                operation="ModelConfig",
                expected=f"multiple of {self.patch_size}",
                actual=self.image_size,
            )
        if self.attention_heads < 1 or self.hidden_dim % self.attention_heads:
            raise NetworkError(
                "hidden dim must be divisible by the head count",
                operation="ModelConfig",
                expected=f"multiple of {self.attention_heads}",
                actual=self.hidden_dim,
            )
        for name in ("channels", "trunk_layers", "latent_dim", "class_count", "time_embed_dim",
                     "mlp_ratio", "teacher_dim"):
            if getattr(self, name) < 1:
                raise NetworkError(f"{name} must be positive", operation="ModelConfig",
                                   expected=">= 1", actual=getattr(self, name))
        if self.register_count < 0:
            raise NetworkError("register count must be non-negative", operation="ModelConfig",
                               expected=">= 0", actual=self.register_count)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def token_count(self) -> int:
        return self.grid * self.grid

    @property
    def sequence_length(self) -> int:
        return self.token_count + self.register_count

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.attention_heads

    @property
    def null_label(self) -> int:
        """Row of the class table used for unconditional passes"""
        return self.class_count

    @property
    def image_shape(self):
        return (self.channels, self.image_size, self.image_size)

    def to_dict(self):
        return asdict(self)
