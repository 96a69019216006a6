"""Toy transformer shape schema."""

from pydantic import BaseModel, ConfigDict, Field, model_validator


class ModelConfig(BaseModel):
    """Shape and seed of the toy decoder-only transformer."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    n_layers: int = Field(8, ge=1)
    d_model: int = Field(128, ge=1)
    n_heads: int = Field(4, ge=1)
    d_ff: int = Field(512, ge=1)
    vocab_size: int = Field(256, ge=1)
    max_seq_len: int = Field(512, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def check_heads(self) -> "ModelConfig":
        """Ensure the hidden width splits evenly across heads.

        Returns:
            ModelConfig: The validated config.
        """
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} is not divisible by "
                f"n_heads={self.n_heads}"
            )
        return self

    @property
    def head_dim(self) -> int:
        """Width of a single attention head."""
        return self.d_model // self.n_heads
