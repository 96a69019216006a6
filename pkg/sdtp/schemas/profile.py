"""Architecture profiles for the analytic cost model."""

from pydantic import BaseModel, ConfigDict, Field, model_validator

from sdtp.schemas.model import ModelConfig

PARAM_TOLERANCE: float = 0.05


class ArchProfile(BaseModel):
    """Shape of a transformer as far as FLOPs and memory are concerned."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    n_layers: int = Field(..., ge=1)
    d_model: int = Field(..., ge=1)
    n_heads: int = Field(..., ge=1)
    n_kv_heads: int | None = Field(None, ge=1)
    d_ff: int = Field(..., ge=1)
    vocab_size: int = Field(..., ge=1)
    gated_mlp: bool = False
    tied_embeddings: bool = False
    param_count: int | None = Field(None, ge=1)

    @model_validator(mode="after")
    def check_params(self) -> "ArchProfile":
        """Supplied and derived parameter counts agree within 5%.

        Returns:
            ArchProfile: The validated profile.
        """
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.param_count is not None:
            derived: int = self.derived_param_count
            gap: float = abs(derived - self.param_count) / self.param_count
            if gap > PARAM_TOLERANCE:
                raise ValueError(
                    f"derived parameter count {derived} is {gap:.1%} away "
                    f"from supplied {self.param_count}"
                )
        return self

    @property
    def kv_heads(self) -> int:
        """Key/value heads (grouped-query shapes have fewer)."""
        return self.n_kv_heads or self.n_heads

    @property
    def d_kv(self) -> int:
        """Width of the key (or value) projection."""
        return self.kv_heads * (self.d_model // self.n_heads)

    @property
    def mlp_matrices(self) -> int:
        """Projection matrices in one MLP (3 when gated)."""
        return 3 if self.gated_mlp else 2

    @property
    def layer_macs_per_token(self) -> int:
        """Multiply-accumulates of one layer's projections on one token."""
        d = self.d_model
        return (
            2 * d * d
            + 2 * d * self.d_kv
            + self.mlp_matrices * d * self.d_ff
        )

    @property
    def derived_param_count(self) -> int:
        """Weights implied by the shape, norms included, biases ignored."""
        embeddings: int = self.vocab_size * self.d_model
        if not self.tied_embeddings:
            embeddings *= 2
        per_layer: int = self.layer_macs_per_token + 2 * self.d_model
        return embeddings + self.n_layers * per_layer + self.d_model

    @property
    def flops_per_token(self) -> int:
        """Projection and output-head FLOPs of one token, attention aside."""
        return 2 * (
            self.n_layers * self.layer_macs_per_token
            + self.d_model * self.vocab_size
        )

    @property
    def parameters(self) -> int:
        """Supplied count, or the derived one."""
        return self.param_count or self.derived_param_count

    @classmethod
    def from_model_config(
        cls, config: ModelConfig, name: str = "toy"
    ) -> "ArchProfile":
        """Profile of the toy transformer."""
        return cls(
            name=name,
            n_layers=config.n_layers,
            d_model=config.d_model,
            n_heads=config.n_heads,
            d_ff=config.d_ff,
            vocab_size=config.vocab_size,
        )
