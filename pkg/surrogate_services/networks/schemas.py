from enum import Enum
from typing import List, Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from surrogate_services.discretization.stable_op import Formulation


class ArchitectureKind(str, Enum):
    full = "full"                        # one ResNet for all coefficients
    separate_resnet = "separate_resnet"  # one sub-network per field and output level
    separate_frame = "separate_frame"    # per output level a chain through the prolongations


# 1. Declarative description of a coefficient network.
# Networks are rebuilt from this descriptor (checkpoints store it next to theta).
class ArchitectureSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: ArchitectureKind = ArchitectureKind.full
    J: int = Field(ge=1, le=16)
    formulation: Formulation = Formulation.fosls
    output: Literal["frame", "nodal"] = "frame"   # stacked frame coefficients or finest-level nodal values
    input_dim: int = Field(default=4, ge=1)
    blocks: int = Field(default=8, ge=0)          # full: number of ResBlocks
    rank: int = Field(default=8, ge=1)            # maximal ResBlock rank, min(rank, width) is used
    subnet_blocks: int = Field(default=8, ge=0)   # separate_resnet: ResBlocks per sub-network
    level_blocks: int = Field(default=4, ge=0)    # separate_frame: ResBlocks after each prolongation
    output_bias: bool = False                     # z + A silu(Wz + b) + c

    @model_validator(mode="after")
    def _nodal_needs_flat_kind(self):
        if self.output == "nodal" and self.kind is ArchitectureKind.separate_frame:
            raise ValueError("separate_frame networks emit frame coefficients; nodal output is not available")
        return self


# 2. One entry of the flat parameter layout.
class ParamEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    offset: int
    shape: List[int]
