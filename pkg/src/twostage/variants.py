"""Pipeline variants used by the ablation suite.

A variant switches whole components on or off; everything else (data,
seeds, optimization) stays identical so differences in the metrics are
attributable to the ablated component alone.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ParameterError


@dataclass(frozen=True)
class PipelineVariant:
    name: str
    use_coarse: bool = True
    use_fine: bool = True
    text_guided: bool = True
    use_structure_term: bool = True

    def __post_init__(self) -> None:
        if not (self.use_coarse or self.use_fine):
            raise ParameterError("a variant must keep at least one granularity")

    @property
    def rerank_branches(self) -> tuple[str, ...]:
        branches = []
        if self.use_coarse:
            branches.append("coarse")
        if self.use_fine:
            branches.append("fine")
        return tuple(branches)


FULL = PipelineVariant("full")
NO_STRUCTURE_TERM = PipelineVariant("no_intra", use_structure_term=False)
NO_INTERACTION = PipelineVariant("no_interaction", text_guided=False)
COARSE_ONLY = PipelineVariant("coarse_only", use_fine=False)
FINE_ONLY = PipelineVariant("fine_only", use_coarse=False)

ABLATION_VARIANTS = (COARSE_ONLY, FINE_ONLY, NO_INTERACTION, NO_STRUCTURE_TERM, FULL)
