"""Search space declarations: which blocks and operators each layer may pick.

A space is the cross product of a block list and an operator list, applied at
every searchable slot of a backbone stage layout. Named presets cover the
common mobile/shuffle families.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .blocks import BlockSpec, OperatorSpec

DEFAULT_STAGES = [(2, 16, 2), (2, 32, 2)]

_IR_BLOCKS = [BlockSpec("inverted-residual", expand=e) for e in (1, 3, 6)]
_SHUFFLE_BLOCKS = [BlockSpec("shuffle", depth=d) for d in ("short", "long")]


def _dw(*kernels):
    return [OperatorSpec("depthwise-conv", k) for k in kernels]


def _full(*kernels):
    return [OperatorSpec("full-conv", k) for k in kernels]


@dataclass
class SpaceSpec:
    """Declared block set and operator set, plus the backbone stage layout."""

    blocks: list[BlockSpec]
    operators: list[OperatorSpec]
    stages: list[tuple[int, int, int]] = field(default_factory=lambda: list(DEFAULT_STAGES))
    name: str = "custom"

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("space needs at least one block")
        if not self.operators:
            raise ValueError("space needs at least one operator")
        self.stages = [tuple(int(v) for v in s) for s in self.stages]

    def candidates(self):
        """All (block, operator) pairs, in declaration order."""
        return [(b, o) for b in self.blocks for o in self.operators]

    def to_json(self):
        return {
            "name": self.name,
            "blocks": [b.to_json() for b in self.blocks],
            "operators": [o.to_json() for o in self.operators],
            "stages": [list(s) for s in self.stages],
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            blocks=[BlockSpec.from_json(b) for b in obj["blocks"]],
            operators=[OperatorSpec.from_json(o) for o in obj["operators"]],
            stages=[tuple(s) for s in obj.get("stages", DEFAULT_STAGES)],
            name=obj.get("name", "custom"),
        )


def _preset_mobile():
    return SpaceSpec(list(_IR_BLOCKS), _dw(3, 5), name="mobile")


def _preset_shuffle():
    return SpaceSpec(list(_SHUFFLE_BLOCKS), _dw(3, 5, 7), name="shuffle")


def _preset_mobile_plus():
    return SpaceSpec(list(_IR_BLOCKS), _dw(3, 5) + _full(3, 5), name="mobile+")


def _preset_shuffle_plus():
    return SpaceSpec(list(_SHUFFLE_BLOCKS), _dw(3, 5, 7) + _full(3, 5), name="shuffle+")


def _preset_shuffle_mobile():
    return SpaceSpec(_SHUFFLE_BLOCKS + _IR_BLOCKS, _dw(3, 5, 7), name="shuffle+mobile")


PRESETS = {
    "mobile": _preset_mobile,
    "shuffle": _preset_shuffle,
    "mobile+": _preset_mobile_plus,
    "shuffle+": _preset_shuffle_plus,
    "shuffle+mobile": _preset_shuffle_mobile,
}


def space_preset(name: str, stages=None) -> SpaceSpec:
    if name not in PRESETS:
        raise ValueError(f"unknown space preset {name!r}; known: {sorted(PRESETS)}")
    spec = PRESETS[name]()
    if stages is not None:
        spec.stages = [tuple(int(v) for v in s) for s in stages]
    return spec


def load_space(path_or_name, stages=None) -> SpaceSpec:
    """Resolve a preset name or a space declaration JSON file."""
    if path_or_name in PRESETS:
        return space_preset(path_or_name, stages)
    with open(path_or_name) as fh:
        spec = SpaceSpec.from_json(json.load(fh))
    if stages is not None:
        spec.stages = [tuple(int(v) for v in s) for s in stages]
    return spec
