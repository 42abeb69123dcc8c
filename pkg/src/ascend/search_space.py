"""Design spaces, genomes, and the one-hot codec.

A search space is an ordered list of page elements, each with an ordered
list of values. Index 0 of every element is the control value, so the
all-zeros genome is the control design. Genomes are stored densely as one
value index per element; the one-hot bit vector exists only as an explicit
encode/decode pair.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterator

DEFAULT_ENUMERATION_CAP = 1 << 22


class SpaceError(ValueError):
    """Raised when a space or element definition violates an invariant."""


class GenomeError(ValueError):
    """Raised when a genome or one-hot vector is invalid for its space."""


@dataclass(frozen=True)
class ElementSpec:
    """One mutable page element and its allowed values (value 0 = control)."""

    name: str
    values: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", tuple(self.values))
        if not self.name:
            raise SpaceError("element name must be non-empty")
        if len(self.values) < 2:
            raise SpaceError(
                f"element {self.name!r}: values must have length >= 2"
            )
        if len(set(self.values)) != len(self.values):
            raise SpaceError(f"element {self.name!r}: duplicate value names")


@dataclass(frozen=True)
class SearchSpace:
    """Ordered elements spanning the combinatorial design universe."""

    elements: tuple[ElementSpec, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "elements", tuple(self.elements))
        if not self.elements:
            raise SpaceError("a search space needs at least one element")
        names = [e.name for e in self.elements]
        if len(set(names)) != len(names):
            raise SpaceError("element names must be unique")

    @property
    def value_counts(self) -> tuple[int, ...]:
        return tuple(len(e.values) for e in self.elements)

    def __len__(self) -> int:
        return len(self.elements)

    def control_genome(self) -> Genome:
        return Genome((0,) * len(self.elements))


@dataclass(frozen=True)
class Genome:
    """A concrete design: one chosen value index per element."""

    choices: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "choices", tuple(self.choices))

    def __iter__(self) -> Iterator[int]:
        return iter(self.choices)

    def __len__(self) -> int:
        return len(self.choices)


def space_size(space: SearchSpace) -> int:
    """Number of distinct genomes: the product of per-element value counts."""
    size = 1
    for count in space.value_counts:
        size *= count
    return size


def validate_genome(space: SearchSpace, genome: Genome) -> str | None:
    """Return None if the genome fits the space, else the first violation."""
    counts = space.value_counts
    if len(genome.choices) != len(counts):
        return (
            f"length mismatch: genome has {len(genome.choices)} choices, "
            f"space has {len(counts)} elements"
        )
    for pos, (choice, count) in enumerate(zip(genome.choices, counts)):
        if not 0 <= choice < count:
            return (
                f"element {pos} ({space.elements[pos].name!r}): "
                f"choice {choice} out of range [0, {count})"
            )
    return None


def require_valid(space: SearchSpace, genome: Genome) -> None:
    violation = validate_genome(space, genome)
    if violation is not None:
        raise GenomeError(violation)


def encode_one_hot(space: SearchSpace, genome: Genome) -> tuple[int, ...]:
    """Genome -> concatenated one-hot segments, one segment per element."""
    require_valid(space, genome)
    bits: list[int] = []
    for choice, count in zip(genome.choices, space.value_counts):
        segment = [0] * count
        segment[choice] = 1
        bits.extend(segment)
    return tuple(bits)


def decode_one_hot(space: SearchSpace, bits: tuple[int, ...]) -> Genome:
    """Inverse of encode_one_hot; rejects malformed bit vectors."""
    counts = space.value_counts
    expected = sum(counts)
    if len(bits) != expected:
        raise GenomeError(
            f"bit length mismatch: got {len(bits)}, expected {expected}"
        )
    choices: list[int] = []
    offset = 0
    for pos, count in enumerate(counts):
        segment = bits[offset:offset + count]
        set_positions = [i for i, b in enumerate(segment) if b]
        if len(set_positions) != 1:
            raise GenomeError(
                f"segment {pos} has {len(set_positions)} set bits, expected 1"
            )
        choices.append(set_positions[0])
        offset += count
    return Genome(tuple(choices))


def enumerate_genomes(
    space: SearchSpace, cap: int = DEFAULT_ENUMERATION_CAP
) -> Iterator[Genome]:
    """Yield every genome in lexicographic order of choices.

    Refuses spaces larger than `cap` so exhaustive consumers stay bounded.
    """
    size = space_size(space)
    if size > cap:
        raise SpaceError(
            f"space has {size} genomes, exceeding the enumeration cap {cap}"
        )
    for combo in itertools.product(*(range(c) for c in space.value_counts)):
        yield Genome(combo)


def design_of(space: SearchSpace, genome: Genome) -> dict[str, str]:
    """Map element name -> chosen value name for rendering/reporting."""
    require_valid(space, genome)
    return {
        element.name: element.values[choice]
        for element, choice in zip(space.elements, genome.choices)
    }
