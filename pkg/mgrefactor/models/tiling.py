from dataclasses import dataclass


class InvalidTileConfig(Exception):
    def __init__(self, reason):
        self.message = f"Invalid tile configuration: {reason}"
        super(InvalidTileConfig, self).__init__(self.message)


@dataclass(frozen=True)
class TileConfig:
    """Tile extents (B_x, B_y, B_z); B_x runs along dimension 0."""

    bx: int
    by: int = 1
    bz: int = 1

    def __post_init__(self):
        for name in ("bx", "by", "bz"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise InvalidTileConfig(f"{name}={value!r} must be a positive integer")

    @property
    def volume(self):
        return self.bx * self.by * self.bz

    def as_tuple(self):
        return (self.bx, self.by, self.bz)

    def check_budget(self, budget):
        if self.volume > budget:
            raise InvalidTileConfig(
                f"{self.bx}x{self.by}x{self.bz} exceeds the workspace budget of {budget} elements"
            )
        return self

    @classmethod
    def parse(cls, text):
        """Parse "bx,by,bz" (or "bx x by x bz")."""
        parts = [p for p in text.replace("x", ",").split(",") if p.strip()]
        try:
            values = [int(p) for p in parts]
        except ValueError:
            raise InvalidTileConfig(f"cannot parse {text!r}")
        if not 1 <= len(values) <= 3:
            raise InvalidTileConfig(f"expected 1 to 3 extents, got {text!r}")
        return cls(*values)

    def __str__(self):
        return f"{self.bx}x{self.by}x{self.bz}"


@dataclass(frozen=True)
class TilePlan:
    """Which dimensions a kernel tiles and which it loops over one index at a time."""

    tile: TileConfig
    tiled_dims: tuple
    outer_dims: tuple = ()

    def extents(self, ndims):
        """Per-axis tile extents; outer dimensions advance one index per tile."""
        extents = [1] * ndims
        for extent, d in zip(self.tile.as_tuple(), self.tiled_dims):
            if d < ndims:
                extents[d] = extent
        return extents

    def to_dict(self):
        return {
            "tile": list(self.tile.as_tuple()),
            "tiled_dims": list(self.tiled_dims),
            "outer_dims": list(self.outer_dims),
        }


# Seven typical tile shapes, ordered by B_x.
DEFAULT_CANDIDATES = (
    TileConfig(2, 2, 2),
    TileConfig(4, 4, 4),
    TileConfig(8, 4, 4),
    TileConfig(16, 4, 4),
    TileConfig(32, 4, 4),
    TileConfig(64, 2, 2),
    TileConfig(128, 2, 2),
)
