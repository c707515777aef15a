"""Two-level (individual/group) Moran selection: exact chain, deterministic
limit, Fleming-Viot martingale checks and reproducible studies."""

__version__ = "0.1.0"
