"""Template-free semantic reconstruction of interacting deformable and rigid entities."""

__version__ = "0.1.0"
