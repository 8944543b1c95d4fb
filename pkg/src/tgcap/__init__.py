"""Image captioning with text-guided attention over guidance captions retrieved from similar images."""

__version__ = "0.1.0"
