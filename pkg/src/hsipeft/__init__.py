"""Parameter-efficient fine-tuning for a spectral vision transformer.

Submodules are imported lazily by the CLI so thread settings can take
effect before numpy loads; import them directly in library use:

    from hsipeft import adapters, model, optim, pipeline
"""

__version__ = "0.1.0"
