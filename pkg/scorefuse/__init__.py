"""scorefuse - quality-guided score fusion for multimodal biometrics."""

__version__ = "0.3.0"

# Bumped whenever an on-disk artifact layout changes.
FORMAT_VERSION = 1
