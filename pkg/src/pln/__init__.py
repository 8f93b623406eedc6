"""Progressive coarse-to-fine moment localization over 2D temporal maps."""
