"""Phantom generation, standardization, crop sampling and MVOL I/O."""
