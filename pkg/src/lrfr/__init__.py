"""Cross-resolution metric learning at desk scale."""
