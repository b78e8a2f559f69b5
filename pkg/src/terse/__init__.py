"""Task-aware synthetic data generation by learned affine compositing."""
