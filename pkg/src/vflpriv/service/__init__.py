"""HTTP service wrapping the experiment core."""
