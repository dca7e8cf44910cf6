"""Training loop, experiment runners, statistics and CLI."""
