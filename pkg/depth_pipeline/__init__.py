"""Run configuration, the turn-wise analysis driver and the command line."""
