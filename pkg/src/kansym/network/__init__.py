"""MultKAN model, training schedule and checkpoints."""
