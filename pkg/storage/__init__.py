# Run directory layout, checkpoints and artifact files
