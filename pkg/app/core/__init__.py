# Core components of the point-guided cascade simulator
# Geometry, grid codec, cascade, scoring, evaluation and the experiment runner
