# Learning package for the point-guided cascade simulator
# Heatmap predictors, torch toy models, gradient checks and model files