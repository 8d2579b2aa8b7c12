# Models package for the point-guided cascade simulator
# Contains pydantic domain models and enums for boxes, scenes, heatmaps and detections
