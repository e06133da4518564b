"""RoadScan: pothole verification via Siamese metric learning."""

__version__ = "0.1.0"
