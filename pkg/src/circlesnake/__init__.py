"""Circle-parameterized instance segmentation with contour deformation, in numpy."""
from .geometry import Circle, Contour, circle_iou
from .model import CircleSnake, InstancePrediction, ModelConfig, Sample
from .evaluation import EvalReport, evaluate

__all__ = ["Circle", "Contour", "circle_iou", "CircleSnake", "InstancePrediction",
           "ModelConfig", "Sample", "EvalReport", "evaluate"]
__version__ = "0.1.0"
