"""Walk through the circle representation: overlap, heatmap targets, and decoding.

Run with ``python3 demos/01_circles_and_heatmaps.py``.
"""
from circlesnake.geometry import Circle, circle_iou, sample_circle_contour
from circlesnake.heatmap import decode_circles, encode_targets

# Two unit circles whose centres are one radius apart share about a quarter of their union.
a, b = Circle(0, 0, 1), Circle(1, 0, 1)
print(f"IoU of unit circles one radius apart: {circle_iou(a, b):.4f}")

# A detection is a centre, a radius and a class. The codec turns a list of them into
# per-class Gaussian heatmaps at stride 4, plus radius and sub-cell offset maps.
truth = [Circle(100.5, 60.25, 18.0, class_id=0), Circle(300.0, 210.0, 40.0, class_id=2)]
targets = encode_targets(truth, 512, 512, num_classes=4)
print("heatmap shape:", targets.heatmap.shape, "peak per class:", targets.heatmap.max(axis=(1, 2)))

# Decoding the ideal maps recovers the circles exactly.
decoded = decode_circles(targets.heatmap, targets.radius_map, targets.offset_map, ct_score=0.3)
for c in decoded.circles:
    print(f"class {c.class_id}: centre ({c.cx:.2f}, {c.cy:.2f}) radius {c.r:.2f} score {c.score:.2f}")

# Each circle seeds a clockwise polygon that the snake later deforms.
ring = sample_circle_contour(decoded.circles[0], 128)
print("initial contour:", ring.vertices.shape[0], "vertices, area", round(ring.area, 1))
