from .extract import EmptySurface, extract_mesh, field_grid
from .metrics import (HALLUCINATED_LABEL, TOUCH_LABEL, VISION_LABEL, DriftReport, MetricsConfig,
                      ReconReport, StampMismatch, add, add_s, coverage_labels, drift_report,
                      fscore, fscore_curve, harmonic, precision_recall)
