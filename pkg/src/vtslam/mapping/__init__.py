from .keyframes import (FIRST, FORCED, INFO_GAIN, Decision, Keyframe, KeyframeBank,
                        keyframe_decision, ray_bound_interval, render_depth, render_loss,
                        select_replay)
from .mapper import LossWeights, MapperConfig, ShapeLoss, ShapeMapper, shape_iteration, shape_loss
from .sampling import NoValidPixels, RaySampleBatch, SamplingConfig, distance_bound, sample_rays
