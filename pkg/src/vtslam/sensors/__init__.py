from .models import (TACTILE, VISION, NoiseConfig, OccluderSet, SensorFrame, SensorModel,
                     tactile_sensor, vision_sensor)
from .render import EmptySet, corrupt_depth, occlusion_score, render_frame, tactile_noise
from .rig import (AXIS_ROTATION, WOBBLE_ROTATION, HandRig, InvalidParams, TrajectoryParams,
                  TrajectoryStep, camera_sphere, scripted_trajectory)
from .sequence import (PlaybackError, Sequence, SequenceStep, load_sequence, quantize_frame,
                       record_sequence, simulate_sequence)
