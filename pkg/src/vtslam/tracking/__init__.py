from .residuals import (ICP, REG, SDF, Cloud, DegenerateFrame, InsufficientOverlap, PoseWindow,
                        Residual, WindowEntry, build_cloud, icp_pair, icp_residual, reg_residual,
                        frame_rng, sample_sdf_points, sdf_residual, surface_points)
from .solver import LMResult, Problem, SingularSystem, huber_scale, lm_solve
from .tracker import (KNOWN_SHAPE, SLAM, TRAJECTORY_HEADER, TrackingLost, TrackResult,
                      tracking_step, trajectory_csv)
