from .config import (MODES, AblationSpec, CameraSpec, ConfigError, ExperimentConfig, MapperSpec,
                     ReportSpec, RigSpec, TrackerSpec, TrajectorySpec, config_from_dict,
                     load_config, set_path)
from .report import write_report, write_run
from .runs import (NOISE_HEADER, OCCLUSION_HEADER, RUNNERS, RunResult, run, run_ablate_noise,
                   run_ablate_occlusion, run_fit_static, run_slam, run_tracking, simulate)
