from .bake import BakeConfig, FitDiverged, bake_field_from_shape, cached_bake
from .model import (FieldConfig, FieldParams, NeuralField, field_backward_params, field_eval,
                    field_gradient_point, init_params, load_params, save_params)
from .optim import AdamState, NonFiniteGradient, adam_step
