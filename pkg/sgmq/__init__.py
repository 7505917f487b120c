from sgmq.tools.fixed_point_tool import QuantizerSpec, quantize_tensor, quantize_value
from sgmq.tools.sgm_regularizer_tool import LambdaSchedule, reg_grad, reg_loss, search_step_exponent
from sgmq.tools.integer_infer_tool import export, import_model, integer_forward, verify_equivalence
from sgmq.stages.orchestrator import TrainingOrchestrator
from sgmq.stages.types import TrainConfig
